#pragma once

#include <filesystem>

#include "histovit/transformer.hpp"

namespace histovit {

// Checkpoint file: a text header (format version, config as key=value lines)
// followed by named little-endian float64 buffers. Loading validates every
// tensor name and shape against the config and rejects any mismatch.
void save_checkpoint(const std::filesystem::path& path, const ModelWeights& weights);
ModelWeights load_checkpoint(const std::filesystem::path& path);

}  // namespace histovit
