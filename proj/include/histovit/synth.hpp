#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "histovit/dataset.hpp"
#include "histovit/image.hpp"

namespace histovit {

// Procedural stand-in for the histopathology corpus: eight visually separable
// texture classes (class-specific tint, stripe frequency/orientation and blob
// statistics), with magnification simulated by a zoom factor. Deterministic
// per seed.
struct SynthSpec {
    std::size_t image_size = 32;
    std::size_t per_class = 50;  // images per subclass per magnification
    std::vector<int> magnifications{40, 100, 200, 400};
    std::uint64_t seed = 0;
    double noise_stddev = 0.03;
};

// Renders one image of the family; generate_synthetic writes exactly these.
Image render_synthetic_image(const SynthSpec& spec, Subclass subclass, int magnification,
                             std::size_t index);

// Writes images under out_dir/images/ plus out_dir/manifest.txt (paths stored
// relative to out_dir) and returns the manifest.
DatasetManifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir);

}  // namespace histovit
