#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "histovit/tensor.hpp"

namespace histovit {

// Interleaved 8-bit raster. PPM (P6) is the project's mandatory uncompressed
// format; P5 grayscale reads are widened to three channels.
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 3;
    std::vector<std::uint8_t> pixels;
};

Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& image);

// [H x W x C] tensor scaled to [0, 1].
Tensor image_to_tensor(const Image& image);
// Clamps to [0, 1] and quantizes.
Image tensor_to_image(const Tensor& tensor);

// Bilinear resample with half-pixel centers and edge clamping.
Tensor resize_bilinear(const Tensor& image, std::size_t target_size);

// Decode, scale to [0, 1], resize to target_size.
Tensor load_image(const std::filesystem::path& path, std::size_t target_size);

// Optional per-channel standardization: (x - mean) / stddev. The pipeline
// default is plain [0, 1] scaling; this hook serves configs that want it.
Tensor normalize_channels(const Tensor& image, std::span<const double> mean,
                          std::span<const double> stddev);

}  // namespace histovit
