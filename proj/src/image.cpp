#include "histovit/image.hpp"

#include <cmath>
#include <fstream>

#include "histovit/error.hpp"

namespace histovit {

namespace {

// Reads one whitespace-delimited token, skipping '#' comments.
std::string next_token(std::istream& in) {
    std::string tok;
    for (;;) {
        int c = in.get();
        if (c == EOF) return tok;
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
}

std::size_t parse_dim(const std::string& tok, const std::filesystem::path& path) {
    try {
        const long long v = std::stoll(tok);
        if (v <= 0) throw std::invalid_argument("non-positive");
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw Error(ErrorCategory::decode, path.string() + ": bad header field '" + tok + "'");
    }
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCategory::io, "cannot open " + path.string());
    const std::string magic = next_token(in);
    if (magic != "P6" && magic != "P5")
        throw Error(ErrorCategory::decode, path.string() + ": unsupported format '" + magic + "'");
    const std::size_t width = parse_dim(next_token(in), path);
    const std::size_t height = parse_dim(next_token(in), path);
    const std::size_t maxval = parse_dim(next_token(in), path);
    if (maxval != 255)
        throw Error(ErrorCategory::decode,
                    path.string() + ": only maxval 255 supported, got " + std::to_string(maxval));
    const std::size_t src_channels = magic == "P6" ? 3 : 1;
    std::vector<std::uint8_t> raw(width * height * src_channels);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
        throw Error(ErrorCategory::decode, path.string() + ": truncated pixel data");

    Image img;
    img.width = width;
    img.height = height;
    img.channels = 3;
    if (src_channels == 3) {
        img.pixels = std::move(raw);
    } else {
        img.pixels.resize(width * height * 3);
        for (std::size_t i = 0; i < width * height; ++i) {
            img.pixels[3 * i] = img.pixels[3 * i + 1] = img.pixels[3 * i + 2] = raw[i];
        }
    }
    return img;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
    if (image.channels != 3)
        throw Error(ErrorCategory::io, "write_ppm expects 3 channels");
    if (image.pixels.size() != image.width * image.height * 3)
        throw Error(ErrorCategory::io, "image buffer does not match dimensions");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCategory::io, "cannot open " + path.string() + " for writing");
    out << "P6\n" << image.width << " " << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.pixels.data()),
              static_cast<std::streamsize>(image.pixels.size()));
    if (!out) throw Error(ErrorCategory::io, "write failed for " + path.string());
}

Tensor image_to_tensor(const Image& image) {
    Tensor out = Tensor::zeros({image.height, image.width, image.channels});
    auto v = out.mutable_values();
    for (std::size_t i = 0; i < image.pixels.size(); ++i) {
        v[i] = static_cast<double>(image.pixels[i]) / 255.0;
    }
    return out;
}

Image tensor_to_image(const Tensor& tensor) {
    if (tensor.rank() != 3)
        throw Error(ErrorCategory::shape, "tensor_to_image expects [H x W x C]");
    Image img;
    img.height = tensor.dim(0);
    img.width = tensor.dim(1);
    img.channels = tensor.dim(2);
    img.pixels.resize(tensor.size());
    auto v = tensor.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double clamped = std::min(1.0, std::max(0.0, v[i]));
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(clamped * 255.0));
    }
    return img;
}

Tensor resize_bilinear(const Tensor& image, std::size_t target_size) {
    if (image.rank() != 3)
        throw Error(ErrorCategory::shape, "resize_bilinear expects [H x W x C]");
    const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    if (h == target_size && w == target_size) return image.clone();
    Tensor out = Tensor::zeros({target_size, target_size, c});
    const double* src = image.values().data();
    double* dst = out.mutable_values().data();
    const double sy = static_cast<double>(h) / static_cast<double>(target_size);
    const double sx = static_cast<double>(w) / static_cast<double>(target_size);
    for (std::size_t y = 0; y < target_size; ++y) {
        double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(h - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < target_size; ++x) {
            double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(w - 1));
            const std::size_t x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double v00 = src[(y0 * w + x0) * c + ch];
                const double v01 = src[(y0 * w + x1) * c + ch];
                const double v10 = src[(y1 * w + x0) * c + ch];
                const double v11 = src[(y1 * w + x1) * c + ch];
                const double top = v00 + (v01 - v00) * wx;
                const double bottom = v10 + (v11 - v10) * wx;
                dst[(y * target_size + x) * c + ch] = top + (bottom - top) * wy;
            }
        }
    }
    return out;
}

Tensor load_image(const std::filesystem::path& path, std::size_t target_size) {
    return resize_bilinear(image_to_tensor(read_ppm(path)), target_size);
}

Tensor normalize_channels(const Tensor& image, std::span<const double> mean,
                          std::span<const double> stddev) {
    if (image.rank() != 3)
        throw Error(ErrorCategory::shape, "normalize_channels expects [H x W x C]");
    const std::size_t c = image.dim(2);
    if (mean.size() != c || stddev.size() != c)
        throw Error(ErrorCategory::shape, "normalize_channels: per-channel stats must match C");
    for (double s : stddev) {
        if (s <= 0.0) throw Error(ErrorCategory::config, "stddev must be positive");
    }
    Tensor out = Tensor::zeros(image.shape());
    auto ov = out.mutable_values();
    auto iv = image.values();
    for (std::size_t i = 0; i < iv.size(); ++i) {
        const std::size_t ch = i % c;
        ov[i] = (iv[i] - mean[ch]) / stddev[ch];
    }
    return out;
}

}  // namespace histovit
