#include "histovit/synth.hpp"

#include <cmath>
#include <cstdio>
#include <string>

#include "histovit/error.hpp"
#include "histovit/rng.hpp"

namespace histovit {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

struct Recipe {
    double tint[3];
    double stripe_freq;   // cycles across the view at 40x
    double stripe_angle;  // radians
    double stripe_amp;
    double ring_freq;  // radial cycles at 40x (0 = none)
    int blob_count;    // visible blobs at 40x
    double blob_radius;
    double blob_amp;
};

const Recipe& recipe_for(Subclass subclass) {
    // Tints are spread far enough apart that every class pair differs in at
    // least one channel mean; stripe/blob statistics separate them further.
    static const Recipe recipes[8] = {
        /* A  */ {{0.86, 0.55, 0.60}, 6.0, 0.785398163397448, 0.12, 0.0, 0, 0.0, 0.0},
        /* F  */ {{0.52, 0.78, 0.58}, 3.0, 0.0, 0.14, 0.0, 0, 0.0, 0.0},
        /* TA */ {{0.58, 0.58, 0.88}, 8.0, 1.570796326794897, 0.12, 0.0, 0, 0.0, 0.0},
        /* PT */ {{0.82, 0.80, 0.48}, 0.0, 0.0, 0.0, 0.0, 6, 0.16, -0.30},
        /* DC */ {{0.78, 0.42, 0.44}, 0.0, 0.0, 0.0, 0.0, 24, 0.05, -0.35},
        /* LC */ {{0.44, 0.54, 0.76}, 5.0, 0.785398163397448, 0.10, 0.0, 10, 0.07, -0.22},
        /* MC */ {{0.52, 0.82, 0.80}, 0.0, 0.0, 0.0, 5.0, 0, 0.0, 0.0},
        /* PC */ {{0.72, 0.48, 0.78}, 7.0, 2.356194490192345, 0.12, 0.0, 8, 0.06, 0.25},
    };
    return recipes[subclass_index(subclass)];
}

// Per-channel texture modulation so the pattern is not pure luminance.
constexpr double kChannelMod[3] = {1.0, 0.75, 0.55};

}  // namespace

Image render_synthetic_image(const SynthSpec& spec, Subclass subclass, int magnification,
                             std::size_t index) {
    if (spec.image_size == 0)
        throw Error(ErrorCategory::config, "synthetic image size must be positive");
    if (!magnification_index(magnification))
        throw Error(ErrorCategory::config,
                    "magnification " + std::to_string(magnification) + " is not one of 40/100/200/400");

    const Recipe& rc = recipe_for(subclass);
    const double mag_scale = std::sqrt(static_cast<double>(magnification) / 40.0);
    const std::string tag = "synth/" + std::string(to_string(subclass)) + "/" +
                            std::to_string(magnification);
    rng::Stream stream(rng::derive(spec.seed, tag, index));

    const double phase = stream.uniform(0.0, kTwoPi);
    const double brightness = stream.uniform(-0.05, 0.05);
    const double stripe_freq = rc.stripe_freq / mag_scale;
    const double ring_freq = rc.ring_freq / mag_scale;
    const double ring_cx = stream.uniform(0.2, 0.8);
    const double ring_cy = stream.uniform(0.2, 0.8);

    int blob_count = 0;
    std::vector<double> bx, by;
    if (rc.blob_count > 0) {
        blob_count = std::max(
            2, static_cast<int>(std::llround(rc.blob_count / (mag_scale * mag_scale))));
        bx.resize(static_cast<std::size_t>(blob_count));
        by.resize(static_cast<std::size_t>(blob_count));
        for (int b = 0; b < blob_count; ++b) {
            bx[static_cast<std::size_t>(b)] = stream.uniform(0.0, 1.0);
            by[static_cast<std::size_t>(b)] = stream.uniform(0.0, 1.0);
        }
    }
    const double blob_radius = rc.blob_radius * mag_scale;
    const double inv_two_r2 = blob_radius > 0.0 ? 1.0 / (2.0 * blob_radius * blob_radius) : 0.0;
    const double ca = std::cos(rc.stripe_angle), sa = std::sin(rc.stripe_angle);

    const std::size_t s = spec.image_size;
    Image img;
    img.width = s;
    img.height = s;
    img.channels = 3;
    img.pixels.resize(s * s * 3);

    for (std::size_t y = 0; y < s; ++y) {
        const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(s);
        for (std::size_t x = 0; x < s; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(s);
            double pattern = 0.0;
            if (rc.stripe_amp != 0.0) {
                pattern += rc.stripe_amp *
                           std::sin(kTwoPi * stripe_freq * (u * ca + v * sa) + phase);
            }
            if (ring_freq > 0.0) {
                const double du = u - ring_cx, dv = v - ring_cy;
                pattern += 0.14 * std::sin(kTwoPi * ring_freq * std::sqrt(du * du + dv * dv) +
                                           phase);
            }
            double blob = 0.0;
            for (int b = 0; b < blob_count; ++b) {
                const double du = u - bx[static_cast<std::size_t>(b)];
                const double dv = v - by[static_cast<std::size_t>(b)];
                blob += std::exp(-(du * du + dv * dv) * inv_two_r2);
            }
            blob *= rc.blob_amp;
            for (std::size_t c = 0; c < 3; ++c) {
                double value = rc.tint[c] + kChannelMod[c] * pattern + blob + brightness +
                               spec.noise_stddev * stream.normal();
                value = std::min(1.0, std::max(0.0, value));
                img.pixels[(y * s + x) * 3 + c] =
                    static_cast<std::uint8_t>(std::lround(value * 255.0));
            }
        }
    }
    return img;
}

DatasetManifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir) {
    if (spec.per_class == 0)
        throw Error(ErrorCategory::config, "per_class must be positive");
    if (spec.magnifications.empty())
        throw Error(ErrorCategory::config, "at least one magnification required");
    for (int mag : spec.magnifications) {
        if (!magnification_index(mag))
            throw Error(ErrorCategory::config,
                        "magnification " + std::to_string(mag) + " is not one of 40/100/200/400");
    }
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (ec)
        throw Error(ErrorCategory::io,
                    "cannot create output directory " + (out_dir / "images").string());

    constexpr std::size_t kPatientsPerClass = 5;
    std::vector<SampleRecord> records;
    records.reserve(kAllSubclasses.size() * spec.magnifications.size() * spec.per_class);
    for (Subclass subclass : kAllSubclasses) {
        for (int mag : spec.magnifications) {
            for (std::size_t i = 0; i < spec.per_class; ++i) {
                char idx_buf[16];
                std::snprintf(idx_buf, sizeof(idx_buf), "%04zu", i);
                const std::string stem = std::string(to_string(subclass)) + "-" +
                                         std::to_string(mag) + "x-" + idx_buf;
                const std::string rel_path = "images/" + stem + ".ppm";
                const Image img = render_synthetic_image(spec, subclass, mag, i);
                write_ppm(out_dir / rel_path, img);
                SampleRecord rec;
                rec.sample_id = stem;
                rec.path = rel_path;
                rec.subclass = subclass;
                rec.magnification = mag;
                rec.patient_id = std::string(to_string(subclass)) + "-p" +
                                 std::to_string(i % kPatientsPerClass);
                records.push_back(std::move(rec));
            }
        }
    }
    DatasetManifest manifest = DatasetManifest::from_records(std::move(records));
    save_manifest(out_dir / "manifest.txt", manifest);
    return manifest;
}

}  // namespace histovit
