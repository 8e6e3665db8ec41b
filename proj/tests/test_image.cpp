#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "histovit/error.hpp"
#include "histovit/image.hpp"

using namespace histovit;
namespace fs = std::filesystem;

TEST_CASE("ppm write/read round-trip and gray scaling") {
    Image img;
    img.width = 3;
    img.height = 2;
    img.channels = 3;
    img.pixels = {0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120, 130, 140, 150, 160, 170};
    const fs::path path = fs::temp_directory_path() / "histovit_img_rt.ppm";
    write_ppm(path, img);
    const Image back = read_ppm(path);
    CHECK(back.width == 3);
    CHECK(back.height == 2);
    CHECK(back.pixels == img.pixels);
    fs::remove(path);

    Image gray;
    gray.width = gray.height = 2;
    gray.channels = 3;
    gray.pixels.assign(12, 128);
    const Tensor t = image_to_tensor(gray);
    for (double v : t.values()) CHECK(v == doctest::Approx(128.0 / 255.0));
}

TEST_CASE("decode errors carry the decode category") {
    const fs::path path = fs::temp_directory_path() / "histovit_img_bad.ppm";
    {
        std::ofstream out(path, std::ios::binary);
        out << "P3\n2 2\n255\n";  // ASCII variant is unsupported
    }
    try {
        read_ppm(path);
        FAIL("expected decode error");
    } catch (const Error& e) {
        CHECK(e.category() == ErrorCategory::decode);
    }
    {
        std::ofstream out(path, std::ios::binary);
        out << "P6\n4 4\n255\n";
        out.write("abc", 3);  // truncated payload
    }
    CHECK_THROWS_AS(read_ppm(path), Error);
    fs::remove(path);
    CHECK_THROWS_AS(read_ppm(path), Error);  // missing file -> io error
}

TEST_CASE("resizing a constant image stays constant") {
    Tensor img = Tensor::full({5, 5, 3}, 0.42);
    Tensor up = resize_bilinear(img, 13);
    REQUIRE(up.shape() == std::vector<std::size_t>{13, 13, 3});
    for (double v : up.values()) CHECK(v == doctest::Approx(0.42).epsilon(1e-12));
    Tensor down = resize_bilinear(img, 2);
    for (double v : down.values()) CHECK(v == doctest::Approx(0.42).epsilon(1e-12));
}

TEST_CASE("2x2 checkerboard upsampled to 4x4 matches hand-computed bilinear weights") {
    // checkerboard [[1,0],[0,1]], single channel
    Tensor img = Tensor::from_vector({2, 2, 1}, {1.0, 0.0, 0.0, 1.0});
    Tensor up = resize_bilinear(img, 4);

    // Half-pixel mapping: destination x in {0,1,2,3} -> source fx in
    // {-0.25, 0.25, 0.75, 1.25}, clamped to [0,1]. Weights toward the right
    // neighbor: {0, 0.25, 0.75, 1} (same for rows by symmetry).
    const double w[4] = {0.0, 0.25, 0.75, 1.0};
    auto expected = [&](std::size_t y, std::size_t x) {
        const double top = 1.0 * (1.0 - w[x]) + 0.0 * w[x];
        const double bottom = 0.0 * (1.0 - w[x]) + 1.0 * w[x];
        return top * (1.0 - w[y]) + bottom * w[y];
    };
    for (std::size_t y = 0; y < 4; ++y) {
        for (std::size_t x = 0; x < 4; ++x) {
            CHECK(up.at(y, x, 0) == doctest::Approx(expected(y, x)).epsilon(1e-12));
        }
    }
}

TEST_CASE("load_image decodes, scales and resizes") {
    Image img;
    img.width = img.height = 2;
    img.channels = 3;
    img.pixels = {255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 0};
    const fs::path path = fs::temp_directory_path() / "histovit_img_load.ppm";
    write_ppm(path, img);
    const Tensor t = load_image(path, 4);
    REQUIRE(t.shape() == std::vector<std::size_t>{4, 4, 3});
    CHECK(t.at(0, 0, 0) == doctest::Approx(1.0));
    CHECK(t.at(0, 0, 1) == doctest::Approx(0.0));
    for (double v : t.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    fs::remove(path);
}

TEST_CASE("channel standardization hook") {
    Tensor img = Tensor::from_vector({1, 2, 3}, {0.5, 0.6, 0.7, 0.1, 0.2, 0.3});
    const double mean[3] = {0.3, 0.4, 0.5};
    const double stddev[3] = {0.2, 0.2, 0.2};
    Tensor out = normalize_channels(img, mean, stddev);
    CHECK(out.at(0, 0, 0) == doctest::Approx(1.0));
    CHECK(out.at(0, 1, 2) == doctest::Approx(-1.0));
    const double bad[3] = {0.2, 0.0, 0.2};
    CHECK_THROWS_AS(normalize_channels(img, mean, bad), Error);
}

TEST_CASE("grayscale P5 input widens to three channels") {
    const fs::path path = fs::temp_directory_path() / "histovit_img_p5.pgm";
    {
        std::ofstream out(path, std::ios::binary);
        out << "P5\n2 1\n255\n";
        const unsigned char data[2] = {16, 240};
        out.write(reinterpret_cast<const char*>(data), 2);
    }
    const Image img = read_ppm(path);
    CHECK(img.channels == 3);
    CHECK(img.pixels == std::vector<std::uint8_t>{16, 16, 16, 240, 240, 240});
    fs::remove(path);
}
