#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "core/errors.h"
#include "core/image.h"

using namespace ipc;
namespace fs = std::filesystem;

static fs::path tmpdir() {
    auto p = fs::temp_directory_path() / "ipc_image_test";
    fs::create_directories(p);
    return p;
}

static image_u8 gradient_image(int w, int h) {
    image_u8 img;
    img.w = w;
    img.h = h;
    img.px.resize((size_t) w * h * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            img.at(x, y, 0) = (uint8_t) (x * 255 / (w - 1));
            img.at(x, y, 1) = (uint8_t) (y * 255 / (h - 1));
            img.at(x, y, 2) = (uint8_t) ((x + y) * 255 / (w + h - 2));
        }
    }
    return img;
}

TEST_CASE("png round trip is lossless") {
    auto img = gradient_image(33, 17);
    auto path = (tmpdir() / "g.png").string();
    save_png(path, img);
    auto back = load_image(path);
    CHECK(back.w == 33);
    CHECK(back.h == 17);
    CHECK(back.px == img.px);
}

TEST_CASE("undecodable input raises input_error") {
    auto path = (tmpdir() / "junk.png").string();
    {
        FILE * f = fopen(path.c_str(), "wb");
        fputs("not an image at all", f);
        fclose(f);
    }
    CHECK_THROWS_AS(load_image(path), input_error);
    CHECK_THROWS_AS(load_image((tmpdir() / "nope.png").string()), input_error);
}

TEST_CASE("resize and crop shapes") {
    auto img = gradient_image(64, 48);
    auto r = resize_shortest_crop(img, 32);
    CHECK(r.w == 32);
    CHECK(r.h == 32);
    auto c = center_crop(img, 48);
    CHECK(c.w == 48);
    CHECK(c.h == 48);
    CHECK_THROWS_AS(center_crop(img, 100), input_error);
}

TEST_CASE("to_chw / from_chw round trip") {
    auto img = gradient_image(8, 8);
    const float mean[3] = {0.5f, 0.5f, 0.5f};
    const float stddev[3] = {0.5f, 0.5f, 0.5f};
    auto t = to_chw(img, mean, stddev);
    CHECK(t.shape == std::vector<int64_t>{3, 8, 8});
    auto back = from_chw(t, mean, stddev);
    CHECK(back.px == img.px);
}
