#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "core/tensor.h"

namespace ipc {

// 8-bit RGB raster, row-major, interleaved channels
struct image_u8 {
    int w = 0;
    int h = 0;
    std::vector<uint8_t> px; // size w*h*3

    uint8_t & at(int x, int y, int c) { return px[(size_t) ((y * w + x) * 3 + c)]; }
    uint8_t   at(int x, int y, int c) const { return px[(size_t) ((y * w + x) * 3 + c)]; }
};

image_u8 load_image(const std::string & path);          // PNG or JPEG by content
void save_png(const std::string & path, const image_u8 & img);
void save_png_gray(const std::string & path, const std::vector<uint8_t> & px, int w, int h);

image_u8 resize_bilinear(const image_u8 & img, int out_w, int out_h);
image_u8 center_crop(const image_u8 & img, int size);
// shortest side to `size`, then center crop to size x size
image_u8 resize_shortest_crop(const image_u8 & img, int size);

// [3,h,w] float tensor; out = (px/255 - mean[c]) / std[c]
tensor to_chw(const image_u8 & img, const float mean[3], const float stddev[3]);
// inverse of to_chw with clamping
image_u8 from_chw(const tensor & t, const float mean[3], const float stddev[3]);

} // namespace ipc
