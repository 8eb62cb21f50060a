#include "core/image.h"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>

#include <png.h>
#include <jpeglib.h>

#include "core/errors.h"

namespace ipc {

namespace {

struct file_closer {
    FILE * f;
    ~file_closer() { if (f) fclose(f); }
};

image_u8 load_png(FILE * f, const std::string & path) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw input_error("png: out of memory");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw input_error(strf("png: failed to decode '%s'", path.c_str()));
    }
    png_init_io(png, f);
    png_read_info(png, info);

    png_uint_32 w, h;
    int bit_depth, color_type;
    png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);

    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    image_u8 img;
    img.w = (int) w;
    img.h = (int) h;
    img.px.resize((size_t) w * h * 3);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = img.px.data() + (size_t) y * w * 3;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

struct jpeg_error_jmp {
    jpeg_error_mgr mgr;
    jmp_buf jb;
};

void jpeg_error_exit_throw(j_common_ptr cinfo) {
    longjmp(((jpeg_error_jmp *) cinfo->err)->jb, 1);
}

image_u8 load_jpeg(FILE * f, const std::string & path) {
    jpeg_decompress_struct cinfo;
    jpeg_error_jmp jerr;
    cinfo.err = jpeg_std_error(&jerr.mgr);
    jerr.mgr.error_exit = jpeg_error_exit_throw;
    if (setjmp(jerr.jb)) {
        jpeg_destroy_decompress(&cinfo);
        throw input_error(strf("jpeg: failed to decode '%s'", path.c_str()));
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, f);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);

    image_u8 img;
    img.w = (int) cinfo.output_width;
    img.h = (int) cinfo.output_height;
    img.px.resize((size_t) img.w * img.h * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = img.px.data() + (size_t) cinfo.output_scanline * img.w * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
}

} // namespace

image_u8 load_image(const std::string & path) {
    FILE * f = fopen(path.c_str(), "rb");
    if (!f) throw input_error(strf("image: cannot open '%s'", path.c_str()));
    file_closer fc{f};

    uint8_t sig[8] = {0};
    size_t got = fread(sig, 1, 8, f);
    rewind(f);
    if (got >= 8 && png_sig_cmp(sig, 0, 8) == 0) return load_png(f, path);
    if (got >= 2 && sig[0] == 0xFF && sig[1] == 0xD8) return load_jpeg(f, path);
    throw input_error(strf("image: '%s' is neither PNG nor JPEG", path.c_str()));
}

void save_png(const std::string & path, const image_u8 & img) {
    FILE * f = fopen(path.c_str(), "wb");
    if (!f) throw input_error(strf("png: cannot open '%s' for writing", path.c_str()));
    file_closer fc{f};

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw input_error(strf("png: failed to write '%s'", path.c_str()));
    }
    png_init_io(png, f);
    png_set_IHDR(png, info, (png_uint_32) img.w, (png_uint_32) img.h, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.h; ++y) {
        png_write_row(png, const_cast<png_bytep>(img.px.data() + (size_t) y * img.w * 3));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

void save_png_gray(const std::string & path, const std::vector<uint8_t> & px, int w, int h) {
    image_u8 img;
    img.w = w;
    img.h = h;
    img.px.resize((size_t) w * h * 3);
    for (size_t i = 0; i < px.size(); ++i) {
        img.px[i * 3 + 0] = img.px[i * 3 + 1] = img.px[i * 3 + 2] = px[i];
    }
    save_png(path, img);
}

image_u8 resize_bilinear(const image_u8 & img, int out_w, int out_h) {
    image_u8 out;
    out.w = out_w;
    out.h = out_h;
    out.px.resize((size_t) out_w * out_h * 3);
    const float sx = (float) img.w / out_w;
    const float sy = (float) img.h / out_h;
    for (int y = 0; y < out_h; ++y) {
        float fy = ((float) y + 0.5f) * sy - 0.5f;
        int y0 = (int) std::floor(fy);
        float wy = fy - (float) y0;
        int y1 = std::min(y0 + 1, img.h - 1);
        y0 = std::clamp(y0, 0, img.h - 1);
        for (int x = 0; x < out_w; ++x) {
            float fx = ((float) x + 0.5f) * sx - 0.5f;
            int x0 = (int) std::floor(fx);
            float wx = fx - (float) x0;
            int x1 = std::min(x0 + 1, img.w - 1);
            x0 = std::clamp(x0, 0, img.w - 1);
            for (int c = 0; c < 3; ++c) {
                float v = (1 - wy) * ((1 - wx) * img.at(x0, y0, c) + wx * img.at(x1, y0, c)) +
                          wy       * ((1 - wx) * img.at(x0, y1, c) + wx * img.at(x1, y1, c));
                out.at(x, y, c) = (uint8_t) std::clamp((int) std::lround(v), 0, 255);
            }
        }
    }
    return out;
}

image_u8 center_crop(const image_u8 & img, int size) {
    if (img.w < size || img.h < size) {
        throw input_error(strf("crop: image %dx%d smaller than crop %d", img.w, img.h, size));
    }
    image_u8 out;
    out.w = out.h = size;
    out.px.resize((size_t) size * size * 3);
    const int ox = (img.w - size) / 2;
    const int oy = (img.h - size) / 2;
    for (int y = 0; y < size; ++y) {
        std::memcpy(out.px.data() + (size_t) y * size * 3,
                    img.px.data() + ((size_t) (y + oy) * img.w + ox) * 3,
                    (size_t) size * 3);
    }
    return out;
}

image_u8 resize_shortest_crop(const image_u8 & img, int size) {
    int w, h;
    if (img.w <= img.h) {
        w = size;
        h = (int) std::lround((double) img.h * size / img.w);
    } else {
        h = size;
        w = (int) std::lround((double) img.w * size / img.h);
    }
    return center_crop(resize_bilinear(img, w, h), size);
}

tensor to_chw(const image_u8 & img, const float mean[3], const float stddev[3]) {
    tensor t({3, img.h, img.w});
    for (int c = 0; c < 3; ++c) {
        float * dst = t.data() + (size_t) c * img.h * img.w;
        for (int y = 0; y < img.h; ++y) {
            for (int x = 0; x < img.w; ++x) {
                dst[y * img.w + x] = ((float) img.at(x, y, c) / 255.0f - mean[c]) / stddev[c];
            }
        }
    }
    return t;
}

image_u8 from_chw(const tensor & t, const float mean[3], const float stddev[3]) {
    const int h = (int) t.shape[1];
    const int w = (int) t.shape[2];
    image_u8 img;
    img.w = w;
    img.h = h;
    img.px.resize((size_t) w * h * 3);
    for (int c = 0; c < 3; ++c) {
        const float * src = t.data() + (size_t) c * h * w;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                float v = (src[y * w + x] * stddev[c] + mean[c]) * 255.0f;
                img.at(x, y, c) = (uint8_t) std::clamp((int) std::lround(v), 0, 255);
            }
        }
    }
    return img;
}

} // namespace ipc
