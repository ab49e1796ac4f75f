#include "retsyn/imageio.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>

namespace retsyn {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

uint8_t to_u8(float v) {
    float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    return static_cast<uint8_t>(c * 255.0f + 0.5f);
}

}  // namespace

Image read_png_gray(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) raise("cannot open PNG for reading: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) raise("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        raise("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        raise("PNG decode error: " + path);
    }

    png_init_io(png, f.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    int channels = png_get_channels(png, info);
    std::vector<uint8_t> row(static_cast<size_t>(w) * channels);
    Image img(static_cast<int>(h), static_cast<int>(w));
    for (png_uint_32 r = 0; r < h; ++r) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 c = 0; c < w; ++c) {
            float v;
            if (channels >= 3) {
                v = (0.299f * row[c * channels] + 0.587f * row[c * channels + 1] +
                     0.114f * row[c * channels + 2]) / 255.0f;
            } else {
                v = row[c * channels] / 255.0f;
            }
            img.at(static_cast<int>(r), static_cast<int>(c)) = v;
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png_gray(const std::string& path, const Image& img) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) raise("cannot open PNG for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) raise("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        raise("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        raise("PNG encode error: " + path);
    }

    png_init_io(png, f.get());
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<uint8_t> row(static_cast<size_t>(img.width));
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) row[static_cast<size_t>(c)] = to_u8(img.at(r, c));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

void write_png_rgb(const std::string& path, int h, int w, const std::vector<float>& rgb) {
    if (rgb.size() != static_cast<size_t>(h) * w * 3) raise("write_png_rgb: size mismatch");
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) raise("cannot open PNG for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) raise("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        raise("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        raise("PNG encode error: " + path);
    }

    png_init_io(png, f.get());
    png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (int r = 0; r < h; ++r) {
        const float* src = rgb.data() + static_cast<size_t>(r) * w * 3;
        for (int i = 0; i < w * 3; ++i) row[static_cast<size_t>(i)] = to_u8(src[i]);
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

void write_npy(const std::string& path, const std::vector<int>& shape, const std::vector<float>& data) {
    std::string dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (";
    for (size_t i = 0; i < shape.size(); ++i) {
        dict += std::to_string(shape[i]);
        if (shape.size() == 1 || i + 1 < shape.size()) dict += ",";
        if (i + 1 < shape.size()) dict += " ";
    }
    dict += "), }";
    size_t header_len = 10 + dict.size() + 1;  // magic+version+len field, trailing \n
    size_t pad = (64 - header_len % 64) % 64;
    dict.append(pad, ' ');
    dict += '\n';

    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) raise("cannot open npy for writing: " + path);
    const char magic[] = "\x93NUMPY";
    std::fwrite(magic, 1, 6, f.get());
    uint8_t ver[2] = {1, 0};
    std::fwrite(ver, 1, 2, f.get());
    uint16_t hlen = static_cast<uint16_t>(dict.size());
    std::fwrite(&hlen, 2, 1, f.get());
    std::fwrite(dict.data(), 1, dict.size(), f.get());
    std::fwrite(data.data(), sizeof(float), data.size(), f.get());
}

}  // namespace retsyn
