#pragma once

#include <string>
#include <vector>

#include "retsyn/tensor.hpp"

namespace retsyn {

// Grayscale PNG, 8-bit. Color PNGs are converted to luma on read.
Image read_png_gray(const std::string& path);
void write_png_gray(const std::string& path, const Image& img);

// Interleaved RGB in [0,1], size h*w*3.
void write_png_rgb(const std::string& path, int h, int w, const std::vector<float>& rgb);

// Minimal .npy writer (float32, C order) for raw heatmap arrays.
void write_npy(const std::string& path, const std::vector<int>& shape, const std::vector<float>& data);

}  // namespace retsyn
