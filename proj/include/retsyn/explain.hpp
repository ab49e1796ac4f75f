#pragma once

#include <string>
#include <vector>

#include "retsyn/nn/backbones.hpp"
#include "retsyn/tensor.hpp"

namespace retsyn::explain {

struct CAMHeatmap {
    std::vector<float> channel_weights;  // pooled gradients, one per feature channel
    Image heatmap;                       // [0,1], upsampled to input size
    double output_value = 0.0;           // model output probability for the target
    std::string target;
    bool degenerate = false;  // all-rectified-zero map
};

// Gradient-weighted class activation map at the backbone's last convolutional
// stage. `image` is a single [1,C,H,W] input; `target` indexes the output.
CAMHeatmap gradcam(nn::Backbone& model, const Tensor& image, int target);

// Turbo-style colormap overlay (red-orange = most discriminative).
std::vector<float> colormap_rgb(const Image& heatmap);
void write_overlay_png(const std::string& path, const Image& base, const Image& heatmap,
                       double blend = 0.45);

// 2x2 sheet: rows POS/NEG, columns real/synthetic, each cell image+overlay.
struct SheetCell {
    Image image;
    Image heatmap;
    std::string caption;
};
void write_cam_sheet(const std::string& path, const std::vector<SheetCell>& cells);

}  // namespace retsyn::explain
