#include "retsyn/explain.hpp"

#include <algorithm>
#include <cmath>

#include "retsyn/dataman.hpp"
#include "retsyn/imageio.hpp"

namespace retsyn::explain {

CAMHeatmap gradcam(nn::Backbone& model, const Tensor& image, int target) {
    if (image.n() != 1) raise("gradcam: expects a single image");
    model.set_training(false);
    Tensor feats = model.forward_features(image);
    Tensor logits = model.forward_head(feats);
    int k = logits.dim(1);
    if (target < 0 || target >= k) raise("gradcam: target index out of range");

    CAMHeatmap cam;
    cam.target = "output[" + std::to_string(target) + "]";
    if (k == 1) {
        cam.output_value = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.data[0])));
    } else {
        Tensor probs = nn::softmax_rows(logits);
        cam.output_value = probs.data[static_cast<size_t>(target)];
    }

    Tensor dlogits = logits;
    dlogits.fill(0.0f);
    dlogits.data[static_cast<size_t>(target)] = 1.0f;
    Tensor dfeats = model.backward_head(dlogits);

    int C = feats.c(), h = feats.h(), w = feats.w();
    cam.channel_weights.resize(static_cast<size_t>(C));
    Image map(h, w);
    for (int c = 0; c < C; ++c) {
        const float* g = dfeats.ptr() + static_cast<size_t>(c) * h * w;
        double mean = 0.0;
        for (int i = 0; i < h * w; ++i) mean += g[i];
        mean /= (h * w);
        cam.channel_weights[static_cast<size_t>(c)] = static_cast<float>(mean);
        const float* a = feats.ptr() + static_cast<size_t>(c) * h * w;
        for (int i = 0; i < h * w; ++i) map.pix[static_cast<size_t>(i)] += static_cast<float>(mean) * a[i];
    }
    for (auto& v : map.pix) v = std::max(0.0f, v);  // rectify

    float mx = *std::max_element(map.pix.begin(), map.pix.end());
    if (mx <= 0.0f) {
        cam.degenerate = true;
        cam.heatmap = Image(image.h(), image.w());
        return cam;
    }
    float mn = *std::min_element(map.pix.begin(), map.pix.end());
    for (auto& v : map.pix) v = (v - mn) / (mx - mn);
    cam.heatmap = dataman::resize_bilinear(map, image.h(), image.w());
    for (auto& v : cam.heatmap.pix) v = std::min(1.0f, std::max(0.0f, v));
    return cam;
}

namespace {

// Piecewise-linear blue -> cyan -> green -> yellow -> orange -> red ramp.
void heat_color(float v, float* r, float* g, float* b) {
    struct Stop {
        float t, r, g, b;
    };
    static const Stop stops[] = {
        {0.00f, 0.10f, 0.15f, 0.60f}, {0.25f, 0.05f, 0.65f, 0.85f}, {0.50f, 0.20f, 0.80f, 0.25f},
        {0.75f, 0.95f, 0.85f, 0.10f}, {0.90f, 0.98f, 0.55f, 0.05f}, {1.00f, 0.90f, 0.10f, 0.08f}};
    v = std::min(1.0f, std::max(0.0f, v));
    for (size_t i = 1; i < std::size(stops); ++i) {
        if (v <= stops[i].t) {
            float u = (v - stops[i - 1].t) / (stops[i].t - stops[i - 1].t);
            *r = stops[i - 1].r + u * (stops[i].r - stops[i - 1].r);
            *g = stops[i - 1].g + u * (stops[i].g - stops[i - 1].g);
            *b = stops[i - 1].b + u * (stops[i].b - stops[i - 1].b);
            return;
        }
    }
    *r = stops[std::size(stops) - 1].r;
    *g = stops[std::size(stops) - 1].g;
    *b = stops[std::size(stops) - 1].b;
}

}  // namespace

std::vector<float> colormap_rgb(const Image& heatmap) {
    std::vector<float> rgb(static_cast<size_t>(heatmap.height) * heatmap.width * 3);
    for (size_t i = 0; i < heatmap.pix.size(); ++i) {
        float r, g, b;
        heat_color(heatmap.pix[i], &r, &g, &b);
        rgb[i * 3] = r;
        rgb[i * 3 + 1] = g;
        rgb[i * 3 + 2] = b;
    }
    return rgb;
}

void write_overlay_png(const std::string& path, const Image& base, const Image& heatmap,
                       double blend) {
    if (base.height != heatmap.height || base.width != heatmap.width)
        raise("write_overlay_png: size mismatch");
    std::vector<float> heat = colormap_rgb(heatmap);
    std::vector<float> rgb(heat.size());
    for (size_t i = 0; i < base.pix.size(); ++i) {
        float g = base.pix[i];
        for (int c = 0; c < 3; ++c)
            rgb[i * 3 + c] = static_cast<float>((1.0 - blend) * g + blend * heat[i * 3 + c]);
    }
    write_png_rgb(path, base.height, base.width, rgb);
}

void write_cam_sheet(const std::string& path, const std::vector<SheetCell>& cells) {
    if (cells.empty()) raise("write_cam_sheet: no cells");
    int side = cells[0].image.height;
    int pad = 4;
    int cols = 2, rows = (static_cast<int>(cells.size()) + 1) / 2;
    // each cell is the grayscale image next to its overlay
    int cell_w = side * 2 + pad;
    int sheet_w = cols * cell_w + (cols + 1) * pad;
    int sheet_h = rows * side + (rows + 1) * pad;
    std::vector<float> rgb(static_cast<size_t>(sheet_w) * sheet_h * 3, 1.0f);

    auto put = [&](int y0, int x0, const std::vector<float>& src, int h, int w) {
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c)
                for (int ch = 0; ch < 3; ++ch)
                    rgb[((static_cast<size_t>(y0 + r) * sheet_w) + (x0 + c)) * 3 + ch] =
                        src[(static_cast<size_t>(r) * w + c) * 3 + ch];
    };

    for (size_t i = 0; i < cells.size(); ++i) {
        int row = static_cast<int>(i) / cols, col = static_cast<int>(i) % cols;
        int y0 = pad + row * (side + pad);
        int x0 = pad + col * (cell_w + pad);
        std::vector<float> gray(static_cast<size_t>(side) * side * 3);
        for (size_t p = 0; p < cells[i].image.pix.size(); ++p)
            gray[p * 3] = gray[p * 3 + 1] = gray[p * 3 + 2] = cells[i].image.pix[p];
        put(y0, x0, gray, side, side);

        std::vector<float> heat = colormap_rgb(cells[i].heatmap);
        std::vector<float> over(heat.size());
        for (size_t p = 0; p < cells[i].image.pix.size(); ++p)
            for (int ch = 0; ch < 3; ++ch)
                over[p * 3 + ch] = 0.55f * cells[i].image.pix[p] + 0.45f * heat[p * 3 + ch];
        put(y0, x0 + side + pad, over, side, side);
    }
    write_png_rgb(path, sheet_h, sheet_w, rgb);
}

}  // namespace retsyn::explain
