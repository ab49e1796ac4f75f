#pragma once

#include <array>
#include <string>
#include <vector>

#include "retsyn/tensor.hpp"

namespace retsyn::plotting {

struct Color {
    float r = 0, g = 0, b = 0;
};

struct Canvas {
    int height, width;
    std::vector<float> rgb;

    Canvas(int h, int w, Color bg = {1, 1, 1});
    void set(int y, int x, Color c, float alpha = 1.0f);
    void line(double x0, double y0, double x1, double y1, Color c);
    void fill_rect(int y0, int x0, int y1, int x1, Color c, float alpha = 1.0f);
    // 5x7 bitmap font, uppercased; scale integer-replicates pixels.
    void text(int y, int x, const std::string& s, Color c, int scale = 1);
    void save(const std::string& path) const;
};

struct Series {
    std::string label;
    Color color;
    std::vector<double> samples;
};

// Overlaid histogram densities of up to a few sample sets, with legend and
// free-form annotation lines (e.g. WD / KS readouts).
void plot_distributions(const std::string& path, const std::string& title,
                        const std::vector<Series>& series,
                        const std::vector<std::string>& annotations);

struct CurveSeries {
    std::string label;
    Color color;
    std::vector<std::pair<double, double>> points;
};

// Simple x/y curves on [0,1]^2 with an optional chance diagonal (ROC-style).
void plot_curves(const std::string& path, const std::string& title, const std::string& xlabel,
                 const std::string& ylabel, const std::vector<CurveSeries>& curves, bool diagonal);

}  // namespace retsyn::plotting
