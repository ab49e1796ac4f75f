#include "retsyn/plotting.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>

#include "retsyn/imageio.hpp"

namespace retsyn::plotting {

namespace {

// Row-major 5-bit patterns, 7 rows per glyph (bit 4 = leftmost pixel).
const std::map<char, std::array<uint8_t, 7>>& font() {
    static const std::map<char, std::array<uint8_t, 7>> f = {
        {' ', {0, 0, 0, 0, 0, 0, 0}},
        {'0', {0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110}},
        {'1', {0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110}},
        {'2', {0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111}},
        {'3', {0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110}},
        {'4', {0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010}},
        {'5', {0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110}},
        {'6', {0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110}},
        {'7', {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000}},
        {'8', {0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110}},
        {'9', {0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100}},
        {'A', {0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001}},
        {'B', {0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110}},
        {'C', {0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110}},
        {'D', {0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100}},
        {'E', {0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111}},
        {'F', {0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000}},
        {'G', {0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111}},
        {'H', {0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001}},
        {'I', {0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110}},
        {'J', {0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100}},
        {'K', {0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001}},
        {'L', {0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111}},
        {'M', {0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001}},
        {'N', {0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001}},
        {'O', {0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110}},
        {'P', {0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000}},
        {'Q', {0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101}},
        {'R', {0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001}},
        {'S', {0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110}},
        {'T', {0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100}},
        {'U', {0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110}},
        {'V', {0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100}},
        {'W', {0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010}},
        {'X', {0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001}},
        {'Y', {0b10001, 0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100}},
        {'Z', {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111}},
        {'.', {0, 0, 0, 0, 0, 0b01100, 0b01100}},
        {'-', {0, 0, 0, 0b01110, 0, 0, 0}},
        {'=', {0, 0, 0b11111, 0, 0b11111, 0, 0}},
        {':', {0, 0b01100, 0b01100, 0, 0b01100, 0b01100, 0}},
        {'(', {0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010}},
        {')', {0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000}},
        {'%', {0b11000, 0b11001, 0b00010, 0b00100, 0b01000, 0b10011, 0b00011}},
        {'/', {0b00000, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b00000}},
        {'_', {0, 0, 0, 0, 0, 0, 0b11111}},
        {'+', {0, 0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0}},
        {',', {0, 0, 0, 0, 0b01100, 0b00100, 0b01000}},
        {'<', {0b00010, 0b00100, 0b01000, 0b10000, 0b01000, 0b00100, 0b00010}},
        {'>', {0b01000, 0b00100, 0b00010, 0b00001, 0b00010, 0b00100, 0b01000}},
        {'*', {0, 0b00100, 0b10101, 0b01110, 0b10101, 0b00100, 0}},
    };
    return f;
}

}  // namespace

Canvas::Canvas(int h, int w, Color bg) : height(h), width(w) {
    rgb.resize(static_cast<size_t>(h) * w * 3);
    for (int i = 0; i < h * w; ++i) {
        rgb[static_cast<size_t>(i) * 3] = bg.r;
        rgb[static_cast<size_t>(i) * 3 + 1] = bg.g;
        rgb[static_cast<size_t>(i) * 3 + 2] = bg.b;
    }
}

void Canvas::set(int y, int x, Color c, float alpha) {
    if (y < 0 || y >= height || x < 0 || x >= width) return;
    size_t i = (static_cast<size_t>(y) * width + x) * 3;
    rgb[i] = (1 - alpha) * rgb[i] + alpha * c.r;
    rgb[i + 1] = (1 - alpha) * rgb[i + 1] + alpha * c.g;
    rgb[i + 2] = (1 - alpha) * rgb[i + 2] + alpha * c.b;
}

void Canvas::line(double x0, double y0, double x1, double y1, Color c) {
    double dx = x1 - x0, dy = y1 - y0;
    int steps = static_cast<int>(std::max(std::abs(dx), std::abs(dy))) + 1;
    for (int i = 0; i <= steps; ++i) {
        double t = static_cast<double>(i) / steps;
        set(static_cast<int>(std::lround(y0 + t * dy)), static_cast<int>(std::lround(x0 + t * dx)), c);
    }
}

void Canvas::fill_rect(int y0, int x0, int y1, int x1, Color c, float alpha) {
    for (int y = std::max(0, y0); y <= std::min(height - 1, y1); ++y)
        for (int x = std::max(0, x0); x <= std::min(width - 1, x1); ++x) set(y, x, c, alpha);
}

void Canvas::text(int y, int x, const std::string& s, Color c, int scale) {
    int cx = x;
    for (char raw : s) {
        char ch = static_cast<char>(std::toupper(static_cast<unsigned char>(raw)));
        auto it = font().find(ch);
        if (it == font().end()) it = font().find(' ');
        for (int r = 0; r < 7; ++r)
            for (int col = 0; col < 5; ++col)
                if (it->second[static_cast<size_t>(r)] & (1 << (4 - col)))
                    for (int sy = 0; sy < scale; ++sy)
                        for (int sx = 0; sx < scale; ++sx)
                            set(y + r * scale + sy, cx + col * scale + sx, c);
        cx += 6 * scale;
    }
}

void Canvas::save(const std::string& path) const { write_png_rgb(path, height, width, rgb); }

namespace {

std::string fmt(double v, int prec = 3) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

}  // namespace

void plot_distributions(const std::string& path, const std::string& title,
                        const std::vector<Series>& series,
                        const std::vector<std::string>& annotations) {
    const int W = 720, H = 480, L = 70, R = 20, T = 46, B = 50;
    Canvas cv(H, W);
    Color axis{0.15f, 0.15f, 0.15f};

    double lo = 1e300, hi = -1e300;
    for (const auto& s : series)
        for (double v : s.samples) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (!(lo < hi)) {
        lo -= 0.5;
        hi += 0.5;
    }
    double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;

    const int bins = 48;
    double peak = 0.0;
    std::vector<std::vector<double>> hists;
    for (const auto& s : series) {
        std::vector<double> hist(bins, 0.0);
        for (double v : s.samples) {
            int b = static_cast<int>((v - lo) / (hi - lo) * bins);
            b = std::min(bins - 1, std::max(0, b));
            hist[static_cast<size_t>(b)] += 1.0 / std::max<size_t>(1, s.samples.size());
        }
        for (double v : hist) peak = std::max(peak, v);
        hists.push_back(std::move(hist));
    }
    if (peak <= 0.0) peak = 1.0;

    auto px = [&](double v) { return L + (v - lo) / (hi - lo) * (W - L - R); };
    auto py = [&](double d) { return H - B - d / peak * (H - T - B); };

    for (size_t si = 0; si < series.size(); ++si) {
        for (int b = 0; b < bins; ++b) {
            double x0 = px(lo + (hi - lo) * b / bins);
            double x1 = px(lo + (hi - lo) * (b + 1) / bins);
            double y = py(hists[si][static_cast<size_t>(b)]);
            cv.fill_rect(static_cast<int>(y), static_cast<int>(x0), H - B,
                         static_cast<int>(x1), series[si].color, 0.35f);
        }
    }

    cv.line(L, H - B, W - R, H - B, axis);
    cv.line(L, T, L, H - B, axis);
    for (int i = 0; i <= 4; ++i) {
        double v = lo + (hi - lo) * i / 4.0;
        int x = static_cast<int>(px(v));
        cv.line(x, H - B, x, H - B + 4, axis);
        cv.text(H - B + 8, x - 20, fmt(v, 2), axis);
    }
    cv.text(12, L, title, axis, 2);
    int ly = T + 4;
    for (const auto& s : series) {
        cv.fill_rect(ly, W - R - 150, ly + 8, W - R - 138, s.color);
        cv.text(ly, W - R - 132, s.label, axis);
        ly += 14;
    }
    for (const auto& a : annotations) {
        cv.text(ly, W - R - 230, a, axis);
        ly += 12;
    }
    cv.save(path);
}

void plot_curves(const std::string& path, const std::string& title, const std::string& xlabel,
                 const std::string& ylabel, const std::vector<CurveSeries>& curves, bool diagonal) {
    const int W = 560, H = 560, L = 64, R = 20, T = 46, B = 54;
    Canvas cv(H, W);
    Color axis{0.15f, 0.15f, 0.15f};
    auto px = [&](double v) { return L + v * (W - L - R); };
    auto py = [&](double v) { return H - B - v * (H - T - B); };

    cv.line(L, H - B, W - R, H - B, axis);
    cv.line(L, T, L, H - B, axis);
    for (int i = 0; i <= 4; ++i) {
        double v = i / 4.0;
        cv.line(px(v), H - B, px(v), H - B + 4, axis);
        cv.text(H - B + 8, static_cast<int>(px(v)) - 10, fmt(v, 2), axis);
        cv.line(L - 4, py(v), L, py(v), axis);
        cv.text(static_cast<int>(py(v)) - 3, 8, fmt(v, 2), axis);
    }
    if (diagonal)
        cv.line(px(0), py(0), px(1), py(1), Color{0.7f, 0.7f, 0.7f});

    for (const auto& c : curves) {
        for (size_t i = 1; i < c.points.size(); ++i)
            cv.line(px(c.points[i - 1].first), py(c.points[i - 1].second), px(c.points[i].first),
                    py(c.points[i].second), c.color);
    }
    cv.text(12, L, title, axis, 2);
    cv.text(H - 18, W / 2 - 3 * static_cast<int>(xlabel.size()), xlabel, axis);
    cv.text(T - 14, 8, ylabel, axis);
    int ly = T + 6;
    for (const auto& c : curves) {
        cv.fill_rect(ly + 3, W - R - 170, ly + 5, W - R - 150, c.color);
        cv.text(ly, W - R - 144, c.label, axis);
        ly += 13;
    }
    cv.save(path);
}

}  // namespace retsyn::plotting
