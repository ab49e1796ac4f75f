#include "retsyn/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "retsyn/imageio.hpp"

namespace retsyn::phantom {

namespace fs = std::filesystem;
using dataman::Label;

namespace {

void box_blur(Image& img) {
    Image src = img;
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c) {
            double s = 0.0;
            int n = 0;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc) {
                    int rr = r + dr, cc = c + dc;
                    if (rr < 0 || rr >= img.height || cc < 0 || cc >= img.width) continue;
                    s += src.at(rr, cc);
                    ++n;
                }
            img.at(r, c) = static_cast<float>(s / n);
        }
}

void stamp(Image& img, double y, double x, double radius, float value) {
    int r0 = std::max(0, static_cast<int>(y - radius - 1));
    int r1 = std::min(img.height - 1, static_cast<int>(y + radius + 1));
    int c0 = std::max(0, static_cast<int>(x - radius - 1));
    int c1 = std::min(img.width - 1, static_cast<int>(x + radius + 1));
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) {
            double d = std::hypot(r - y, c - x);
            if (d <= radius) img.at(r, c) = value;
        }
}

float smoothstep(double e0, double e1, double v) {
    double t = std::min(1.0, std::max(0.0, (v - e0) / (e1 - e0)));
    return static_cast<float>(t * t * (3.0 - 2.0 * t));
}

Image render_octa(int s, double faz_radius, Rng& rng) {
    Image img(s, s);
    for (auto& v : img.pix) v = static_cast<float>(rng.uniform(0.12, 0.32));
    box_blur(img);

    double cy = (s - 1) / 2.0, cx = (s - 1) / 2.0;
    int n_vessels = 10 + static_cast<int>(rng.uniform_int(5));
    double thick = std::max(0.6, s / 90.0);
    for (int v = 0; v < n_vessels; ++v) {
        double ang = rng.uniform(0.0, 2.0 * M_PI);
        double y = cy + 0.05 * s * std::sin(ang);
        double x = cx + 0.05 * s * std::cos(ang);
        double dir = ang;
        int steps = static_cast<int>(0.55 * s);
        float bright = static_cast<float>(rng.uniform(0.70, 0.95));
        for (int t = 0; t < steps; ++t) {
            dir += rng.uniform(-0.35, 0.35);
            y += std::sin(dir);
            x += std::cos(dir);
            if (y < 1 || y >= s - 1 || x < 1 || x >= s - 1) break;
            stamp(img, y, x, thick, bright);
            // occasional capillary offshoot
            if (rng.bernoulli(0.04)) {
                double bd = dir + rng.uniform(-1.2, 1.2);
                double by = y, bx = x;
                for (int u = 0; u < s / 8; ++u) {
                    bd += rng.uniform(-0.4, 0.4);
                    by += std::sin(bd);
                    bx += std::cos(bd);
                    if (by < 1 || by >= s - 1 || bx < 1 || bx >= s - 1) break;
                    stamp(img, by, bx, thick * 0.7, bright * 0.85f);
                }
            }
        }
    }
    // foveal avascular zone: carve out the center with a smooth edge
    double edge = 0.03 * s;
    for (int r = 0; r < s; ++r)
        for (int c = 0; c < s; ++c) {
            double d = std::hypot(r - cy, c - cx);
            img.at(r, c) *= smoothstep(faz_radius - edge, faz_radius + edge, d);
        }
    return img;
}

Image render_bscan(int s, bool onh, double band_thickness, Rng& rng) {
    Image img(s, s);
    for (auto& v : img.pix) v = static_cast<float>(rng.uniform(0.01, 0.08));

    double base = 0.34 * s;
    double phase = rng.uniform(0.0, 2.0 * M_PI);
    double amp = rng.uniform(0.01, 0.035) * s;
    double dip_depth = onh ? rng.uniform(0.10, 0.16) * s : rng.uniform(0.03, 0.055) * s;
    double dip_width = (onh ? 0.09 : 0.16) * s;
    double cx = (s - 1) / 2.0;
    double body = 0.26 * s;     // distance from surface to the bottom band
    double rpe_thick = 0.045 * s;

    for (int c = 0; c < s; ++c) {
        double undulation = amp * std::sin(2.0 * M_PI * c / s + phase);
        double dip = dip_depth * std::exp(-0.5 * std::pow((c - cx) / dip_width, 2.0));
        double y_top = base + undulation + dip;
        double y_band_end = y_top + band_thickness;
        double y_rpe = y_top + body;
        for (int r = 0; r < s; ++r) {
            float v;
            if (r < y_top) continue;  // vitreous stays background
            if (r < y_band_end) v = static_cast<float>(rng.uniform(0.68, 0.92));
            else if (r < y_rpe) v = static_cast<float>(rng.uniform(0.28, 0.48));
            else if (r < y_rpe + rpe_thick) v = static_cast<float>(rng.uniform(0.75, 0.95));
            else if (r < y_rpe + rpe_thick + 0.06 * s) v = static_cast<float>(rng.uniform(0.10, 0.22));
            else break;  // below the choroid fades back to background
            img.at(r, c) = v;
        }
    }
    box_blur(img);
    return img;
}

Image render_faf(int s, double macula_depth, Rng& rng) {
    Image img(s, s);
    for (auto& v : img.pix) v = static_cast<float>(rng.uniform(0.01, 0.05));
    double cy = (s - 1) / 2.0, cx = (s - 1) / 2.0;
    double field = 0.48 * s;
    double glow = rng.uniform(0.50, 0.62);
    for (int r = 0; r < s; ++r)
        for (int c = 0; c < s; ++c) {
            double d = std::hypot(r - cy, c - cx);
            if (d < field) {
                double falloff = 1.0 - 0.35 * (d / field) * (d / field);
                img.at(r, c) = static_cast<float>(glow * falloff + rng.uniform(-0.03, 0.03));
            }
        }
    // optic disc, nasal side
    double ox = cx + 0.22 * s, oy = cy + rng.uniform(-0.04, 0.04) * s;
    for (int r = 0; r < s; ++r)
        for (int c = 0; c < s; ++c) {
            double d = std::hypot(r - oy, c - ox);
            double rim = 0.065 * s;
            if (d < rim) img.at(r, c) = static_cast<float>(0.85 - 0.25 * d / rim);
        }
    // vessel arcades leaving the disc
    int n_vessels = 6 + static_cast<int>(rng.uniform_int(3));
    for (int v = 0; v < n_vessels; ++v) {
        double dir = M_PI + rng.uniform(-1.1, 1.1);  // towards the temporal side
        double y = oy, x = ox;
        int steps = static_cast<int>(0.5 * s);
        for (int t = 0; t < steps; ++t) {
            dir += rng.uniform(-0.25, 0.25);
            y += std::sin(dir);
            x += std::cos(dir);
            double d = std::hypot(y - cy, x - cx);
            if (d > field - 1 || y < 1 || x < 1 || y >= s - 1 || x >= s - 1) break;
            stamp(img, y, x, std::max(0.5, s / 110.0), 0.22f);
        }
    }
    // macular hypofluorescence carries the class signal
    double mr = 0.11 * s;
    for (int r = 0; r < s; ++r)
        for (int c = 0; c < s; ++c) {
            double d = std::hypot(r - cy, c - cx);
            double g = std::exp(-0.5 * std::pow(d / mr, 2.0));
            img.at(r, c) = static_cast<float>(img.at(r, c) * (1.0 - macula_depth * g));
        }
    box_blur(img);
    return img;
}

}  // namespace

Image render_phantom(const std::string& modality, Label label, const PhantomConfig& cfg,
                     Rng& rng) {
    double pos = (label == Label::POS) ? cfg.class_signal_strength : 0.0;
    int s = cfg.side;
    Image img;
    if (modality == "OCTA-SMAC") {
        double faz = s * (0.06 + 0.14 * pos);
        img = render_octa(s, faz, rng);
    } else if (modality == "OCT-BONH" || modality == "OCT-BMAC") {
        double tb = s * 0.10 * (1.0 - 0.60 * pos);
        img = render_bscan(s, modality == "OCT-BONH", tb, rng);
    } else if (modality == "FAF") {
        double depth = 0.15 + 0.55 * pos;
        img = render_faf(s, depth, rng);
    } else {
        raise("render_phantom: unknown modality style: " + modality);
    }
    for (auto& v : img.pix) v = std::min(1.0f, std::max(0.0f, v));
    return img;
}

dataman::DatasetManifest generate_phantoms(const PhantomConfig& cfg, const std::string& out_dir) {
    if (cfg.side < 32) throw ConfigError("generate_phantoms: side must be >= 32");
    if (cfg.n_families < 4) throw ConfigError("generate_phantoms: need at least 4 families");

    fs::create_directories(fs::path(out_dir) / "images");
    Rng root = Rng::seeded(cfg.seed);

    dataman::DatasetManifest m;
    int eye_counter = 0;
    for (int f = 0; f < cfg.n_families; ++f) {
        std::string fid = "F" + std::to_string(1000 + f);
        int n_patients = (cfg.eyes_per_family + 1) / 2;
        for (int p = 0; p < n_patients; ++p) {
            std::string pid = fid + "P" + std::to_string(p);
            Rng prng = root.derive("patient", static_cast<uint64_t>(f * 8 + p));
            Label lab = prng.bernoulli(cfg.pos_fraction) ? Label::POS : Label::NEG;

            dataman::MetadataRecord meta;
            meta.age_years = prng.uniform(55.0, 88.0);
            if (lab == Label::POS)
                meta.age_years = std::min(110.0, meta.age_years +
                                                     cfg.metadata_age_shift * cfg.class_signal_strength);
            meta.sex = prng.bernoulli(0.5) ? dataman::Sex::FEMALE : dataman::Sex::MALE;
            m.metadata[pid] = meta;

            int eyes_this = std::min(2, cfg.eyes_per_family - p * 2);
            for (int e = 0; e < eyes_this; ++e) {
                std::string eid = "E" + std::to_string(10000 + eye_counter++);
                for (const auto& mod : cfg.modalities) {
                    Rng irng = root.derive("img." + eid + "." + mod);
                    Image img = render_phantom(mod, lab, cfg, irng);
                    std::string fname = eid + "_" + mod + ".png";
                    std::string path = (fs::path(out_dir) / "images" / fname).string();
                    write_png_gray(path, img);
                    dataman::ImageRecord r;
                    r.path = path;
                    r.family_id = fid;
                    r.patient_id = pid;
                    r.eye_id = eid;
                    r.modality = mod;
                    r.label = lab;
                    r.provenance = dataman::Provenance::REAL;
                    m.records.push_back(std::move(r));
                }
            }
        }
    }
    return m;
}

std::vector<uint8_t> signal_region_mask(const std::string& modality, int side) {
    std::vector<uint8_t> mask(static_cast<size_t>(side) * side, 0);
    double cy = (side - 1) / 2.0, cx = (side - 1) / 2.0;
    if (modality == "OCTA-SMAC" || modality == "FAF") {
        double radius = (modality == "FAF" ? 0.15 : 0.22) * side;
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c)
                if (std::hypot(r - cy, c - cx) <= radius)
                    mask[static_cast<size_t>(r) * side + c] = 1;
    } else if (dataman::is_bscan(modality)) {
        int r0 = static_cast<int>(0.30 * side), r1 = static_cast<int>(0.55 * side);
        for (int r = r0; r <= r1; ++r)
            for (int c = 0; c < side; ++c) mask[static_cast<size_t>(r) * side + c] = 1;
    } else {
        raise("signal_region_mask: unknown modality style: " + modality);
    }
    return mask;
}

double signal_region_mean(const Image& img, const std::string& modality) {
    auto mask = signal_region_mask(modality, img.height);
    double s = 0.0;
    int n = 0;
    for (size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) {
            s += img.pix[i];
            ++n;
        }
    return n > 0 ? s / n : 0.0;
}

}  // namespace retsyn::phantom
