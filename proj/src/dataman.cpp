#include "retsyn/dataman.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace retsyn::dataman {

namespace fs = std::filesystem;

std::string to_string(Label l) {
    switch (l) {
        case Label::POS: return "POS";
        case Label::NEG: return "NEG";
        default: return "UNKNOWN";
    }
}
std::string to_string(Provenance p) { return p == Provenance::REAL ? "REAL" : "SYNTHETIC"; }
std::string to_string(Split s) {
    switch (s) {
        case Split::TRAIN: return "TRAIN";
        case Split::VAL: return "VAL";
        default: return "TEST";
    }
}
std::string to_string(Sex s) { return s == Sex::MALE ? "MALE" : "FEMALE"; }

Label label_from_string(const std::string& s) {
    if (s == "POS") return Label::POS;
    if (s == "NEG") return Label::NEG;
    if (s == "UNKNOWN") return Label::UNKNOWN;
    raise("bad label: " + s);
    return Label::UNKNOWN;
}
Provenance provenance_from_string(const std::string& s) {
    if (s == "REAL") return Provenance::REAL;
    if (s == "SYNTHETIC") return Provenance::SYNTHETIC;
    raise("bad provenance: " + s);
    return Provenance::REAL;
}
Split split_from_string(const std::string& s) {
    if (s == "TRAIN") return Split::TRAIN;
    if (s == "VAL") return Split::VAL;
    if (s == "TEST") return Split::TEST;
    raise("bad split: " + s);
    return Split::TRAIN;
}
Sex sex_from_string(const std::string& s) {
    if (s == "MALE") return Sex::MALE;
    if (s == "FEMALE") return Sex::FEMALE;
    raise("bad sex: " + s);
    return Sex::MALE;
}

const std::vector<std::string>& pipeline_modalities() {
    static const std::vector<std::string> v = {"OCTA-SMAC", "OCT-BONH", "OCT-BMAC", "FAF"};
    return v;
}

bool is_bscan(const std::string& modality) { return modality.rfind("OCT-B", 0) == 0; }
bool is_fundus(const std::string& modality) {
    return modality == "FAF" || modality == "FRG" || modality == "COL";
}

Split SplitAssignment::of(const std::string& family_id) const {
    auto it = by_family.find(family_id);
    if (it == by_family.end()) raise("family not in split assignment: " + family_id);
    return it->second;
}

// ---------------------------------------------------------------------------
// make_splits

namespace {

struct FamilyStats {
    std::string id;
    int eyes = 0;
    int labeled = 0;
    int positives = 0;
};

double frac(int num, int den) { return den > 0 ? static_cast<double>(num) / den : 0.0; }

struct SplitState {
    // per split: eyes, labeled, positives
    int eyes[3] = {0, 0, 0};
    int labeled[3] = {0, 0, 0};
    int pos[3] = {0, 0, 0};

    void add(const FamilyStats& f, int s) {
        eyes[s] += f.eyes;
        labeled[s] += f.labeled;
        pos[s] += f.positives;
    }
    void remove(const FamilyStats& f, int s) {
        eyes[s] -= f.eyes;
        labeled[s] -= f.labeled;
        pos[s] -= f.positives;
    }
};

// Penalty: stratification deviation beyond tolerance dominates; size
// deviation from the target eye counts is a softer term.
double objective(const SplitState& st, double global_pos, double tolerance, int target_test,
                 int target_val) {
    double obj = 0.0;
    for (int s = 0; s < 3; ++s) {
        double dev = std::abs(frac(st.pos[s], st.labeled[s]) - global_pos);
        if (st.labeled[s] == 0) dev = global_pos;  // a split with no labeled eyes is maximally off
        obj += 100.0 * std::max(0.0, dev - tolerance) + dev;
    }
    obj += 2.0 * std::abs(st.eyes[2] - target_test) / std::max(1.0, static_cast<double>(target_test));
    obj += 2.0 * std::abs(st.eyes[1] - target_val) / std::max(1.0, static_cast<double>(target_val));
    return obj;
}

}  // namespace

SplitAssignment make_splits(const DatasetManifest& manifest, double test_frac, double val_frac,
                            uint64_t seed, double tolerance) {
    if (!(test_frac > 0.0 && test_frac < 1.0) || !(val_frac > 0.0 && val_frac < 1.0))
        throw ConfigError("make_splits: fractions must lie in (0,1)");

    // Collect family-level eye statistics (real records only; the synthetic
    // sentinel never takes part in splitting).
    std::map<std::string, std::map<std::string, Label>> fam_eyes;  // family -> eye -> label
    for (const auto& r : manifest.records) {
        if (r.provenance == Provenance::SYNTHETIC) continue;
        if (r.family_id.empty()) raise("make_splits: record without family_id: " + r.eye_id);
        fam_eyes[r.family_id][r.eye_id] = r.label;
    }
    if (fam_eyes.size() < 3) raise("make_splits: need at least 3 families");

    std::vector<FamilyStats> fams;
    int total_eyes = 0, total_labeled = 0, total_pos = 0;
    for (const auto& [fid, eyes] : fam_eyes) {
        FamilyStats f;
        f.id = fid;
        f.eyes = static_cast<int>(eyes.size());
        for (const auto& [eid, lab] : eyes) {
            (void)eid;
            if (lab != Label::UNKNOWN) {
                ++f.labeled;
                if (lab == Label::POS) ++f.positives;
            }
        }
        total_eyes += f.eyes;
        total_labeled += f.labeled;
        total_pos += f.positives;
        fams.push_back(std::move(f));
    }
    double global_pos = frac(total_pos, total_labeled);

    // Quick infeasibility certificate: every split needs positives when the
    // global fraction exceeds the tolerance, so at least 3 families must
    // carry them.
    if (global_pos > tolerance) {
        int fam_with_pos = 0;
        const FamilyStats* biggest = nullptr;
        for (const auto& f : fams) {
            if (f.positives > 0) {
                ++fam_with_pos;
                if (!biggest || f.positives > biggest->positives) biggest = &f;
            }
        }
        if (fam_with_pos < 3 && biggest) {
            raise("make_splits: stratification infeasible, blocking family: " + biggest->id);
        }
    }

    int target_test = static_cast<int>(std::lround(test_frac * total_eyes));
    int target_val = static_cast<int>(std::lround(val_frac * (total_eyes - target_test)));

    Rng root = Rng::seeded(seed);
    std::vector<int> best_assign;
    double best_obj = 1e30;

    for (int restart = 0; restart < 5; ++restart) {
        Rng rng = root.derive("splits.restart", static_cast<uint64_t>(restart));
        std::vector<size_t> order(fams.size());
        std::iota(order.begin(), order.end(), size_t{0});
        rng.shuffle(order);

        // TRAIN=0, VAL=1, TEST=2
        std::vector<int> assign(fams.size(), 0);
        SplitState st;
        int filled = 0;
        for (size_t k = 0; k < order.size(); ++k) {
            size_t i = order[k];
            int s;
            if (filled + fams[i].eyes <= target_test || st.eyes[2] == 0) s = 2;
            else s = 0;
            if (s == 2 && st.eyes[2] >= target_test) s = 0;
            assign[i] = s;
            st.add(fams[i], s);
            if (s == 2) filled += fams[i].eyes;
        }
        // carve VAL out of TRAIN
        for (size_t k = 0; k < order.size() && st.eyes[1] < target_val; ++k) {
            size_t i = order[k];
            if (assign[i] != 0) continue;
            st.remove(fams[i], 0);
            st.add(fams[i], 1);
            assign[i] = 1;
        }

        double obj = objective(st, global_pos, tolerance, target_test, target_val);
        // Hill climbing over single-family moves and pair swaps.
        int iters = 4000 + static_cast<int>(fams.size()) * 40;
        for (int it = 0; it < iters && obj > 1e-9; ++it) {
            if (rng.bernoulli(0.5)) {
                size_t i = static_cast<size_t>(rng.uniform_int(fams.size()));
                int s_new = static_cast<int>(rng.uniform_int(3));
                if (s_new == assign[i]) continue;
                SplitState trial = st;
                trial.remove(fams[i], assign[i]);
                trial.add(fams[i], s_new);
                double o = objective(trial, global_pos, tolerance, target_test, target_val);
                if (o < obj) {
                    obj = o;
                    st = trial;
                    assign[i] = s_new;
                }
            } else {
                size_t i = static_cast<size_t>(rng.uniform_int(fams.size()));
                size_t j = static_cast<size_t>(rng.uniform_int(fams.size()));
                if (assign[i] == assign[j]) continue;
                SplitState trial = st;
                trial.remove(fams[i], assign[i]);
                trial.remove(fams[j], assign[j]);
                trial.add(fams[i], assign[j]);
                trial.add(fams[j], assign[i]);
                double o = objective(trial, global_pos, tolerance, target_test, target_val);
                if (o < obj) {
                    obj = o;
                    st = trial;
                    std::swap(assign[i], assign[j]);
                }
            }
        }
        if (obj < best_obj) {
            best_obj = obj;
            best_assign = assign;
        }
    }

    SplitAssignment out;
    SplitState st;
    for (size_t i = 0; i < fams.size(); ++i) {
        st.add(fams[i], best_assign[i]);
        out.by_family[fams[i].id] = static_cast<Split>(best_assign[i]);
    }
    for (int s = 0; s < 3; ++s) {
        out.pos_frac[s] = frac(st.pos[s], st.labeled[s]);
        out.eyes[s] = st.eyes[s];
    }

    // Report hard infeasibility when even the best assignment badly violates
    // stratification (a certificate-level failure such as one family holding
    // nearly all positives).
    for (int s = 0; s < 3; ++s) {
        double dev = std::abs(out.pos_frac[s] - global_pos);
        if (st.labeled[s] > 0 && dev > std::max(2.5 * tolerance, 0.5 * global_pos) &&
            total_pos > 0) {
            const FamilyStats* biggest = &fams[0];
            for (const auto& f : fams)
                if (f.positives > biggest->positives) biggest = &f;
            raise("make_splits: stratification infeasible, blocking family: " + biggest->id);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// preprocess / augment

Image resize_bilinear(const Image& img, int oh, int ow) {
    if (img.height == oh && img.width == ow) return img;
    Image out(oh, ow);
    double sy = static_cast<double>(img.height) / oh;
    double sx = static_cast<double>(img.width) / ow;
    for (int r = 0; r < oh; ++r) {
        double fy = (r + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        int y1 = std::min(img.height - 1, std::max(0, y0 + 1));
        y0 = std::min(img.height - 1, std::max(0, y0));
        for (int c = 0; c < ow; ++c) {
            double fx = (c + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx = fx - x0;
            int x1 = std::min(img.width - 1, std::max(0, x0 + 1));
            x0 = std::min(img.width - 1, std::max(0, x0));
            double top = img.at(y0, x0) * (1.0 - wx) + img.at(y0, x1) * wx;
            double bot = img.at(y1, x0) * (1.0 - wx) + img.at(y1, x1) * wx;
            out.at(r, c) = static_cast<float>(top * (1.0 - wy) + bot * wy);
        }
    }
    return out;
}

namespace {

Image crop(const Image& img, int r0, int r1, int c0, int c1) {
    Image out(r1 - r0 + 1, c1 - c0 + 1);
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) out.at(r - r0, c - c0) = img.at(r, c);
    return out;
}

float max_pixel(const Image& img) {
    float m = 0.0f;
    for (float v : img.pix) m = std::max(m, v);
    return m;
}

Image crop_bscan(const Image& img, double threshold_frac) {
    float thresh = static_cast<float>(threshold_frac) * max_pixel(img);
    int first = -1, last = -1;
    for (int r = 0; r < img.height; ++r) {
        double mean = 0.0;
        for (int c = 0; c < img.width; ++c) mean += img.at(r, c);
        mean /= img.width;
        if (mean >= thresh) {
            if (first < 0) first = r;
            last = r;
        }
    }
    if (first < 0) raise("preprocess: blank B-scan, no rows above threshold");
    return crop(img, first, last, 0, img.width - 1);
}

Image crop_fundus(const Image& img, double threshold_frac, double zoom) {
    float thresh = static_cast<float>(threshold_frac) * max_pixel(img);
    int r0 = img.height, r1 = -1, c0 = img.width, c1 = -1;
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c)
            if (img.at(r, c) >= thresh) {
                r0 = std::min(r0, r);
                r1 = std::max(r1, r);
                c0 = std::min(c0, c);
                c1 = std::max(c1, c);
            }
    if (r1 < 0) raise("preprocess: blank fundus image");
    Image boxed = crop(img, r0, r1, c0, c1);
    if (zoom > 1.0) {
        int h = boxed.height, w = boxed.width;
        int nh = std::max(1, static_cast<int>(std::lround(h / zoom)));
        int nw = std::max(1, static_cast<int>(std::lround(w / zoom)));
        int rr = (h - nh) / 2, cc = (w - nw) / 2;
        boxed = crop(boxed, rr, rr + nh - 1, cc, cc + nw - 1);
    }
    return boxed;
}

}  // namespace

Image preprocess(const Image& raw, const std::string& modality, const PreprocessConfig& cfg) {
    if (raw.height == 0 || raw.width == 0) raise("preprocess: empty image");
    for (float v : raw.pix)
        if (!std::isfinite(v)) throw NumericalError("preprocess: non-finite pixel value");

    Image content = raw;
    if (is_bscan(modality)) {
        content = crop_bscan(raw, cfg.bscan_row_threshold);
    } else if (is_fundus(modality)) {
        content = crop_fundus(raw, cfg.fundus_threshold, cfg.fundus_zoom);
    }
    Image out = resize_bilinear(content, cfg.side, cfg.side);
    for (auto& v : out.pix) v = std::min(1.0f, std::max(0.0f, v));
    return out;
}

Image augment(const Image& img, const std::string& modality, const AugmentConfig& cfg, Rng& rng) {
    // Draw every factor in a fixed order so the stream is identical whatever
    // the modality; B-scan zoom is then overridden, matching a zero-zoom
    // configuration exactly.
    double rot = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg) * M_PI / 180.0;
    double shear = rng.uniform(-cfg.shear_deg, cfg.shear_deg) * M_PI / 180.0;
    double zoom = 1.0 + rng.uniform(-cfg.zoom, cfg.zoom);
    double tx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * img.width;
    double ty = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * img.height;
    double bright = rng.uniform(-cfg.brightness, cfg.brightness);
    double contrast = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast);
    if (is_bscan(modality)) zoom = 1.0;

    bool identity_affine = rot == 0.0 && shear == 0.0 && zoom == 1.0 && tx == 0.0 && ty == 0.0;
    Image out = img;
    if (!identity_affine) {
        // inverse map: destination -> source, about the image center
        double cosr = std::cos(rot), sinr = std::sin(rot);
        double cy = (img.height - 1) / 2.0, cx = (img.width - 1) / 2.0;
        // forward: scale(zoom) * shear * rot, then translate; invert analytically
        double a = zoom * cosr, b = zoom * (sinr + shear * cosr);
        double c = -zoom * sinr, d = zoom * (cosr - shear * sinr);
        double det = a * d - b * c;
        if (std::abs(det) < 1e-9) det = det < 0 ? -1e-9 : 1e-9;
        double ia = d / det, ib = -b / det, ic = -c / det, id = a / det;
        out = Image(img.height, img.width);
        for (int r = 0; r < img.height; ++r)
            for (int cc = 0; cc < img.width; ++cc) {
                double dy = r - cy - ty, dx = cc - cx - tx;
                double sxf = ia * dx + ib * dy + cx;
                double syf = ic * dx + id * dy + cy;
                int x0 = static_cast<int>(std::floor(sxf)), y0 = static_cast<int>(std::floor(syf));
                double wx = sxf - x0, wy = syf - y0;
                auto sample = [&](int yy, int xx) -> double {
                    if (yy < 0 || yy >= img.height || xx < 0 || xx >= img.width) return 0.0;
                    return img.at(yy, xx);
                };
                double top = sample(y0, x0) * (1 - wx) + sample(y0, x0 + 1) * wx;
                double bot = sample(y0 + 1, x0) * (1 - wx) + sample(y0 + 1, x0 + 1) * wx;
                out.at(r, cc) = static_cast<float>(top * (1 - wy) + bot * wy);
            }
    }
    if (contrast != 1.0) {
        double mean = std::accumulate(out.pix.begin(), out.pix.end(), 0.0) / out.numel();
        for (auto& v : out.pix) v = static_cast<float>((v - mean) * contrast + mean);
    }
    if (bright != 0.0)
        for (auto& v : out.pix) v = static_cast<float>(v + bright);
    if (contrast != 1.0 || bright != 0.0)
        for (auto& v : out.pix) v = std::min(1.0f, std::max(0.0f, v));
    return out;
}

std::vector<double> encode_metadata(const MetadataRecord& m) {
    if (m.age_years < 0.0 || m.age_years > 130.0)
        raise("encode_metadata: age out of range [0,130]");
    return {m.age_years * 0.01, m.sex == Sex::FEMALE ? 1.0 : 0.0};
}

void fill_tensor_channels(const Image& img, Tensor& t, int batch_index, int channels) {
    int H = t.h(), W = t.w();
    if (img.height != H || img.width != W) raise("fill_tensor_channels: size mismatch");
    for (int c = 0; c < channels; ++c) {
        float* dst = t.ptr() + ((static_cast<size_t>(batch_index) * t.c() + c) * H) * W;
        std::copy(img.pix.begin(), img.pix.end(), dst);
    }
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

std::vector<std::string> split_tsv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == '\t') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

void save_manifest(const std::string& path, const std::vector<ImageRecord>& records) {
    std::ofstream f(path);
    if (!f) raise("cannot write manifest: " + path);
    for (const auto& r : records) {
        f << r.path << '\t' << r.family_id << '\t' << r.patient_id << '\t' << r.eye_id << '\t'
          << r.modality << '\t' << to_string(r.label) << '\t' << to_string(r.provenance) << '\n';
    }
}

std::vector<ImageRecord> load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw MissingArtifactError("manifest not found: " + path);
    std::vector<ImageRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto fields = split_tsv(line);
        if (fields.size() != 7) raise("manifest line must have 7 fields: " + line);
        ImageRecord r;
        r.path = fields[0];
        r.family_id = fields[1];
        r.patient_id = fields[2];
        r.eye_id = fields[3];
        r.modality = fields[4];
        r.label = label_from_string(fields[5]);
        r.provenance = provenance_from_string(fields[6]);
        out.push_back(std::move(r));
    }
    return out;
}

void save_metadata(const std::string& path, const std::map<std::string, MetadataRecord>& meta) {
    std::ofstream f(path);
    if (!f) raise("cannot write metadata: " + path);
    for (const auto& [pid, m] : meta)
        f << pid << '\t' << m.age_years << '\t' << to_string(m.sex) << '\n';
}

std::map<std::string, MetadataRecord> load_metadata(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw MissingArtifactError("metadata not found: " + path);
    std::map<std::string, MetadataRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto fields = split_tsv(line);
        if (fields.size() != 3) raise("metadata line must have 3 fields: " + line);
        out[fields[0]] = {std::stod(fields[1]), sex_from_string(fields[2])};
    }
    return out;
}

void save_splits(const std::string& path, const SplitAssignment& s) {
    std::ofstream f(path);
    if (!f) raise("cannot write splits: " + path);
    for (const auto& [fid, sp] : s.by_family) f << fid << '\t' << to_string(sp) << '\n';
}

SplitAssignment load_splits(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw MissingArtifactError("splits not found: " + path);
    SplitAssignment out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto fields = split_tsv(line);
        if (fields.size() != 2) raise("split line must have 2 fields: " + line);
        out.by_family[fields[0]] = split_from_string(fields[1]);
    }
    return out;
}

void validate_manifest(const DatasetManifest& m, bool for_classification, bool check_files) {
    std::map<std::string, std::string> eye_to_patient, patient_to_family;
    std::set<std::string> eye_modality;
    for (const auto& r : m.records) {
        if (r.provenance == Provenance::SYNTHETIC) {
            if (r.family_id != kSyntheticFamily)
                raise("synthetic record must use the reserved family sentinel: " + r.eye_id);
            if (r.label == Label::UNKNOWN)
                raise("synthetic record must carry a known label: " + r.eye_id);
        }
        auto [it, fresh] = eye_to_patient.emplace(r.eye_id, r.patient_id);
        if (!fresh && it->second != r.patient_id)
            raise("eye maps to two patients: " + r.eye_id);
        auto [it2, fresh2] = patient_to_family.emplace(r.patient_id, r.family_id);
        if (!fresh2 && it2->second != r.family_id)
            raise("patient maps to two families: " + r.patient_id);
        if (for_classification && r.provenance == Provenance::REAL) {
            std::string key = r.eye_id + "|" + r.modality;
            if (!eye_modality.insert(key).second)
                raise("duplicate image for eye/modality in classification manifest: " + key);
        }
        if (check_files && !fs::exists(r.path)) raise("referenced file missing: " + r.path);
    }
}

}  // namespace retsyn::dataman
