#pragma once

#include <string>
#include <vector>

#include "retsyn/dataman.hpp"

namespace retsyn::phantom {

// Procedural stand-in data: four visually distinct modality styles with a
// class-dependent perturbation localized near the image center, scaled by
// class_signal_strength. At strength 0 the POS and NEG renderers draw from
// the same distribution.
struct PhantomConfig {
    int side = 64;
    std::vector<std::string> modalities = dataman::pipeline_modalities();
    double class_signal_strength = 1.0;
    int n_families = 40;
    int eyes_per_family = 2;
    double pos_fraction = 0.4;
    uint64_t seed = 7;
    double metadata_age_shift = 6.0;  // years, scaled by signal strength for POS
};

// Renders one phantom image (rng drives texture; the label only moves
// continuous style parameters so the draw sequence is label-independent).
Image render_phantom(const std::string& modality, dataman::Label label,
                     const PhantomConfig& cfg, Rng& rng);

// Writes images under <out_dir>/images and returns a manifest satisfying the
// dataset invariants (one image per eye per modality, family structure,
// per-patient metadata).
dataman::DatasetManifest generate_phantoms(const PhantomConfig& cfg, const std::string& out_dir);

// Region carrying the class signal, as a boolean mask; used by probes and
// attribution checks.
std::vector<uint8_t> signal_region_mask(const std::string& modality, int side);

// Mean intensity inside the signal region.
double signal_region_mean(const Image& img, const std::string& modality);

}  // namespace retsyn::phantom
