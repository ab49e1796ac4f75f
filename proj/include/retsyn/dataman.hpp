#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "retsyn/rng.hpp"
#include "retsyn/tensor.hpp"

namespace retsyn::dataman {

enum class Label { POS, NEG, UNKNOWN };
enum class Provenance { REAL, SYNTHETIC };
enum class Split { TRAIN, VAL, TEST };
enum class Sex { MALE, FEMALE };

std::string to_string(Label l);
std::string to_string(Provenance p);
std::string to_string(Split s);
std::string to_string(Sex s);
Label label_from_string(const std::string& s);
Provenance provenance_from_string(const std::string& s);
Split split_from_string(const std::string& s);
Sex sex_from_string(const std::string& s);

// The four modalities the pipeline synthesizes and classifies. The filter is
// not restricted to this set; any tag can appear in a manifest.
const std::vector<std::string>& pipeline_modalities();

// Reserved family sentinel for generated images.
inline constexpr const char* kSyntheticFamily = "SYNTH";

struct ImageRecord {
    std::string path;
    std::string family_id, patient_id, eye_id;
    std::string modality;
    Label label = Label::UNKNOWN;
    Provenance provenance = Provenance::REAL;
};

struct MetadataRecord {
    double age_years = 0.0;
    Sex sex = Sex::MALE;
};

struct SplitAssignment {
    std::map<std::string, Split> by_family;
    // Achieved positive-class fraction per split, over labeled eyes.
    double pos_frac[3] = {0.0, 0.0, 0.0};
    int eyes[3] = {0, 0, 0};

    Split of(const std::string& family_id) const;
    bool contains(const std::string& family_id) const {
        return by_family.count(family_id) > 0;
    }
};

struct DatasetManifest {
    std::vector<ImageRecord> records;
    std::map<std::string, MetadataRecord> metadata;  // keyed by patient_id
    SplitAssignment splits;
};

// ---------------------------------------------------------------------------
// Operations

// Family-level stratified split: no family straddles splits; each split's
// positive fraction lands within `tolerance` of the global fraction when the
// manifest admits it. Deterministic under `seed`.
SplitAssignment make_splits(const DatasetManifest& manifest, double test_frac, double val_frac,
                            uint64_t seed, double tolerance = 0.05);

struct PreprocessConfig {
    int side = 256;
    double bscan_row_threshold = 0.10;  // fraction of max intensity
    double fundus_threshold = 0.10;
    double fundus_zoom = 1.0;  // extra center zoom applied after background crop
};

Image preprocess(const Image& raw, const std::string& modality, const PreprocessConfig& cfg);

struct AugmentConfig {
    double rotate_deg = 5.0;
    double shear_deg = 3.0;
    double brightness = 0.1;
    double contrast = 0.1;
    double zoom = 0.1;
    double translate_frac = 0.05;
};

Image augment(const Image& img, const std::string& modality, const AugmentConfig& cfg, Rng& rng);

std::vector<double> encode_metadata(const MetadataRecord& m);

// ---------------------------------------------------------------------------
// Helpers shared across the pipeline

Image resize_bilinear(const Image& img, int oh, int ow);
bool is_bscan(const std::string& modality);
bool is_fundus(const std::string& modality);

// Replicates a grayscale image into an [C,side,side] block of a NCHW tensor.
void fill_tensor_channels(const Image& img, Tensor& t, int batch_index, int channels);

// ---------------------------------------------------------------------------
// Persistence (line-delimited TSV, fixed field order)

void save_manifest(const std::string& path, const std::vector<ImageRecord>& records);
std::vector<ImageRecord> load_manifest(const std::string& path);
void save_metadata(const std::string& path, const std::map<std::string, MetadataRecord>& meta);
std::map<std::string, MetadataRecord> load_metadata(const std::string& path);
void save_splits(const std::string& path, const SplitAssignment& s);
SplitAssignment load_splits(const std::string& path);

// Invariant checks; raises on violation. `for_classification` additionally
// requires one image per eye per modality.
void validate_manifest(const DatasetManifest& m, bool for_classification, bool check_files);

}  // namespace retsyn::dataman
