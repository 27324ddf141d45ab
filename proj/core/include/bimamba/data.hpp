#pragma once

#include <map>
#include <string>
#include <vector>

#include "bimamba/tensor.hpp"

namespace bimamba::data {

struct Image {
    i64 height = 0;
    i64 width = 0;
    std::vector<float> pixels;  // row major, [0, 1]

    float at(i64 r, i64 c) const {
        return pixels[static_cast<std::size_t>(r * width + c)];
    }
    float& at(i64 r, i64 c) { return pixels[static_cast<std::size_t>(r * width + c)]; }
    static Image filled(i64 h, i64 w, float v) {
        return {h, w, std::vector<float>(static_cast<std::size_t>(h * w), v)};
    }
};

struct Volume {
    i64 dz = 0, dy = 0, dx = 0;
    std::vector<float> voxels;  // [z][y][x]

    float at(i64 z, i64 y, i64 x) const {
        return voxels[static_cast<std::size_t>((z * dy + y) * dx + x)];
    }
    float& at(i64 z, i64 y, i64 x) {
        return voxels[static_cast<std::size_t>((z * dy + y) * dx + x)];
    }
    static Volume filled(i64 dz, i64 dy, i64 dx, float v) {
        return {dz, dy, dx, std::vector<float>(static_cast<std::size_t>(dz * dy * dx), v)};
    }
};

struct LabeledSample {
    Image frontal;
    Image lateral;
    int label = 0;
    std::string subject_id;
};

struct SplitManifest {
    std::vector<std::string> train, val, test;
    double train_fraction = 0.7, val_fraction = 0.1, test_fraction = 0.2;
    // "train", "val", "test" or empty when unknown.
    std::string split_of(const std::string& subject_id) const;
};

struct Dataset {
    std::vector<LabeledSample> samples;
    SplitManifest manifest;
    std::vector<std::size_t> split_indices(const std::string& split) const;
};

// ---- projection ------------------------------------------------------------------

enum class ProjectionAxis { Frontal, Lateral };

// Mean of voxel values along the chosen ray direction, then min-max
// normalized to [0, 1]; a constant projection maps to 0.5.
Image parallel_project(const Volume& volume, ProjectionAxis axis);
// Pre-normalization line integrals, for linearity checks.
Image parallel_project_raw(const Volume& volume, ProjectionAxis axis);

// ---- synthetic two-view dataset ------------------------------------------------------

// The planted signal: view U carries a bright-or-dark blob, view V a vertical
// ramp whose direction only predicts the label jointly with the blob polarity.
// Alone, U is weakly informative and V is uninformative.
struct SynthConfig {
    i64 height = 64;
    i64 width = 64;
    double positive_fraction = 0.3;
    double marginal_strength = 0.4;     // blob polarity vs label correlation
    double interaction_strength = 0.96; // blob*ramp product vs label correlation
    double blob_amplitude = 0.18;
    double ramp_amplitude = 0.12;
    double noise_sigma = 0.03;
};

Dataset synth_dataset(u64 seed, i64 n_subjects, const SynthConfig& cfg = {});

// ---- augmentation -------------------------------------------------------------------

struct CropSpec {
    i64 top = 0, left = 0, height = 0, width = 0;
};

Image crop_resize(const Image& img, const CropSpec& crop, i64 out_h, i64 out_w);
Image hflip(const Image& img);

// Random crop (area in [0.7, 1.0], aspect ratio in [0.75, 1.3]) resized back
// to the source extent, plus one coin-flip horizontal flip shared by both
// views. Labels and pairing are never touched.
LabeledSample augment(const LabeledSample& sample, Rng& rng);
LabeledSample augment_with(const LabeledSample& sample, const CropSpec& crop_u,
                           const CropSpec& crop_v, bool flip);

// ---- file formats ----------------------------------------------------------------

// 16-bit binary PGM (P5, maxval 65535, most significant byte first).
void write_pgm16(const std::string& path, const Image& img);
Image read_pgm16(const std::string& path);

// "RAWV": magic, three little-endian u32 extents (dz, dy, dx), then float32
// voxels in z-major order.
void write_rawv(const std::string& path, const Volume& volume);
Volume read_rawv(const std::string& path);

// One line per subject: "subject_id<TAB>split<TAB>label".
void write_manifest(const std::string& path, const Dataset& dataset);

// ---- dataset directory ---------------------------------------------------------------

// <id>_frontal.pgm, <id>_lateral.pgm per subject plus manifest.tsv.
void write_dataset_dir(const std::string& dir, const Dataset& dataset);
Dataset load_dataset_dir(const std::string& dir);

Tensor image_to_tensor(const Image& img, Dtype dt);

}  // namespace bimamba::data
