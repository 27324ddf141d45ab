#pragma once

#include <string>
#include <vector>

#include "bimamba/ssm.hpp"
#include "bimamba/tensor.hpp"

namespace bimamba::model {

enum class Fusion { InputPatchConcat, ClsTokenConcat, SingleFrontal, SingleLateral };
enum class ResidualMode { Single, LiteralPaper };
enum class NormKind { Rms, Layer };

const char* fusion_name(Fusion f);
Fusion fusion_from_name(const std::string& s);
const char* residual_name(ResidualMode m);
ResidualMode residual_from_name(const std::string& s);
const char* discretization_name(ssm::Discretization d);
ssm::Discretization discretization_from_name(const std::string& s);
const char* norm_name(NormKind n);
NormKind norm_from_name(const std::string& s);
const char* scan_name(ssm::ScanMode m);
ssm::ScanMode scan_from_name(const std::string& s);
const char* dtype_token(Dtype d);
Dtype dtype_from_name(const std::string& s);

struct ModelConfig {
    i64 blocks = 4;        // M
    i64 embed_dim = 64;    // D
    i64 expand_dim = 128;  // E
    i64 state_dim = 8;     // N
    i64 patch = 8;         // P
    i64 height = 64;
    i64 width = 64;
    i64 conv_width = 4;    // K
    Fusion fusion = Fusion::InputPatchConcat;
    ResidualMode residual = ResidualMode::Single;
    ssm::Discretization discretization = ssm::Discretization::Multiplication;
    NormKind norm = NormKind::Rms;
    ssm::ScanMode scan = ssm::ScanMode::Parallel;
    Dtype dtype = Dtype::Float32;

    void validate() const;
    i64 patches_per_view() const { return (height / patch) * (width / patch); }
    bool uses_both_views() const {
        return fusion == Fusion::InputPatchConcat || fusion == Fusion::ClsTokenConcat;
    }
    // Token layout of one encoded sequence. Patch concatenation fuses the two
    // views into a 2J+1 sequence with the class token between them; every
    // other mode encodes J+1 tokens per sequence with a middle class token.
    i64 seq_len() const {
        i64 j = patches_per_view();
        return fusion == Fusion::InputPatchConcat ? 2 * j + 1 : j + 1;
    }
    i64 cls_index() const {
        i64 j = patches_per_view();
        return fusion == Fusion::InputPatchConcat ? j : j / 2;
    }
    i64 delta_rank() const { return std::max<i64>(1, expand_dim / 16); }
    i64 head_input_dim() const {
        return fusion == Fusion::ClsTokenConcat ? 2 * embed_dim : embed_dim;
    }

    std::string serialize() const;  // key=value lines
    static ModelConfig deserialize(const std::string& text);
    bool operator==(const ModelConfig&) const = default;
};

struct BlockParams {
    Tensor norm_gain;  // [D]
    Tensor wx, wz;     // [D, E], shared between directions
    Tensor wt;         // [E, D], shared between directions
    ssm::SsmDirectionParams fwd, bwd;

    static BlockParams init(i64 embed_dim, i64 expand_dim, i64 state_dim, i64 conv_width,
                            i64 delta_rank, u64 seed, Dtype dt);
};

struct NamedParam {
    std::string name;
    Tensor tensor;
    bool decay;  // participates in weight decay
};

struct ModelParams {
    Tensor patch_weight;  // [P*P, D]
    Tensor patch_bias;    // [D]
    Tensor cls;           // [1, D]
    Tensor pos;           // [seq_len, D]
    std::vector<BlockParams> blocks;
    Tensor final_gain;    // [D]
    Tensor head_w1, head_b1;  // [head_in, D], [D]
    Tensor head_w2, head_b2;  // [D, 1], [1]

    static ModelParams init(const ModelConfig& cfg, u64 seed);
    std::vector<NamedParam> named() const;  // deterministic order
    void zero_grads();
    ModelParams clone() const;  // deep copy with fresh gradient state
};

struct TokenSequence {
    Tensor tokens;  // [seq_len, D]
    i64 cls_index = 0;
};

// Row-major patch order, each patch flattened row-major; lossless.
Tensor patchify(const Tensor& image_hw, i64 patch);
Tensor unpatchify(const Tensor& patches, i64 height, i64 width, i64 patch);

Tensor embed_patches(const Tensor& image_hw, const ModelParams& p);

TokenSequence assemble_single_view(const Tensor& patch_emb, const ModelParams& p,
                                   const ModelConfig& cfg);
TokenSequence assemble_multi_view(const Tensor& patch_emb_u, const Tensor& patch_emb_v,
                                  const ModelParams& p, const ModelConfig& cfg);

// What the block itself needs from a full model configuration.
struct BlockSettings {
    NormKind norm = NormKind::Rms;
    ResidualMode residual = ResidualMode::Single;
    ssm::ScanMode scan = ssm::ScanMode::Parallel;
    ssm::Discretization discretization = ssm::Discretization::Multiplication;
    static BlockSettings from(const ModelConfig& cfg) {
        return {cfg.norm, cfg.residual, cfg.scan, cfg.discretization};
    }
};

Tensor bimamba_block(const Tensor& tokens, const BlockParams& bp, const BlockSettings& s);
Tensor encode(const TokenSequence& seq, const ModelParams& p, const ModelConfig& cfg);

struct Prediction {
    Tensor logit;        // [1]
    double probability;  // sigmoid(logit)
};

// Single-view and patch-concatenation paths. `lateral` may be undefined for
// the single-view modes that only consume the frontal image and vice versa.
Prediction model_forward(const Tensor& frontal_hw, const Tensor& lateral_hw,
                         const ModelParams& p, const ModelConfig& cfg);
// Shared-weight twin encoders, class tokens concatenated before the head.
Prediction cls_concat_forward(const Tensor& frontal_hw, const Tensor& lateral_hw,
                              const ModelParams& p, const ModelConfig& cfg);
// Dispatches on cfg.fusion.
Prediction predict(const ModelParams& p, const ModelConfig& cfg, const Tensor& frontal_hw,
                   const Tensor& lateral_hw);

// Binary cross entropy evaluated from the pre-sigmoid logit:
// softplus(logit) - label*logit.
Tensor bce_loss(const Prediction& pred, int label);

// ---- checkpoint io ----------------------------------------------------------
// Layout: magic "BIMB1", u32 config text length, config text, u32 parameter
// count, then per parameter: u32 name length, name, u32 rank, u32 extents,
// float32 little-endian values.

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ModelParams& params);
ModelConfig read_checkpoint_config(const std::string& path);
ModelParams load_checkpoint(const std::string& path, const ModelConfig& expected);

// ---- gradient verification ----------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0;
    i64 coords_checked = 0;
    std::string worst_param;
};

// Compares every parameter gradient of a bce loss against central finite
// differences on a deterministic input pair. Requires float64.
GradCheckReport finite_difference_check(const ModelConfig& cfg, u64 seed,
                                        double step = 1e-4, double atol = 1e-7);

ModelConfig toy_config();

}  // namespace bimamba::model
