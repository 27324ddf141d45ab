#include "bimamba/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace bimamba::model {

// ---- enum names ---------------------------------------------------------------

const char* fusion_name(Fusion f) {
    switch (f) {
        case Fusion::InputPatchConcat: return "input_patch_concat";
        case Fusion::ClsTokenConcat: return "cls_token_concat";
        case Fusion::SingleFrontal: return "single_frontal";
        default: return "single_lateral";
    }
}
Fusion fusion_from_name(const std::string& s) {
    if (s == "input_patch_concat") return Fusion::InputPatchConcat;
    if (s == "cls_token_concat") return Fusion::ClsTokenConcat;
    if (s == "single_frontal") return Fusion::SingleFrontal;
    if (s == "single_lateral") return Fusion::SingleLateral;
    throw ContractError("unknown fusion '" + s + "'");
}
const char* residual_name(ResidualMode m) {
    return m == ResidualMode::Single ? "single" : "literal_paper";
}
ResidualMode residual_from_name(const std::string& s) {
    if (s == "single") return ResidualMode::Single;
    if (s == "literal_paper") return ResidualMode::LiteralPaper;
    throw ContractError("unknown residual_mode '" + s + "'");
}
const char* discretization_name(ssm::Discretization d) {
    return d == ssm::Discretization::Multiplication ? "multiplication" : "exponential";
}
ssm::Discretization discretization_from_name(const std::string& s) {
    if (s == "multiplication") return ssm::Discretization::Multiplication;
    if (s == "exponential") return ssm::Discretization::Exponential;
    throw ContractError("unknown discretization '" + s + "'");
}
const char* norm_name(NormKind n) { return n == NormKind::Rms ? "rms" : "layer"; }
NormKind norm_from_name(const std::string& s) {
    if (s == "rms") return NormKind::Rms;
    if (s == "layer") return NormKind::Layer;
    throw ContractError("unknown norm '" + s + "'");
}
const char* scan_name(ssm::ScanMode m) {
    return m == ssm::ScanMode::Parallel ? "parallel" : "sequential";
}
ssm::ScanMode scan_from_name(const std::string& s) {
    if (s == "parallel") return ssm::ScanMode::Parallel;
    if (s == "sequential") return ssm::ScanMode::Sequential;
    throw ContractError("unknown scan mode '" + s + "'");
}
const char* dtype_token(Dtype d) { return d == Dtype::Float32 ? "float32" : "float64"; }
Dtype dtype_from_name(const std::string& s) {
    if (s == "float32") return Dtype::Float32;
    if (s == "float64") return Dtype::Float64;
    throw ContractError("unknown dtype '" + s + "'");
}

// ---- config ----------------------------------------------------------------------

void ModelConfig::validate() const {
    if (blocks < 1 || embed_dim < 1 || expand_dim < 1 || state_dim < 1 || patch < 1 ||
        conv_width < 1)
        throw ContractError("model config: dimensions must be positive");
    if (height < patch || width < patch)
        throw ShapeError("model config: image smaller than one patch");
    if (height % patch != 0 || width % patch != 0)
        throw ShapeError("model config: image size " + std::to_string(height) + "x" +
                         std::to_string(width) + " not divisible by patch " +
                         std::to_string(patch));
    if (expand_dim <= embed_dim)
        throw ContractError("model config: expand_dim must exceed embed_dim");
}

std::string ModelConfig::serialize() const {
    std::ostringstream os;
    os << "blocks=" << blocks << "\nembed_dim=" << embed_dim
       << "\nexpand_dim=" << expand_dim << "\nstate_dim=" << state_dim
       << "\npatch=" << patch << "\nheight=" << height << "\nwidth=" << width
       << "\nconv_width=" << conv_width << "\nfusion=" << fusion_name(fusion)
       << "\nresidual_mode=" << residual_name(residual)
       << "\ndiscretization=" << discretization_name(discretization)
       << "\nnorm=" << norm_name(norm) << "\nscan=" << scan_name(scan)
       << "\ndtype=" << dtype_token(dtype) << "\n";
    return os.str();
}

ModelConfig ModelConfig::deserialize(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError("model config: missing '=' in line '" + line + "'", 0);
        std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        if (key == "blocks") cfg.blocks = std::stoll(value);
        else if (key == "embed_dim") cfg.embed_dim = std::stoll(value);
        else if (key == "expand_dim") cfg.expand_dim = std::stoll(value);
        else if (key == "state_dim") cfg.state_dim = std::stoll(value);
        else if (key == "patch") cfg.patch = std::stoll(value);
        else if (key == "height") cfg.height = std::stoll(value);
        else if (key == "width") cfg.width = std::stoll(value);
        else if (key == "conv_width") cfg.conv_width = std::stoll(value);
        else if (key == "fusion") cfg.fusion = fusion_from_name(value);
        else if (key == "residual_mode") cfg.residual = residual_from_name(value);
        else if (key == "discretization") cfg.discretization = discretization_from_name(value);
        else if (key == "norm") cfg.norm = norm_from_name(value);
        else if (key == "scan") cfg.scan = scan_from_name(value);
        else if (key == "dtype") cfg.dtype = dtype_from_name(value);
        else throw ParseError("model config: unknown key '" + key + "'", 0);
    }
    return cfg;
}

// ---- parameters --------------------------------------------------------------------

BlockParams BlockParams::init(i64 embed_dim, i64 expand_dim, i64 state_dim, i64 conv_width,
                              i64 delta_rank, u64 seed, Dtype dt) {
    BlockParams bp;
    double sd = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    double se = 1.0 / std::sqrt(static_cast<double>(expand_dim));
    bp.norm_gain = Tensor::ones({embed_dim}, dt, true);
    bp.wx = Tensor::uniform({embed_dim, expand_dim}, mix_seed(seed, 11), -sd, sd, dt, true);
    bp.wz = Tensor::uniform({embed_dim, expand_dim}, mix_seed(seed, 12), -sd, sd, dt, true);
    bp.wt = Tensor::uniform({expand_dim, embed_dim}, mix_seed(seed, 13), -se, se, dt, true);
    bp.fwd = ssm::SsmDirectionParams::init(expand_dim, state_dim, conv_width, delta_rank,
                                           ssm::Direction::Forward, mix_seed(seed, 14), dt);
    bp.bwd = ssm::SsmDirectionParams::init(expand_dim, state_dim, conv_width, delta_rank,
                                           ssm::Direction::Backward, mix_seed(seed, 15), dt);
    return bp;
}

ModelParams ModelParams::init(const ModelConfig& cfg, u64 seed) {
    cfg.validate();
    ModelParams p;
    Dtype dt = cfg.dtype;
    i64 pp = cfg.patch * cfg.patch;
    double sp = 1.0 / std::sqrt(static_cast<double>(pp));
    p.patch_weight = Tensor::uniform({pp, cfg.embed_dim}, mix_seed(seed, 1), -sp, sp, dt, true);
    p.patch_bias = Tensor::uniform({cfg.embed_dim}, mix_seed(seed, 2), -sp, sp, dt, true);
    p.cls = Tensor::normal({1, cfg.embed_dim}, mix_seed(seed, 3), 0.0, 0.02, dt, true);
    p.pos = Tensor::normal({cfg.seq_len(), cfg.embed_dim}, mix_seed(seed, 4), 0.0, 0.02, dt, true);
    for (i64 b = 0; b < cfg.blocks; ++b)
        p.blocks.push_back(BlockParams::init(cfg.embed_dim, cfg.expand_dim, cfg.state_dim,
                                             cfg.conv_width, cfg.delta_rank(),
                                             mix_seed(seed, 100 + b), dt));
    p.final_gain = Tensor::ones({cfg.embed_dim}, dt, true);
    i64 hin = cfg.head_input_dim();
    double sh = 1.0 / std::sqrt(static_cast<double>(hin));
    double sd = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
    p.head_w1 = Tensor::uniform({hin, cfg.embed_dim}, mix_seed(seed, 5), -sh, sh, dt, true);
    p.head_b1 = Tensor::uniform({cfg.embed_dim}, mix_seed(seed, 6), -sh, sh, dt, true);
    p.head_w2 = Tensor::uniform({cfg.embed_dim, 1}, mix_seed(seed, 7), -sd, sd, dt, true);
    p.head_b2 = Tensor::uniform({1}, mix_seed(seed, 8), -sd, sd, dt, true);
    return p;
}

std::vector<NamedParam> ModelParams::named() const {
    std::vector<NamedParam> out;
    out.push_back({"patch.weight", patch_weight, true});
    out.push_back({"patch.bias", patch_bias, false});
    out.push_back({"cls", cls, false});
    out.push_back({"pos", pos, false});
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        std::string pre = "block" + std::to_string(b) + ".";
        const BlockParams& bp = blocks[b];
        out.push_back({pre + "norm_gain", bp.norm_gain, false});
        out.push_back({pre + "wx", bp.wx, true});
        out.push_back({pre + "wz", bp.wz, true});
        out.push_back({pre + "wt", bp.wt, true});
        for (int d = 0; d < 2; ++d) {
            const ssm::SsmDirectionParams& sp = d == 0 ? bp.fwd : bp.bwd;
            std::string dp = pre + (d == 0 ? "fwd." : "bwd.");
            out.push_back({dp + "a_log", sp.a_log, false});
            out.push_back({dp + "delta_low", sp.delta_low, true});
            out.push_back({dp + "delta_up", sp.delta_up, true});
            out.push_back({dp + "delta_bias", sp.delta_bias, false});
            out.push_back({dp + "b_weight", sp.b_weight, true});
            out.push_back({dp + "c_weight", sp.c_weight, true});
            out.push_back({dp + "conv_kernel", sp.conv_kernel, true});
            out.push_back({dp + "conv_bias", sp.conv_bias, false});
        }
    }
    out.push_back({"final_gain", final_gain, false});
    out.push_back({"head.w1", head_w1, true});
    out.push_back({"head.b1", head_b1, false});
    out.push_back({"head.w2", head_w2, true});
    out.push_back({"head.b2", head_b2, false});
    return out;
}

void ModelParams::zero_grads() {
    for (auto& np : named()) np.tensor.zero_grad();
}

static Tensor copy_leaf(const Tensor& t) {
    return Tensor::from_values(t.shape(), t.to_vector(), t.dtype(), true);
}

static ssm::SsmDirectionParams copy_direction(const ssm::SsmDirectionParams& p) {
    ssm::SsmDirectionParams out;
    out.a_log = copy_leaf(p.a_log);
    out.delta_low = copy_leaf(p.delta_low);
    out.delta_up = copy_leaf(p.delta_up);
    out.delta_bias = copy_leaf(p.delta_bias);
    out.b_weight = copy_leaf(p.b_weight);
    out.c_weight = copy_leaf(p.c_weight);
    out.conv_kernel = copy_leaf(p.conv_kernel);
    out.conv_bias = copy_leaf(p.conv_bias);
    out.direction = p.direction;
    return out;
}

ModelParams ModelParams::clone() const {
    ModelParams out;
    out.patch_weight = copy_leaf(patch_weight);
    out.patch_bias = copy_leaf(patch_bias);
    out.cls = copy_leaf(cls);
    out.pos = copy_leaf(pos);
    for (const BlockParams& bp : blocks) {
        BlockParams nb;
        nb.norm_gain = copy_leaf(bp.norm_gain);
        nb.wx = copy_leaf(bp.wx);
        nb.wz = copy_leaf(bp.wz);
        nb.wt = copy_leaf(bp.wt);
        nb.fwd = copy_direction(bp.fwd);
        nb.bwd = copy_direction(bp.bwd);
        out.blocks.push_back(std::move(nb));
    }
    out.final_gain = copy_leaf(final_gain);
    out.head_w1 = copy_leaf(head_w1);
    out.head_b1 = copy_leaf(head_b1);
    out.head_w2 = copy_leaf(head_w2);
    out.head_b2 = copy_leaf(head_b2);
    return out;
}

// ---- patch handling ------------------------------------------------------------------

Tensor patchify(const Tensor& image_hw, i64 patch) {
    if (image_hw.rank() != 2) throw ShapeError("patchify: expects a rank-2 image");
    if (grad_enabled() && image_hw.requires_grad())
        throw ContractError("patchify: image gradients are not supported");
    i64 h = image_hw.dim(0), w = image_hw.dim(1);
    if (patch < 1 || h % patch != 0 || w % patch != 0)
        throw ShapeError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by patch " + std::to_string(patch));
    i64 ph = h / patch, pw = w / patch;
    Tensor out = Tensor::zeros({ph * pw, patch * patch}, image_hw.dtype());
    auto src = image_hw.to_vector();
    std::vector<double> dst(static_cast<std::size_t>(out.numel()));
    for (i64 pr = 0; pr < ph; ++pr)
        for (i64 pc = 0; pc < pw; ++pc) {
            i64 j = pr * pw + pc;
            for (i64 r = 0; r < patch; ++r)
                for (i64 c = 0; c < patch; ++c)
                    dst[static_cast<std::size_t>(j * patch * patch + r * patch + c)] =
                        src[static_cast<std::size_t>((pr * patch + r) * w + pc * patch + c)];
        }
    return Tensor::from_values(out.shape(), dst, image_hw.dtype());
}

Tensor unpatchify(const Tensor& patches, i64 height, i64 width, i64 patch) {
    if (patches.rank() != 2 || patches.dim(1) != patch * patch)
        throw ShapeError("unpatchify: expects [J, patch*patch]");
    i64 ph = height / patch, pw = width / patch;
    if (patches.dim(0) != ph * pw || height % patch != 0 || width % patch != 0)
        throw ShapeError("unpatchify: patch count does not tile the image");
    auto src = patches.to_vector();
    std::vector<double> dst(static_cast<std::size_t>(height * width));
    for (i64 pr = 0; pr < ph; ++pr)
        for (i64 pc = 0; pc < pw; ++pc) {
            i64 j = pr * pw + pc;
            for (i64 r = 0; r < patch; ++r)
                for (i64 c = 0; c < patch; ++c)
                    dst[static_cast<std::size_t>((pr * patch + r) * width + pc * patch + c)] =
                        src[static_cast<std::size_t>(j * patch * patch + r * patch + c)];
        }
    return Tensor::from_values({height, width}, dst, patches.dtype());
}

Tensor embed_patches(const Tensor& image_hw, const ModelParams& p) {
    i64 pp = p.patch_weight.dim(0);
    i64 patch = static_cast<i64>(std::llround(std::sqrt(static_cast<double>(pp))));
    // pixels arrive in [0, 1]; recenter to [-1, 1] before the projection
    Tensor centered = add_scalar(scale(patchify(image_hw, patch), 2.0), -1.0);
    return add(matmul(centered, p.patch_weight), p.patch_bias);
}

// ---- token assembly -------------------------------------------------------------------

TokenSequence assemble_single_view(const Tensor& patch_emb, const ModelParams& p,
                                   const ModelConfig& cfg) {
    i64 j = patch_emb.dim(0);
    i64 mid = j / 2;
    std::vector<Tensor> parts;
    if (mid > 0) parts.push_back(slice_rows(patch_emb, 0, mid));
    parts.push_back(p.cls);
    if (j - mid > 0) parts.push_back(slice_rows(patch_emb, mid, j - mid));
    Tensor tokens = add(concat_rows(parts), p.pos);
    (void)cfg;
    return {tokens, mid};
}

TokenSequence assemble_multi_view(const Tensor& patch_emb_u, const Tensor& patch_emb_v,
                                  const ModelParams& p, const ModelConfig& cfg) {
    if (patch_emb_u.shape() != patch_emb_v.shape())
        throw ShapeError("assemble_multi_view: view embeddings disagree (" +
                         shape_str(patch_emb_u.shape()) + " vs " +
                         shape_str(patch_emb_v.shape()) + ")");
    i64 j = patch_emb_u.dim(0);
    Tensor tokens = add(concat_rows({patch_emb_u, p.cls, patch_emb_v}), p.pos);
    (void)cfg;
    return {tokens, j};
}

// ---- block and encoder -------------------------------------------------------------

static Tensor apply_norm(const Tensor& x, const Tensor& gain, NormKind kind) {
    return kind == NormKind::Rms ? rms_norm(x, gain) : layer_norm(x, gain);
}

Tensor bimamba_block(const Tensor& tokens, const BlockParams& bp, const BlockSettings& s) {
    Tensor normed = apply_norm(tokens, bp.norm_gain, s.norm);
    Tensor x = matmul(normed, bp.wx);
    Tensor zg = silu(matmul(normed, bp.wz));
    normed.release();

    Tensor xf = silu(depthwise_conv1d(x, bp.fwd.conv_kernel, bp.fwd.conv_bias));
    Tensor yf = ssm::scan_pipeline(xf, bp.fwd, s.scan, s.discretization);
    xf.release();
    Tensor rf = matmul(mul(yf, zg), bp.wt);
    yf.release();

    Tensor xr = reverse_rows(x);
    x.release();
    Tensor xb = silu(depthwise_conv1d(xr, bp.bwd.conv_kernel, bp.bwd.conv_bias));
    xr.release();
    Tensor yb = reverse_rows(ssm::scan_pipeline(xb, bp.bwd, s.scan, s.discretization));
    xb.release();
    Tensor rb = matmul(mul(yb, zg), bp.wt);
    yb.release();
    zg.release();

    if (s.residual == ResidualMode::Single) return add(add(rf, rb), tokens);
    return add(add(rf, tokens), add(rb, tokens));
}

Tensor encode(const TokenSequence& seq, const ModelParams& p, const ModelConfig& cfg) {
    BlockSettings s = BlockSettings::from(cfg);
    Tensor tokens = seq.tokens;
    for (const BlockParams& bp : p.blocks) tokens = bimamba_block(tokens, bp, s);
    return tokens;
}

static Tensor head_logit(const Tensor& feature, const ModelParams& p) {
    Tensor h1 = bimamba::tanh(add(matmul(feature, p.head_w1), p.head_b1));
    return reshape(add(matmul(h1, p.head_w2), p.head_b2), {1});
}

static Tensor cls_feature(const Tensor& encoded, i64 cls_index, const ModelParams& p,
                          const ModelConfig& cfg) {
    return apply_norm(select_row(encoded, cls_index), p.final_gain, cfg.norm);
}

Prediction model_forward(const Tensor& frontal_hw, const Tensor& lateral_hw,
                         const ModelParams& p, const ModelConfig& cfg) {
    TokenSequence seq;
    switch (cfg.fusion) {
        case Fusion::InputPatchConcat:
            seq = assemble_multi_view(embed_patches(frontal_hw, p),
                                      embed_patches(lateral_hw, p), p, cfg);
            break;
        case Fusion::SingleFrontal:
            seq = assemble_single_view(embed_patches(frontal_hw, p), p, cfg);
            break;
        case Fusion::SingleLateral:
            seq = assemble_single_view(embed_patches(lateral_hw, p), p, cfg);
            break;
        default:
            throw ContractError("model_forward: cls_token_concat uses cls_concat_forward");
    }
    Tensor encoded = encode(seq, p, cfg);
    Tensor logit = head_logit(cls_feature(encoded, seq.cls_index, p, cfg), p);
    return {logit, stable_sigmoid(logit.at(0))};
}

Prediction cls_concat_forward(const Tensor& frontal_hw, const Tensor& lateral_hw,
                              const ModelParams& p, const ModelConfig& cfg) {
    if (cfg.fusion != Fusion::ClsTokenConcat)
        throw ContractError("cls_concat_forward: config fusion must be cls_token_concat");
    i64 d = cfg.embed_dim;
    TokenSequence su = assemble_single_view(embed_patches(frontal_hw, p), p, cfg);
    Tensor fu = cls_feature(encode(su, p, cfg), su.cls_index, p, cfg);
    TokenSequence sv = assemble_single_view(embed_patches(lateral_hw, p), p, cfg);
    Tensor fv = cls_feature(encode(sv, p, cfg), sv.cls_index, p, cfg);
    Tensor feature = reshape(concat_rows({reshape(fu, {d}), reshape(fv, {d})}), {1, 2 * d});
    Tensor logit = head_logit(feature, p);
    return {logit, stable_sigmoid(logit.at(0))};
}

Prediction predict(const ModelParams& p, const ModelConfig& cfg, const Tensor& frontal_hw,
                   const Tensor& lateral_hw) {
    if (cfg.fusion == Fusion::ClsTokenConcat)
        return cls_concat_forward(frontal_hw, lateral_hw, p, cfg);
    return model_forward(frontal_hw, lateral_hw, p, cfg);
}

Tensor bce_loss(const Prediction& pred, int label) {
    if (label != 0 && label != 1)
        throw ContractError("bce_loss: label must be 0 or 1");
    Tensor sp = softplus(pred.logit);
    return label == 0 ? sp : sub(sp, pred.logit);
}

// ---- checkpoint io ---------------------------------------------------------------------

namespace {

constexpr char kMagic[5] = {'B', 'I', 'M', 'B', '1'};

void put_u32(std::string& out, u64 v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw ParseError(std::string("checkpoint: truncated ") + what + ", need " +
                                 std::to_string(pos + n - buf.size()) + " more bytes",
                             pos);
    }
    u64 u32(const char* what) {
        need(4, what);
        u64 v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<u64>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ModelParams& params) {
    std::string out(kMagic, sizeof(kMagic));
    std::string cfg_text = cfg.serialize();
    put_u32(out, cfg_text.size());
    out += cfg_text;
    auto named = params.named();
    put_u32(out, named.size());
    for (const NamedParam& np : named) {
        put_u32(out, np.name.size());
        out += np.name;
        const Shape& s = np.tensor.shape();
        put_u32(out, s.size());
        for (i64 e : s) put_u32(out, static_cast<u64>(e));
        std::vector<double> v = np.tensor.to_vector();
        for (double x : v) {
            float f = static_cast<float>(x);
            char b[4];
            std::memcpy(b, &f, 4);
            out.append(b, 4);
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("checkpoint: cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("checkpoint: write to '" + path + "' failed");
}

static std::string slurp(const std::string& path, const char* what) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(std::string(what) + ": cannot open '" + path + "'");
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

ModelConfig read_checkpoint_config(const std::string& path) {
    std::string buf = slurp(path, "checkpoint");
    Reader r{buf};
    std::string magic = r.bytes(sizeof(kMagic), "magic");
    if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0)
        throw ParseError("checkpoint: bad magic", 0);
    u64 n = r.u32("config length");
    return ModelConfig::deserialize(r.bytes(n, "config text"));
}

ModelParams load_checkpoint(const std::string& path, const ModelConfig& expected) {
    std::string buf = slurp(path, "checkpoint");
    Reader r{buf};
    std::string magic = r.bytes(sizeof(kMagic), "magic");
    if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0)
        throw ParseError("checkpoint: bad magic", 0);
    u64 cfg_len = r.u32("config length");
    ModelConfig stored = ModelConfig::deserialize(r.bytes(cfg_len, "config text"));
    if (!(stored == expected))
        throw ContractError("checkpoint: stored config does not match the expected config");

    ModelParams params = ModelParams::init(stored, 0);
    auto named = params.named();
    u64 count = r.u32("parameter count");
    if (count != named.size())
        throw ParseError("checkpoint: expected " + std::to_string(named.size()) +
                             " parameters, file has " + std::to_string(count),
                         r.pos);
    for (NamedParam& np : named) {
        u64 name_len = r.u32("name length");
        std::string name = r.bytes(name_len, "name");
        if (name != np.name)
            throw ParseError("checkpoint: parameter '" + name + "' where '" + np.name +
                                 "' was expected",
                             r.pos);
        u64 rank = r.u32("rank");
        Shape s(rank);
        for (u64 i = 0; i < rank; ++i) s[i] = static_cast<i64>(r.u32("extent"));
        if (s != np.tensor.shape())
            throw ParseError("checkpoint: shape mismatch for '" + name + "'", r.pos);
        i64 n = np.tensor.numel();
        r.need(static_cast<std::size_t>(n) * 4, "values");
        std::vector<double> vals(static_cast<std::size_t>(n));
        for (i64 i = 0; i < n; ++i) {
            float f;
            std::memcpy(&f, buf.data() + r.pos + static_cast<std::size_t>(i) * 4, 4);
            vals[static_cast<std::size_t>(i)] = static_cast<double>(f);
        }
        r.pos += static_cast<std::size_t>(n) * 4;
        if (stored.dtype == Dtype::Float32) {
            auto dst = np.tensor.mutable_data<float>();
            for (i64 i = 0; i < n; ++i)
                dst[static_cast<std::size_t>(i)] =
                    static_cast<float>(vals[static_cast<std::size_t>(i)]);
        } else {
            auto dst = np.tensor.mutable_data<double>();
            for (i64 i = 0; i < n; ++i)
                dst[static_cast<std::size_t>(i)] = vals[static_cast<std::size_t>(i)];
        }
    }
    if (r.pos != buf.size())
        throw ParseError("checkpoint: trailing bytes after last parameter", r.pos);
    return params;
}

// ---- gradient verification -----------------------------------------------------------

ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.blocks = 2;
    cfg.embed_dim = 8;
    cfg.expand_dim = 16;
    cfg.state_dim = 4;
    cfg.patch = 8;
    cfg.height = 16;
    cfg.width = 16;
    cfg.conv_width = 4;
    cfg.fusion = Fusion::InputPatchConcat;
    cfg.dtype = Dtype::Float64;
    return cfg;
}

GradCheckReport finite_difference_check(const ModelConfig& cfg, u64 seed, double step,
                                        double atol) {
    if (cfg.dtype != Dtype::Float64)
        throw ContractError("finite_difference_check: requires a float64 config");
    cfg.validate();
    ModelParams params = ModelParams::init(cfg, mix_seed(seed, 17));
    Tensor frontal = Tensor::uniform({cfg.height, cfg.width}, mix_seed(seed, 21), 0.0, 1.0,
                                     Dtype::Float64);
    Tensor lateral = Tensor::uniform({cfg.height, cfg.width}, mix_seed(seed, 22), 0.0, 1.0,
                                     Dtype::Float64);
    const int label = 1;

    auto loss_value = [&]() {
        NoGradGuard ng;
        Prediction pred = predict(params, cfg, frontal, lateral);
        return bce_loss(pred, label).at(0);
    };

    reset_graph();
    params.zero_grads();
    Tensor loss = bce_loss(predict(params, cfg, frontal, lateral), label);
    backward(loss);
    auto named = params.named();
    std::vector<std::vector<double>> analytic;
    for (auto& np : named)
        analytic.push_back(np.tensor.has_grad() ? np.tensor.grad().to_vector()
                                                : std::vector<double>(
                                                      static_cast<std::size_t>(np.tensor.numel()), 0.0));
    reset_graph();

    GradCheckReport report;
    for (std::size_t pi = 0; pi < named.size(); ++pi) {
        Tensor t = named[pi].tensor;
        auto vals = t.mutable_data<double>();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            double saved = vals[i];
            vals[i] = saved + step;
            double hi = loss_value();
            vals[i] = saved - step;
            double lo = loss_value();
            vals[i] = saved;
            double fd = (hi - lo) / (2.0 * step);
            double ga = analytic[pi][i];
            double diff = std::abs(ga - fd);
            ++report.coords_checked;
            if (diff <= atol) continue;
            double rel = diff / std::max(std::abs(ga), std::abs(fd));
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = named[pi].name;
            }
        }
    }
    return report;
}

}  // namespace bimamba::model
