#include <cstdio>
#include <doctest.h>
#include <fstream>

#include "bimamba/model.hpp"
#include "helpers.hpp"

using namespace bimamba;
using namespace bimamba::model;
using testutil::bitwise_equal;
using testutil::max_abs;
using testutil::max_abs_diff;

namespace {

void fill_zero(Tensor& t) {
    if (t.dtype() == Dtype::Float32) {
        auto v = t.mutable_data<float>();
        std::fill(v.begin(), v.end(), 0.0f);
    } else {
        auto v = t.mutable_data<double>();
        std::fill(v.begin(), v.end(), 0.0);
    }
}

ModelConfig small_cfg() {
    ModelConfig cfg;
    cfg.blocks = 2;
    cfg.embed_dim = 8;
    cfg.expand_dim = 16;
    cfg.state_dim = 4;
    cfg.patch = 8;
    cfg.height = 16;
    cfg.width = 16;
    cfg.dtype = Dtype::Float64;
    return cfg;
}

std::string tmp_file(const char* name) {
    return std::string("/tmp/bimamba_test_") + name;
}

}  // namespace

TEST_CASE("patchify: shapes, order, and lossless round trip") {
    Tensor img = Tensor::uniform({512, 512}, 3, 0, 1);
    Tensor patches = patchify(img, 16);
    CHECK(patches.shape() == Shape{1024, 256});

    // 2P x P with known values: two patches, row-major flattening
    Tensor small = Tensor::from_values({4, 2},
                                       {0, 1, 2, 3, 4, 5, 6, 7}, Dtype::Float64);
    Tensor p = patchify(small, 2);
    CHECK(p.shape() == Shape{2, 4});
    CHECK(p.to_vector() == std::vector<double>{0, 1, 2, 3, 4, 5, 6, 7});
    CHECK(bitwise_equal(unpatchify(p, 4, 2, 2), small));

    Tensor big = Tensor::uniform({64, 48}, 4, 0, 1, Dtype::Float64);
    CHECK(bitwise_equal(unpatchify(patchify(big, 8), 64, 48, 8), big));

    Tensor constant = Tensor::full({16, 16}, 0.25, Dtype::Float64);
    Tensor cp = patchify(constant, 8);
    for (i64 j = 1; j < cp.dim(0); ++j)
        for (i64 k = 0; k < cp.dim(1); ++k) CHECK(cp.at({j, k}) == cp.at({0, k}));

    CHECK_THROWS_AS(patchify(Tensor::zeros({15, 16}), 8), ShapeError);
}

TEST_CASE("assemble_single_view: middle class token") {
    ModelConfig cfg = small_cfg();  // J = 4
    ModelParams params = ModelParams::init(cfg, 1);
    fill_zero(params.pos);
    Tensor emb = Tensor::uniform({4, 8}, 9, -1, 1, Dtype::Float64);
    TokenSequence seq = assemble_single_view(emb, params, cfg);
    CHECK(seq.tokens.dim(0) == 5);
    CHECK(seq.cls_index == 2);
    for (i64 d = 0; d < 8; ++d) {
        CHECK(seq.tokens.at({0, d}) == emb.at({0, d}));
        CHECK(seq.tokens.at({1, d}) == emb.at({1, d}));
        CHECK(seq.tokens.at({2, d}) == params.cls.at({0, d}));
        CHECK(seq.tokens.at({3, d}) == emb.at({2, d}));
        CHECK(seq.tokens.at({4, d}) == emb.at({3, d}));
    }

    // zero embeddings and zero positions leave only the class row
    TokenSequence zs = assemble_single_view(Tensor::zeros({4, 8}, Dtype::Float64), params, cfg);
    for (i64 t = 0; t < 5; ++t)
        for (i64 d = 0; d < 8; ++d)
            CHECK(zs.tokens.at({t, d}) == (t == 2 ? params.cls.at({0, d}) : 0.0));
}

TEST_CASE("assemble_single_view: wide configuration is 1025 tokens with class at 512") {
    ModelConfig cfg;
    cfg.fusion = Fusion::SingleFrontal;
    cfg.height = cfg.width = 512;
    cfg.patch = 16;
    cfg.embed_dim = 4;
    cfg.expand_dim = 8;
    ModelParams params = ModelParams::init(cfg, 2);
    Tensor emb = Tensor::zeros({1024, 4});
    TokenSequence seq = assemble_single_view(emb, params, cfg);
    CHECK(seq.tokens.dim(0) == 1025);
    CHECK(seq.cls_index == 512);
}

TEST_CASE("assemble_multi_view: layout, wide size, and order sensitivity") {
    ModelConfig cfg = small_cfg();
    ModelParams params = ModelParams::init(cfg, 3);
    Tensor u = Tensor::uniform({4, 8}, 11, -1, 1, Dtype::Float64);
    Tensor v = Tensor::uniform({4, 8}, 12, -1, 1, Dtype::Float64);
    TokenSequence seq = assemble_multi_view(u, v, params, cfg);
    CHECK(seq.tokens.dim(0) == 9);
    CHECK(seq.cls_index == 4);
    TokenSequence swapped = assemble_multi_view(v, u, params, cfg);
    CHECK(max_abs_diff(seq.tokens, swapped.tokens) > 0);

    CHECK_THROWS_AS(assemble_multi_view(u, Tensor::zeros({5, 8}, Dtype::Float64), params, cfg),
                    ShapeError);

    ModelConfig wide;
    wide.height = wide.width = 512;
    wide.patch = 16;
    wide.embed_dim = 4;
    wide.expand_dim = 8;
    ModelParams wp = ModelParams::init(wide, 4);
    TokenSequence ws = assemble_multi_view(Tensor::zeros({1024, 4}),
                                           Tensor::zeros({1024, 4}), wp, wide);
    CHECK(ws.tokens.dim(0) == 2049);
    CHECK(ws.cls_index == 1024);
}

TEST_CASE("sequence-length law across patch sizes and image sizes") {
    for (i64 p : {8, 16}) {
        for (i64 h : {64, 128, 512}) {
            ModelConfig cfg;
            cfg.height = cfg.width = h;
            cfg.patch = p;
            i64 j = (h / p) * (h / p);
            cfg.fusion = Fusion::SingleFrontal;
            CHECK(cfg.seq_len() == j + 1);
            CHECK(cfg.cls_index() == j / 2);
            cfg.fusion = Fusion::InputPatchConcat;
            CHECK(cfg.seq_len() == 2 * j + 1);
            CHECK(cfg.cls_index() == j);
        }
    }
}

TEST_CASE("block: zero output projection collapses to the residual") {
    ModelConfig cfg = small_cfg();
    BlockParams bp = BlockParams::init(8, 16, 4, 4, 1, 21, Dtype::Float64);
    fill_zero(bp.wt);
    Tensor tokens = Tensor::uniform({5, 8}, 22, -1, 1, Dtype::Float64);
    NoGradGuard ng;

    BlockSettings single = BlockSettings::from(cfg);
    CHECK(bitwise_equal(bimamba_block(tokens, bp, single), tokens));

    BlockSettings literal = single;
    literal.residual = ResidualMode::LiteralPaper;
    CHECK(bitwise_equal(bimamba_block(tokens, bp, literal), scale(tokens, 2.0)));
}

TEST_CASE("block: swapping directions on a reversed sequence reverses the output") {
    BlockParams bp = BlockParams::init(8, 16, 4, 4, 1, 31, Dtype::Float64);
    BlockParams swapped = bp;
    std::swap(swapped.fwd, swapped.bwd);
    swapped.fwd.direction = ssm::Direction::Forward;
    swapped.bwd.direction = ssm::Direction::Backward;
    Tensor tokens = Tensor::uniform({7, 8}, 32, -1, 1, Dtype::Float64);
    NoGradGuard ng;
    BlockSettings s;
    s.scan = ssm::ScanMode::Sequential;
    Tensor direct = bimamba_block(tokens, bp, s);
    Tensor mirrored = reverse_rows(bimamba_block(reverse_rows(tokens), swapped, s));
    CHECK(max_abs_diff(direct, mirrored) < 1e-12);
}

TEST_CASE("block: right context reaches the class token only through the backward branch") {
    BlockParams bp = BlockParams::init(8, 16, 4, 4, 1, 41, Dtype::Float64);
    Tensor tokens = Tensor::uniform({9, 8}, 42, -1, 1, Dtype::Float64);
    i64 cls = 4, perturbed = 7;
    std::vector<double> tv = tokens.to_vector();
    tv[static_cast<std::size_t>(perturbed * 8 + 3)] += 0.25;
    Tensor tokens_p = Tensor::from_values({9, 8}, tv, Dtype::Float64);
    NoGradGuard ng;
    BlockSettings s;
    s.scan = ssm::ScanMode::Sequential;

    Tensor full0 = bimamba_block(tokens, bp, s);
    Tensor full1 = bimamba_block(tokens_p, bp, s);
    double moved = 0;
    for (i64 d = 0; d < 8; ++d)
        moved = std::max(moved, std::abs(full0.at({cls, d}) - full1.at({cls, d})));
    CHECK(moved > 0.0);

    // silencing the backward branch: zero C generator means zero backward output
    BlockParams fwd_only = bp;
    fill_zero(fwd_only.bwd.c_weight);
    Tensor f0 = bimamba_block(tokens, fwd_only, s);
    Tensor f1 = bimamba_block(tokens_p, fwd_only, s);
    for (i64 d = 0; d < 8; ++d) CHECK(f0.at({cls, d}) == f1.at({cls, d}));
}

TEST_CASE("model_forward: probability range and constant path") {
    ModelConfig cfg = small_cfg();
    ModelParams params = ModelParams::init(cfg, 51);
    Tensor u = Tensor::uniform({16, 16}, 52, 0, 1, Dtype::Float64);
    Tensor v = Tensor::uniform({16, 16}, 53, 0, 1, Dtype::Float64);
    NoGradGuard ng;
    Prediction pred = model_forward(u, v, params, cfg);
    CHECK(pred.probability > 0.0);
    CHECK(pred.probability < 1.0);

    // all-zero parameters except the final head bias
    for (auto& np : params.named()) fill_zero(np.tensor);
    params.head_b2.mutable_data<double>()[0] = 0.7;
    Prediction zp = model_forward(u, v, params, cfg);
    CHECK(testutil::close(zp.probability, stable_sigmoid(0.7), 1e-12));
    CHECK(zp.logit.at(0) == 0.7);
}

TEST_CASE("model_forward: sensitive to pixel permutations") {
    ModelConfig cfg = small_cfg();
    ModelParams params = ModelParams::init(cfg, 61);
    Tensor u = Tensor::uniform({16, 16}, 62, 0, 1, Dtype::Float64);
    Tensor v = Tensor::uniform({16, 16}, 63, 0, 1, Dtype::Float64);
    NoGradGuard ng;
    double p0 = model_forward(u, v, params, cfg).probability;
    double p1 = model_forward(reverse_rows(u), v, params, cfg).probability;
    CHECK(p0 != p1);
}

TEST_CASE("cls_concat_forward: weight sharing duplicates the feature") {
    ModelConfig cfg = small_cfg();
    cfg.fusion = Fusion::ClsTokenConcat;
    ModelParams params = ModelParams::init(cfg, 71);
    Tensor u = Tensor::uniform({16, 16}, 72, 0, 1, Dtype::Float64);
    NoGradGuard ng;
    double p0 = cls_concat_forward(u, u, params, cfg).probability;

    // identical views make the two feature halves equal, so swapping the
    // top and bottom halves of the first head matrix cannot change anything
    ModelParams swapped = params.clone();
    auto w = params.head_w1.to_vector();
    std::vector<double> sw(w.size());
    i64 d = cfg.embed_dim;
    for (i64 r = 0; r < 2 * d; ++r)
        for (i64 c = 0; c < d; ++c)
            sw[static_cast<std::size_t>(((r + d) % (2 * d)) * d + c)] =
                w[static_cast<std::size_t>(r * d + c)];
    auto dst = swapped.head_w1.mutable_data<double>();
    std::copy(sw.begin(), sw.end(), dst.begin());
    CHECK(testutil::close(cls_concat_forward(u, u, swapped, cfg).probability, p0, 1e-12));

    // deterministic on zero inputs
    Tensor z = Tensor::zeros({16, 16}, Dtype::Float64);
    CHECK(cls_concat_forward(z, z, params, cfg).probability ==
          cls_concat_forward(z, z, params, cfg).probability);
}

TEST_CASE("fusion paths differ on random inputs") {
    ModelConfig multi = small_cfg();
    ModelConfig concat = small_cfg();
    concat.fusion = Fusion::ClsTokenConcat;
    ModelParams pm = ModelParams::init(multi, 81);
    ModelParams pc = ModelParams::init(concat, 81);
    Tensor u = Tensor::uniform({16, 16}, 82, 0, 1, Dtype::Float64);
    Tensor v = Tensor::uniform({16, 16}, 83, 0, 1, Dtype::Float64);
    NoGradGuard ng;
    CHECK(predict(pm, multi, u, v).probability != predict(pc, concat, u, v).probability);
}

TEST_CASE("bce_loss: closed forms") {
    auto with_logit = [](double l) {
        Prediction p;
        p.logit = Tensor::from_values({1}, {l}, Dtype::Float64);
        p.probability = stable_sigmoid(l);
        return p;
    };
    CHECK(testutil::close(bce_loss(with_logit(0.0), 0).at(0), std::log(2.0), 1e-12));
    CHECK(testutil::close(bce_loss(with_logit(0.0), 1).at(0), std::log(2.0), 1e-12));
    CHECK(bce_loss(with_logit(30.0), 1).at(0) < 1e-9);   // confident and right
    CHECK(bce_loss(with_logit(-30.0), 0).at(0) < 1e-9);
    CHECK(testutil::close(bce_loss(with_logit(2.0), 1).at(0), 0.126928, 1e-6));
    CHECK_THROWS_AS(bce_loss(with_logit(0.0), 2), ContractError);
}

TEST_CASE("identity at init: zeroed output projections make the stack an identity") {
    ModelConfig cfg = small_cfg();
    cfg.blocks = 4;
    ModelParams params = ModelParams::init(cfg, 91);
    for (auto& bp : params.blocks) fill_zero(bp.wt);
    Tensor emb_u = Tensor::uniform({4, 8}, 92, -1, 1, Dtype::Float64);
    Tensor emb_v = Tensor::uniform({4, 8}, 93, -1, 1, Dtype::Float64);
    TokenSequence seq = assemble_multi_view(emb_u, emb_v, params, cfg);
    NoGradGuard ng;
    CHECK(bitwise_equal(encode(seq, params, cfg), seq.tokens));
}

TEST_CASE("checkpoint: round trip, config mismatch, malformed files") {
    ModelConfig cfg = small_cfg();
    cfg.dtype = Dtype::Float32;
    ModelParams params = ModelParams::init(cfg, 101);
    std::string path = tmp_file("ckpt.bin");
    save_checkpoint(path, cfg, params);

    CHECK(read_checkpoint_config(path) == cfg);
    ModelParams loaded = load_checkpoint(path, cfg);
    auto a = params.named();
    auto b = loaded.named();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(bitwise_equal(a[i].tensor, b[i].tensor));
    }

    ModelConfig other = cfg;
    other.embed_dim = 16;
    other.expand_dim = 32;
    CHECK_THROWS_AS(load_checkpoint(path, other), ContractError);

    // truncation reports the missing bytes
    {
        std::ifstream in(path, std::ios::binary);
        std::string buf((std::istreambuf_iterator<char>(in)), {});
        std::ofstream out(tmp_file("ckpt_trunc.bin"), std::ios::binary | std::ios::trunc);
        out.write(buf.data(), static_cast<std::streamsize>(buf.size() / 2));
    }
    CHECK_THROWS_AS(load_checkpoint(tmp_file("ckpt_trunc.bin"), cfg), ParseError);

    {
        std::ofstream out(tmp_file("ckpt_magic.bin"), std::ios::binary | std::ios::trunc);
        out << "NOTAMAGIC0000000";
    }
    CHECK_THROWS_AS(load_checkpoint(tmp_file("ckpt_magic.bin"), cfg), ParseError);
    std::remove(tmp_file("ckpt.bin").c_str());
    std::remove(tmp_file("ckpt_trunc.bin").c_str());
    std::remove(tmp_file("ckpt_magic.bin").c_str());
}

TEST_CASE("config serialization round trips") {
    ModelConfig cfg = small_cfg();
    cfg.fusion = Fusion::ClsTokenConcat;
    cfg.residual = ResidualMode::LiteralPaper;
    cfg.discretization = ssm::Discretization::Exponential;
    cfg.norm = NormKind::Layer;
    cfg.scan = ssm::ScanMode::Sequential;
    CHECK(ModelConfig::deserialize(cfg.serialize()) == cfg);
}

TEST_CASE("config validation") {
    ModelConfig cfg = small_cfg();
    cfg.height = 17;
    CHECK_THROWS_AS(cfg.validate(), ShapeError);
    cfg = small_cfg();
    cfg.expand_dim = cfg.embed_dim;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
}

TEST_CASE("toy end-to-end gradient check stays under tolerance") {
    GradCheckReport rep = finite_difference_check(toy_config(), 1);
    CHECK(rep.coords_checked > 2000);
    CHECK(rep.max_rel_err < 1e-3);
}
