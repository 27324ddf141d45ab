// Acceptance suite: one criterion per entry, one pass/fail line each.
// Run with no arguments for all criteria or with a list of ids, e.g.
//   bimamba_acceptance 1 4

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <vector>

#include "bimamba/bench.hpp"
#include "bimamba/data.hpp"
#include "bimamba/metrics.hpp"
#include "bimamba/model.hpp"
#include "bimamba/ssm.hpp"
#include "bimamba/train.hpp"

using namespace bimamba;
namespace fs = std::filesystem;

namespace {

struct Failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void expect(bool ok, const std::string& what) {
    if (!ok) throw Failure(what);
}

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

// ---- 1: the two scan routes agree ------------------------------------------------

std::string scan_equivalence() {
    std::vector<i64> lengths{1, 2, 3, 127, 128, 1000};
    Rng rng(2024);
    while (lengths.size() < 50)
        lengths.push_back(1 + rng.below(512));
    double worst = 0;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        i64 L = lengths[i];
        i64 E = 1 + rng.below(32);
        i64 N = 1 + rng.below(16);
        ssm::ScanCoefficients c;
        c.a_bar = Tensor::uniform({L, E, N}, mix_seed(7, i), -0.95, -0.01);
        c.b_bar_x = Tensor::uniform({L, E, N}, mix_seed(8, i), -1, 1);
        c.c = Tensor::uniform({L, N}, mix_seed(9, i), -1, 1);
        NoGradGuard ng;
        auto ys = ssm::selective_scan_sequential(c).to_vector();
        auto yp = ssm::selective_scan_parallel(c).to_vector();
        double scale = 1.0, err = 0.0;
        for (std::size_t k = 0; k < ys.size(); ++k) {
            scale = std::max(scale, std::abs(ys[k]));
            err = std::max(err, std::abs(ys[k] - yp[k]));
        }
        double rel = err / scale;
        worst = std::max(worst, rel);
        expect(rel < 1e-5, "config L=" + std::to_string(L) + " disagrees (rel " +
                               fmt(rel) + ")");
    }
    return "50 float32 configs, worst relative error " + fmt(worst) + " < 1e-5";
}

// ---- 2: every parameter gradient survives a finite-difference audit ---------------

std::string gradient_soundness() {
    model::GradCheckReport rep = model::finite_difference_check(model::toy_config(), 1);
    expect(rep.max_rel_err < 1e-3,
           "max relative error " + fmt(rep.max_rel_err) + " >= 1e-3 (worst " +
               rep.worst_param + ")");
    return fmt(rep.coords_checked) + " coordinates, max relative error " +
           fmt(rep.max_rel_err) + " < 1e-3";
}

// ---- 3: token layout laws ----------------------------------------------------------

std::string structural_laws() {
    for (i64 p : {8, 16}) {
        for (i64 h : {64, 128, 512}) {
            i64 j = (h / p) * (h / p);
            model::ModelConfig cfg;
            cfg.height = cfg.width = h;
            cfg.patch = p;
            cfg.embed_dim = 4;
            cfg.expand_dim = 8;

            cfg.fusion = model::Fusion::SingleFrontal;
            model::ModelParams ps = model::ModelParams::init(cfg, 1);
            model::TokenSequence seq =
                model::assemble_single_view(Tensor::zeros({j, 4}), ps, cfg);
            expect(seq.tokens.dim(0) == j + 1, "single-view length");
            expect(seq.cls_index == j / 2, "single-view class position");

            cfg.fusion = model::Fusion::InputPatchConcat;
            model::ModelParams pm = model::ModelParams::init(cfg, 2);
            model::TokenSequence mseq = model::assemble_multi_view(
                Tensor::zeros({j, 4}), Tensor::zeros({j, 4}), pm, cfg);
            expect(mseq.tokens.dim(0) == 2 * j + 1, "multi-view length");
            expect(mseq.cls_index == j, "multi-view class position");
            if (h == 512 && p == 16)
                expect(mseq.tokens.dim(0) == 2049, "512/16 multi-view length must be 2049");
        }
    }
    return "lengths J+1 and 2J+1 with middle class token for P in {8,16}, H in {64,128,512}; "
           "512/16 two-view length is 2049";
}

// ---- 4: linear vs quadratic scaling -------------------------------------------------

std::string complexity_reproduction() {
    std::vector<i64> lengths{256, 512, 1024, 2048, 4096};
    bench::BenchConfig compact;  // D=64 E=128 N=8 heads=4
    const int repeats = 5;

    auto bi = bench::measure(bench::Kernel::BimambaBlock, lengths, compact, repeats, 2);
    auto at = bench::measure(bench::Kernel::AttnBlock, lengths, compact, repeats, 2);
    double bi_t = bench::fit_time_exponent(bi).slope;
    double at_t = bench::fit_time_exponent(at).slope;
    double bi_m = bench::fit_memory_exponent(bi).slope;
    double at_m = bench::fit_memory_exponent(at).slope;
    expect(bi_t >= 0.9 && bi_t <= 1.3,
           "recurrent block time exponent " + fmt(bi_t) + " outside [0.9, 1.3]");
    expect(at_t >= 1.7 && at_t <= 2.2,
           "attention block time exponent " + fmt(at_t) + " outside [1.7, 2.2]");
    expect(bi_m <= 1.2, "recurrent block memory exponent " + fmt(bi_m) + " > 1.2");
    expect(at_m >= 1.9, "attention block memory exponent " + fmt(at_m) + " < 1.9");

    for (std::size_t i = 1; i < bi.size(); ++i) {
        expect(bi[i].wall_ns >= bi[i - 1].wall_ns, "recurrent block time not monotone");
        expect(at[i].wall_ns >= at[i - 1].wall_ns, "attention block time not monotone");
    }

    // wide configuration point: D=384, E=768, N=16, heads=6 at L=4096
    bench::BenchConfig wide;
    wide.embed_dim = 384;
    wide.expand_dim = 768;
    wide.state_dim = 16;
    wide.heads = 6;
    auto bi_w = bench::measure(bench::Kernel::BimambaBlock, {2048, 4096}, wide, repeats, 2);
    auto at_w = bench::measure(bench::Kernel::AttnBlock, {2048, 4096}, wide, repeats, 2);
    i64 bi_bytes = bi_w.back().peak_bytes;
    i64 at_bytes = at_w.back().peak_bytes;
    expect(bi_bytes < at_bytes, "recurrent block peak bytes " + std::to_string(bi_bytes) +
                                    " not below attention " + std::to_string(at_bytes));
    double less = 100.0 * (1.0 - double(bi_bytes) / double(at_bytes));
    return "time exponents " + fmt(bi_t) + " vs " + fmt(at_t) + ", memory exponents " +
           fmt(bi_m) + " vs " + fmt(at_m) + "; at L=4096, D=384 the recurrent block uses " +
           fmt(less) + "% less peak activation";
}

// ---- 5: the model learns the planted two-view signal --------------------------------

struct TrainedScore {
    double auroc;
    model::Fusion fusion;
};

TrainedScore train_and_score(const data::Dataset& ds, model::Fusion fusion, i64 epochs,
                             double lr) {
    model::ModelConfig cfg;  // desk scale: H=64 P=8 D=64 E=128 N=8 M=4
    cfg.fusion = fusion;
    train::TrainConfig tc;
    tc.lr = lr;
    tc.epochs = epochs;
    tc.seed = 1;
    model::ModelParams params = model::ModelParams::init(cfg, 1);
    train::train_loop(params, cfg, ds, tc, "");
    return {train::evaluate_auroc(params, cfg, ds, "test"), fusion};
}

std::string learning_sanity() {
    data::Dataset ds = data::synth_dataset(1, 1000);
    const double lr = 2e-3;
    const i64 epochs = 18;

    // determinism witness on a two-epoch prefix
    {
        model::ModelConfig cfg;
        train::TrainConfig tc;
        tc.lr = lr;
        tc.epochs = 2;
        tc.seed = 1;
        model::ModelParams p1 = model::ModelParams::init(cfg, 1);
        model::ModelParams p2 = model::ModelParams::init(cfg, 1);
        auto r1 = train::train_loop(p1, cfg, ds, tc, "");
        auto r2 = train::train_loop(p2, cfg, ds, tc, "");
        for (std::size_t i = 0; i < r1.history.size(); ++i) {
            expect(r1.history[i].train_loss == r2.history[i].train_loss &&
                       r1.history[i].val_auroc == r2.history[i].val_auroc,
                   "training is not reproducible for a fixed seed");
        }
    }

    TrainedScore multi = train_and_score(ds, model::Fusion::InputPatchConcat, epochs, lr);
    TrainedScore frontal = train_and_score(ds, model::Fusion::SingleFrontal, 8, lr);
    TrainedScore lateral = train_and_score(ds, model::Fusion::SingleLateral, 8, lr);

    expect(multi.auroc >= 0.90,
           "two-view test AUROC " + fmt(multi.auroc) + " below 0.90");
    expect(multi.auroc >= frontal.auroc - 0.02,
           "two-view AUROC " + fmt(multi.auroc) + " trails frontal " + fmt(frontal.auroc));
    expect(multi.auroc >= lateral.auroc - 0.02,
           "two-view AUROC " + fmt(multi.auroc) + " trails lateral " + fmt(lateral.auroc));
    return "test AUROC: two-view " + fmt(multi.auroc) + ", frontal " + fmt(frontal.auroc) +
           ", lateral " + fmt(lateral.auroc) + "; deterministic per seed";
}

// ---- 6: metric oracles ----------------------------------------------------------------

std::string metric_oracles() {
    Rng rng(555);
    for (int t = 0; t < 100; ++t) {
        std::size_t n;
        std::vector<double> s;
        std::vector<int> y;
        for (;;) {
            n = 5 + static_cast<std::size_t>(rng.below(46));
            s.clear();
            y.clear();
            int pos = 0;
            for (std::size_t i = 0; i < n; ++i) {
                s.push_back(static_cast<double>(rng.below(10)) / 9.0);  // forces ties
                y.push_back(rng.bernoulli(0.35) ? 1 : 0);
                pos += y.back();
            }
            if (pos > 0 && pos < static_cast<int>(n)) break;
        }
        double credit = 0;
        i64 pairs = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (y[i] != 1) continue;
            for (std::size_t j = 0; j < n; ++j) {
                if (y[j] != 0) continue;
                ++pairs;
                credit += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
            }
        }
        expect(metrics::auroc(s, y) == credit / static_cast<double>(pairs),
               "fast AUROC differs from the pair count");
    }

    for (int t = 0; t < 40; ++t) {
        std::size_t n;
        std::vector<double> s;
        std::vector<int> y;
        for (;;) {
            n = 6 + static_cast<std::size_t>(rng.below(15));
            s.clear();
            y.clear();
            int pos = 0;
            for (std::size_t i = 0; i < n; ++i) {
                s.push_back(static_cast<double>(rng.below(8)) / 7.0);
                y.push_back(rng.bernoulli(0.4) ? 1 : 0);
                pos += y.back();
            }
            if (pos > 1 && pos + 1 < static_cast<int>(n)) break;
        }
        metrics::Components c = metrics::structural_components(s, y);
        std::vector<double> pos, neg;
        for (std::size_t i = 0; i < n; ++i) (y[i] == 1 ? pos : neg).push_back(s[i]);
        auto psi = [](double a, double b) { return a > b ? 1.0 : (a == b ? 0.5 : 0.0); };
        for (std::size_t i = 0; i < pos.size(); ++i) {
            double acc = 0;
            for (double v : neg) acc += psi(pos[i], v);
            expect(std::abs(c.v10[i] - acc / static_cast<double>(neg.size())) < 1e-12,
                   "v10 component differs from the double loop");
        }
        for (std::size_t j = 0; j < neg.size(); ++j) {
            double acc = 0;
            for (double v : pos) acc += psi(v, neg[j]);
            expect(std::abs(c.v01[j] - acc / static_cast<double>(pos.size())) < 1e-12,
                   "v01 component differs from the double loop");
        }
    }

    std::vector<double> a, b;
    std::vector<int> y;
    Rng rng2(556);
    for (int i = 0; i < 80; ++i) {
        int label = rng2.bernoulli(0.4) ? 1 : 0;
        y.push_back(label);
        a.push_back(0.6 * label + rng2.uniform());
        b.push_back(0.2 * label + rng2.uniform());
    }
    metrics::DelongResult ab = metrics::delong_test(a, b, y);
    metrics::DelongResult ba = metrics::delong_test(b, a, y);
    expect(ab.z == -ba.z && ab.p == ba.p, "swapping models must negate z and keep p");
    return "AUROC equals the pairwise count on 100 tied sets; components match the "
           "double loop within 1e-12; z antisymmetry exact";
}

// ---- 7: the residual ambiguity, executed ------------------------------------------

std::string residual_modes() {
    model::ModelConfig cfg;  // M = 4
    cfg.dtype = Dtype::Float64;
    model::ModelParams params = model::ModelParams::init(cfg, 3);
    for (auto& bp : params.blocks) {
        auto w = bp.wt.mutable_data<double>();
        std::fill(w.begin(), w.end(), 0.0);
    }
    Tensor u = Tensor::uniform({64, 64}, 4, 0, 1, Dtype::Float64);
    Tensor v = Tensor::uniform({64, 64}, 5, 0, 1, Dtype::Float64);
    NoGradGuard ng;
    model::TokenSequence seq = model::assemble_multi_view(
        model::embed_patches(u, params), model::embed_patches(v, params), params, cfg);

    Tensor same = model::encode(seq, params, cfg);
    auto sv = same.to_vector();
    auto tv = seq.tokens.to_vector();
    for (std::size_t i = 0; i < sv.size(); ++i)
        expect(sv[i] == tv[i], "single residual mode must be the identity per block");

    model::ModelConfig literal = cfg;
    literal.residual = model::ResidualMode::LiteralPaper;
    Tensor doubled = model::encode(seq, params, literal);
    auto dv = doubled.to_vector();
    double factor = std::pow(2.0, static_cast<double>(cfg.blocks));
    for (std::size_t i = 0; i < dv.size(); ++i)
        expect(dv[i] == factor * tv[i],
               "literal residual mode must double tokens per block");
    return "zeroed output projections: single mode is the identity, literal mode scales "
           "tokens by 2^M = " + fmt(factor);
}

// ---- 8: file format round trips ------------------------------------------------------

std::string io_round_trips() {
    fs::path dir = "/tmp/bimamba_acceptance_io";
    fs::remove_all(dir);
    fs::create_directories(dir);

    Rng rng(77);
    data::Image img = data::Image::filled(33, 47, 0.0f);
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
    data::write_pgm16((dir / "img.pgm").string(), img);
    data::Image img_back = data::read_pgm16((dir / "img.pgm").string());
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        expect(std::abs(img.pixels[i] - img_back.pixels[i]) <= 1.0f / 65535.0f,
               "image round trip beyond one quantization step");

    data::Volume vol = data::Volume::filled(6, 7, 8, 0.0f);
    for (auto& x : vol.voxels) x = static_cast<float>(rng.normal(0, 5));
    data::write_rawv((dir / "vol.rawv").string(), vol);
    data::Volume vol_back = data::read_rawv((dir / "vol.rawv").string());
    expect(vol.voxels == vol_back.voxels, "volume round trip must be bit exact");

    data::Dataset ds = data::synth_dataset(5, 24, {16, 16});
    model::ModelConfig cfg;
    cfg.blocks = 2;
    cfg.embed_dim = 8;
    cfg.expand_dim = 16;
    cfg.state_dim = 4;
    cfg.height = cfg.width = 16;
    train::TrainConfig tc;
    tc.lr = 1e-3;
    tc.epochs = 2;
    tc.batch_size = 6;
    tc.seed = 2;
    model::ModelParams params = model::ModelParams::init(cfg, 2);
    std::string ckpt = (dir / "model.ckpt").string();
    train::TrainResult res = train::train_loop(params, cfg, ds, tc, ckpt);
    model::ModelParams restored = model::load_checkpoint(ckpt, cfg);
    double replay = train::evaluate_auroc(restored, cfg, ds, "val");
    expect(replay == res.best_val_auroc,
           "reloaded checkpoint must reproduce the validation AUROC exactly (" +
               fmt(replay) + " vs " + fmt(res.best_val_auroc) + ")");
    fs::remove_all(dir);
    return "16-bit images within 1/65535, volumes bit exact, checkpoint replay exact";
}

struct Criterion {
    int id;
    const char* title;
    std::function<std::string()> run;
};

}  // namespace

int main(int argc, char** argv) {
    std::vector<Criterion> criteria{
        {1, "scan equivalence", scan_equivalence},
        {2, "gradient soundness", gradient_soundness},
        {3, "structural laws", structural_laws},
        {4, "complexity reproduction", complexity_reproduction},
        {5, "learning sanity", learning_sanity},
        {6, "metric oracles", metric_oracles},
        {7, "residual-mode demonstration", residual_modes},
        {8, "io round trips", io_round_trips},
    };

    std::vector<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));

    int failures = 0;
    for (const Criterion& c : criteria) {
        if (!wanted.empty() &&
            std::find(wanted.begin(), wanted.end(), c.id) == wanted.end())
            continue;
        auto t0 = std::chrono::steady_clock::now();
        try {
            std::string detail = c.run();
            auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0);
            std::cout << "[PASS] criterion " << c.id << " (" << c.title << "): " << detail
                      << " [" << fmt(secs.count()) << "s]\n";
        } catch (const std::exception& e) {
            auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0);
            std::cout << "[FAIL] criterion " << c.id << " (" << c.title << "): " << e.what()
                      << " [" << fmt(secs.count()) << "s]\n";
            ++failures;
        }
        std::cout.flush();
    }
    return failures == 0 ? 0 : 1;
}
