#include "bimamba/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <ostream>
#include <sstream>

#include "bimamba/attention.hpp"
#include "bimamba/model.hpp"
#include "bimamba/ssm.hpp"
#include "bimamba/tensor.hpp"

namespace bimamba::bench {

const char* kernel_name(Kernel k) {
    switch (k) {
        case Kernel::BimambaBlock: return "bimamba_block";
        case Kernel::AttnBlock: return "attn_block";
        case Kernel::ScanSequential: return "scan_sequential";
        default: return "scan_parallel";
    }
}

Kernel kernel_from_name(const std::string& s) {
    if (s == "bimamba_block") return Kernel::BimambaBlock;
    if (s == "attn_block") return Kernel::AttnBlock;
    if (s == "scan_sequential") return Kernel::ScanSequential;
    if (s == "scan_parallel") return Kernel::ScanParallel;
    throw ContractError("unknown bench kernel '" + s + "'");
}

namespace {

double checksum(const Tensor& t) {
    double acc = 0;
    for (double v : t.to_vector()) acc += v;
    return acc;
}

ssm::ScanCoefficients random_coefficients(i64 L, const BenchConfig& cfg, u64 seed) {
    ssm::ScanCoefficients coef;
    coef.a_bar = Tensor::uniform({L, cfg.expand_dim, cfg.state_dim}, mix_seed(seed, 1),
                                 -0.9, -0.01);
    coef.b_bar_x = Tensor::uniform({L, cfg.expand_dim, cfg.state_dim}, mix_seed(seed, 2),
                                   -1.0, 1.0);
    coef.c = Tensor::uniform({L, cfg.state_dim}, mix_seed(seed, 3), -1.0, 1.0);
    return coef;
}

// The runnable body for one (kernel, L) cell plus everything it owns.
struct KernelCase {
    std::function<double()> run;  // returns an output checksum
    std::function<void()> verify; // optional cross-check under bench conditions
};

KernelCase make_case(Kernel kernel, i64 L, const BenchConfig& cfg) {
    u64 seed = mix_seed(cfg.seed, static_cast<u64>(L));
    switch (kernel) {
        case Kernel::BimambaBlock: {
            auto bp = std::make_shared<model::BlockParams>(model::BlockParams::init(
                cfg.embed_dim, cfg.expand_dim, cfg.state_dim, cfg.conv_width,
                std::max<i64>(1, cfg.expand_dim / 16), mix_seed(seed, 10), Dtype::Float32));
            Tensor tokens =
                Tensor::uniform({L, cfg.embed_dim}, mix_seed(seed, 11), -1.0, 1.0);
            model::BlockSettings settings;
            settings.scan = ssm::ScanMode::Sequential;  // streaming state, O(L*E) memory
            return {[bp, tokens, settings]() {
                        NoGradGuard ng;
                        return checksum(model::bimamba_block(tokens, *bp, settings));
                    },
                    {}};
        }
        case Kernel::AttnBlock: {
            attn::AttnConfig ac{cfg.embed_dim, cfg.heads, 0};
            auto w = std::make_shared<attn::AttnWeights>(
                attn::AttnWeights::init(ac, mix_seed(seed, 20)));
            Tensor tokens =
                Tensor::uniform({L, cfg.embed_dim}, mix_seed(seed, 21), -1.0, 1.0);
            return {[w, tokens, ac]() {
                        return checksum(attn::attn_block_forward(tokens, ac, *w));
                    },
                    {}};
        }
        case Kernel::ScanSequential:
        case Kernel::ScanParallel: {
            auto coef = std::make_shared<ssm::ScanCoefficients>(
                random_coefficients(L, cfg, mix_seed(seed, 30)));
            bool parallel = kernel == Kernel::ScanParallel;
            auto run = [coef, parallel]() {
                NoGradGuard ng;
                return checksum(parallel ? ssm::selective_scan_parallel(*coef)
                                         : ssm::selective_scan_sequential(*coef));
            };
            // the two scan routes must agree while being timed
            auto verify = [coef]() {
                NoGradGuard ng;
                Tensor ys = ssm::selective_scan_sequential(*coef);
                Tensor yp = ssm::selective_scan_parallel(*coef);
                double scale = 0, err = 0;
                auto vs = ys.to_vector(), vp = yp.to_vector();
                for (std::size_t i = 0; i < vs.size(); ++i) {
                    scale = std::max(scale, std::abs(vs[i]));
                    err = std::max(err, std::abs(vs[i] - vp[i]));
                }
                if (err > 1e-5 * std::max(1.0, scale))
                    throw NumericError("bench: scan routes disagree during timing");
            };
            return {run, verify};
        }
    }
    throw ContractError("unreachable kernel case");
}

}  // namespace

std::vector<BenchRecord> measure(Kernel kernel, const std::vector<i64>& lengths,
                                 const BenchConfig& cfg, int repeats, int warmup,
                                 std::ostream* progress) {
    if (lengths.size() < 2)
        throw ContractError("measure: need at least 2 sequence lengths");
    for (std::size_t i = 1; i < lengths.size(); ++i)
        if (lengths[i] <= lengths[i - 1])
            throw ContractError("measure: lengths must be strictly increasing");
    if (repeats < 5) throw ContractError("measure: at least 5 repeats required");
    if (warmup < 2) throw ContractError("measure: at least 2 warmup runs required");

    ThreadCountGuard single(1);
    std::vector<BenchRecord> records;
    for (i64 L : lengths) {
        KernelCase kc = make_case(kernel, L, cfg);
        if (kc.verify) kc.verify();

        i64 peak;
        {
            AccountingScope scope;
            kc.run();
            peak = scope.peak_bytes();
        }
        for (int i = 0; i < warmup; ++i) kc.run();
        std::vector<i64> times;
        times.reserve(static_cast<std::size_t>(repeats));
        for (int i = 0; i < repeats; ++i) {
            auto t0 = std::chrono::steady_clock::now();
            kc.run();
            auto t1 = std::chrono::steady_clock::now();
            times.push_back(
                std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
        }
        std::sort(times.begin(), times.end());
        i64 median = times[times.size() / 2];

        BenchRecord rec{kernel_name(kernel), L,       cfg.embed_dim, cfg.expand_dim,
                        cfg.state_dim,       cfg.heads, median,        peak};
        if (progress)
            (*progress) << rec.kernel << " L=" << L << " wall_ns=" << median
                        << " peak_bytes=" << peak << "\n";
        records.push_back(rec);
    }
    return records;
}

ExponentFit fit_loglog(const std::vector<std::pair<double, double>>& points) {
    if (points.size() < 2) throw ContractError("fit_loglog: need at least 2 points");
    double n = static_cast<double>(points.size());
    double sx = 0, sy = 0;
    std::vector<std::pair<double, double>> logs;
    for (auto [x, y] : points) {
        if (x <= 0 || y <= 0) throw ContractError("fit_loglog: needs positive values");
        logs.emplace_back(std::log(x), std::log(y));
        sx += logs.back().first;
        sy += logs.back().second;
    }
    double mx = sx / n, my = sy / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (auto [lx, ly] : logs) {
        sxy += (lx - mx) * (ly - my);
        sxx += (lx - mx) * (lx - mx);
        syy += (ly - my) * (ly - my);
    }
    ExponentFit fit;
    fit.slope = sxy / sxx;
    fit.r2 = syy == 0 ? 1.0 : (sxy * sxy) / (sxx * syy);
    return fit;
}

static ExponentFit fit_field(const std::vector<BenchRecord>& records,
                             i64 BenchRecord::* field) {
    if (records.size() < 4)
        throw ContractError("fit_exponent: insufficient data, need >= 4 points");
    for (std::size_t i = 1; i < records.size(); ++i)
        if (records[i].kernel != records[0].kernel)
            throw ContractError("fit_exponent: records span multiple kernels");
    i64 lo = records[0].length, hi = records[0].length;
    std::vector<std::pair<double, double>> pts;
    for (const BenchRecord& r : records) {
        lo = std::min(lo, r.length);
        hi = std::max(hi, r.length);
        pts.emplace_back(static_cast<double>(r.length), static_cast<double>(r.*field));
    }
    if (hi < 8 * lo)
        throw ContractError("fit_exponent: insufficient data, lengths must span >= 8x");
    return fit_loglog(pts);
}

ExponentFit fit_time_exponent(const std::vector<BenchRecord>& records) {
    return fit_field(records, &BenchRecord::wall_ns);
}
ExponentFit fit_memory_exponent(const std::vector<BenchRecord>& records) {
    return fit_field(records, &BenchRecord::peak_bytes);
}

void write_csv(std::ostream& os, const std::vector<BenchRecord>& records) {
    if (records.empty()) throw ContractError("write_csv: no records");
    os << "kernel,L,D,E,N,heads,wall_ns,peak_bytes\n";
    for (const BenchRecord& r : records)
        os << r.kernel << ',' << r.length << ',' << r.embed_dim << ',' << r.expand_dim
           << ',' << r.state_dim << ',' << r.heads << ',' << r.wall_ns << ','
           << r.peak_bytes << '\n';
}

std::vector<BenchRecord> read_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "kernel,L,D,E,N,heads,wall_ns,peak_bytes")
        throw ParseError("bench csv: missing or wrong header", 0);
    std::vector<BenchRecord> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        BenchRecord r;
        std::string field;
        auto next_i64 = [&](const char* what) {
            if (!std::getline(ls, field, ','))
                throw ParseError(std::string("bench csv: missing ") + what, 0);
            return static_cast<i64>(std::stoll(field));
        };
        if (!std::getline(ls, r.kernel, ','))
            throw ParseError("bench csv: missing kernel", 0);
        r.length = next_i64("L");
        r.embed_dim = next_i64("D");
        r.expand_dim = next_i64("E");
        r.state_dim = next_i64("N");
        r.heads = next_i64("heads");
        r.wall_ns = next_i64("wall_ns");
        r.peak_bytes = next_i64("peak_bytes");
        out.push_back(r);
    }
    return out;
}

static std::vector<BenchRecord> select(const std::vector<BenchRecord>& records,
                                       const std::string& kernel) {
    std::vector<BenchRecord> out;
    for (const BenchRecord& r : records)
        if (r.kernel == kernel) out.push_back(r);
    return out;
}

void write_report(std::ostream& os, const std::vector<BenchRecord>& records) {
    if (records.empty()) throw ContractError("write_report: no records");
    for (const char* name : {"bimamba_block", "attn_block", "scan_sequential",
                             "scan_parallel"}) {
        // fit within one configuration so the slope is meaningful
        std::vector<BenchRecord> rs;
        for (const BenchRecord& r : select(records, name))
            if (rs.empty() || (r.embed_dim == rs[0].embed_dim &&
                               r.expand_dim == rs[0].expand_dim))
                rs.push_back(r);
        if (rs.size() < 4) continue;
        ExponentFit t = fit_time_exponent(rs);
        ExponentFit m = fit_memory_exponent(rs);
        os << name << ": time exponent " << t.slope << " (r2 " << t.r2
           << "), memory exponent " << m.slope << " (r2 " << m.r2 << ")\n";
    }

    // memory ratio of the two blocks at the largest length both report
    auto bi = select(records, "bimamba_block");
    auto at = select(records, "attn_block");
    i64 best = -1;
    i64 bi_bytes = 0, at_bytes = 0;
    for (const BenchRecord& b : bi)
        for (const BenchRecord& a : at)
            if (a.length == b.length && a.embed_dim == b.embed_dim && a.length > best) {
                best = a.length;
                bi_bytes = b.peak_bytes;
                at_bytes = a.peak_bytes;
            }
    if (best > 0 && at_bytes > 0) {
        double less = 100.0 * (1.0 - static_cast<double>(bi_bytes) /
                                          static_cast<double>(at_bytes));
        os << "peak activation: bimamba_block " << bi_bytes << " B vs attn_block "
           << at_bytes << " B at L=" << best << " (" << less << "% less)\n";
    }
}

std::vector<BenchRecord> default_sweep(u64 seed, int repeats, std::ostream* progress) {
    std::vector<i64> lengths{256, 512, 1024, 2048, 4096};
    BenchConfig compact;
    compact.seed = seed;
    std::vector<BenchRecord> all;
    for (Kernel k : {Kernel::BimambaBlock, Kernel::AttnBlock, Kernel::ScanSequential,
                     Kernel::ScanParallel}) {
        auto rs = measure(k, lengths, compact, repeats, 2, progress);
        all.insert(all.end(), rs.begin(), rs.end());
    }
    // wide configuration, one point for the block memory comparison
    BenchConfig wide;
    wide.embed_dim = 384;
    wide.expand_dim = 768;
    wide.state_dim = 16;
    wide.heads = 6;
    wide.seed = seed;
    for (Kernel k : {Kernel::BimambaBlock, Kernel::AttnBlock}) {
        auto rs = measure(k, {2048, 4096}, wide, repeats, 2, progress);
        all.insert(all.end(), rs.begin(), rs.end());
    }
    return all;
}

}  // namespace bimamba::bench
