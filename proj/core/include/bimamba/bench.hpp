#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "bimamba/common.hpp"

namespace bimamba::bench {

enum class Kernel { BimambaBlock, AttnBlock, ScanSequential, ScanParallel };

const char* kernel_name(Kernel k);
Kernel kernel_from_name(const std::string& s);

struct BenchConfig {
    i64 embed_dim = 64;    // D
    i64 expand_dim = 128;  // E
    i64 state_dim = 8;     // N
    i64 heads = 4;
    i64 conv_width = 4;
    u64 seed = 42;
};

struct BenchRecord {
    std::string kernel;
    i64 length = 0;  // L
    i64 embed_dim = 0, expand_dim = 0, state_dim = 0, heads = 0;
    i64 wall_ns = 0;
    i64 peak_bytes = 0;
};

// Forward-pass measurement on a single pinned thread: `warmup` discarded
// runs, then the median of `repeats` timed runs. The peak counts every
// intermediate value buffer live at once during one instrumented forward.
std::vector<BenchRecord> measure(Kernel kernel, const std::vector<i64>& lengths,
                                 const BenchConfig& cfg, int repeats = 9, int warmup = 2,
                                 std::ostream* progress = nullptr);

struct ExponentFit {
    double slope = 0;
    double r2 = 0;
};

// Ordinary least squares on log-log points.
ExponentFit fit_loglog(const std::vector<std::pair<double, double>>& points);
// Slope of log(wall_ns) against log(L) for one kernel's records. Needs at
// least 4 points spanning at least 8x in L.
ExponentFit fit_time_exponent(const std::vector<BenchRecord>& records);
ExponentFit fit_memory_exponent(const std::vector<BenchRecord>& records);

void write_csv(std::ostream& os, const std::vector<BenchRecord>& records);
std::vector<BenchRecord> read_csv(std::istream& is);

// Exponent fits per kernel plus the peak-memory ratio of the two block
// kernels at the largest length they share.
void write_report(std::ostream& os, const std::vector<BenchRecord>& records);

// The stock sweep: every kernel over L in {256..4096} at the compact
// configuration, plus both block kernels at L=4096 with the wide
// (D=384, E=768, N=16, heads=6) configuration for the memory comparison.
std::vector<BenchRecord> default_sweep(u64 seed, int repeats, std::ostream* progress);

}  // namespace bimamba::bench
