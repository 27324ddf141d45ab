#pragma once

#include <span>
#include <vector>

#include "bimamba/common.hpp"

namespace bimamba::metrics {

// Thrown when a metric needs both classes and one is missing.
class UndefinedMetricError : public Error {
public:
    using Error::Error;
};

// Thrown when the paired test variance vanishes. The AUC values are still
// well defined and are carried along.
class DegenerateTestError : public Error {
public:
    DegenerateTestError(double auc_a, double auc_b)
        : Error("degenerate paired test: zero variance of the AUC difference"),
          auc_a(auc_a),
          auc_b(auc_b) {}
    double auc_a;
    double auc_b;
};

// Midranks (1-based, ties averaged) of the input values.
std::vector<double> midranks(std::span<const double> values);

// Probability that a random positive outscores a random negative, ties
// counted half. O(n log n) via midranks.
double auroc(std::span<const double> scores, std::span<const int> labels);

// Per-observation structural components. v10 has one entry per positive,
// v01 one per negative; mean(v10) == mean(v01) == auc.
struct Components {
    std::vector<double> v10;
    std::vector<double> v01;
    double auc = 0;
};
Components structural_components(std::span<const double> scores,
                                 std::span<const int> labels);

struct DelongResult {
    double auc_a = 0;
    double auc_b = 0;
    double z = 0;
    double p = 1;
};

// Paired comparison of two correlated AUCs on the same labels; two-sided
// normal p value.
DelongResult delong_test(std::span<const double> scores_a,
                         std::span<const double> scores_b,
                         std::span<const int> labels);

}  // namespace bimamba::metrics
