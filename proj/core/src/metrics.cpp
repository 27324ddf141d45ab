#include "bimamba/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bimamba::metrics {

std::vector<double> midranks(std::span<const double> values) {
    std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        double mid = 0.5 * static_cast<double>(i + j) + 1.0;  // average of 1-based ranks
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mid;
        i = j + 1;
    }
    return ranks;
}

static void check_eval_set(std::span<const double> scores, std::span<const int> labels,
                           std::size_t& n_pos, std::size_t& n_neg) {
    if (scores.size() != labels.size())
        throw ContractError("metrics: scores and labels differ in length");
    n_pos = n_neg = 0;
    for (int y : labels) {
        if (y == 1)
            ++n_pos;
        else if (y == 0)
            ++n_neg;
        else
            throw ContractError("metrics: labels must be 0 or 1");
    }
    if (n_pos == 0 || n_neg == 0)
        throw UndefinedMetricError("metric undefined: need at least one positive and one negative");
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
    std::size_t m, n;
    check_eval_set(scores, labels, m, n);
    std::vector<double> ranks = midranks(scores);
    double sum_pos = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (labels[i] == 1) sum_pos += ranks[i];
    double mm = static_cast<double>(m);
    return (sum_pos - mm * (mm + 1.0) / 2.0) / (mm * static_cast<double>(n));
}

Components structural_components(std::span<const double> scores,
                                 std::span<const int> labels) {
    std::size_t m, n;
    check_eval_set(scores, labels, m, n);
    std::vector<double> pos, neg;
    pos.reserve(m);
    neg.reserve(n);
    for (std::size_t i = 0; i < scores.size(); ++i)
        (labels[i] == 1 ? pos : neg).push_back(scores[i]);

    std::vector<double> r_all = midranks(scores);
    std::vector<double> r_pos = midranks(pos);
    std::vector<double> r_neg = midranks(neg);

    Components comp;
    comp.v10.reserve(m);
    comp.v01.reserve(n);
    std::size_t ip = 0, in = 0;
    double mm = static_cast<double>(m), nn = static_cast<double>(n);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] == 1) {
            comp.v10.push_back((r_all[i] - r_pos[ip]) / nn);
            ++ip;
        } else {
            comp.v01.push_back(1.0 - (r_all[i] - r_neg[in]) / mm);
            ++in;
        }
    }
    // same rank expression as auroc(), so the two agree bitwise; it equals
    // the mean of v10 because the positives' own midranks sum to m(m+1)/2
    double sum_pos = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (labels[i] == 1) sum_pos += r_all[i];
    comp.auc = (sum_pos - mm * (mm + 1.0) / 2.0) / (mm * nn);
    return comp;
}

static double covariance(const std::vector<double>& x, const std::vector<double>& y) {
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(x.size());
    my /= static_cast<double>(y.size());
    double acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - mx) * (y[i] - my);
    return acc / static_cast<double>(x.size() - 1);
}

DelongResult delong_test(std::span<const double> scores_a,
                         std::span<const double> scores_b,
                         std::span<const int> labels) {
    if (scores_a.size() != scores_b.size())
        throw ContractError("delong_test: score lists differ in length");
    Components ca = structural_components(scores_a, labels);
    Components cb = structural_components(scores_b, labels);
    std::size_t m = ca.v10.size(), n = ca.v01.size();
    if (m < 2 || n < 2)
        throw ContractError("delong_test: needs at least two positives and two negatives");

    double s10_aa = covariance(ca.v10, ca.v10);
    double s10_bb = covariance(cb.v10, cb.v10);
    double s10_ab = covariance(ca.v10, cb.v10);
    double s01_aa = covariance(ca.v01, ca.v01);
    double s01_bb = covariance(cb.v01, cb.v01);
    double s01_ab = covariance(ca.v01, cb.v01);

    double var_diff = (s10_aa + s10_bb - 2.0 * s10_ab) / static_cast<double>(m) +
                      (s01_aa + s01_bb - 2.0 * s01_ab) / static_cast<double>(n);
    if (!(var_diff > 0.0)) throw DegenerateTestError(ca.auc, cb.auc);

    DelongResult res;
    res.auc_a = ca.auc;
    res.auc_b = cb.auc;
    res.z = (ca.auc - cb.auc) / std::sqrt(var_diff);
    res.p = std::erfc(std::abs(res.z) / std::sqrt(2.0));
    return res;
}

}  // namespace bimamba::metrics
