#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include <doctest.h>

#include "bimamba/tensor.hpp"

namespace testutil {

using bimamba::i64;
using bimamba::Tensor;

inline bool close(double a, double b, double tol) { return std::abs(a - b) <= tol; }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    auto va = a.to_vector(), vb = b.to_vector();
    double m = 0;
    for (std::size_t i = 0; i < va.size(); ++i) m = std::max(m, std::abs(va[i] - vb[i]));
    return m;
}

inline double max_abs(const Tensor& a) {
    double m = 0;
    for (double v : a.to_vector()) m = std::max(m, std::abs(v));
    return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
    auto va = a.to_vector(), vb = b.to_vector();
    for (std::size_t i = 0; i < va.size(); ++i)
        if (va[i] != vb[i]) return false;
    return true;
}

// Central-difference check of every input gradient of `forward`, which must
// build a scalar loss from the given leaves. Relative error is measured
// against the larger magnitude with an absolute floor.
inline void check_gradients(const std::function<Tensor()>& forward,
                            const std::vector<Tensor>& leaves, double step = 1e-4,
                            double rtol = 1e-3, double atol = 1e-7) {
    bimamba::reset_graph();
    for (const Tensor& leaf : leaves) const_cast<Tensor&>(leaf).zero_grad();
    Tensor loss = forward();
    bimamba::backward(loss);
    std::vector<std::vector<double>> analytic;
    for (const Tensor& leaf : leaves)
        analytic.push_back(leaf.has_grad()
                               ? leaf.grad().to_vector()
                               : std::vector<double>(static_cast<std::size_t>(leaf.numel()), 0.0));
    bimamba::reset_graph();

    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor leaf = leaves[li];
        auto vals = leaf.mutable_data<double>();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            double saved = vals[i];
            double hi, lo;
            {
                bimamba::NoGradGuard ng;
                vals[i] = saved + step;
                hi = forward().at(0);
                vals[i] = saved - step;
                lo = forward().at(0);
                vals[i] = saved;
            }
            double fd = (hi - lo) / (2.0 * step);
            double ga = analytic[li][i];
            double diff = std::abs(ga - fd);
            if (diff > atol) {
                double rel = diff / std::max(std::abs(ga), std::abs(fd));
                INFO("leaf ", li, " coord ", i, ": analytic ", ga, " vs fd ", fd);
                CHECK(rel < rtol);
            }
        }
        leaf.zero_grad();
    }
}

}  // namespace testutil
