#include <doctest.h>

#include "bimamba/ssm.hpp"
#include "helpers.hpp"

using namespace bimamba;
using namespace bimamba::ssm;
using testutil::bitwise_equal;
using testutil::max_abs;
using testutil::max_abs_diff;

namespace {

ScanCoefficients random_coef(i64 L, i64 E, i64 N, u64 seed, Dtype dt) {
    ScanCoefficients c;
    c.a_bar = Tensor::uniform({L, E, N}, mix_seed(seed, 1), -0.95, -0.01, dt);
    c.b_bar_x = Tensor::uniform({L, E, N}, mix_seed(seed, 2), -1, 1, dt);
    c.c = Tensor::uniform({L, N}, mix_seed(seed, 3), -1, 1, dt);
    return c;
}

double scan_rel_err(const ScanCoefficients& c) {
    NoGradGuard ng;
    Tensor ys = selective_scan_sequential(c);
    Tensor yp = selective_scan_parallel(c);
    return max_abs_diff(ys, yp) / std::max(1.0, max_abs(ys));
}

}  // namespace

TEST_CASE("generate_ssm_inputs: zero input yields bias-driven delta and zero B, C") {
    auto p = SsmDirectionParams::init(6, 3, 4, 2, Direction::Forward, 5, Dtype::Float64);
    Tensor x0 = Tensor::zeros({4, 6}, Dtype::Float64);
    SsmInputs in = generate_ssm_inputs(x0, p);
    auto bias = p.delta_bias.to_vector();
    for (i64 t = 0; t < 4; ++t)
        for (i64 e = 0; e < 6; ++e)
            CHECK(testutil::close(in.delta.at({t, e}),
                                  stable_softplus(bias[static_cast<std::size_t>(e)]), 1e-12));
    CHECK(max_abs(in.b) == 0.0);
    CHECK(max_abs(in.c) == 0.0);
}

TEST_CASE("generate_ssm_inputs: identical rows map to identical parameter rows") {
    auto p = SsmDirectionParams::init(5, 4, 4, 2, Direction::Forward, 6, Dtype::Float64);
    std::vector<double> row{0.3, -0.8, 1.1, 0.0, 2.2};
    std::vector<double> two_rows = row;
    two_rows.insert(two_rows.end(), row.begin(), row.end());
    SsmInputs in = generate_ssm_inputs(Tensor::from_values({2, 5}, two_rows, Dtype::Float64), p);
    for (i64 e = 0; e < 5; ++e) CHECK(in.delta.at({0, e}) == in.delta.at({1, e}));
    for (i64 n = 0; n < 4; ++n) {
        CHECK(in.b.at({0, n}) == in.b.at({1, n}));
        CHECK(in.c.at({0, n}) == in.c.at({1, n}));
    }
}

TEST_CASE("generate_ssm_inputs: inverse-softplus bias recovers the target timescale") {
    auto p = SsmDirectionParams::init(3, 2, 4, 1, Direction::Forward, 7, Dtype::Float64);
    double target = 0.01;
    p.delta_bias = Tensor::full({3}, inverse_softplus(target), Dtype::Float64, true);
    SsmInputs in = generate_ssm_inputs(Tensor::zeros({2, 3}, Dtype::Float64), p);
    for (i64 t = 0; t < 2; ++t)
        for (i64 e = 0; e < 3; ++e) CHECK(testutil::close(in.delta.at({t, e}), target, 1e-12));
}

TEST_CASE("discretize: unit and zero steps") {
    i64 L = 3, E = 2, N = 4;
    Tensor a = Tensor::uniform({E, N}, 11, -3, -0.1, Dtype::Float64);
    Tensor b = Tensor::uniform({L, N}, 12, -1, 1, Dtype::Float64);

    auto [a1, b1] = discretize(Tensor::ones({L, E}, Dtype::Float64), a, b);
    for (i64 t = 0; t < L; ++t)
        for (i64 e = 0; e < E; ++e)
            for (i64 n = 0; n < N; ++n) {
                CHECK(a1.at({t, e, n}) == a.at({e, n}));
                CHECK(b1.at({t, e, n}) == b.at({t, n}));
            }

    auto [a0, b0] = discretize(Tensor::zeros({L, E}, Dtype::Float64), a, b);
    CHECK(max_abs(a0) == 0.0);
    CHECK(max_abs(b0) == 0.0);
}

TEST_CASE("discretize: dividing out the step recovers the state matrix") {
    i64 L = 4, E = 3, N = 2;
    Tensor delta = Tensor::uniform({L, E}, 13, 0.01, 0.1, Dtype::Float64);
    Tensor a = Tensor::uniform({E, N}, 14, -3, -0.1, Dtype::Float64);
    Tensor b = Tensor::uniform({L, N}, 15, -1, 1, Dtype::Float64);
    auto [a_bar, b_bar] = discretize(delta, a, b);
    for (i64 t = 0; t < L; ++t)
        for (i64 e = 0; e < E; ++e)
            for (i64 n = 0; n < N; ++n)
                CHECK(testutil::close(a_bar.at({t, e, n}) / delta.at({t, e}), a.at({e, n}),
                                      1e-12));
    (void)b_bar;
}

TEST_CASE("sequential scan: memoryless case and single step") {
    i64 L = 5, E = 3, N = 4;
    ScanCoefficients c = random_coef(L, E, N, 21, Dtype::Float64);
    c.a_bar = Tensor::zeros({L, E, N}, Dtype::Float64);
    NoGradGuard ng;
    Tensor y = selective_scan_sequential(c);
    for (i64 t = 0; t < L; ++t)
        for (i64 e = 0; e < E; ++e) {
            double want = 0;
            for (i64 n = 0; n < N; ++n) want += c.c.at({t, n}) * c.b_bar_x.at({t, e, n});
            CHECK(testutil::close(y.at({t, e}), want, 1e-12));
        }

    ScanCoefficients one = random_coef(1, E, N, 22, Dtype::Float64);
    Tensor y1 = selective_scan_sequential(one);
    for (i64 e = 0; e < E; ++e) {
        double want = 0;
        for (i64 n = 0; n < N; ++n) want += one.c.at({0, n}) * one.b_bar_x.at({0, e, n});
        CHECK(testutil::close(y1.at({0, e}), want, 1e-12));
    }
}

TEST_CASE("sequential scan: constant coefficients give the geometric series") {
    i64 L = 12;
    double a = -0.77;
    ScanCoefficients c;
    c.a_bar = Tensor::full({L, 1, 1}, a, Dtype::Float64);
    c.b_bar_x = Tensor::ones({L, 1, 1}, Dtype::Float64);
    c.c = Tensor::ones({L, 1}, Dtype::Float64);
    NoGradGuard ng;
    Tensor y = selective_scan_sequential(c);
    for (i64 t = 0; t < L; ++t) {
        double want = (1.0 - std::pow(a, static_cast<double>(t + 1))) / (1.0 - a);
        CHECK(testutil::close(y.at({t, 0}), want, 1e-12));
    }
}

TEST_CASE("parallel scan: agrees with the sequential oracle") {
    for (i64 L : {1, 2, 3, 5, 8, 13, 64, 127, 128}) {
        CHECK(scan_rel_err(random_coef(L, 4, 3, 100 + static_cast<u64>(L), Dtype::Float32)) <
              1e-5);
        ScanCoefficients c64 = random_coef(L, 3, 2, 200 + static_cast<u64>(L), Dtype::Float64);
        NoGradGuard ng;
        CHECK(max_abs_diff(selective_scan_sequential(c64), selective_scan_parallel(c64)) <
              1e-10 * std::max(1.0, max_abs(selective_scan_sequential(c64))));
    }
}

TEST_CASE("combine operator is associative") {
    NoGradGuard ng;
    for (u64 s = 0; s < 10; ++s) {
        auto t = [&](u64 k) { return Tensor::uniform({2, 3}, 300 + 10 * s + k, -1, 1, Dtype::Float64); };
        Tensor a1 = t(0), b1 = t(1), a2 = t(2), b2 = t(3), a3 = t(4), b3 = t(5);
        auto [a12, b12] = scan_combine(a1, b1, a2, b2);
        auto [l_a, l_b] = scan_combine(a12, b12, a3, b3);
        auto [a23, b23] = scan_combine(a2, b2, a3, b3);
        auto [r_a, r_b] = scan_combine(a1, b1, a23, b23);
        CHECK(max_abs_diff(l_a, r_a) < 1e-12);
        CHECK(max_abs_diff(l_b, r_b) < 1e-12);
    }
}

TEST_CASE("directional scan: reversal definition and direction causality") {
    i64 L = 9, E = 4, N = 3;
    auto fwd = SsmDirectionParams::init(E, N, 4, 1, Direction::Forward, 31, Dtype::Float64);
    auto bwd = fwd;
    bwd.direction = Direction::Backward;
    Tensor x = Tensor::uniform({L, E}, 32, -1, 1, Dtype::Float64);
    NoGradGuard ng;

    Tensor yb = directional_scan(x, bwd, ScanMode::Sequential);
    Tensor manual = reverse_rows(directional_scan(reverse_rows(x), fwd, ScanMode::Sequential));
    CHECK(max_abs_diff(yb, manual) == 0.0);

    // forward output at t ignores positions > t; backward ignores positions < t
    i64 t0 = 4;
    std::vector<double> xv = x.to_vector();
    xv[static_cast<std::size_t>(7 * E + 2)] += 0.3;
    Tensor xp = Tensor::from_values({L, E}, xv, Dtype::Float64);
    Tensor f0 = directional_scan(x, fwd, ScanMode::Sequential);
    Tensor f1 = directional_scan(xp, fwd, ScanMode::Sequential);
    for (i64 t = 0; t <= t0; ++t)
        for (i64 e = 0; e < E; ++e) CHECK(f0.at({t, e}) == f1.at({t, e}));

    std::vector<double> xw = x.to_vector();
    xw[static_cast<std::size_t>(1 * E + 0)] += 0.3;
    Tensor xq = Tensor::from_values({L, E}, xw, Dtype::Float64);
    Tensor b0 = directional_scan(x, bwd, ScanMode::Sequential);
    Tensor b1 = directional_scan(xq, bwd, ScanMode::Sequential);
    for (i64 t = 2; t < L; ++t)
        for (i64 e = 0; e < E; ++e) CHECK(b0.at({t, e}) == b1.at({t, e}));
}

TEST_CASE("directional scan: palindromic input through one parameter set mirrors") {
    i64 E = 3, N = 2;
    auto fwd = SsmDirectionParams::init(E, N, 4, 1, Direction::Forward, 41, Dtype::Float64);
    auto bwd = fwd;
    bwd.direction = Direction::Backward;
    // palindrome rows: r0 r1 r2 r1 r0
    Tensor r = Tensor::uniform({3, E}, 42, -1, 1, Dtype::Float64);
    std::vector<double> rows = r.to_vector();
    std::vector<double> pal;
    for (i64 i : {0, 1, 2, 1, 0})
        for (i64 e = 0; e < E; ++e) pal.push_back(rows[static_cast<std::size_t>(i * E + e)]);
    Tensor x = Tensor::from_values({5, E}, pal, Dtype::Float64);
    NoGradGuard ng;
    Tensor yf = directional_scan(x, fwd, ScanMode::Sequential);
    Tensor yb = directional_scan(x, bwd, ScanMode::Sequential);
    CHECK(max_abs_diff(yf, reverse_rows(yb)) < 1e-12);
}

TEST_CASE("scan coefficient impulse: forward propagates right, backward stays put") {
    i64 L = 6, E = 2, N = 3;
    ScanCoefficients c = random_coef(L, E, N, 51, Dtype::Float64);
    // b contribution only at position 0
    std::vector<double> bx(static_cast<std::size_t>(L * E * N), 0.0);
    for (i64 e = 0; e < E; ++e)
        for (i64 n = 0; n < N; ++n) bx[static_cast<std::size_t>(e * N + n)] = 1.0;
    c.b_bar_x = Tensor::from_values({L, E, N}, bx, Dtype::Float64);
    NoGradGuard ng;
    Tensor y = selective_scan_sequential(c);
    for (i64 t = 0; t < L; ++t) CHECK(std::abs(y.at({t, 0})) > 0.0);
}

TEST_CASE("stability: discrete steps stay inside the unit circle at initialization") {
    i64 E = 16, N = 8;
    for (auto dir : {Direction::Forward, Direction::Backward}) {
        auto p = SsmDirectionParams::init(E, N, 4, 1, dir, 61, Dtype::Float64);
        SsmInputs in = generate_ssm_inputs(Tensor::zeros({3, E}, Dtype::Float64), p);
        auto [a_bar, b_bar] = discretize(in.delta, p.state_matrix(), in.b);
        auto v = a_bar.to_vector();
        for (double x : v) {
            CHECK(std::abs(x) > 0.0);
            CHECK(std::abs(x) < 1.0);
        }
        (void)b_bar;
    }
}

TEST_CASE("state matrix is strictly negative by construction") {
    auto p = SsmDirectionParams::init(4, 3, 4, 1, Direction::Forward, 71, Dtype::Float64);
    for (double v : p.state_matrix().to_vector()) CHECK(v < 0.0);
}

TEST_CASE("gradients through both scan routes match finite differences") {
    for (i64 L : {2, 7, 16}) {
        i64 E = 3, N = 2;
        Tensor a = Tensor::uniform({L, E, N}, 80 + static_cast<u64>(L), -0.9, -0.1,
                                   Dtype::Float64, true);
        Tensor bx = Tensor::uniform({L, E, N}, 81 + static_cast<u64>(L), -1, 1,
                                    Dtype::Float64, true);
        Tensor c = Tensor::uniform({L, N}, 82 + static_cast<u64>(L), -1, 1, Dtype::Float64,
                                   true);
        Tensor r = Tensor::uniform({L, E}, 83 + static_cast<u64>(L), -1, 1, Dtype::Float64);
        testutil::check_gradients(
            [&] { return sum_all(mul(selective_scan_sequential({a, bx, c}), r)); },
            {a, bx, c});
        testutil::check_gradients(
            [&] { return sum_all(mul(selective_scan_parallel({a, bx, c}), r)); },
            {a, bx, c});
    }
}

TEST_CASE("gradients through the full directional pipeline match finite differences") {
    i64 L = 6, E = 4, N = 2;
    auto p = SsmDirectionParams::init(E, N, 4, 1, Direction::Backward, 91, Dtype::Float64);
    Tensor x = Tensor::uniform({L, E}, 92, -1, 1, Dtype::Float64, true);
    Tensor r = Tensor::uniform({L, E}, 93, -1, 1, Dtype::Float64);
    for (auto mode : {ScanMode::Sequential, ScanMode::Parallel}) {
        testutil::check_gradients(
            [&] { return sum_all(mul(directional_scan(x, p, mode), r)); },
            {x, p.a_log, p.delta_low, p.delta_bias, p.b_weight, p.c_weight});
    }
}

TEST_CASE("linearity: doubling the driven term doubles the output exactly") {
    ScanCoefficients c = random_coef(11, 3, 4, 95, Dtype::Float64);
    NoGradGuard ng;
    Tensor y1 = selective_scan_sequential(c);
    ScanCoefficients c2{c.a_bar, scale(c.b_bar_x, 2.0), c.c};
    Tensor y2 = selective_scan_sequential(c2);
    CHECK(bitwise_equal(scale(y1, 2.0), y2));
    Tensor p2 = selective_scan_parallel(c2);
    CHECK(bitwise_equal(scale(selective_scan_parallel(c), 2.0), p2));
}

TEST_CASE("streaming and materialized sequential pipelines agree bitwise") {
    i64 L = 10, E = 6, N = 4;
    auto p = SsmDirectionParams::init(E, N, 4, 1, Direction::Forward, 97, Dtype::Float32);
    Tensor x = Tensor::uniform({L, E}, 98, -1, 1, Dtype::Float32);
    NoGradGuard ng;
    Tensor streaming = scan_pipeline(x, p, ScanMode::Sequential, Discretization::Multiplication);
    ScanCoefficients coef = make_scan_coefficients(x, p, Discretization::Multiplication);
    Tensor materialized = selective_scan_sequential(coef);
    CHECK(bitwise_equal(streaming, materialized));
}
