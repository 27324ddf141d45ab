#include "bimamba/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <mutex>
#include <sstream>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace bimamba {

// ---- threading --------------------------------------------------------------

namespace {
int default_threads() {
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(std::min(hw, 8u));
}
std::atomic<int> g_thread_count{default_threads()};
}  // namespace

void set_thread_count(int n) { g_thread_count.store(n < 1 ? 1 : n); }
int thread_count() { return g_thread_count.load(); }

// ---- shapes -----------------------------------------------------------------

i64 shape_numel(const Shape& s) {
    i64 n = 1;
    for (i64 e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ']';
    return os.str();
}

static void validate_shape(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (i64 e : s) {
        if (e < 1)
            throw ShapeError("invalid shape " + shape_str(s) +
                             ": extents must be positive");
    }
}

// ---- accountant ---------------------------------------------------------------

namespace {
thread_local std::shared_ptr<AccountantState> t_accountant;
}

AccountingScope::AccountingScope()
    : state_(std::make_shared<AccountantState>()), previous_(t_accountant) {
    t_accountant = state_;
}

AccountingScope::~AccountingScope() { t_accountant = previous_; }

// ---- storage ------------------------------------------------------------------

namespace detail {

Storage::Storage(Dtype dt, i64 n, bool zeroed) : dtype(dt), numel(n) {
#if defined(__GLIBC__)
    // keep multi-megabyte op buffers on the heap so freed blocks are reused
    // instead of being returned to the kernel and refaulted every op
    static std::once_flag malloc_tuned;
    std::call_once(malloc_tuned, [] {
        mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
        mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    });
#endif
    auto count = static_cast<std::size_t>(n);
    if (dt == Dtype::Float32)
        f32 = zeroed ? std::make_unique<float[]>(count)
                     : std::make_unique_for_overwrite<float[]>(count);
    else
        f64 = zeroed ? std::make_unique<double[]>(count)
                     : std::make_unique_for_overwrite<double[]>(count);
    if (t_accountant) {
        accountant = t_accountant;
        accountant->live += bytes();
        accountant->total += bytes();
        accountant->peak = std::max(accountant->peak, accountant->live);
    }
}

Storage::~Storage() {
    if (accountant) accountant->live -= bytes();
}

template <>
float* Storage::ptr<float>() {
    return f32.get();
}
template <>
double* Storage::ptr<double>() {
    return f64.get();
}
template <>
const float* Storage::ptr<float>() const {
    return f32.get();
}
template <>
const double* Storage::ptr<double>() const {
    return f64.get();
}

}  // namespace detail

// ---- dtype dispatch -------------------------------------------------------------

template <typename F>
static decltype(auto) dispatch(Dtype dt, F&& f) {
    if (dt == Dtype::Float32) return f(float{});
    return f(double{});
}

// ---- tensor basics ----------------------------------------------------------------

static std::shared_ptr<detail::TensorData> make_data(const Shape& shape, Dtype dt,
                                                     bool requires_grad, bool zeroed) {
    validate_shape(shape);
    auto d = std::make_shared<detail::TensorData>();
    d->shape = shape;
    d->dtype = dt;
    d->values = std::make_shared<detail::Storage>(dt, shape_numel(shape), zeroed);
    d->requires_grad = requires_grad;
    return d;
}

const Shape& Tensor::shape() const {
    if (!d_) throw ContractError("use of an undefined tensor");
    return d_->shape;
}
Dtype Tensor::dtype() const {
    if (!d_) throw ContractError("use of an undefined tensor");
    return d_->dtype;
}
i64 Tensor::numel() const { return shape_numel(shape()); }
bool Tensor::requires_grad() const { return d_ && d_->requires_grad; }

template <typename T>
std::span<const T> Tensor::data() const {
    if (!d_) throw ContractError("use of an undefined tensor");
    return {d_->values->ptr<T>(), static_cast<std::size_t>(numel())};
}
template <typename T>
std::span<T> Tensor::mutable_data() {
    if (!d_) throw ContractError("use of an undefined tensor");
    return {d_->values->ptr<T>(), static_cast<std::size_t>(numel())};
}

template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;
template std::span<float> Tensor::mutable_data<float>();
template std::span<double> Tensor::mutable_data<double>();

double Tensor::at(i64 flat_index) const {
    if (flat_index < 0 || flat_index >= numel())
        throw ContractError("tensor index out of range");
    return dispatch(dtype(), [&](auto tag) -> double {
        using T = decltype(tag);
        return static_cast<double>(data<T>()[static_cast<std::size_t>(flat_index)]);
    });
}

double Tensor::at(const std::vector<i64>& index) const {
    const Shape& s = shape();
    if (index.size() != s.size()) throw ContractError("tensor index rank mismatch");
    i64 flat = 0;
    for (std::size_t d = 0; d < s.size(); ++d) {
        if (index[d] < 0 || index[d] >= s[d])
            throw ContractError("tensor index out of range");
        flat = flat * s[d] + index[d];
    }
    return at(flat);
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> out(static_cast<std::size_t>(numel()));
    dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto v = data<T>();
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<double>(v[i]);
    });
    return out;
}

bool Tensor::has_grad() const { return d_ && d_->grad != nullptr; }

Tensor Tensor::grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    Tensor g = Tensor::zeros(shape(), dtype());
    dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = d_->grad->ptr<T>();
        std::copy(src, src + numel(), g.mutable_data<T>().data());
    });
    return g;
}

void Tensor::zero_grad() {
    if (d_) d_->grad.reset();
}

// ---- creation -----------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, Dtype dt, bool requires_grad) {
    return Tensor(make_data(shape, dt, requires_grad, true));
}

Tensor Tensor::uninitialized(const Shape& shape, Dtype dt) {
    return Tensor(make_data(shape, dt, false, false));
}

Tensor Tensor::ones(const Shape& shape, Dtype dt, bool requires_grad) {
    return full(shape, 1.0, dt, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, Dtype dt, bool requires_grad) {
    Tensor t(make_data(shape, dt, requires_grad, false));
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        auto v = t.mutable_data<T>();
        std::fill(v.begin(), v.end(), static_cast<T>(value));
    });
    return t;
}

Tensor Tensor::uniform(const Shape& shape, u64 seed, double lo, double hi, Dtype dt,
                       bool requires_grad) {
    Tensor t(make_data(shape, dt, requires_grad, false));
    Rng rng(seed);
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        auto v = t.mutable_data<T>();
        for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    });
    return t;
}

Tensor Tensor::normal(const Shape& shape, u64 seed, double mean, double stddev, Dtype dt,
                      bool requires_grad) {
    Tensor t(make_data(shape, dt, requires_grad, false));
    Rng rng(seed);
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        auto v = t.mutable_data<T>();
        for (auto& x : v) x = static_cast<T>(rng.normal(mean, stddev));
    });
    return t;
}

Tensor Tensor::from_values(const Shape& shape, const std::vector<double>& values, Dtype dt,
                           bool requires_grad) {
    Tensor t(make_data(shape, dt, requires_grad, false));
    if (static_cast<i64>(values.size()) != t.numel())
        throw ShapeError("from_values: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        auto v = t.mutable_data<T>();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(values[i]);
    });
    return t;
}

// ---- autograd machinery ----------------------------------------------------------

namespace {
thread_local bool t_grad_enabled = true;
thread_local GradGraph t_graph;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = saved_; }

GradGraph& GradGraph::active() { return t_graph; }

std::size_t GradGraph::size() const { return nodes_.size(); }
bool GradGraph::consumed() const { return consumed_; }

void GradGraph::reset() {
    nodes_.clear();
    consumed_ = false;
    ++generation_;
}

void GradGraph::record(Node node) { nodes_.push_back(std::move(node)); }

static detail::Storage* ensure_grad(detail::TensorData* td) {
    if (!td->grad)
        td->grad = std::make_shared<detail::Storage>(td->dtype, td->numel(), true);
    return td->grad.get();
}

void GradGraph::run_backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be a scalar tensor, got shape " +
                            shape_str(loss.shape()));
    if (consumed_)
        throw ContractError("backward: graph already consumed; reset before reuse");
    detail::TensorData* ld = loss.impl();
    if (!ld->is_leaf && ld->node_generation != generation_)
        throw ContractError("backward: loss was not produced under the active graph");
    dispatch(loss.dtype(), [&](auto tag) {
        using T = decltype(tag);
        ensure_grad(ld)->ptr<T>()[0] = static_cast<T>(1);
    });
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output.impl()->grad) it->backprop();
    }
    consumed_ = true;
}

void backward(const Tensor& loss) { GradGraph::active().run_backward(loss); }
void reset_graph() { GradGraph::active().reset(); }

// A float is non-finite exactly when its exponent bits are all ones; the
// integer test OR-reduces, so the loop vectorizes and has no serial
// floating-point dependency chain.
static bool all_finite(const float* p, i64 n) {
    std::uint32_t bad = 0;
    for (i64 i = 0; i < n; ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, p + i, 4);
        bad |= static_cast<std::uint32_t>((bits & 0x7f800000u) == 0x7f800000u);
    }
    return bad == 0;
}
static bool all_finite(const double* p, i64 n) {
    std::uint64_t bad = 0;
    for (i64 i = 0; i < n; ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, p + i, 8);
        bad |= static_cast<std::uint64_t>((bits & 0x7ff0000000000000ull) ==
                                          0x7ff0000000000000ull);
    }
    return bad == 0;
}

// Wraps freshly computed op output: checks finiteness, and records a tape
// node when recording is on and some input carries gradient.
static void finalize_op(const char* opname, Tensor& out, std::vector<Tensor> inputs,
                        std::function<void()> backprop) {
    dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto v = out.data<T>();
        if (!all_finite(v.data(), static_cast<i64>(v.size()))) {
            for (std::size_t i = 0; i < v.size(); ++i)
                if (!std::isfinite(static_cast<double>(v[i])))
                    throw NumericError(std::string(opname) +
                                       ": produced a non-finite value at index " +
                                       std::to_string(i));
        }
    });
    bool needs = false;
    for (const Tensor& in : inputs)
        if (in.requires_grad()) needs = true;
    if (!needs || !grad_enabled()) return;
    detail::TensorData* od = out.impl();
    od->requires_grad = true;
    od->is_leaf = false;
    od->node_generation = GradGraph::active().generation();
    GradGraph::active().record({out, std::move(inputs), std::move(backprop)});
}

static void check_same_dtype(const char* opname, const Tensor& a, const Tensor& b) {
    if (a.dtype() != b.dtype())
        throw ContractError(std::string(opname) + ": dtype mismatch (" +
                            dtype_name(a.dtype()) + " vs " + dtype_name(b.dtype()) +
                            "); no implicit promotion");
}

// ---- scalar math helpers -----------------------------------------------------------

double stable_softplus(double v) {
    if (v > 20.0) return v;
    if (v < -20.0) return std::exp(v);
    return std::log1p(std::exp(v));
}

double stable_sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    double e = std::exp(v);
    return e / (1.0 + e);
}

double inverse_softplus(double y) {
    if (y <= 0.0) throw ContractError("inverse_softplus: argument must be positive");
    return std::log(std::expm1(y));
}

// ---- broadcasting -----------------------------------------------------------------

namespace {

// Right-aligned broadcast: extents must match or one side must be 1
// (missing leading dimensions count as 1).
Shape broadcast_shape(const char* opname, const Shape& a, const Shape& b) {
    std::size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        i64 ea = i < r - ra ? 1 : a[i - (r - ra)];
        i64 eb = i < r - rb ? 1 : b[i - (r - rb)];
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeError(std::string(opname) + ": shapes " + shape_str(a) +
                             " and " + shape_str(b) + " do not broadcast");
        out[i] = std::max(ea, eb);
    }
    return out;
}

// Flat strides into `in` for each output dimension; 0 where `in` broadcasts.
std::vector<i64> broadcast_strides(const Shape& out, const Shape& in) {
    std::size_t r = out.size(), ri = in.size();
    std::vector<i64> strides(r, 0);
    i64 acc = 1;
    for (std::size_t i = 0; i < ri; ++i) {
        std::size_t d = ri - 1 - i;           // dimension in `in`
        std::size_t od = r - 1 - i;           // matching output dimension
        if (in[d] != 1) strides[od] = acc;
        acc *= in[d];
    }
    return strides;
}

bool same_extents(const Shape& a, const Shape& b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

// Row-major strides of a shape.
std::vector<i64> dense_strides(const Shape& s) {
    std::vector<i64> out(s.size());
    i64 acc = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
        out[i] = acc;
        acc *= s[i];
    }
    return out;
}

// Nested-loop apply of po[i] = f(pa[.], pb[.]) over a broadcast output.
// The innermost loop is specialized on which operand broadcasts so it
// stays a dense, vectorizable pass.
template <typename T, typename F>
void bcast_apply(const i64* dims, const i64* so, const i64* sa, const i64* sb, int nd,
                 T* po, const T* pa, const T* pb, F&& f) {
    if (nd == 1) {
        i64 n = dims[0];
        if (sa[0] == 1 && sb[0] == 1) {
            for (i64 i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
        } else if (sa[0] == 1 && sb[0] == 0) {
            T b = pb[0];
            for (i64 i = 0; i < n; ++i) po[i] = f(pa[i], b);
        } else if (sa[0] == 0 && sb[0] == 1) {
            T a = pa[0];
            for (i64 i = 0; i < n; ++i) po[i] = f(a, pb[i]);
        } else {
            for (i64 i = 0; i < n; ++i) po[i] = f(pa[i * sa[0]], pb[i * sb[0]]);
        }
        return;
    }
    for (i64 i = 0; i < dims[0]; ++i)
        bcast_apply(dims + 1, so + 1, sa + 1, sb + 1, nd - 1, po + i * so[0],
                    pa + i * sa[0], pb + i * sb[0], f);
}

// Accumulates term(oa_value, ob_value, grad_out) into a broadcast target.
// When the target broadcasts along the innermost axis the partial sum is
// reduced locally before the single strided store.
template <typename T, typename F>
void bcast_accumulate(const i64* dims, const i64* so, const i64* sa, const i64* sb,
                      const i64* st, int nd, const T* go, const T* pa, const T* pb,
                      T* gt, F&& term) {
    if (nd == 1) {
        i64 n = dims[0];
        if (st[0] == 0) {
            T acc = 0;
            for (i64 i = 0; i < n; ++i) acc += term(go[i], pa[i * sa[0]], pb[i * sb[0]]);
            gt[0] += acc;
        } else {
            for (i64 i = 0; i < n; ++i)
                gt[i] += term(go[i], pa[i * sa[0]], pb[i * sb[0]]);
        }
        return;
    }
    for (i64 i = 0; i < dims[0]; ++i)
        bcast_accumulate(dims + 1, so + 1, sa + 1, sb + 1, st + 1, nd - 1, go + i * so[0],
                         pa + i * sa[0], pb + i * sb[0], gt + i * st[0], term);
}

}  // namespace

// ---- binary elementwise -------------------------------------------------------------

Tensor binary(BinaryOp op, const Tensor& a, const Tensor& b) {
    static const char* names[] = {"add", "sub", "mul", "div"};
    const char* opname = names[static_cast<int>(op)];
    check_same_dtype(opname, a, b);
    Shape out_shape = broadcast_shape(opname, a.shape(), b.shape());
    Tensor out = Tensor::uninitialized(out_shape, a.dtype());

    if (op == BinaryOp::Div) {
        dispatch(b.dtype(), [&](auto tag) {
            using T = decltype(tag);
            for (T v : b.data<T>())
                if (v == static_cast<T>(0))
                    throw NumericError("div: division by exact zero");
        });
    }

    bool fast = same_extents(a.shape(), b.shape());
    auto sa = fast ? std::vector<i64>{} : broadcast_strides(out_shape, a.shape());
    auto sb = fast ? std::vector<i64>{} : broadcast_strides(out_shape, b.shape());

    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>().data();
        const T* pb = b.data<T>().data();
        T* po = out.mutable_data<T>().data();
        if (fast) {
            i64 n = out.numel();
            switch (op) {
                case BinaryOp::Add:
                    for (i64 i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
                    break;
                case BinaryOp::Sub:
                    for (i64 i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
                    break;
                case BinaryOp::Mul:
                    for (i64 i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
                    break;
                default:
                    for (i64 i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
            }
        } else {
            auto so = dense_strides(out_shape);
            int nd = static_cast<int>(out_shape.size());
            switch (op) {
                case BinaryOp::Add:
                    bcast_apply(out_shape.data(), so.data(), sa.data(), sb.data(), nd, po,
                                pa, pb, [](T x, T y) { return x + y; });
                    break;
                case BinaryOp::Sub:
                    bcast_apply(out_shape.data(), so.data(), sa.data(), sb.data(), nd, po,
                                pa, pb, [](T x, T y) { return x - y; });
                    break;
                case BinaryOp::Mul:
                    bcast_apply(out_shape.data(), so.data(), sa.data(), sb.data(), nd, po,
                                pa, pb, [](T x, T y) { return x * y; });
                    break;
                default:
                    bcast_apply(out_shape.data(), so.data(), sa.data(), sb.data(), nd, po,
                                pa, pb, [](T x, T y) { return x / y; });
            }
        }
    });

    bool fast_back = fast;
    Tensor av = a, bv = b, ov = out;
    finalize_op(opname, out, {a, b}, [op, av, bv, ov, out_shape, fast_back]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = ov.impl()->grad->ptr<T>();
            const T* pa = av.data<T>().data();
            const T* pb = bv.data<T>().data();
            T* ga = av.requires_grad() ? ensure_grad(av.impl())->ptr<T>() : nullptr;
            T* gb = bv.requires_grad() ? ensure_grad(bv.impl())->ptr<T>() : nullptr;
            if (fast_back) {
                i64 n = ov.numel();
                switch (op) {
                    case BinaryOp::Add:
                        if (ga) for (i64 i = 0; i < n; ++i) ga[i] += go[i];
                        if (gb) for (i64 i = 0; i < n; ++i) gb[i] += go[i];
                        break;
                    case BinaryOp::Sub:
                        if (ga) for (i64 i = 0; i < n; ++i) ga[i] += go[i];
                        if (gb) for (i64 i = 0; i < n; ++i) gb[i] -= go[i];
                        break;
                    case BinaryOp::Mul:
                        if (ga) for (i64 i = 0; i < n; ++i) ga[i] += go[i] * pb[i];
                        if (gb) for (i64 i = 0; i < n; ++i) gb[i] += go[i] * pa[i];
                        break;
                    default:
                        for (i64 i = 0; i < n; ++i) {
                            if (ga) ga[i] += go[i] / pb[i];
                            if (gb) gb[i] -= go[i] * pa[i] / (pb[i] * pb[i]);
                        }
                }
                return;
            }
            auto sa = broadcast_strides(out_shape, av.shape());
            auto sb = broadcast_strides(out_shape, bv.shape());
            auto so = dense_strides(out_shape);
            int nd = static_cast<int>(out_shape.size());
            const i64* dims = out_shape.data();
            if (ga) {
                switch (op) {
                    case BinaryOp::Add:
                    case BinaryOp::Sub:
                        bcast_accumulate(dims, so.data(), sa.data(), sb.data(), sa.data(),
                                         nd, go, pa, pb, ga,
                                         [](T g, T, T) { return g; });
                        break;
                    case BinaryOp::Mul:
                        bcast_accumulate(dims, so.data(), sa.data(), sb.data(), sa.data(),
                                         nd, go, pa, pb, ga,
                                         [](T g, T, T y) { return g * y; });
                        break;
                    default:
                        bcast_accumulate(dims, so.data(), sa.data(), sb.data(), sa.data(),
                                         nd, go, pa, pb, ga,
                                         [](T g, T, T y) { return g / y; });
                }
            }
            if (gb) {
                switch (op) {
                    case BinaryOp::Add:
                        bcast_accumulate(dims, so.data(), sa.data(), sb.data(), sb.data(),
                                         nd, go, pa, pb, gb,
                                         [](T g, T, T) { return g; });
                        break;
                    case BinaryOp::Sub:
                        bcast_accumulate(dims, so.data(), sa.data(), sb.data(), sb.data(),
                                         nd, go, pa, pb, gb,
                                         [](T g, T, T) { return -g; });
                        break;
                    case BinaryOp::Mul:
                        bcast_accumulate(dims, so.data(), sa.data(), sb.data(), sb.data(),
                                         nd, go, pa, pb, gb,
                                         [](T g, T x, T) { return g * x; });
                        break;
                    default:
                        bcast_accumulate(dims, so.data(), sa.data(), sb.data(), sb.data(),
                                         nd, go, pa, pb, gb,
                                         [](T g, T x, T y) { return -g * x / (y * y); });
                }
            }
        });
    });
    return out;
}

// ---- unary elementwise ---------------------------------------------------------------

// Evaluated in the tensor's own precision; the float path uses the float
// libm entry points.
template <typename T>
static T softplus_t(T v) {
    if (v > static_cast<T>(20)) return v;
    if (v < static_cast<T>(-20)) return std::exp(v);
    return std::log1p(std::exp(v));
}
template <typename T>
static T sigmoid_t(T v) {
    if (v >= static_cast<T>(0)) return static_cast<T>(1) / (static_cast<T>(1) + std::exp(-v));
    T e = std::exp(v);
    return e / (static_cast<T>(1) + e);
}

Tensor unary(UnaryOp op, const Tensor& a) {
    static const char* names[] = {"exp", "log", "softplus", "silu", "sigmoid", "tanh"};
    const char* opname = names[static_cast<int>(op)];
    Tensor out = Tensor::uninitialized(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>().data();
        T* po = out.mutable_data<T>().data();
        i64 n = a.numel();
        for (i64 i = 0; i < n; ++i) {
            T v = pa[i];
            T r;
            switch (op) {
                case UnaryOp::Exp: r = std::exp(v); break;
                case UnaryOp::Log: r = std::log(v); break;
                case UnaryOp::Softplus: r = softplus_t(v); break;
                case UnaryOp::Silu: r = v * sigmoid_t(v); break;
                case UnaryOp::Sigmoid: r = sigmoid_t(v); break;
                default: r = std::tanh(v);
            }
            po[i] = r;
        }
    });
    Tensor av = a, ov = out;
    finalize_op(opname, out, {a}, [op, av, ov]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = ov.impl()->grad->ptr<T>();
            const T* pa = av.data<T>().data();
            const T* po = ov.data<T>().data();
            if (!av.requires_grad()) return;
            T* ga = ensure_grad(av.impl())->ptr<T>();
            i64 n = av.numel();
            for (i64 i = 0; i < n; ++i) {
                T v = pa[i];
                T y = po[i];
                T d;
                switch (op) {
                    case UnaryOp::Exp: d = y; break;
                    case UnaryOp::Log: d = static_cast<T>(1) / v; break;
                    case UnaryOp::Softplus: d = sigmoid_t(v); break;
                    case UnaryOp::Silu: {
                        T s = sigmoid_t(v);
                        d = s * (static_cast<T>(1) + v * (static_cast<T>(1) - s));
                        break;
                    }
                    case UnaryOp::Sigmoid: d = y * (static_cast<T>(1) - y); break;
                    default: d = static_cast<T>(1) - y * y;
                }
                ga[i] += go[i] * d;
            }
        });
    });
    return out;
}

Tensor mul_add(const Tensor& a, const Tensor& b, const Tensor& c) {
    check_same_dtype("mul_add", a, b);
    check_same_dtype("mul_add", a, c);
    if (!same_extents(a.shape(), b.shape()) || !same_extents(a.shape(), c.shape()))
        throw ShapeError("mul_add: all operands must share one shape");
    Tensor out = Tensor::uninitialized(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>().data();
        const T* pb = b.data<T>().data();
        const T* pc = c.data<T>().data();
        T* po = out.mutable_data<T>().data();
        i64 n = a.numel();
        for (i64 i = 0; i < n; ++i) po[i] = pa[i] * pb[i] + pc[i];
    });
    Tensor av = a, bv = b, cv = c, ov = out;
    finalize_op("mul_add", out, {a, b, c}, [av, bv, cv, ov]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = ov.impl()->grad->ptr<T>();
            i64 n = ov.numel();
            if (av.requires_grad()) {
                T* ga = ensure_grad(av.impl())->ptr<T>();
                const T* pb = bv.data<T>().data();
                for (i64 i = 0; i < n; ++i) ga[i] += go[i] * pb[i];
            }
            if (bv.requires_grad()) {
                T* gb = ensure_grad(bv.impl())->ptr<T>();
                const T* pa = av.data<T>().data();
                for (i64 i = 0; i < n; ++i) gb[i] += go[i] * pa[i];
            }
            if (cv.requires_grad()) {
                T* gc = ensure_grad(cv.impl())->ptr<T>();
                for (i64 i = 0; i < n; ++i) gc[i] += go[i];
            }
        });
    });
    return out;
}

Tensor scale_expand(const Tensor& u, const Tensor& m) {
    check_same_dtype("scale_expand", u, m);
    if (u.rank() != 2 || m.rank() != 2 || u.dim(1) != m.dim(0))
        throw ShapeError("scale_expand: expects u [R,C] and m [C,K]");
    i64 R = u.dim(0), C = u.dim(1), K = m.dim(1);
    Tensor out = Tensor::uninitialized({R, C, K}, u.dtype());
    dispatch(u.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* __restrict__ pu = u.data<T>().data();
        const T* __restrict__ pm = m.data<T>().data();
        T* __restrict__ po = out.mutable_data<T>().data();
        for (i64 r = 0; r < R; ++r)
            for (i64 c = 0; c < C; ++c) {
                T s = pu[r * C + c];
                const T* mrow = pm + c * K;
                T* orow = po + (r * C + c) * K;
                for (i64 k = 0; k < K; ++k) orow[k] = s * mrow[k];
            }
    });
    Tensor uv = u, mv = m, ov = out;
    finalize_op("scale_expand", out, {u, m}, [uv, mv, ov, R, C, K]() {
        dispatch(uv.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = ov.impl()->grad->ptr<T>();
            const T* pu = uv.data<T>().data();
            const T* pm = mv.data<T>().data();
            T* gu = uv.requires_grad() ? ensure_grad(uv.impl())->ptr<T>() : nullptr;
            T* gm = mv.requires_grad() ? ensure_grad(mv.impl())->ptr<T>() : nullptr;
            for (i64 r = 0; r < R; ++r)
                for (i64 c = 0; c < C; ++c) {
                    const T* grow = go + (r * C + c) * K;
                    const T* mrow = pm + c * K;
                    if (gu) {
                        T acc = 0;
                        for (i64 k = 0; k < K; ++k) acc += grow[k] * mrow[k];
                        gu[r * C + c] += acc;
                    }
                    if (gm) {
                        T s = pu[r * C + c];
                        T* gmrow = gm + c * K;
                        for (i64 k = 0; k < K; ++k) gmrow[k] += s * grow[k];
                    }
                }
        });
    });
    return out;
}

Tensor per_row_outer(const Tensor& u, const Tensor& v) {
    check_same_dtype("per_row_outer", u, v);
    if (u.rank() != 2 || v.rank() != 2 || u.dim(0) != v.dim(0))
        throw ShapeError("per_row_outer: expects u [R,C] and v [R,K]");
    i64 R = u.dim(0), C = u.dim(1), K = v.dim(1);
    Tensor out = Tensor::uninitialized({R, C, K}, u.dtype());
    dispatch(u.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* __restrict__ pu = u.data<T>().data();
        const T* __restrict__ pv = v.data<T>().data();
        T* __restrict__ po = out.mutable_data<T>().data();
        for (i64 r = 0; r < R; ++r) {
            const T* vrow = pv + r * K;
            for (i64 c = 0; c < C; ++c) {
                T s = pu[r * C + c];
                T* orow = po + (r * C + c) * K;
                for (i64 k = 0; k < K; ++k) orow[k] = s * vrow[k];
            }
        }
    });
    Tensor uv = u, vv = v, ov = out;
    finalize_op("per_row_outer", out, {u, v}, [uv, vv, ov, R, C, K]() {
        dispatch(uv.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = ov.impl()->grad->ptr<T>();
            const T* pu = uv.data<T>().data();
            const T* pv = vv.data<T>().data();
            T* gu = uv.requires_grad() ? ensure_grad(uv.impl())->ptr<T>() : nullptr;
            T* gv = vv.requires_grad() ? ensure_grad(vv.impl())->ptr<T>() : nullptr;
            for (i64 r = 0; r < R; ++r) {
                const T* vrow = pv + r * K;
                T* gvrow = gv ? gv + r * K : nullptr;
                for (i64 c = 0; c < C; ++c) {
                    const T* grow = go + (r * C + c) * K;
                    if (gu) {
                        T acc = 0;
                        for (i64 k = 0; k < K; ++k) acc += grow[k] * vrow[k];
                        gu[r * C + c] += acc;
                    }
                    if (gvrow) {
                        T s = pu[r * C + c];
                        for (i64 k = 0; k < K; ++k) gvrow[k] += s * grow[k];
                    }
                }
            }
        });
    });
    return out;
}

Tensor state_contract(const Tensor& t, const Tensor& v) {
    check_same_dtype("state_contract", t, v);
    if (t.rank() != 3 || v.rank() != 2 || t.dim(0) != v.dim(0) || t.dim(2) != v.dim(1))
        throw ShapeError("state_contract: expects t [R,C,K] and v [R,K]");
    i64 R = t.dim(0), C = t.dim(1), K = t.dim(2);
    Tensor out = Tensor::uninitialized({R, C}, t.dtype());
    dispatch(t.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* __restrict__ pt = t.data<T>().data();
        const T* __restrict__ pv = v.data<T>().data();
        T* __restrict__ po = out.mutable_data<T>().data();
        for (i64 r = 0; r < R; ++r) {
            const T* vrow = pv + r * K;
            for (i64 c = 0; c < C; ++c) {
                const T* trow = pt + (r * C + c) * K;
                T acc = 0;
                for (i64 k = 0; k < K; ++k) acc += trow[k] * vrow[k];
                po[r * C + c] = acc;
            }
        }
    });
    Tensor tv = t, vv = v, ov = out;
    finalize_op("state_contract", out, {t, v}, [tv, vv, ov, R, C, K]() {
        dispatch(tv.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = ov.impl()->grad->ptr<T>();
            const T* pt = tv.data<T>().data();
            const T* pv = vv.data<T>().data();
            T* gt = tv.requires_grad() ? ensure_grad(tv.impl())->ptr<T>() : nullptr;
            T* gv = vv.requires_grad() ? ensure_grad(vv.impl())->ptr<T>() : nullptr;
            for (i64 r = 0; r < R; ++r) {
                const T* vrow = pv + r * K;
                T* gvrow = gv ? gv + r * K : nullptr;
                for (i64 c = 0; c < C; ++c) {
                    T g = go[r * C + c];
                    if (gt) {
                        T* gtrow = gt + (r * C + c) * K;
                        for (i64 k = 0; k < K; ++k) gtrow[k] += g * vrow[k];
                    }
                    if (gvrow) {
                        const T* trow = pt + (r * C + c) * K;
                        for (i64 k = 0; k < K; ++k) gvrow[k] += g * trow[k];
                    }
                }
            }
        });
    });
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::uninitialized(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>().data();
        T* po = out.mutable_data<T>().data();
        T tc = static_cast<T>(c);
        for (i64 i = 0; i < a.numel(); ++i) po[i] = pa[i] * tc;
    });
    Tensor av = a, ov = out;
    finalize_op("scale", out, {a}, [av, ov, c]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            if (!av.requires_grad()) return;
            const T* go = ov.impl()->grad->ptr<T>();
            T* ga = ensure_grad(av.impl())->ptr<T>();
            T tc = static_cast<T>(c);
            for (i64 i = 0; i < av.numel(); ++i) ga[i] += go[i] * tc;
        });
    });
    return out;
}

Tensor add_scalar(const Tensor& a, double c) {
    Tensor out = Tensor::uninitialized(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>().data();
        T* po = out.mutable_data<T>().data();
        T tc = static_cast<T>(c);
        for (i64 i = 0; i < a.numel(); ++i) po[i] = pa[i] + tc;
    });
    Tensor av = a, ov = out;
    finalize_op("add_scalar", out, {a}, [av, ov]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            if (!av.requires_grad()) return;
            const T* go = ov.impl()->grad->ptr<T>();
            T* ga = ensure_grad(av.impl())->ptr<T>();
            for (i64 i = 0; i < av.numel(); ++i) ga[i] += go[i];
        });
    });
    return out;
}

// ---- matmul -----------------------------------------------------------------------

namespace {

template <typename T>
void mm_forward(const T* __restrict__ a, const T* __restrict__ b, T* __restrict__ o,
                i64 m, i64 k, i64 n) {
    bool par = m > 1 && m * k * n >= (1 << 20) && thread_count() > 1;
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (par)
#endif
    for (i64 i = 0; i < m; ++i) {
        T* orow = o + i * n;
        std::fill(orow, orow + n, static_cast<T>(0));
        const T* arow = a + i * k;
        for (i64 l = 0; l < k; ++l) {
            T av = arow[l];
            const T* brow = b + l * n;
            for (i64 j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    (void)par;
}

// da[i,l] += sum_j g[i,j] * b[l,j]
template <typename T>
void mm_acc_grad_a(const T* __restrict__ g, const T* __restrict__ b, T* __restrict__ da,
                   i64 m, i64 k, i64 n) {
    bool par = m > 1 && m * k * n >= (1 << 20) && thread_count() > 1;
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (par)
#endif
    for (i64 i = 0; i < m; ++i) {
        const T* grow = g + i * n;
        T* darow = da + i * k;
        for (i64 l = 0; l < k; ++l) {
            const T* brow = b + l * n;
            T acc = 0;
            for (i64 j = 0; j < n; ++j) acc += grow[j] * brow[j];
            darow[l] += acc;
        }
    }
    (void)par;
}

// db[l,j] += sum_i a[i,l] * g[i,j]
template <typename T>
void mm_acc_grad_b(const T* __restrict__ a, const T* __restrict__ g, T* __restrict__ db,
                   i64 m, i64 k, i64 n) {
    for (i64 i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* grow = g + i * n;
        for (i64 l = 0; l < k; ++l) {
            T av = arow[l];
            if (av == static_cast<T>(0)) continue;
            T* dbrow = db + l * n;
            for (i64 j = 0; j < n; ++j) dbrow[j] += av * grow[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_same_dtype("matmul", a, b);
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    i64 m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: inner dimensions differ (" + std::to_string(k) +
                         " vs " + std::to_string(k2) + ")");
    Tensor out = Tensor::uninitialized({m, n}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        mm_forward(a.data<T>().data(), b.data<T>().data(), out.mutable_data<T>().data(),
                   m, k, n);
    });
    Tensor av = a, bv = b, ov = out;
    finalize_op("matmul", out, {a, b}, [av, bv, ov, m, k, n]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = ov.impl()->grad->ptr<T>();
            if (av.requires_grad())
                mm_acc_grad_a(go, bv.data<T>().data(), ensure_grad(av.impl())->ptr<T>(),
                              m, k, n);
            if (bv.requires_grad())
                mm_acc_grad_b(av.data<T>().data(), go, ensure_grad(bv.impl())->ptr<T>(),
                              m, k, n);
        });
    });
    return out;
}

// ---- softmax ----------------------------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
    std::size_t r = a.rank();
    if (axis < 0) axis += static_cast<int>(r);
    if (axis < 0 || static_cast<std::size_t>(axis) >= r)
        throw ShapeError("softmax: axis out of range");
    i64 len = a.dim(static_cast<std::size_t>(axis));
    i64 outer = 1, inner = 1;
    for (std::size_t d = 0; d < static_cast<std::size_t>(axis); ++d) outer *= a.dim(d);
    for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < r; ++d) inner *= a.dim(d);

    Tensor out = Tensor::uninitialized(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>().data();
        T* po = out.mutable_data<T>().data();
        for (i64 o = 0; o < outer; ++o) {
            for (i64 in = 0; in < inner; ++in) {
                const T* src = pa + o * len * inner + in;
                T* dst = po + o * len * inner + in;
                double mx = -1e300;
                for (i64 t = 0; t < len; ++t)
                    mx = std::max(mx, static_cast<double>(src[t * inner]));
                double sum = 0;
                for (i64 t = 0; t < len; ++t) {
                    double e = std::exp(static_cast<double>(src[t * inner]) - mx);
                    dst[t * inner] = static_cast<T>(e);
                    sum += e;
                }
                for (i64 t = 0; t < len; ++t)
                    dst[t * inner] = static_cast<T>(static_cast<double>(dst[t * inner]) / sum);
            }
        }
    });
    Tensor av = a, ov = out;
    finalize_op("softmax", out, {a}, [av, ov, outer, len, inner]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            if (!av.requires_grad()) return;
            const T* go = ov.impl()->grad->ptr<T>();
            const T* y = ov.data<T>().data();
            T* ga = ensure_grad(av.impl())->ptr<T>();
            for (i64 o = 0; o < outer; ++o) {
                for (i64 in = 0; in < inner; ++in) {
                    i64 base = o * len * inner + in;
                    double dot = 0;
                    for (i64 t = 0; t < len; ++t)
                        dot += static_cast<double>(go[base + t * inner]) *
                               static_cast<double>(y[base + t * inner]);
                    for (i64 t = 0; t < len; ++t) {
                        i64 p = base + t * inner;
                        ga[p] += static_cast<T>(
                            (static_cast<double>(go[p]) - dot) * static_cast<double>(y[p]));
                    }
                }
            }
        });
    });
    return out;
}

// ---- normalization ------------------------------------------------------------------

static void check_norm_shapes(const char* opname, const Tensor& a, const Tensor& gain) {
    if (a.rank() != 2)
        throw ShapeError(std::string(opname) + ": expects a rank-2 input, got " +
                         shape_str(a.shape()));
    if (gain.rank() != 1 || gain.dim(0) != a.dim(1))
        throw ShapeError(std::string(opname) + ": gain shape " + shape_str(gain.shape()) +
                         " does not match feature width " + std::to_string(a.dim(1)));
    check_same_dtype(opname, a, gain);
}

Tensor rms_norm(const Tensor& a, const Tensor& gain, double eps) {
    check_norm_shapes("rms_norm", a, gain);
    i64 rows = a.dim(0), d = a.dim(1);
    Tensor out = Tensor::uninitialized(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>().data();
        const T* pg = gain.data<T>().data();
        T* po = out.mutable_data<T>().data();
        for (i64 i = 0; i < rows; ++i) {
            const T* row = pa + i * d;
            double ms = 0;
            for (i64 j = 0; j < d; ++j)
                ms += static_cast<double>(row[j]) * static_cast<double>(row[j]);
            double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
            T* orow = po + i * d;
            for (i64 j = 0; j < d; ++j)
                orow[j] = static_cast<T>(static_cast<double>(pg[j]) *
                                         static_cast<double>(row[j]) * inv);
        }
    });
    Tensor av = a, gv = gain, ov = out;
    finalize_op("rms_norm", out, {a, gain}, [av, gv, ov, rows, d, eps]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = ov.impl()->grad->ptr<T>();
            const T* pa = av.data<T>().data();
            const T* pg = gv.data<T>().data();
            T* ga = av.requires_grad() ? ensure_grad(av.impl())->ptr<T>() : nullptr;
            T* gg = gv.requires_grad() ? ensure_grad(gv.impl())->ptr<T>() : nullptr;
            for (i64 i = 0; i < rows; ++i) {
                const T* row = pa + i * d;
                const T* grow = go + i * d;
                double ms = 0;
                for (i64 j = 0; j < d; ++j)
                    ms += static_cast<double>(row[j]) * static_cast<double>(row[j]);
                double r2 = ms / static_cast<double>(d) + eps;
                double inv = 1.0 / std::sqrt(r2);
                if (gg) {
                    for (i64 j = 0; j < d; ++j)
                        gg[j] += static_cast<T>(static_cast<double>(grow[j]) *
                                                static_cast<double>(row[j]) * inv);
                }
                if (ga) {
                    double dot = 0;  // sum_j go_j * gain_j * x_j
                    for (i64 j = 0; j < d; ++j)
                        dot += static_cast<double>(grow[j]) * static_cast<double>(pg[j]) *
                               static_cast<double>(row[j]);
                    double c = dot * inv / (r2 * static_cast<double>(d));
                    T* garow = ga + i * d;
                    for (i64 j = 0; j < d; ++j)
                        garow[j] += static_cast<T>(static_cast<double>(grow[j]) *
                                                       static_cast<double>(pg[j]) * inv -
                                                   static_cast<double>(row[j]) * c);
                }
            }
        });
    });
    return out;
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, double eps) {
    check_norm_shapes("layer_norm", a, gain);
    i64 rows = a.dim(0), d = a.dim(1);
    Tensor out = Tensor::uninitialized(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>().data();
        const T* pg = gain.data<T>().data();
        T* po = out.mutable_data<T>().data();
        for (i64 i = 0; i < rows; ++i) {
            const T* row = pa + i * d;
            double mean = 0;
            for (i64 j = 0; j < d; ++j) mean += static_cast<double>(row[j]);
            mean /= static_cast<double>(d);
            double var = 0;
            for (i64 j = 0; j < d; ++j) {
                double c = static_cast<double>(row[j]) - mean;
                var += c * c;
            }
            var /= static_cast<double>(d);
            double inv = 1.0 / std::sqrt(var + eps);
            T* orow = po + i * d;
            for (i64 j = 0; j < d; ++j)
                orow[j] = static_cast<T>(static_cast<double>(pg[j]) *
                                         (static_cast<double>(row[j]) - mean) * inv);
        }
    });
    Tensor av = a, gv = gain, ov = out;
    finalize_op("layer_norm", out, {a, gain}, [av, gv, ov, rows, d, eps]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = ov.impl()->grad->ptr<T>();
            const T* pa = av.data<T>().data();
            const T* pg = gv.data<T>().data();
            T* ga = av.requires_grad() ? ensure_grad(av.impl())->ptr<T>() : nullptr;
            T* gg = gv.requires_grad() ? ensure_grad(gv.impl())->ptr<T>() : nullptr;
            for (i64 i = 0; i < rows; ++i) {
                const T* row = pa + i * d;
                const T* grow = go + i * d;
                double mean = 0;
                for (i64 j = 0; j < d; ++j) mean += static_cast<double>(row[j]);
                mean /= static_cast<double>(d);
                double var = 0;
                for (i64 j = 0; j < d; ++j) {
                    double c = static_cast<double>(row[j]) - mean;
                    var += c * c;
                }
                var /= static_cast<double>(d);
                double inv = 1.0 / std::sqrt(var + eps);
                if (gg) {
                    for (i64 j = 0; j < d; ++j)
                        gg[j] += static_cast<T>(static_cast<double>(grow[j]) *
                                                (static_cast<double>(row[j]) - mean) * inv);
                }
                if (ga) {
                    double sum_dxhat = 0, sum_dxhat_xhat = 0;
                    for (i64 j = 0; j < d; ++j) {
                        double xhat = (static_cast<double>(row[j]) - mean) * inv;
                        double dxhat =
                            static_cast<double>(grow[j]) * static_cast<double>(pg[j]);
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    double dn = static_cast<double>(d);
                    T* garow = ga + i * d;
                    for (i64 j = 0; j < d; ++j) {
                        double xhat = (static_cast<double>(row[j]) - mean) * inv;
                        double dxhat =
                            static_cast<double>(grow[j]) * static_cast<double>(pg[j]);
                        garow[j] += static_cast<T>(
                            inv * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn));
                    }
                }
            }
        });
    });
    return out;
}

// ---- depthwise causal conv ------------------------------------------------------------

Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    check_same_dtype("depthwise_conv1d", x, kernel);
    check_same_dtype("depthwise_conv1d", x, bias);
    if (x.rank() != 2 || kernel.rank() != 2 || bias.rank() != 1)
        throw ShapeError("depthwise_conv1d: expects x [L,E], kernel [E,K], bias [E]");
    i64 L = x.dim(0), E = x.dim(1), K = kernel.dim(1);
    if (kernel.dim(0) != E || bias.dim(0) != E)
        throw ShapeError("depthwise_conv1d: channel counts disagree");

    Tensor out = Tensor::uninitialized(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>().data();
        const T* pk = kernel.data<T>().data();
        const T* pb = bias.data<T>().data();
        T* po = out.mutable_data<T>().data();
        // kernel transposed to [K][E] for contiguous channel access
        std::vector<T> kt(static_cast<std::size_t>(K * E));
        for (i64 e = 0; e < E; ++e)
            for (i64 k = 0; k < K; ++k) kt[static_cast<std::size_t>(k * E + e)] = pk[e * K + k];
        for (i64 t = 0; t < L; ++t) {
            T* orow = po + t * E;
            for (i64 e = 0; e < E; ++e) orow[e] = pb[e];
            for (i64 k = 0; k < K; ++k) {
                i64 s = t - K + 1 + k;
                if (s < 0) continue;
                const T* xrow = px + s * E;
                const T* krow = kt.data() + k * E;
                for (i64 e = 0; e < E; ++e) orow[e] += krow[e] * xrow[e];
            }
        }
    });
    Tensor xv = x, kv = kernel, bv = bias, ov = out;
    finalize_op("depthwise_conv1d", out, {x, kernel, bias}, [xv, kv, bv, ov]() {
        dispatch(xv.dtype(), [&](auto tag) {
            using T = decltype(tag);
            i64 L = xv.dim(0), E = xv.dim(1), K = kv.dim(1);
            const T* go = ov.impl()->grad->ptr<T>();
            const T* px = xv.data<T>().data();
            const T* pk = kv.data<T>().data();
            T* gx = xv.requires_grad() ? ensure_grad(xv.impl())->ptr<T>() : nullptr;
            T* gk = kv.requires_grad() ? ensure_grad(kv.impl())->ptr<T>() : nullptr;
            T* gb = bv.requires_grad() ? ensure_grad(bv.impl())->ptr<T>() : nullptr;
            for (i64 t = 0; t < L; ++t) {
                const T* grow = go + t * E;
                if (gb)
                    for (i64 e = 0; e < E; ++e) gb[e] += grow[e];
                for (i64 k = 0; k < K; ++k) {
                    i64 s = t - K + 1 + k;
                    if (s < 0) continue;
                    const T* xrow = px + s * E;
                    if (gk)
                        for (i64 e = 0; e < E; ++e) gk[e * K + k] += grow[e] * xrow[e];
                    if (gx) {
                        T* gxrow = gx + s * E;
                        for (i64 e = 0; e < E; ++e) gxrow[e] += pk[e * K + k] * grow[e];
                    }
                }
            }
        });
    });
    return out;
}

// ---- structural ops --------------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& new_shape) {
    validate_shape(new_shape);
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(new_shape));
    auto d = std::make_shared<detail::TensorData>();
    d->shape = new_shape;
    d->dtype = a.dtype();
    d->values = a.impl()->values;  // shared storage, no copy
    Tensor out(d);
    Tensor av = a, ov = out;
    finalize_op("reshape", out, {a}, [av, ov]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            if (!av.requires_grad()) return;
            const T* go = ov.impl()->grad->ptr<T>();
            T* ga = ensure_grad(av.impl())->ptr<T>();
            for (i64 i = 0; i < av.numel(); ++i) ga[i] += go[i];
        });
    });
    return out;
}

static i64 row_width(const Tensor& a) { return a.numel() / a.dim(0); }

Tensor reverse_rows(const Tensor& a) {
    i64 rows = a.dim(0), w = row_width(a);
    Tensor out = Tensor::uninitialized(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>().data();
        T* po = out.mutable_data<T>().data();
        for (i64 i = 0; i < rows; ++i)
            std::copy(pa + (rows - 1 - i) * w, pa + (rows - i) * w, po + i * w);
    });
    Tensor av = a, ov = out;
    finalize_op("reverse_rows", out, {a}, [av, ov, rows, w]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            if (!av.requires_grad()) return;
            const T* go = ov.impl()->grad->ptr<T>();
            T* ga = ensure_grad(av.impl())->ptr<T>();
            for (i64 i = 0; i < rows; ++i) {
                const T* src = go + i * w;
                T* dst = ga + (rows - 1 - i) * w;
                for (i64 j = 0; j < w; ++j) dst[j] += src[j];
            }
        });
    });
    return out;
}

Tensor slice_rows(const Tensor& a, i64 start, i64 count) {
    i64 rows = a.dim(0), w = row_width(a);
    if (start < 0 || count < 1 || start + count > rows)
        throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " +
                         std::to_string(rows) + " rows");
    Shape os = a.shape();
    os[0] = count;
    Tensor out = Tensor::uninitialized(os, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>().data();
        std::copy(pa + start * w, pa + (start + count) * w,
                  out.mutable_data<T>().data());
    });
    Tensor av = a, ov = out;
    finalize_op("slice_rows", out, {a}, [av, ov, start, count, w]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            if (!av.requires_grad()) return;
            const T* go = ov.impl()->grad->ptr<T>();
            T* ga = ensure_grad(av.impl())->ptr<T>() + start * w;
            for (i64 i = 0; i < count * w; ++i) ga[i] += go[i];
        });
    });
    return out;
}

Tensor stride2_rows(const Tensor& a, i64 offset) {
    if (offset != 0 && offset != 1)
        throw ContractError("stride2_rows: offset must be 0 or 1");
    i64 rows = a.dim(0), w = row_width(a);
    i64 count = (rows - offset + 1) / 2;
    if (count < 1) throw ShapeError("stride2_rows: empty selection");
    Shape os = a.shape();
    os[0] = count;
    Tensor out = Tensor::uninitialized(os, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>().data();
        T* po = out.mutable_data<T>().data();
        for (i64 i = 0; i < count; ++i)
            std::copy(pa + (offset + 2 * i) * w, pa + (offset + 2 * i) * w + w, po + i * w);
    });
    Tensor av = a, ov = out;
    finalize_op("stride2_rows", out, {a}, [av, ov, offset, count, w]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            if (!av.requires_grad()) return;
            const T* go = ov.impl()->grad->ptr<T>();
            T* ga = ensure_grad(av.impl())->ptr<T>();
            for (i64 i = 0; i < count; ++i) {
                const T* src = go + i * w;
                T* dst = ga + (offset + 2 * i) * w;
                for (i64 j = 0; j < w; ++j) dst[j] += src[j];
            }
        });
    });
    return out;
}

Tensor interleave_rows(const Tensor& a, const Tensor& b) {
    check_same_dtype("interleave_rows", a, b);
    if (!same_extents(a.shape(), b.shape()))
        throw ShapeError("interleave_rows: operands must share a shape");
    i64 rows = a.dim(0), w = row_width(a);
    Shape os = a.shape();
    os[0] = rows * 2;
    Tensor out = Tensor::uninitialized(os, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>().data();
        const T* pb = b.data<T>().data();
        T* po = out.mutable_data<T>().data();
        for (i64 i = 0; i < rows; ++i) {
            std::copy(pa + i * w, pa + (i + 1) * w, po + (2 * i) * w);
            std::copy(pb + i * w, pb + (i + 1) * w, po + (2 * i + 1) * w);
        }
    });
    Tensor av = a, bv = b, ov = out;
    finalize_op("interleave_rows", out, {a, b}, [av, bv, ov, rows, w]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = ov.impl()->grad->ptr<T>();
            T* ga = av.requires_grad() ? ensure_grad(av.impl())->ptr<T>() : nullptr;
            T* gb = bv.requires_grad() ? ensure_grad(bv.impl())->ptr<T>() : nullptr;
            for (i64 i = 0; i < rows; ++i) {
                if (ga) {
                    const T* src = go + (2 * i) * w;
                    for (i64 j = 0; j < w; ++j) ga[i * w + j] += src[j];
                }
                if (gb) {
                    const T* src = go + (2 * i + 1) * w;
                    for (i64 j = 0; j < w; ++j) gb[i * w + j] += src[j];
                }
            }
        });
    });
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    i64 total = 0, w = row_width(parts[0]);
    for (const Tensor& p : parts) {
        check_same_dtype("concat_rows", parts[0], p);
        if (p.rank() != parts[0].rank() || row_width(p) != w)
            throw ShapeError("concat_rows: trailing dimensions disagree");
        total += p.dim(0);
    }
    Shape os = parts[0].shape();
    os[0] = total;
    Tensor out = Tensor::uninitialized(os, parts[0].dtype());
    dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* po = out.mutable_data<T>().data();
        i64 at = 0;
        for (const Tensor& p : parts) {
            auto src = p.data<T>();
            std::copy(src.begin(), src.end(), po + at * w);
            at += p.dim(0);
        }
    });
    std::vector<Tensor> held = parts;
    Tensor ov = out;
    finalize_op("concat_rows", out, held, [held, ov, w]() {
        dispatch(ov.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = ov.impl()->grad->ptr<T>();
            i64 at = 0;
            for (const Tensor& p : held) {
                i64 n = p.dim(0) * w;
                if (p.requires_grad()) {
                    T* gp = ensure_grad(p.impl())->ptr<T>();
                    const T* src = go + at;
                    for (i64 i = 0; i < n; ++i) gp[i] += src[i];
                }
                at += n;
            }
        });
    });
    return out;
}

// ---- reductions --------------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
    Tensor out = Tensor::uninitialized({1}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto v = a.data<T>();
        double acc = 0;
        for (T x : v) acc += static_cast<double>(x);
        out.mutable_data<T>()[0] = static_cast<T>(acc);
    });
    Tensor av = a, ov = out;
    finalize_op("sum_all", out, {a}, [av, ov]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            if (!av.requires_grad()) return;
            T g = ov.impl()->grad->ptr<T>()[0];
            T* ga = ensure_grad(av.impl())->ptr<T>();
            for (i64 i = 0; i < av.numel(); ++i) ga[i] += g;
        });
    });
    return out;
}

Tensor mean_all(const Tensor& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_last_axis(const Tensor& a) {
    if (a.rank() < 2) throw ShapeError("sum_last_axis: needs rank >= 2");
    i64 len = a.dim(a.rank() - 1);
    i64 outer = a.numel() / len;
    Shape os(a.shape().begin(), a.shape().end() - 1);
    Tensor out = Tensor::uninitialized(os, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>().data();
        T* po = out.mutable_data<T>().data();
        for (i64 o = 0; o < outer; ++o) {
            T acc = 0;
            const T* src = pa + o * len;
            for (i64 t = 0; t < len; ++t) acc += src[t];
            po[o] = acc;
        }
    });
    Tensor av = a, ov = out;
    finalize_op("sum_last_axis", out, {a}, [av, ov, outer, len]() {
        dispatch(av.dtype(), [&](auto tag) {
            using T = decltype(tag);
            if (!av.requires_grad()) return;
            const T* go = ov.impl()->grad->ptr<T>();
            T* ga = ensure_grad(av.impl())->ptr<T>();
            for (i64 o = 0; o < outer; ++o) {
                T g = go[o];
                T* dst = ga + o * len;
                for (i64 t = 0; t < len; ++t) dst[t] += g;
            }
        });
    });
    return out;
}

// ---- finite differences ----------------------------------------------------------------

Tensor finite_difference_gradient(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& x, double step) {
    NoGradGuard ng;
    std::vector<double> base = x.to_vector();
    Tensor grad = Tensor::zeros(x.shape(), x.dtype());
    std::vector<double> gv(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> hi = base, lo = base;
        hi[i] += step;
        lo[i] -= step;
        Tensor fh = f(Tensor::from_values(x.shape(), hi, x.dtype()));
        Tensor fl = f(Tensor::from_values(x.shape(), lo, x.dtype()));
        if (fh.numel() != 1)
            throw ContractError("finite_difference_gradient: f must be scalar-valued");
        gv[i] = (fh.at(0) - fl.at(0)) / (2.0 * step);
    }
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto out = grad.mutable_data<T>();
        for (std::size_t i = 0; i < gv.size(); ++i) out[i] = static_cast<T>(gv[i]);
    });
    return grad;
}

}  // namespace bimamba
