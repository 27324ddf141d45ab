#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "bimamba/common.hpp"

namespace bimamba {

enum class Dtype { Float32, Float64 };

inline std::size_t dtype_size(Dtype d) {
    return d == Dtype::Float32 ? sizeof(float) : sizeof(double);
}
inline const char* dtype_name(Dtype d) {
    return d == Dtype::Float32 ? "float32" : "float64";
}

using Shape = std::vector<i64>;

i64 shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Tracks value-buffer bytes created while a scope is open. Allocation and
// release are counted at buffer construction/destruction, so the peak is a
// property of the executed program order, not of the system allocator.
struct AccountantState {
    i64 live = 0;
    i64 peak = 0;
    i64 total = 0;
};

class AccountingScope {
public:
    AccountingScope();
    ~AccountingScope();
    AccountingScope(const AccountingScope&) = delete;
    AccountingScope& operator=(const AccountingScope&) = delete;

    i64 peak_bytes() const { return state_->peak; }
    i64 live_bytes() const { return state_->live; }
    i64 total_bytes() const { return state_->total; }

private:
    std::shared_ptr<AccountantState> state_;
    std::shared_ptr<AccountantState> previous_;
};

namespace detail {

struct Storage {
    Storage(Dtype dt, i64 n, bool zeroed);
    ~Storage();
    Storage(const Storage&) = delete;
    Storage& operator=(const Storage&) = delete;

    Dtype dtype;
    i64 numel;
    std::unique_ptr<float[]> f32;
    std::unique_ptr<double[]> f64;
    std::shared_ptr<AccountantState> accountant;  // set if a scope was open at alloc

    i64 bytes() const { return numel * static_cast<i64>(dtype_size(dtype)); }

    template <typename T>
    T* ptr();
    template <typename T>
    const T* ptr() const;
};

struct TensorData {
    Shape shape;
    Dtype dtype = Dtype::Float32;
    std::shared_ptr<Storage> values;
    std::shared_ptr<Storage> grad;  // allocated lazily
    bool requires_grad = false;
    u64 node_generation = 0;  // nonzero when produced by a recorded op
    bool is_leaf = true;

    i64 numel() const { return shape_numel(shape); }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    // ---- creation ----
    static Tensor zeros(const Shape& shape, Dtype dt = Dtype::Float32,
                        bool requires_grad = false);
    static Tensor ones(const Shape& shape, Dtype dt = Dtype::Float32,
                       bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, Dtype dt = Dtype::Float32,
                       bool requires_grad = false);
    static Tensor uniform(const Shape& shape, u64 seed, double lo, double hi,
                          Dtype dt = Dtype::Float32, bool requires_grad = false);
    static Tensor normal(const Shape& shape, u64 seed, double mean, double stddev,
                         Dtype dt = Dtype::Float32, bool requires_grad = false);
    static Tensor from_values(const Shape& shape, const std::vector<double>& values,
                              Dtype dt = Dtype::Float32, bool requires_grad = false);
    // Contents unspecified; for buffers the caller fills completely.
    static Tensor uninitialized(const Shape& shape, Dtype dt = Dtype::Float32);

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const;
    i64 dim(std::size_t axis) const { return shape().at(axis); }
    std::size_t rank() const { return shape().size(); }
    Dtype dtype() const;
    i64 numel() const;
    bool requires_grad() const;

    // ---- element access (test/CLI convenience; converts to double) ----
    double at(i64 flat_index) const;
    double at(const std::vector<i64>& index) const;
    std::vector<double> to_vector() const;

    // ---- gradient ----
    bool has_grad() const;
    Tensor grad() const;  // copy of the gradient as a plain tensor
    void zero_grad();

    // ---- raw access for kernels ----
    template <typename T>
    std::span<const T> data() const;
    template <typename T>
    std::span<T> mutable_data();  // construction-time fill only

    void release() { d_.reset(); }

    detail::TensorData* impl() const { return d_.get(); }
    explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}

private:
    std::shared_ptr<detail::TensorData> d_;
};

// ---- autograd -------------------------------------------------------------

bool grad_enabled();

// Suspends recording for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

// Per-thread record of executed operations, in execution order. backward()
// walks it once in reverse; a second backward without reset() is an error.
class GradGraph {
public:
    static GradGraph& active();

    std::size_t size() const;
    bool consumed() const;
    void reset();

    struct Node {
        Tensor output;
        std::vector<Tensor> inputs;
        std::function<void()> backprop;
    };

    void record(Node node);
    void run_backward(const Tensor& loss);
    u64 generation() const { return generation_; }

private:
    std::vector<Node> nodes_;
    bool consumed_ = false;
    u64 generation_ = 1;
};

void backward(const Tensor& loss);
void reset_graph();

// ---- operations -----------------------------------------------------------

enum class BinaryOp { Add, Sub, Mul, Div };
enum class UnaryOp { Exp, Log, Softplus, Silu, Sigmoid, Tanh };

Tensor binary(BinaryOp op, const Tensor& a, const Tensor& b);
Tensor unary(UnaryOp op, const Tensor& a);

inline Tensor add(const Tensor& a, const Tensor& b) { return binary(BinaryOp::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinaryOp::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinaryOp::Mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return binary(BinaryOp::Div, a, b); }
inline Tensor exp(const Tensor& a) { return unary(UnaryOp::Exp, a); }
inline Tensor log(const Tensor& a) { return unary(UnaryOp::Log, a); }
inline Tensor softplus(const Tensor& a) { return unary(UnaryOp::Softplus, a); }
inline Tensor silu(const Tensor& a) { return unary(UnaryOp::Silu, a); }
inline Tensor sigmoid(const Tensor& a) { return unary(UnaryOp::Sigmoid, a); }
inline Tensor tanh(const Tensor& a) { return unary(UnaryOp::Tanh, a); }

// o = a*b + c elementwise; operands share one shape.
Tensor mul_add(const Tensor& a, const Tensor& b, const Tensor& c);

// Batched outer/contract primitives for per-position state expansion:
// scale_expand: o[r,c,k] = u[r,c] * m[c,k]        ([R,C] x [C,K] -> [R,C,K])
// per_row_outer: o[r,c,k] = u[r,c] * v[r,k]       ([R,C] x [R,K] -> [R,C,K])
// state_contract: o[r,c] = sum_k t[r,c,k]*v[r,k]  ([R,C,K] x [R,K] -> [R,C])
Tensor scale_expand(const Tensor& u, const Tensor& m);
Tensor per_row_outer(const Tensor& u, const Tensor& v);
Tensor state_contract(const Tensor& t, const Tensor& v);

Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& a, int axis);
Tensor rms_norm(const Tensor& a, const Tensor& gain, double eps = 1e-5);
Tensor layer_norm(const Tensor& a, const Tensor& gain, double eps = 1e-5);
Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias);

// Structural ops. Row ops treat the tensor as [rows, rest...] on axis 0.
Tensor reshape(const Tensor& a, const Shape& new_shape);  // shares storage
Tensor reverse_rows(const Tensor& a);
Tensor slice_rows(const Tensor& a, i64 start, i64 count);
Tensor stride2_rows(const Tensor& a, i64 offset);  // rows offset, offset+2, ...
Tensor interleave_rows(const Tensor& a, const Tensor& b);
Tensor concat_rows(const std::vector<Tensor>& parts);
inline Tensor select_row(const Tensor& a, i64 row) { return slice_rows(a, row, 1); }

Tensor sum_all(const Tensor& a);       // shape [1]
Tensor mean_all(const Tensor& a);      // shape [1]
Tensor sum_last_axis(const Tensor& a); // drops the last axis

// Central finite differences of a scalar-valued tensor function, evaluated
// with recording off. The test-side oracle for every backward rule.
Tensor finite_difference_gradient(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& x, double step);

// Scalar helpers shared by kernels and models.
double stable_softplus(double v);
double stable_sigmoid(double v);
double inverse_softplus(double y);

}  // namespace bimamba
