#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fsr {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class TensorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised by strict mode when an op would produce a non-finite value.
class NonFiniteError : public TensorError {
public:
    using TensorError::TensorError;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Local-gradient closure: reads self.grad and accumulates into parents.
using BackwardFn = std::function<void(Node& self)>;

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient reaches the node
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    BackwardFn backward_fn;

    bool is_leaf() const { return !backward_fn; }
    // Allocates grad on first use and returns it.
    std::vector<double>& grad_buffer();
};

/// Dense row-major double tensor. Copies of a Tensor share one node; use
/// clone() for an independent value.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // In-place access for optimizers and initializers; never used inside a recorded graph.
    std::span<double> mutable_data();
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool value);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    Tensor clone() const;   // independent copy, leaf, same requires_grad
    Tensor detach() const;  // independent copy, leaf, requires_grad = false

    Node* node() const { return node_.get(); }
    const NodePtr& node_ptr() const { return node_; }

private:
    NodePtr node_;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// Ordered record of the differentiable operations executed on this thread.
/// Nodes are appended as they are created, which is a topological order.
class Tape {
public:
    static Tape& current();

    void record(NodePtr node);
    void clear();
    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    const std::vector<NodePtr>& nodes() const { return nodes_; }

private:
    std::vector<NodePtr> nodes_;
};

/// Disables recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Strict mode turns division by zero and non-finite log/sqrt results into
/// TensorError. On by default.
class StrictModeGuard {
public:
    explicit StrictModeGuard(bool strict);
    ~StrictModeGuard();
    StrictModeGuard(const StrictModeGuard&) = delete;
    StrictModeGuard& operator=(const StrictModeGuard&) = delete;

private:
    bool previous_;
};

bool strict_mode();

/// Builds the output of a custom differentiable op. The node is recorded on
/// the tape only when grad is enabled and some parent requires grad.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   BackwardFn backward);

// ---------------------------------------------------------------------------
// Elementwise

enum class ElementwiseOp { Add, Sub, Mul, Div, Relu, Exp, Log, Sqrt, Neg, Scale };

Shape broadcast_shape(const Shape& a, const Shape& b);

/// Binary kinds need `b`; Scale uses `factor`; unary kinds ignore both.
Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor* b = nullptr,
                   double factor = 1.0);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Linear algebra, reductions, shape

Tensor matmul(const Tensor& a, const Tensor& b);

enum class ReduceOp { Sum, Mean, Max };

/// Empty `axes` reduces over every axis.
Tensor reduce(ReduceOp op, const Tensor& t, std::vector<std::size_t> axes = {},
              bool keepdims = false);
inline Tensor sum(const Tensor& t, std::vector<std::size_t> axes = {}, bool keepdims = false) {
    return reduce(ReduceOp::Sum, t, std::move(axes), keepdims);
}
inline Tensor mean(const Tensor& t, std::vector<std::size_t> axes = {}, bool keepdims = false) {
    return reduce(ReduceOp::Mean, t, std::move(axes), keepdims);
}
inline Tensor max(const Tensor& t, std::vector<std::size_t> axes = {}, bool keepdims = false) {
    return reduce(ReduceOp::Max, t, std::move(axes), keepdims);
}

Tensor reshape(const Tensor& t, Shape shape);

/// Rows along axis 0, in the given order (repeats allowed).
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows);
/// Concatenation along axis 0.
Tensor concat_rows(std::span<const Tensor> parts);

// ---------------------------------------------------------------------------

/// Seeds the loss gradient with 1, runs every reachable node's local
/// gradient in reverse tape order, then clears the tape.
void backward(const Tensor& loss);

}  // namespace fsr
