#include "fsr/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <type_traits>

namespace fsr {

namespace {

thread_local bool t_grad_enabled = true;
thread_local bool t_strict = true;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

bool any_requires_grad(const std::vector<Tensor>& parents) {
    return std::any_of(parents.begin(), parents.end(),
                       [](const Tensor& t) { return t.requires_grad(); });
}

// Two operands walked in lockstep with the row-major order of an output
// shape. Size-1 dims are dropped and contiguous dims merged, so the walk is a
// sequence of segments with constant inner strides.
struct StridePlan {
    std::vector<std::size_t> dims;  // outer .. inner
    std::vector<std::size_t> sa;
    std::vector<std::size_t> sb;
    std::size_t numel = 1;
};

std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    const std::size_t offset = out.size() - in.size();
    std::vector<std::size_t> stride(out.size(), 0);
    std::size_t s = 1;
    for (std::size_t k = in.size(); k-- > 0;) {
        stride[k + offset] = in[k] == 1 ? 0 : s;
        s *= in[k];
    }
    return stride;
}

StridePlan make_plan(const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                     const Shape& out) {
    StridePlan p;
    p.numel = shape_numel(out);
    for (std::size_t k = 0; k < out.size(); ++k) {
        if (out[k] == 1) continue;
        if (!p.dims.empty()) {
            const std::size_t d = out[k];
            if (p.sa.back() == sa[k] * d && p.sb.back() == sb[k] * d) {
                p.dims.back() *= d;
                p.sa.back() = sa[k];
                p.sb.back() = sb[k];
                continue;
            }
        }
        p.dims.push_back(out[k]);
        p.sa.push_back(sa[k]);
        p.sb.push_back(sb[k]);
    }
    if (p.dims.empty()) {
        p.dims = {1};
        p.sa = {0};
        p.sb = {0};
    }
    return p;
}

// Calls f(i, oa, ob, len, inner_sa, inner_sb) per inner segment, where i is
// the flat output offset. Inner strides of 0 and 1 arrive as compile-time
// constants so the loops vectorize.
template <class F>
void walk(const StridePlan& p, F&& f) {
    if (p.numel == 0) return;
    const std::size_t r = p.dims.size();
    const std::size_t len = p.dims[r - 1];
    const auto run = [&](auto isa, auto isb) {
        std::vector<std::size_t> ctr(r, 0);
        std::size_t oa = 0, ob = 0;
        for (std::size_t i = 0; i < p.numel; i += len) {
            f(i, oa, ob, len, isa, isb);
            for (std::size_t k = r - 1; k-- > 0;) {
                if (++ctr[k] < p.dims[k]) {
                    oa += p.sa[k];
                    ob += p.sb[k];
                    break;
                }
                oa -= p.sa[k] * (p.dims[k] - 1);
                ob -= p.sb[k] * (p.dims[k] - 1);
                ctr[k] = 0;
            }
        }
    };
    using Zero = std::integral_constant<std::size_t, 0>;
    using One = std::integral_constant<std::size_t, 1>;
    const std::size_t a = p.sa[r - 1], b = p.sb[r - 1];
    if (a == 1 && b == 1) run(One{}, One{});
    else if (a == 1 && b == 0) run(One{}, Zero{});
    else if (a == 0 && b == 1) run(Zero{}, One{});
    else run(a, b);
}

void check_strict_value(double v, const char* what) {
    if (t_strict && !std::isfinite(v)) {
        throw NonFiniteError(std::string(what) + " produced a non-finite value");
    }
}

const char* op_name(ElementwiseOp op) {
    switch (op) {
        case ElementwiseOp::Add: return "add";
        case ElementwiseOp::Sub: return "sub";
        case ElementwiseOp::Mul: return "mul";
        case ElementwiseOp::Div: return "div";
        case ElementwiseOp::Relu: return "relu";
        case ElementwiseOp::Exp: return "exp";
        case ElementwiseOp::Log: return "log";
        case ElementwiseOp::Sqrt: return "sqrt";
        case ElementwiseOp::Neg: return "neg";
        case ElementwiseOp::Scale: return "scale";
    }
    return "?";
}

bool is_binary(ElementwiseOp op) {
    return op == ElementwiseOp::Add || op == ElementwiseOp::Sub || op == ElementwiseOp::Mul ||
           op == ElementwiseOp::Div;
}

Tensor binary_op(ElementwiseOp op, const Tensor& a, const Tensor& b) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    auto plan = std::make_shared<StridePlan>(make_plan(
        broadcast_strides(a.shape(), out_shape), broadcast_strides(b.shape(), out_shape), out_shape));

    const double* av = a.data().data();
    const double* bv = b.data().data();
    std::vector<double> out(plan->numel);
    double* o = out.data();
    const auto apply = [&](auto fn) {
        walk(*plan, [&](std::size_t i, std::size_t oa, std::size_t ob, std::size_t len, auto sa,
                        auto sb) {
            for (std::size_t j = 0; j < len; ++j) o[i + j] = fn(av[oa + j * sa], bv[ob + j * sb]);
        });
    };
    switch (op) {
        case ElementwiseOp::Add: apply([](double x, double y) { return x + y; }); break;
        case ElementwiseOp::Sub: apply([](double x, double y) { return x - y; }); break;
        case ElementwiseOp::Mul: apply([](double x, double y) { return x * y; }); break;
        case ElementwiseOp::Div:
            if (t_strict && std::find(b.data().begin(), b.data().end(), 0.0) != b.data().end()) {
                throw NonFiniteError("div: division by zero");
            }
            apply([](double x, double y) { return x / y; });
            break;
        default:
            throw TensorError("binary_op: not a binary kind");
    }

    return make_result(out_shape, std::move(out), {a, b}, [op, plan](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const double* g = self.grad.data();
        const double* ad = pa.data.data();
        const double* bd = pb.data.data();
        if (pa.requires_grad) {
            double* ga = pa.grad_buffer().data();
            walk(*plan, [&](std::size_t i, std::size_t oa, std::size_t ob, std::size_t len, auto sa,
                            auto sb) {
                switch (op) {
                    case ElementwiseOp::Add:
                    case ElementwiseOp::Sub:
                        for (std::size_t j = 0; j < len; ++j) ga[oa + j * sa] += g[i + j];
                        break;
                    case ElementwiseOp::Mul:
                        for (std::size_t j = 0; j < len; ++j)
                            ga[oa + j * sa] += g[i + j] * bd[ob + j * sb];
                        break;
                    case ElementwiseOp::Div:
                        for (std::size_t j = 0; j < len; ++j)
                            ga[oa + j * sa] += g[i + j] / bd[ob + j * sb];
                        break;
                    default: break;
                }
            });
        }
        if (pb.requires_grad) {
            double* gb = pb.grad_buffer().data();
            walk(*plan, [&](std::size_t i, std::size_t oa, std::size_t ob, std::size_t len, auto sa,
                            auto sb) {
                switch (op) {
                    case ElementwiseOp::Add:
                        for (std::size_t j = 0; j < len; ++j) gb[ob + j * sb] += g[i + j];
                        break;
                    case ElementwiseOp::Sub:
                        for (std::size_t j = 0; j < len; ++j) gb[ob + j * sb] -= g[i + j];
                        break;
                    case ElementwiseOp::Mul:
                        for (std::size_t j = 0; j < len; ++j)
                            gb[ob + j * sb] += g[i + j] * ad[oa + j * sa];
                        break;
                    case ElementwiseOp::Div:
                        for (std::size_t j = 0; j < len; ++j) {
                            const double d = bd[ob + j * sb];
                            gb[ob + j * sb] -= g[i + j] * ad[oa + j * sa] / (d * d);
                        }
                        break;
                    default: break;
                }
            });
        }
    });
}

Tensor unary_op(ElementwiseOp op, const Tensor& a, double factor) {
    const auto av = a.data();
    const std::size_t n = av.size();
    std::vector<double> out(n);
    switch (op) {
        case ElementwiseOp::Relu:
            for (std::size_t i = 0; i < n; ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
            break;
        case ElementwiseOp::Exp:
            for (std::size_t i = 0; i < n; ++i) {
                out[i] = std::exp(av[i]);
                check_strict_value(out[i], "exp");
            }
            break;
        case ElementwiseOp::Log:
            for (std::size_t i = 0; i < n; ++i) {
                out[i] = std::log(av[i]);
                check_strict_value(out[i], "log");
            }
            break;
        case ElementwiseOp::Sqrt:
            for (std::size_t i = 0; i < n; ++i) {
                out[i] = std::sqrt(av[i]);
                check_strict_value(out[i], "sqrt");
            }
            break;
        case ElementwiseOp::Neg:
            for (std::size_t i = 0; i < n; ++i) out[i] = -av[i];
            break;
        case ElementwiseOp::Scale:
            for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * factor;
            break;
        default:
            throw TensorError("unary_op: not a unary kind");
    }

    // Sqrt and Exp reuse their own output in the local gradient.
    return make_result(a.shape(), std::move(out), {a}, [op, factor](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& gp = p.grad_buffer();
        const auto& g = self.grad;
        const std::size_t n = g.size();
        switch (op) {
            case ElementwiseOp::Relu:
                for (std::size_t i = 0; i < n; ++i)
                    if (p.data[i] > 0.0) gp[i] += g[i];
                break;
            case ElementwiseOp::Exp:
                for (std::size_t i = 0; i < n; ++i) gp[i] += g[i] * self.data[i];
                break;
            case ElementwiseOp::Log:
                for (std::size_t i = 0; i < n; ++i) gp[i] += g[i] / p.data[i];
                break;
            case ElementwiseOp::Sqrt:
                for (std::size_t i = 0; i < n; ++i) gp[i] += g[i] * 0.5 / self.data[i];
                break;
            case ElementwiseOp::Neg:
                for (std::size_t i = 0; i < n; ++i) gp[i] -= g[i];
                break;
            case ElementwiseOp::Scale:
                for (std::size_t i = 0; i < n; ++i) gp[i] += g[i] * factor;
                break;
            default: break;
        }
    });
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ')';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<double>& Node::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->data.assign(shape_numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw TensorError("Tensor::from: shape " + shape_to_string(shape) + " needs " +
                          std::to_string(shape_numel(shape)) + " values, got " +
                          std::to_string(values.size()));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw TensorError("use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) {
        throw TensorError("dim: axis " + std::to_string(axis) + " out of range for shape " +
                          shape_to_string(s));
    }
    return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
    if (!node_) throw TensorError("use of undefined tensor");
    return node_->data;
}

std::span<double> Tensor::mutable_data() {
    if (!node_) throw TensorError("use of undefined tensor");
    return node_->data;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw TensorError("item: tensor of shape " + shape_to_string(shape()) + " is not scalar");
    }
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) throw TensorError("at: rank mismatch");
    std::size_t flat = 0;
    std::size_t k = 0;
    for (std::size_t i : index) {
        if (i >= s[k]) throw TensorError("at: index out of range");
        flat = flat * s[k] + i;
        ++k;
    }
    return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
    if (!node_) throw TensorError("use of undefined tensor");
    node_->requires_grad = value;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw TensorError("grad: tensor has no gradient");
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
    if (!node_) throw TensorError("use of undefined tensor");
    return node_->grad_buffer();
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::clone() const {
    return from(shape(), node_->data, node_->requires_grad);
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

// ---------------------------------------------------------------------------

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

void Tape::record(NodePtr node) { nodes_.push_back(std::move(node)); }

void Tape::clear() { nodes_.clear(); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

StrictModeGuard::StrictModeGuard(bool strict) : previous_(t_strict) { t_strict = strict; }
StrictModeGuard::~StrictModeGuard() { t_strict = previous_; }
bool strict_mode() { return t_strict; }

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   BackwardFn backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (t_grad_enabled && any_requires_grad(parents)) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node_ptr());
        node->backward_fn = std::move(backward);
        Tape::current().record(node);
    }
    return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t k = 0; k < rank; ++k) {
        const std::size_t da = k < rank - a.size() ? 1 : a[k - (rank - a.size())];
        const std::size_t db = k < rank - b.size() ? 1 : b[k - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw TensorError("shape mismatch: cannot broadcast " + shape_to_string(a) +
                              " with " + shape_to_string(b));
        }
        out[k] = da == 1 ? db : da;
    }
    return out;
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor* b, double factor) {
    if (is_binary(op)) {
        if (b == nullptr || !b->defined()) {
            throw TensorError(std::string(op_name(op)) + ": second operand required");
        }
        return binary_op(op, a, *b);
    }
    return unary_op(op, a, factor);
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::Add, a, &b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::Sub, a, &b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::Mul, a, &b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::Div, a, &b); }
Tensor relu(const Tensor& a) { return elementwise(ElementwiseOp::Relu, a); }
Tensor exp(const Tensor& a) { return elementwise(ElementwiseOp::Exp, a); }
Tensor log(const Tensor& a) { return elementwise(ElementwiseOp::Log, a); }
Tensor sqrt(const Tensor& a) { return elementwise(ElementwiseOp::Sqrt, a); }
Tensor neg(const Tensor& a) { return elementwise(ElementwiseOp::Neg, a); }
Tensor scale(const Tensor& a, double factor) {
    return elementwise(ElementwiseOp::Scale, a, nullptr, factor);
}
Tensor add_scalar(const Tensor& a, double value) { return add(a, Tensor::scalar(value)); }
Tensor square(const Tensor& a) { return mul(a, a); }

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw TensorError("matmul: dimension mismatch " + shape_to_string(a.shape()) + " x " +
                          shape_to_string(b.shape()));
    }
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = b.dim(1);
    std::vector<double> out(m * n);
    const auto ad = a.data();
    const auto bd = b.data();
    MutMap(out.data(), m, n).noalias() = ConstMap(ad.data(), m, k) * ConstMap(bd.data(), k, n);

    return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        ConstMap dz(self.grad.data(), m, n);
        if (pa.requires_grad) {
            MutMap(pa.grad_buffer().data(), m, k).noalias() +=
                dz * ConstMap(pb.data.data(), k, n).transpose();
        }
        if (pb.requires_grad) {
            MutMap(pb.grad_buffer().data(), k, n).noalias() +=
                ConstMap(pa.data.data(), m, k).transpose() * dz;
        }
    });
}

Tensor reduce(ReduceOp op, const Tensor& t, std::vector<std::size_t> axes, bool keepdims) {
    const Shape& in = t.shape();
    const std::size_t rank = in.size();
    if (axes.empty()) {
        axes.resize(rank);
        std::iota(axes.begin(), axes.end(), std::size_t{0});
    }
    std::vector<bool> reduced(rank, false);
    for (std::size_t ax : axes) {
        if (ax >= rank) {
            throw TensorError("reduce: invalid axis " + std::to_string(ax) + " for shape " +
                              shape_to_string(in));
        }
        reduced[ax] = true;
    }

    Shape kept(rank);
    Shape out_shape;
    for (std::size_t k = 0; k < rank; ++k) {
        kept[k] = reduced[k] ? 1 : in[k];
        if (!reduced[k]) out_shape.push_back(in[k]);
        else if (keepdims) out_shape.push_back(1);
    }
    const std::size_t n_in = t.numel();
    const std::size_t n_out = shape_numel(kept);
    if (n_in == 0) throw TensorError("reduce: empty tensor");
    const std::size_t count = n_in / n_out;

    // Input walked in order; sb maps each element to its output slot.
    std::vector<std::size_t> contiguous(rank);
    for (std::size_t k = rank, st = 1; k-- > 0;) {
        contiguous[k] = st;
        st *= in[k];
    }
    auto plan = std::make_shared<StridePlan>(
        make_plan(contiguous, broadcast_strides(kept, in), in));
    const double* td = t.data().data();
    std::vector<double> out;

    if (op == ReduceOp::Max) {
        out.assign(n_out, -std::numeric_limits<double>::infinity());
        auto arg = std::make_shared<std::vector<std::size_t>>(n_out, 0);
        walk(*plan, [&](std::size_t i, std::size_t, std::size_t ob, std::size_t len, auto,
                        auto sb) {
            for (std::size_t j = 0; j < len; ++j) {
                const std::size_t slot = ob + j * sb;
                if (td[i + j] > out[slot]) {
                    out[slot] = td[i + j];
                    (*arg)[slot] = i + j;
                }
            }
        });
        return make_result(out_shape, std::move(out), {t}, [arg](Node& self) {
            Node& p = *self.parents[0];
            if (!p.requires_grad) return;
            auto& gp = p.grad_buffer();
            for (std::size_t o = 0; o < arg->size(); ++o) gp[(*arg)[o]] += self.grad[o];
        });
    }

    out.assign(n_out, 0.0);
    double* o = out.data();
    walk(*plan, [&](std::size_t i, std::size_t, std::size_t ob, std::size_t len, auto, auto sb) {
        for (std::size_t j = 0; j < len; ++j) o[ob + j * sb] += td[i + j];
    });
    const double factor = op == ReduceOp::Mean ? 1.0 / static_cast<double>(count) : 1.0;
    if (op == ReduceOp::Mean) {
        for (double& v : out) v *= factor;
    }
    return make_result(out_shape, std::move(out), {t}, [plan, factor](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        double* gp = p.grad_buffer().data();
        const double* g = self.grad.data();
        walk(*plan, [&](std::size_t i, std::size_t, std::size_t ob, std::size_t len, auto,
                        auto sb) {
            for (std::size_t j = 0; j < len; ++j) gp[i + j] += g[ob + j * sb] * factor;
        });
    });
}

Tensor reshape(const Tensor& t, Shape shape) {
    if (shape_numel(shape) != t.numel()) {
        throw TensorError("reshape: cannot view " + shape_to_string(t.shape()) + " as " +
                          shape_to_string(shape));
    }
    std::vector<double> out(t.data().begin(), t.data().end());
    return make_result(std::move(shape), std::move(out), {t}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& gp = p.grad_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
    });
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
    if (t.rank() == 0) throw TensorError("gather_rows: scalar input");
    const std::size_t n_rows = t.dim(0);
    const std::size_t width = n_rows == 0 ? 0 : t.numel() / n_rows;
    Shape out_shape = t.shape();
    out_shape[0] = rows.size();
    std::vector<double> out(rows.size() * width);
    const auto td = t.data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= n_rows) {
            throw TensorError("gather_rows: row " + std::to_string(rows[r]) +
                              " out of range for shape " + shape_to_string(t.shape()));
        }
        std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                    out.begin() + static_cast<std::ptrdiff_t>(r * width));
    }
    std::vector<std::size_t> index(rows.begin(), rows.end());
    return make_result(std::move(out_shape), std::move(out), {t},
                       [index = std::move(index), width](Node& self) {
                           Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           auto& gp = p.grad_buffer();
                           for (std::size_t r = 0; r < index.size(); ++r) {
                               for (std::size_t j = 0; j < width; ++j) {
                                   gp[index[r] * width + j] += self.grad[r * width + j];
                               }
                           }
                       });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw TensorError("concat_rows: no inputs");
    Shape out_shape = parts[0].shape();
    if (out_shape.empty()) throw TensorError("concat_rows: scalar input");
    out_shape[0] = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != out_shape.size() ||
            !std::equal(s.begin() + 1, s.end(), out_shape.begin() + 1)) {
            throw TensorError("concat_rows: shape mismatch " + shape_to_string(parts[0].shape()) +
                              " vs " + shape_to_string(s));
        }
        out_shape[0] += s[0];
    }
    std::vector<double> out;
    out.reserve(shape_numel(out_shape));
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(out.size());
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    std::vector<Tensor> parents(parts.begin(), parts.end());
    return make_result(std::move(out_shape), std::move(out), std::move(parents),
                       [offsets](Node& self) {
                           for (std::size_t k = 0; k < self.parents.size(); ++k) {
                               Node& p = *self.parents[k];
                               if (!p.requires_grad) continue;
                               auto& gp = p.grad_buffer();
                               for (std::size_t i = 0; i < gp.size(); ++i) {
                                   gp[i] += self.grad[offsets[k] + i];
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined()) throw TensorError("backward: undefined loss");
    if (loss.numel() != 1) {
        throw TensorError("backward: loss must be scalar, got shape " +
                          shape_to_string(loss.shape()));
    }
    if (!loss.requires_grad()) throw TensorError("backward: loss does not require grad");

    Node* root = loss.node();
    root->grad_buffer()[0] += 1.0;
    Tape& tape = Tape::current();
    if (root->is_leaf()) {
        tape.clear();
        return;
    }
    if (tape.empty()) throw TensorError("backward: tape is empty");

    const auto& nodes = tape.nodes();
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        Node& n = **it;
        if (n.grad.empty()) continue;
        n.backward_fn(n);
        std::vector<double>().swap(n.grad);
    }
    tape.clear();
}

}  // namespace fsr
