#include "fsr/gradcheck.hpp"
#include "fsr/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace fsr;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true,
                     double lo = -2.0, double hi = 2.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Plain central differences, kept separate from gradcheck().
std::vector<double> numeric_grad(const std::function<double()>& f, Tensor& param, double h) {
    std::vector<double> out(param.numel());
    auto values = param.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double x = values[i];
        values[i] = x + h;
        const double plus = f();
        values[i] = x - h;
        const double minus = f();
        values[i] = x;
        out[i] = (plus - minus) / (2 * h);
    }
    return out;
}

}  // namespace

TEST(Elementwise, ReluDefinition) {
    auto y = relu(Tensor::from({3}, {-1, 0, 2}));
    EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()),
              (std::vector<double>{0, 0, 2}));
}

TEST(Elementwise, AddArithmetic) {
    auto y = add(Tensor::from({2}, {1, 2}), Tensor::from({2}, {3, 4}));
    EXPECT_DOUBLE_EQ(y.data()[0], 4);
    EXPECT_DOUBLE_EQ(y.data()[1], 6);
}

TEST(Elementwise, MulBackwardProductRule) {
    auto a = Tensor::from({1}, {2}, true);
    auto b = Tensor::from({1}, {3}, true);
    backward(sum(mul(a, b)));
    EXPECT_DOUBLE_EQ(a.grad()[0], 3);
    EXPECT_DOUBLE_EQ(b.grad()[0], 2);
}

TEST(Elementwise, BroadcastTrailingDims) {
    auto a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    auto b = Tensor::from({3}, {10, 20, 30}, true);
    auto y = a + b;
    ASSERT_EQ(y.shape(), (Shape{2, 3}));
    EXPECT_DOUBLE_EQ(y.at({1, 2}), 36);
    backward(sum(y));
    // grad shape equals leaf shape; broadcast axis is summed
    ASSERT_EQ(b.grad().size(), 3u);
    EXPECT_DOUBLE_EQ(b.grad()[0], 2);
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({4});
    try {
        (void)add(a, b);
        FAIL() << "expected throw";
    } catch (const TensorError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("(2, 3)"), std::string::npos);
        EXPECT_NE(msg.find("(4)"), std::string::npos);
    }
}

TEST(Elementwise, StrictDivisionByZero) {
    auto a = Tensor::from({2}, {1, 2});
    auto b = Tensor::from({2}, {1, 0});
    EXPECT_THROW((void)div(a, b), NonFiniteError);
    StrictModeGuard lax(false);
    auto y = div(a, b);
    EXPECT_TRUE(std::isinf(y.data()[1]));
}

TEST(Elementwise, StrictLogOfZero) {
    EXPECT_THROW((void)log(Tensor::from({1}, {0.0})), NonFiniteError);
    EXPECT_THROW((void)sqrt(Tensor::from({1}, {-1.0})), NonFiniteError);
}

TEST(Elementwise, MissingOperand) {
    auto a = Tensor::zeros({2});
    EXPECT_THROW((void)elementwise(ElementwiseOp::Add, a), TensorError);
}

TEST(Matmul, Identity) {
    auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
    auto y = matmul(eye, m);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y.data()[i], m.data()[i]);
}

TEST(Matmul, RowTimesColumn) {
    auto y = matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
    ASSERT_EQ(y.shape(), (Shape{1, 1}));
    EXPECT_DOUBLE_EQ(y.item(), 11);
}

TEST(Matmul, DimensionMismatch) {
    EXPECT_THROW((void)matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), TensorError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(7);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    auto w = random_tensor({3, 2}, rng, false);
    auto f = [&] { return sum(mul(matmul(a, b), w)); };
    backward(f());
    auto fv = [&] {
        NoGradGuard g;
        return f().item();
    };
    auto na = numeric_grad(fv, a, 1e-5);
    auto nb = numeric_grad(fv, b, 1e-5);
    for (std::size_t i = 0; i < na.size(); ++i)
        EXPECT_LT(gradient_rel_error(a.grad()[i], na[i]), 1e-6);
    for (std::size_t i = 0; i < nb.size(); ++i)
        EXPECT_LT(gradient_rel_error(b.grad()[i], nb[i]), 1e-6);
}

TEST(Reduce, MeanAllAxes) {
    auto t = Tensor::from({2, 2}, {1, 3, 5, 7});
    // direct summation: (1 + 3 + 5 + 7) / 4
    EXPECT_DOUBLE_EQ(mean(t).item(), 4.0);
}

TEST(Reduce, SumZeros) { EXPECT_DOUBLE_EQ(sum(Tensor::zeros({2, 2})).item(), 0.0); }

TEST(Reduce, Max) { EXPECT_DOUBLE_EQ(max(Tensor::from({3}, {1, 9, 3})).item(), 9.0); }

TEST(Reduce, InvalidAxis) { EXPECT_THROW((void)sum(Tensor::zeros({2, 2}), {2}), TensorError); }

TEST(Reduce, AxesAndKeepdims) {
    auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto s = sum(t, {1});
    ASSERT_EQ(s.shape(), (Shape{2}));
    EXPECT_DOUBLE_EQ(s.data()[1], 15);
    auto k = mean(t, {0}, true);
    ASSERT_EQ(k.shape(), (Shape{1, 3}));
    EXPECT_DOUBLE_EQ(k.data()[2], 4.5);
}

TEST(Reduce, MeanBackwardSpreadsOneOverCount) {
    auto t = Tensor::zeros({2, 4}, true);
    backward(mean(t));
    for (double g : t.grad()) EXPECT_DOUBLE_EQ(g, 1.0 / 8.0);
}

TEST(Backward, SumLinearity) {
    auto w = Tensor::from({3}, {0.5, -1, 2}, true);
    backward(sum(w));
    for (double g : w.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, PowerRule) {
    auto w = Tensor::from({2}, {1, 2}, true);
    backward(sum(square(w)));
    EXPECT_DOUBLE_EQ(w.grad()[0], 2);
    EXPECT_DOUBLE_EQ(w.grad()[1], 4);
}

TEST(Backward, NonScalarLossRejected) {
    auto w = Tensor::from({2}, {1, 2}, true);
    EXPECT_THROW(backward(w * 2.0), TensorError);
}

TEST(Backward, ClearsTape) {
    auto w = Tensor::from({2}, {1, 2}, true);
    auto loss = sum(w * 3.0);
    EXPECT_GT(Tape::current().size(), 0u);
    backward(loss);
    EXPECT_EQ(Tape::current().size(), 0u);
}

TEST(Backward, NoGradGuardRecordsNothing) {
    auto w = Tensor::from({2}, {1, 2}, true);
    NoGradGuard g;
    auto loss = sum(w * 3.0);
    EXPECT_FALSE(loss.requires_grad());
    EXPECT_EQ(Tape::current().size(), 0u);
}

TEST(Backward, DiamondGraphAccumulates) {
    auto x = Tensor::from({1}, {3}, true);
    auto y = x * x;      // 9
    auto z = y + x * y;  // 9 + 27; dz/dx = 2x + 3x^2 = 33
    backward(sum(z));
    EXPECT_DOUBLE_EQ(x.grad()[0], 33);
}

TEST(Rows, GatherAndConcatBackward) {
    auto t = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    std::vector<std::size_t> idx{2, 0, 2};
    auto g = gather_rows(t, idx);
    EXPECT_DOUBLE_EQ(g.at({0, 1}), 6);
    std::vector<Tensor> parts{g, t};
    auto c = concat_rows(parts);
    ASSERT_EQ(c.shape(), (Shape{6, 2}));
    backward(sum(c));
    EXPECT_DOUBLE_EQ(t.grad()[0], 2);  // row 0: once gathered + once concatenated
    EXPECT_DOUBLE_EQ(t.grad()[2], 1);
    EXPECT_DOUBLE_EQ(t.grad()[4], 3);
}

// Every differentiable op against central differences on inputs in [-2, 2].
TEST(Gradcheck, EveryOpOnRandomInputs) {
    std::mt19937_64 rng(2024);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4}, rng);
    auto pos = random_tensor({3, 4}, rng, true, 0.5, 2.0);
    auto w = random_tensor({3, 4}, rng, false);
    auto m = random_tensor({4, 2}, rng);

    auto weighted = [&](const Tensor& t) { return sum(mul(t, w)); };
    struct Case {
        const char* name;
        std::function<Tensor()> fn;
        std::vector<NamedTensor> params;
    };
    std::vector<Case> cases{
        {"add", [&] { return weighted(a + b); }, {{"a", a}, {"b", b}}},
        {"sub", [&] { return weighted(a - b); }, {{"a", a}, {"b", b}}},
        {"mul", [&] { return weighted(a * b); }, {{"a", a}, {"b", b}}},
        {"div", [&] { return weighted(a / pos); }, {{"a", a}, {"pos", pos}}},
        {"relu", [&] { return weighted(relu(a)); }, {{"a", a}}},
        {"exp", [&] { return weighted(exp(a)); }, {{"a", a}}},
        {"log", [&] { return weighted(log(pos)); }, {{"pos", pos}}},
        {"sqrt", [&] { return weighted(sqrt(pos)); }, {{"pos", pos}}},
        {"neg", [&] { return weighted(-a); }, {{"a", a}}},
        {"scale", [&] { return weighted(a * 1.7); }, {{"a", a}}},
        {"matmul", [&] { return sum(square(matmul(a, m))); }, {{"a", a}, {"m", m}}},
        {"sum", [&] { return sum(square(sum(a, {1}))); }, {{"a", a}}},
        {"mean", [&] { return sum(square(mean(a, {0}))); }, {{"a", a}}},
        {"max", [&] { return sum(square(max(a, {1}))); }, {{"a", a}}},
    };
    for (auto& c : cases) {
        auto report = gradcheck(c.fn, c.params, 1e-5, 1e-4);
        EXPECT_TRUE(report.passed) << c.name << " max rel err " << report.max_rel_error;
    }
}

TEST(Gradcheck, IdentitySumIsExact) {
    auto w = Tensor::from({4}, {0.1, 0.2, -0.3, 0.4});
    auto report = gradcheck([&] { return sum(w); }, {{"w", w}});
    EXPECT_TRUE(report.passed);
    EXPECT_LT(report.max_rel_error, 1e-9);
}

TEST(Gradcheck, FlagsNonFinite) {
    auto w = Tensor::from({1}, {0.0});
    StrictModeGuard lax(false);
    auto report = gradcheck([&] { return sum(log(w * w)); }, {{"w", w}});
    EXPECT_FALSE(report.finite);
    EXPECT_FALSE(report.passed);
}

TEST(Determinism, RepeatedPassesBitIdentical) {
    auto run = [] {
        std::mt19937_64 rng(99);
        auto a = random_tensor({5, 3}, rng);
        auto b = random_tensor({3, 4}, rng);
        auto loss = mean(exp(matmul(a, b) * 0.3));
        backward(loss);
        std::vector<double> out{loss.item()};
        out.insert(out.end(), a.grad().begin(), a.grad().end());
        return out;
    };
    EXPECT_EQ(run(), run());
}
