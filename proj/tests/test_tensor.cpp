#include "magdi/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

namespace magdi::ad {
namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) {
        v = lo + (hi - lo) * rng.uniform();
    }
    return t;
}

// Values with |x| >= 0.1 so finite differences never straddle the relu kink.
Tensor kink_free_tensor(Rng& rng, Shape shape) {
    Tensor t = random_tensor(rng, std::move(shape));
    for (double& v : t.data()) {
        v = v >= 0.0 ? v + 0.1 : v - 0.1;
    }
    return t;
}

// =============================================================================
// Forward values
// =============================================================================

TEST(TensorForward, MatmulMatchesHandProduct) {
    Tape tape;
    Var a = tape.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    Var b = tape.constant(Tensor::matrix(3, 2, {7, 8, 9, 10, 11, 12}));
    const Tensor c = matmul(a, b).value();
    // [1 2 3; 4 5 6] * [7 8; 9 10; 11 12]
    EXPECT_EQ(c, Tensor::matrix(2, 2, {58, 64, 139, 154}));

    Var bt = tape.constant(Tensor::matrix(2, 3, {7, 9, 11, 8, 10, 12}));
    EXPECT_EQ(matmul_nt(a, bt).value(), c);
}

TEST(TensorForward, SoftmaxOfConstantIsUniform) {
    Tape tape;
    for (std::size_t k : {1u, 2u, 5u, 17u}) {
        Var x = tape.constant(Tensor({1, k}, 3.25));
        const Tensor& y = softmax(x).value();
        for (double v : y.data()) {
            EXPECT_DOUBLE_EQ(v, 1.0 / static_cast<double>(k));
        }
    }
}

TEST(TensorForward, SoftmaxRowsSumToOne) {
    Rng rng(11);
    Tape tape;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t r = 1 + rng.below(6), c = 1 + rng.below(9);
        const Tensor& y = softmax(tape.constant(random_tensor(rng, {r, c}, -20.0, 20.0))).value();
        for (std::size_t i = 0; i < r; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                EXPECT_GE(y(i, j), 0.0);
                s += y(i, j);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(TensorForward, TanhAndReluBasics) {
    Tape tape;
    EXPECT_EQ(tanh(tape.constant(Tensor::scalar(0.0))).value().item(), 0.0);
    for (double x : {0.5, 1.0, 42.0}) {
        EXPECT_EQ(relu(tape.constant(Tensor::scalar(-x))).value().item(), 0.0);
        EXPECT_EQ(relu(tape.constant(Tensor::scalar(x))).value().item(), x);
    }
}

TEST(TensorForward, CausalMaskBlocksFuture) {
    Tape tape;
    const Tensor& y = softmax(causal_mask(tape.constant(Tensor({3, 3}, 1.0)))).value();
    EXPECT_DOUBLE_EQ(y(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(y(0, 1), 0.0);
    EXPECT_DOUBLE_EQ(y(1, 0), 0.5);
    EXPECT_DOUBLE_EQ(y(2, 2), 1.0 / 3.0);
}

TEST(TensorForward, MaskedMeanPoolAveragesSelectedRows) {
    Tape tape;
    Var x = tape.constant(Tensor::matrix(3, 2, {1, 2, 3, 4, 100, 100}));
    std::vector<double> mask{1, 1, 0};
    EXPECT_EQ(masked_mean_pool(x, mask).value(), Tensor::matrix(1, 2, {2, 3}));
    std::vector<double> none{0, 0, 0};
    EXPECT_THROW(masked_mean_pool(x, none), std::invalid_argument);
}

TEST(TensorForward, ShapeMismatchNamesOperationAndShapes) {
    Tape tape;
    Var a = tape.constant(Tensor({2, 3}));
    Var b = tape.constant(Tensor({2, 3}));
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos);
        EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    }
    EXPECT_THROW(add(a, tape.constant(Tensor({3, 2}))), ShapeError);
    EXPECT_THROW(slice(a, 1, 2, 5), ShapeError);
}

// =============================================================================
// Backward
// =============================================================================

TEST(TensorBackward, SumOfSquaresGivesTwoTheta) {
    ParameterStore store;
    Parameter& theta = store.add("theta", {2, 3});
    Rng rng(3);
    theta.value = random_tensor(rng, {2, 3});
    Tape tape;
    Var t = tape.param(theta);
    tape.backward(sum(mul(t, t)));
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_DOUBLE_EQ(theta.grad[i], 2.0 * theta.value[i]);
    }
    EXPECT_EQ(tape.size(), 0u) << "recording is freed after backward";
}

TEST(TensorBackward, UntouchedParameterGetsZero) {
    ParameterStore store;
    Parameter& used = store.add("used", {3});
    Parameter& unused = store.add("unused", {4});
    used.value.fill(2.0);
    unused.value.fill(5.0);
    store.zero_grad();
    Tape tape;
    Var u = tape.param(used);
    tape.param(unused);
    tape.backward(sum(u));
    for (double g : unused.grad.data()) {
        EXPECT_EQ(g, 0.0);
    }
}

TEST(TensorBackward, LossIndependentOfParameterGivesZero) {
    ParameterStore store;
    Parameter& theta = store.add("theta", {3});
    theta.value.fill(1.5);
    Tape tape;
    tape.param(theta);
    Var c = tape.constant(Tensor({3}, 2.0));
    Var loss = sum(mul(c, c));
    tape.backward(loss);
    for (double g : theta.grad.data()) {
        EXPECT_EQ(g, 0.0);
    }
}

TEST(TensorBackward, NonScalarLossRejected) {
    ParameterStore store;
    Parameter& theta = store.add("theta", {3});
    Tape tape;
    Var t = tape.param(theta);
    EXPECT_THROW(tape.backward(t), ShapeError);
}

TEST(TensorBackward, DeterministicGradients) {
    auto run = [] {
        ParameterStore store;
        Parameter& w = store.add("w", {4, 5});
        Rng rng(99);
        w.value = random_tensor(rng, {4, 5});
        Tape tape;
        Var x = tape.param(w);
        tape.backward(sum(tanh(matmul_nt(x, x))));
        return std::make_pair(w.value, w.grad);
    };
    EXPECT_EQ(run(), run());
}

// =============================================================================
// Gradient checks on every primitive, randomized shapes
// =============================================================================

struct PrimitiveCase {
    const char* name;
    // Builds the primitive output from two parameter leaves.
    std::function<Var(Tape&, Var, Var)> build;
    // Shapes for the two parameters given (r, k, c).
    std::function<std::pair<Shape, Shape>(std::size_t, std::size_t, std::size_t)> shapes;
    bool positive = false;
    bool kink_free = false;
};

std::vector<PrimitiveCase> primitive_cases() {
    const std::vector<int> ids{2, 0, 1, 2, 1};
    return {
        {"matmul", [](Tape&, Var a, Var b) { return matmul(a, b); },
         [](auto r, auto k, auto c) { return std::make_pair(Shape{r, k}, Shape{k, c}); }},
        {"matmul_nt", [](Tape&, Var a, Var b) { return matmul_nt(a, b); },
         [](auto r, auto k, auto c) { return std::make_pair(Shape{r, k}, Shape{c, k}); }},
        {"transpose", [](Tape&, Var a, Var) { return transpose(a); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{1}); }},
        {"add", [](Tape&, Var a, Var b) { return add(a, b); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{r, c}); }},
        {"add_row_broadcast", [](Tape&, Var a, Var b) { return add(a, b); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{1, c}); }},
        {"sub_scalar", [](Tape&, Var a, Var b) { return sub(a, b); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{1}); }},
        {"mul", [](Tape&, Var a, Var b) { return mul(a, b); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{r, c}); }},
        {"scale_add_scalar", [](Tape&, Var a, Var) { return add_scalar(scale(a, -1.7), 0.3); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{1}); }},
        {"tanh", [](Tape&, Var a, Var) { return tanh(a); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{1}); }},
        {"relu", [](Tape&, Var a, Var) { return relu(a); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{1}); }, false, true},
        {"exp", [](Tape&, Var a, Var) { return exp(a); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{1}); }},
        {"log", [](Tape&, Var a, Var) { return log(a); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{1}); }, true},
        {"softmax", [](Tape&, Var a, Var) { return softmax(a); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{1}); }},
        {"log_softmax", [](Tape&, Var a, Var) { return log_softmax(a); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{1}); }},
        {"causal_softmax", [](Tape&, Var a, Var) { return softmax(causal_mask(a)); },
         [](auto r, auto, auto) { return std::make_pair(Shape{r, r}, Shape{1}); }},
        {"layer_norm",
         [](Tape& t, Var a, Var b) {
             return layer_norm(a, b, t.constant(Tensor({1, b.value().cols()}, 0.1)));
         },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c + 1}, Shape{1, c + 1}); }},
        {"gather_rows", [ids](Tape&, Var a, Var) { return gather_rows(a, ids); },
         [](auto, auto, auto c) { return std::make_pair(Shape{3, c}, Shape{1}); }},
        {"masked_mean_pool",
         [](Tape&, Var a, Var) {
             std::vector<double> mask(a.value().rows(), 1.0);
             mask.front() = 0.0;
             if (mask.size() == 1) {
                 mask.front() = 1.0;
             }
             return masked_mean_pool(a, mask);
         },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{1}); }},
        {"concat_rows", [](Tape&, Var a, Var b) { return concat({a, b, a}, 0); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{2, c}); }},
        {"concat_cols", [](Tape&, Var a, Var b) { return concat({b, a}, 1); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{r, 2}); }},
        {"slice_cols", [](Tape&, Var a, Var) { return slice(a, 1, 1, a.value().cols()); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c + 1}, Shape{1}); }},
        {"slice_rows", [](Tape&, Var a, Var) { return slice(a, 0, 0, 1); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{1}); }},
        {"pick",
         [](Tape&, Var a, Var) {
             std::vector<int> cols;
             for (std::size_t i = 0; i < a.value().rows(); ++i) {
                 cols.push_back(static_cast<int>(i % a.value().cols()));
             }
             return pick(a, cols);
         },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{1}); }},
        {"mean", [](Tape&, Var a, Var) { return mean(a); },
         [](auto r, auto, auto c) { return std::make_pair(Shape{r, c}, Shape{1}); }},
    };
}

TEST(TensorGradCheck, EveryPrimitiveOverTwentySeeds) {
    for (const auto& pc : primitive_cases()) {
        double worst = 0.0;
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            Rng rng(seed * 7919);
            const std::size_t r = 1 + rng.below(4), k = 1 + rng.below(4), c = 1 + rng.below(4);
            auto [sa, sb] = pc.shapes(r, k, c);
            ParameterStore store;
            Parameter& a = store.add("a", sa);
            Parameter& b = store.add("b", sb);
            a.value = pc.kink_free ? kink_free_tensor(rng, sa) : random_tensor(rng, sa);
            if (pc.positive) {
                a.value = random_tensor(rng, sa, 0.5, 2.0);
            }
            b.value = random_tensor(rng, sb);
            // Random projection weights so the probe is not a plain sum.
            Tensor weights;
            auto loss = [&](Tape& tape) {
                Var out = pc.build(tape, tape.param(a), tape.param(b));
                if (weights.shape() != out.shape()) {
                    Rng wrng(seed);
                    weights = random_tensor(wrng, out.shape());
                }
                return sum(mul(out, tape.view(weights)));
            };
            std::vector<Parameter*> params{&a, &b};
            worst = std::max(worst, grad_check(loss, params, {.epsilon = 1e-5, .seed = seed}));
        }
        EXPECT_LT(worst, 1e-4) << pc.name;
    }
}

TEST(TensorGradCheck, QuadraticIsExactToRounding) {
    ParameterStore store;
    Parameter& theta = store.add("theta", {5});
    Rng rng(5);
    theta.value = random_tensor(rng, {5});
    std::vector<Parameter*> params{&theta};
    const double err = grad_check([&](Tape& t) {
        Var x = t.param(theta);
        return sum(mul(x, x));
    }, params);
    EXPECT_LT(err, 1e-7);
}

TEST(TensorGradCheck, ReluAwayFromKink) {
    ParameterStore store;
    Parameter& theta = store.add("theta", {3, 4});
    Rng rng(17);
    theta.value = kink_free_tensor(rng, {3, 4});
    std::vector<Parameter*> params{&theta};
    const double err = grad_check([&](Tape& t) {
        Var x = t.param(theta);
        return sum(mul(relu(x), x));
    }, params);
    EXPECT_LT(err, 1e-4);
}

TEST(TensorGradCheck, RejectsNonFiniteAndBadEpsilon) {
    ParameterStore store;
    Parameter& theta = store.add("theta", {2});
    theta.value.fill(-1.0);
    std::vector<Parameter*> params{&theta};
    auto bad = [&](Tape& t) { return sum(log(t.param(theta))); };
    EXPECT_THROW(grad_check(bad, params), std::domain_error);
    auto fine = [&](Tape& t) { return sum(t.param(theta)); };
    EXPECT_THROW(grad_check(fine, params, {.epsilon = 0.0}), std::invalid_argument);
}

}  // namespace
}  // namespace magdi::ad
