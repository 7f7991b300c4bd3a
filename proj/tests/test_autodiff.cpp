#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "pmf/dual.hpp"
#include "pmf/graph.hpp"
#include "pmf/rng.hpp"
#include "test_util.hpp"

using namespace pmf;
using namespace pmf::test;

namespace {

// scalar-valued composite used to exercise every op in one reverse sweep
template <class T>
T composite(const T& x) {
    // x: (2,4)
    T a = rms_normalize(x);
    T b = layer_normalize(add_scalar(x, 0.5));
    T c = softmax(mul(a, b));
    T d = gelu(slice(x, 1, 0, 2));
    T e = silu(slice(x, 1, 2, 2));
    T f = concat(d, e, 1);
    T g = matmul(transpose(f, 0, 1), c);                      // (4,4)
    T h = sqrt(add_scalar(mul(g, g), 1e-3));
    T i = reciprocal(add_scalar(h, 1.0));
    T j = add(sin(i), cos(scalar_mul(i, 0.7)));
    T k = min_axis(j, 1);
    T l = sub(mean_axis(j, 0), k);
    return add(sum_all(l), mean_all(reshape(j, Shape{2, 8})));
}

double eval_composite(const Tensor& x) { return composite<Tensor>(x).scalar_value(); }

}  // namespace

TEST_CASE("backward: linear and quadratic leaves") {
    // loss = sum(w * x), grad x == w
    Value x = Value::leaf(Tensor::from_vec(Shape{2}, {5, -7}), true);
    Value w = Value::leaf(Tensor::from_vec(Shape{2}, {2, 3}), false);
    Value loss = sum_all(mul(w, x));
    backward(loss);
    CHECK(x.grad().at(0) == 2.0);
    CHECK(x.grad().at(1) == 3.0);

    // loss = sum(x^2), x=[1,-2] -> grad [2,-4]
    Value y = Value::leaf(Tensor::from_vec(Shape{2}, {1, -2}), true);
    Value loss2 = sum_all(mul(y, y));
    backward(loss2);
    CHECK(y.grad().at(0) == 2.0);
    CHECK(y.grad().at(1) == -4.0);
}

TEST_CASE("backward rejects non-scalar loss") {
    Value x = Value::leaf(Tensor::from_vec(Shape{2}, {1, 2}), true);
    CHECK_THROWS_AS(backward(mul(x, x)), ShapeError);
}

TEST_CASE("unreached leaves report zero gradients") {
    Value x = Value::leaf(Tensor::from_vec(Shape{2}, {1, 2}), true);
    Value y = Value::leaf(Tensor::from_vec(Shape{2}, {3, 4}), true);
    backward(sum_all(mul(x, x)));
    CHECK(y.grad().at(0) == 0.0);
    CHECK(y.grad().at(1) == 0.0);
}

TEST_CASE("backward of the composite matches central finite differences") {
    Rng rng(42);
    Tensor x0 = randn(Shape{2, 4}, rng);
    Value x = Value::leaf(x0, true);
    backward(composite<Value>(x));
    Tensor g = x.grad();

    const double h = 1e-5;
    for (int64_t i = 0; i < x0.numel(); ++i) {
        Tensor xp = x0.clone();
        Tensor xm = x0.clone();
        xp.mut()[i] += h;
        xm.mut()[i] -= h;
        double fd = (eval_composite(xp) - eval_composite(xm)) / (2 * h);
        if (std::abs(fd) < 1e-7 && std::abs(g.at(i)) < 1e-7) continue;
        CHECK(rel_err(g.at(i), fd, 1e-6) < 1e-4);
    }
}

TEST_CASE("dual sweep of the composite matches directional finite differences") {
    Rng rng(43);
    Tensor x0 = randn(Shape{2, 4}, rng);
    Tensor dir = randn(Shape{2, 4}, rng);

    Dual out = composite<Dual>(Dual(x0, dir));
    const double h = 1e-4;
    Tensor xp = add(x0, scalar_mul(dir, h));
    Tensor xm = add(x0, scalar_mul(dir, -h));
    double fd = (eval_composite(xp) - eval_composite(xm)) / (2 * h);
    CHECK(rel_err(out.tangent().scalar_value(), fd, 1e-9) < 1e-3);

    // primal of the dual sweep is bitwise equal to a plain evaluation
    CHECK(out.p.scalar_value() == eval_composite(x0));
}

TEST_CASE("per-op dual rules agree with directional finite differences") {
    Rng rng(44);
    auto check_op = [&](const char* name, auto&& op, const Shape& s, double h = 1e-5) {
        Tensor x0 = randn(s, rng);
        Tensor dir = randn(s, rng);
        Dual d = op(Dual(x0, dir));
        Tensor fd = scalar_mul(sub(op(add(x0, scalar_mul(dir, h))), op(add(x0, scalar_mul(dir, -h)))),
                               1.0 / (2 * h));
        double err = max_abs_diff(d.tangent(), fd);
        double scale = std::max(1.0, l2_norm(fd));
        INFO(name);
        CHECK(err / scale < 1e-3);
    };
    check_op("softmax", [](auto&& v) { return softmax(v); }, Shape{3, 5});
    check_op("rms_normalize", [](auto&& v) { return rms_normalize(v); }, Shape{3, 5});
    check_op("layer_normalize", [](auto&& v) { return layer_normalize(v); }, Shape{3, 5});
    check_op("gelu", [](auto&& v) { return gelu(v); }, Shape{3, 5});
    check_op("silu", [](auto&& v) { return silu(v); }, Shape{3, 5});
    check_op("sin", [](auto&& v) { return sin(v); }, Shape{3, 5});
    check_op("cos", [](auto&& v) { return cos(v); }, Shape{3, 5});
    check_op("sqrt", [](auto&& v) { return sqrt(add_scalar(mul(v, v), 1.0)); }, Shape{3, 5});
    check_op("reciprocal", [](auto&& v) { return reciprocal(add_scalar(mul(v, v), 2.0)); }, Shape{3, 5});
}

TEST_CASE("jvp product rule: f(x,t) = t*x") {
    // primal (x=[2], t=0.5), tangent ([3], 1): u = [1], du = t*3 + x*1 = [3.5]
    Dual x(Tensor::from_vec(Shape{1}, {2.0}), Tensor::from_vec(Shape{1}, {3.0}));
    Dual t(Tensor::from_vec(Shape{1}, {0.5}), Tensor::from_vec(Shape{1}, {1.0}));
    Dual u = mul(t, x);
    CHECK(u.p.at(0) == 1.0);
    CHECK(u.tangent().at(0) == 3.5);
}

TEST_CASE("jvp of a function constant in r and t passes the x-tangent through") {
    Rng rng(7);
    Tensor x0 = randn(Shape{4}, rng);
    Tensor v = randn(Shape{4}, rng);
    Dual x(x0, v);
    Dual r(Tensor::scalar(0.2));                          // zero tangent
    Dual t(Tensor::scalar(0.9), Tensor::scalar(1.0));     // dt = 1
    Dual u = add(x, scalar_mul(mul(r, t), 0.0));          // f(x,r,t) = x
    CHECK(max_abs_diff(u.tangent(), v) == 0.0);
}

TEST_CASE("graph-free dual arithmetic allocates no graph nodes") {
    Rng rng(45);
    Tensor x0 = randn(Shape{2, 4}, rng);
    Tensor dir = randn(Shape{2, 4}, rng);
    int64_t before = graph_nodes_created();
    composite<Dual>(Dual(x0, dir));
    composite<Tensor>(x0);
    CHECK(graph_nodes_created() == before);
}

TEST_CASE("grad accumulation with shared subexpressions") {
    // y used twice: grad must sum both paths
    Value x = Value::leaf(Tensor::from_vec(Shape{2}, {3, 4}), true);
    Value y = scalar_mul(x, 2.0);
    Value loss = sum_all(add(mul(y, y), y));
    backward(loss);
    // d/dx (4x^2 + 2x) = 8x + 2
    CHECK(x.grad().at(0) == doctest::Approx(26.0));
    CHECK(x.grad().at(1) == doctest::Approx(34.0));
}

TEST_CASE("broadcast ops reduce gradients to operand shapes") {
    Value a = Value::leaf(Tensor::from_vec(Shape{2, 3}, {1, 2, 3, 4, 5, 6}), true);
    Value b = Value::leaf(Tensor::from_vec(Shape{3}, {1, 10, 100}), true);
    backward(sum_all(mul(a, b)));
    CHECK(b.grad().shape() == Shape{3});
    CHECK(b.grad().at(0) == doctest::Approx(5.0));   // 1+4
    CHECK(b.grad().at(2) == doctest::Approx(9.0));   // 3+6
    CHECK(a.grad().at(4) == doctest::Approx(10.0));  // b[1]
}
