#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pmf/tensor.hpp"
#include "test_util.hpp"

using namespace pmf;
using namespace pmf::test;

TEST_CASE("matmul identity") {
    Tensor I = Tensor::from_vec(Shape{2, 2}, {1, 0, 0, 1});
    Tensor v = Tensor::from_vec(Shape{2, 1}, {3, 4});
    Tensor r = matmul(I, v);
    CHECK(r.shape() == Shape{2, 1});
    CHECK(r.at(0) == 3.0);
    CHECK(r.at(1) == 4.0);
}

TEST_CASE("matmul shape errors name the offending dims") {
    Tensor a = Tensor::from_vec(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from_vec(Shape{4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("3 vs 4"), ShapeError);
}

TEST_CASE("matmul batched and folded agree") {
    Tensor a = Tensor::from_vec(Shape{2, 2, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    Tensor w = Tensor::from_vec(Shape{3, 2}, {1, 0, 0, 1, 1, 1});
    Tensor folded = matmul(a, w);  // (2,2,2)
    for (int b = 0; b < 2; ++b) {
        Tensor ab = slice(a, 0, b, 1).reshaped(Shape{2, 3});
        Tensor rb = matmul(ab, w);
        Tensor fb = slice(folded, 0, b, 1).reshaped(Shape{2, 2});
        CHECK(bitwise_equal(rb, fb));
    }
}

TEST_CASE("softmax symmetry and stability") {
    Tensor r = softmax(Tensor::from_vec(Shape{2}, {0, 0}));
    CHECK(r.at(0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(r.at(1) == doctest::Approx(0.5).epsilon(1e-15));

    // max subtraction keeps huge logits finite
    Tensor big = softmax(Tensor::from_vec(Shape{2}, {1e4, 1e4 - 1}));
    CHECK(big.all_finite());
    CHECK(big.at(0) + big.at(1) == doctest::Approx(1.0));
}

TEST_CASE("rms_normalize matches the hand formula") {
    // oracle: x / sqrt(mean(x^2) + 1e-6), evaluated directly
    double eps = 1e-6;
    double ms = (9.0 + 16.0) / 2.0;
    double want0 = 3.0 / std::sqrt(ms + eps);
    double want1 = 4.0 / std::sqrt(ms + eps);
    Tensor r = rms_normalize(Tensor::from_vec(Shape{2}, {3, 4}));
    CHECK(r.at(0) == doctest::Approx(want0).epsilon(1e-14));
    CHECK(r.at(1) == doctest::Approx(want1).epsilon(1e-14));
    CHECK(r.at(0) == doctest::Approx(0.8485).epsilon(1e-4));
    CHECK(r.at(1) == doctest::Approx(1.1314).epsilon(1e-4));
}

TEST_CASE("broadcast add/mul against explicit loops") {
    Tensor a = Tensor::from_vec(Shape{2, 1, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from_vec(Shape{1, 2, 1}, {10, 20});
    Tensor r = add(a, b);
    CHECK(r.shape() == Shape{2, 2, 3});
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 3; ++k)
                CHECK(r.at((i * 2 + j) * 3 + k) == a.at(i * 3 + k) + b.at(j));

    // trailing-axis alignment: (3,) bias against (2,3)
    Tensor x = Tensor::from_vec(Shape{2, 3}, {0, 0, 0, 1, 1, 1});
    Tensor bias = Tensor::from_vec(Shape{3}, {7, 8, 9});
    Tensor y = add(x, bias);
    CHECK(y.at(0) == 7.0);
    CHECK(y.at(5) == 10.0);

    CHECK_THROWS_AS(add(Tensor(Shape{2, 3}), Tensor(Shape{2, 2})), ShapeError);
}

TEST_CASE("transpose, slice, concat round structure") {
    Tensor a = Tensor::from_vec(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor t = transpose(a, 0, 1);
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.at(0) == 1.0);
    CHECK(t.at(1) == 4.0);
    CHECK(bitwise_equal(transpose(t, 0, 1), a));

    Tensor s = slice(a, 1, 1, 2);
    CHECK(s.shape() == Shape{2, 2});
    CHECK(s.at(0) == 2.0);
    CHECK(s.at(3) == 6.0);

    Tensor c = concat(slice(a, 1, 0, 1), slice(a, 1, 1, 2), 1);
    CHECK(bitwise_equal(c, a));
    CHECK_THROWS_AS(slice(a, 1, 2, 2), ShapeError);
}

TEST_CASE("reductions") {
    Tensor a = Tensor::from_vec(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(sum_all(a).scalar_value() == 21.0);
    CHECK(mean_all(a).scalar_value() == doctest::Approx(3.5));
    Tensor s0 = sum_axis(a, 0);
    CHECK(s0.shape() == Shape{3});
    CHECK(s0.at(1) == 7.0);
    Tensor m1 = mean_axis(a, 1);
    CHECK(m1.at(0) == doctest::Approx(2.0));

    std::vector<int64_t> arg;
    Tensor mn = min_axis(Tensor::from_vec(Shape{2, 3}, {5, 1, 2, 0, 7, 3}), 1, &arg);
    CHECK(mn.at(0) == 1.0);
    CHECK(mn.at(1) == 0.0);
    CHECK(arg[0] == 1);
    CHECK(arg[1] == 0);
}

TEST_CASE("layer_normalize zero mean unit variance") {
    Tensor a = Tensor::from_vec(Shape{1, 4}, {1, 2, 3, 10});
    Tensor y = layer_normalize(a);
    double mu = 0, ms = 0;
    for (int i = 0; i < 4; ++i) mu += y.at(i) / 4;
    for (int i = 0; i < 4; ++i) ms += y.at(i) * y.at(i) / 4;
    CHECK(mu == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(ms == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("activation point values") {
    Tensor z = Tensor::from_vec(Shape{3}, {-1.0, 0.0, 2.0});
    Tensor g = gelu(z);
    CHECK(g.at(1) == 0.0);
    CHECK(g.at(2) == doctest::Approx(2.0 * 0.5 * (1.0 + std::erf(2.0 / std::sqrt(2.0)))));
    Tensor s = silu(z);
    CHECK(s.at(1) == 0.0);
    CHECK(s.at(2) == doctest::Approx(2.0 / (1.0 + std::exp(-2.0))));
    CHECK(silu(Tensor::from_vec(Shape{1}, {-800.0})).all_finite());
}
