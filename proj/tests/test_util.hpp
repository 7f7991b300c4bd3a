#pragma once

#include <cmath>
#include <functional>

#include "pmf/tensor.hpp"

namespace pmf::test {

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

inline double rel_err(double got, double want, double floor = 1e-12) {
    return std::abs(got - want) / std::max(std::abs(want), floor);
}

// central finite difference of a scalar function along one coordinate
inline double central_diff(const std::function<double(double)>& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double l2_norm(const Tensor& a) {
    double s = 0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a.data()[i] * a.data()[i];
    return std::sqrt(s);
}

}  // namespace pmf::test
