#pragma once

#include <optional>

#include "pmf/tensor.hpp"

namespace pmf {

// Forward-mode primal/tangent pair. A missing tangent means structurally zero,
// which lets parameter-side operands skip tangent arithmetic entirely. Dual
// arithmetic never touches the reverse-mode graph.
struct Dual {
    Tensor p;
    std::optional<Tensor> t;

    Dual() = default;
    explicit Dual(Tensor primal) : p(std::move(primal)) {}
    Dual(Tensor primal, Tensor tangent) : p(std::move(primal)), t(std::move(tangent)) {
        if (t->shape() != p.shape())
            throw ShapeError("Dual: tangent shape " + t->shape().str() + " != primal " + p.shape().str());
    }

    const Shape& shape() const { return p.shape(); }
    // materialized tangent (zeros when structurally zero)
    Tensor tangent() const { return t ? *t : Tensor(p.shape(), 0.0); }
};

Dual add(const Dual& a, const Dual& b);
Dual sub(const Dual& a, const Dual& b);
Dual mul(const Dual& a, const Dual& b);
Dual scalar_mul(const Dual& a, double s);
Dual add_scalar(const Dual& a, double s);
Dual matmul(const Dual& a, const Dual& b);
Dual transpose(const Dual& a, int ax0, int ax1);
Dual reshape(const Dual& a, const Shape& s);
Dual concat(const Dual& a, const Dual& b, int axis);
Dual slice(const Dual& a, int axis, int64_t start, int64_t len);
Dual sum_all(const Dual& a);
Dual mean_all(const Dual& a);
Dual sum_axis(const Dual& a, int axis);
Dual mean_axis(const Dual& a, int axis);
Dual min_axis(const Dual& a, int axis);
Dual softmax(const Dual& a);
Dual rms_normalize(const Dual& a, double eps = 1e-6);
Dual layer_normalize(const Dual& a, double eps = 1e-6);
Dual gelu(const Dual& a);
Dual silu(const Dual& a);
Dual sqrt(const Dual& a);
Dual reciprocal(const Dual& a);
Dual sin(const Dual& a);
Dual cos(const Dual& a);

}  // namespace pmf
