#include "pmf/dual.hpp"

#include <cmath>

namespace pmf {

namespace {
// tangent of a broadcast-aware linear combination da*x + db*y
std::optional<Tensor> combine(const std::optional<Tensor>& ta, const std::optional<Tensor>& tb,
                              double ca, double cb, const Shape& out) {
    if (!ta && !tb) return std::nullopt;
    Tensor r;
    if (ta && tb) {
        Tensor left = ca == 1.0 ? *ta : scalar_mul(*ta, ca);
        Tensor right = cb == 1.0 ? *tb : scalar_mul(*tb, cb);
        r = add(left, right);
    } else if (ta) {
        r = ca == 1.0 ? *ta : scalar_mul(*ta, ca);
    } else {
        r = cb == 1.0 ? *tb : scalar_mul(*tb, cb);
    }
    if (r.shape() != out) {
        // broadcast the tangent up to the primal output shape
        r = add(r, Tensor(out, 0.0));
    }
    return r;
}
}  // namespace

Dual add(const Dual& a, const Dual& b) {
    Dual o;
    o.p = add(a.p, b.p);
    o.t = combine(a.t, b.t, 1.0, 1.0, o.p.shape());
    return o;
}

Dual sub(const Dual& a, const Dual& b) {
    Dual o;
    o.p = sub(a.p, b.p);
    o.t = combine(a.t, b.t, 1.0, -1.0, o.p.shape());
    return o;
}

Dual mul(const Dual& a, const Dual& b) {
    Dual o;
    o.p = mul(a.p, b.p);
    std::optional<Tensor> left = a.t ? std::optional<Tensor>(mul(*a.t, b.p)) : std::nullopt;
    std::optional<Tensor> right = b.t ? std::optional<Tensor>(mul(a.p, *b.t)) : std::nullopt;
    o.t = combine(left, right, 1.0, 1.0, o.p.shape());
    return o;
}

Dual scalar_mul(const Dual& a, double s) {
    Dual o;
    o.p = scalar_mul(a.p, s);
    if (a.t) o.t = scalar_mul(*a.t, s);
    return o;
}

Dual add_scalar(const Dual& a, double s) {
    Dual o;
    o.p = add_scalar(a.p, s);
    o.t = a.t;
    return o;
}

Dual matmul(const Dual& a, const Dual& b) {
    Dual o;
    o.p = matmul(a.p, b.p);
    std::optional<Tensor> left = a.t ? std::optional<Tensor>(matmul(*a.t, b.p)) : std::nullopt;
    std::optional<Tensor> right = b.t ? std::optional<Tensor>(matmul(a.p, *b.t)) : std::nullopt;
    o.t = combine(left, right, 1.0, 1.0, o.p.shape());
    return o;
}

Dual transpose(const Dual& a, int ax0, int ax1) {
    Dual o;
    o.p = transpose(a.p, ax0, ax1);
    if (a.t) o.t = transpose(*a.t, ax0, ax1);
    return o;
}

Dual reshape(const Dual& a, const Shape& s) {
    Dual o;
    o.p = a.p.reshaped(s);
    if (a.t) o.t = a.t->reshaped(s);
    return o;
}

Dual concat(const Dual& a, const Dual& b, int axis) {
    Dual o;
    o.p = concat(a.p, b.p, axis);
    if (a.t || b.t) {
        Tensor ta = a.t ? *a.t : Tensor(a.p.shape(), 0.0);
        Tensor tb = b.t ? *b.t : Tensor(b.p.shape(), 0.0);
        o.t = concat(ta, tb, axis);
    }
    return o;
}

Dual slice(const Dual& a, int axis, int64_t start, int64_t len) {
    Dual o;
    o.p = slice(a.p, axis, start, len);
    if (a.t) o.t = slice(*a.t, axis, start, len);
    return o;
}

Dual sum_all(const Dual& a) {
    Dual o;
    o.p = sum_all(a.p);
    if (a.t) o.t = sum_all(*a.t);
    return o;
}

Dual mean_all(const Dual& a) {
    Dual o;
    o.p = mean_all(a.p);
    if (a.t) o.t = mean_all(*a.t);
    return o;
}

Dual sum_axis(const Dual& a, int axis) {
    Dual o;
    o.p = sum_axis(a.p, axis);
    if (a.t) o.t = sum_axis(*a.t, axis);
    return o;
}

Dual mean_axis(const Dual& a, int axis) {
    Dual o;
    o.p = mean_axis(a.p, axis);
    if (a.t) o.t = mean_axis(*a.t, axis);
    return o;
}

Dual min_axis(const Dual& a, int axis) {
    Dual o;
    std::vector<int64_t> argmin;
    o.p = min_axis(a.p, axis, &argmin);
    if (a.t) {
        const Shape& s = a.p.shape();
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= s.d[i];
        int64_t n = s.d[axis];
        for (int i = axis + 1; i < s.rank; ++i) inner *= s.d[i];
        Tensor t = Tensor::uninit(o.p.shape());
        const double* pt = a.t->data();
        double* po = t.mut();
        for (int64_t ou = 0; ou < outer; ++ou)
            for (int64_t i = 0; i < inner; ++i)
                po[ou * inner + i] = pt[(ou * n + argmin[ou * inner + i]) * inner + i];
        o.t = std::move(t);
    }
    return o;
}

Dual softmax(const Dual& a) {
    Dual o;
    o.p = softmax(a.p);
    if (a.t) {
        const Shape& s = o.p.shape();
        int64_t n = s.d[s.rank - 1];
        int64_t rows = o.p.numel() / n;
        Tensor t = Tensor::uninit(s);
        const double* py = o.p.data();
        const double* ps = a.t->data();
        double* pt = t.mut();
        for (int64_t r = 0; r < rows; ++r) {
            const double* y = py + r * n;
            const double* sd = ps + r * n;
            double dot = 0;
            for (int64_t i = 0; i < n; ++i) dot += y[i] * sd[i];
            double* tr = pt + r * n;
            for (int64_t i = 0; i < n; ++i) tr[i] = y[i] * (sd[i] - dot);
        }
        o.t = std::move(t);
    }
    return o;
}

Dual rms_normalize(const Dual& a, double eps) {
    Dual o;
    o.p = rms_normalize(a.p, eps);
    if (a.t) {
        const Shape& s = a.p.shape();
        int64_t n = s.d[s.rank - 1];
        int64_t rows = a.p.numel() / n;
        Tensor t = Tensor::uninit(s);
        const double* px = a.p.data();
        const double* pdx = a.t->data();
        double* pt = t.mut();
        for (int64_t r = 0; r < rows; ++r) {
            const double* x = px + r * n;
            const double* dx = pdx + r * n;
            double ms = 0, dot = 0;
            for (int64_t i = 0; i < n; ++i) {
                ms += x[i] * x[i];
                dot += x[i] * dx[i];
            }
            double m = 1.0 / std::sqrt(ms / double(n) + eps);
            double dm = -m * m * m * dot / double(n);
            double* tr = pt + r * n;
            for (int64_t i = 0; i < n; ++i) tr[i] = dx[i] * m + x[i] * dm;
        }
        o.t = std::move(t);
    }
    return o;
}

Dual layer_normalize(const Dual& a, double eps) {
    Dual o;
    o.p = layer_normalize(a.p, eps);
    if (a.t) {
        const Shape& s = a.p.shape();
        int64_t n = s.d[s.rank - 1];
        int64_t rows = a.p.numel() / n;
        Tensor t = Tensor::uninit(s);
        const double* px = a.p.data();
        const double* pdx = a.t->data();
        const double* py = o.p.data();
        double* pt = t.mut();
        for (int64_t r = 0; r < rows; ++r) {
            const double* x = px + r * n;
            const double* dx = pdx + r * n;
            const double* y = py + r * n;
            double mu = 0, dmu = 0;
            for (int64_t i = 0; i < n; ++i) {
                mu += x[i];
                dmu += dx[i];
            }
            mu /= double(n);
            dmu /= double(n);
            double var = 0, ydx = 0;
            for (int64_t i = 0; i < n; ++i) {
                var += (x[i] - mu) * (x[i] - mu);
                ydx += y[i] * dx[i];
            }
            var /= double(n);
            ydx /= double(n);
            double iv = 1.0 / std::sqrt(var + eps);
            double* tr = pt + r * n;
            for (int64_t i = 0; i < n; ++i) tr[i] = iv * (dx[i] - dmu - y[i] * ydx);
        }
        o.t = std::move(t);
    }
    return o;
}

Dual gelu(const Dual& a) {
    Dual o;
    o.p = gelu(a.p);
    if (a.t) {
        Tensor t = Tensor::uninit(a.p.shape());
        const double* px = a.p.data();
        const double* pdx = a.t->data();
        double* pt = t.mut();
        constexpr double inv_sqrt2pi = 0.3989422804014326779399461;
        for (int64_t i = 0, n = t.numel(); i < n; ++i) {
            double x = px[i];
            double phi = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            pt[i] = pdx[i] * (phi + x * pdf);
        }
        o.t = std::move(t);
    }
    return o;
}

Dual silu(const Dual& a) {
    Dual o;
    o.p = silu(a.p);
    if (a.t) {
        Tensor t = Tensor::uninit(a.p.shape());
        const double* px = a.p.data();
        const double* pdx = a.t->data();
        double* pt = t.mut();
        for (int64_t i = 0, n = t.numel(); i < n; ++i) {
            double x = px[i];
            double e = std::exp(-std::abs(x));
            double sig = x >= 0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
            pt[i] = pdx[i] * sig * (1.0 + x * (1.0 - sig));
        }
        o.t = std::move(t);
    }
    return o;
}

Dual sqrt(const Dual& a) {
    Dual o;
    o.p = sqrt(a.p);
    if (a.t) {
        Tensor t = Tensor::uninit(a.p.shape());
        const double* py = o.p.data();
        const double* pdx = a.t->data();
        double* pt = t.mut();
        for (int64_t i = 0, n = t.numel(); i < n; ++i) pt[i] = pdx[i] / (2.0 * py[i]);
        o.t = std::move(t);
    }
    return o;
}

Dual reciprocal(const Dual& a) {
    Dual o;
    o.p = reciprocal(a.p);
    if (a.t) {
        Tensor t = Tensor::uninit(a.p.shape());
        const double* py = o.p.data();
        const double* pdx = a.t->data();
        double* pt = t.mut();
        for (int64_t i = 0, n = t.numel(); i < n; ++i) pt[i] = -pdx[i] * py[i] * py[i];
        o.t = std::move(t);
    }
    return o;
}

Dual sin(const Dual& a) {
    Dual o;
    o.p = sin(a.p);
    if (a.t) o.t = mul(*a.t, cos(a.p));
    return o;
}

Dual cos(const Dual& a) {
    Dual o;
    o.p = cos(a.p);
    if (a.t) o.t = scalar_mul(mul(*a.t, sin(a.p)), -1.0);
    return o;
}

}  // namespace pmf
