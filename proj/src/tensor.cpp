#include "pmf/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <new>
#include <unordered_map>

extern "C" void openblas_set_num_threads(int);

namespace pmf {

// ---------------------------------------------------------------------------
// buffer pool: training allocates/frees the same large activation sizes every
// step, so recycle buffers instead of hitting the allocator each time. All
// buffers are 64-byte aligned; BLAS kernels pick alignment-dependent code
// paths, and uniform alignment keeps results bitwise reproducible across
// allocation histories.
// ---------------------------------------------------------------------------
namespace {

struct BufferPool {
    std::unordered_map<size_t, std::vector<double*>> free_lists;
    size_t held_bytes = 0;
    static constexpr size_t kMaxHeldBytes = size_t(1) << 31;  // 2 GiB

    ~BufferPool() {
        for (auto& [sz, list] : free_lists)
            for (auto* p : list) std::free(p);
    }

    double* acquire(size_t n) {
        auto it = free_lists.find(n);
        if (it != free_lists.end() && !it->second.empty()) {
            double* p = it->second.back();
            it->second.pop_back();
            held_bytes -= n * sizeof(double);
            return p;
        }
        size_t bytes = ((n * sizeof(double) + 63) / 64) * 64;
        void* p = std::aligned_alloc(64, bytes ? bytes : 64);
        if (!p) throw std::bad_alloc();
        return static_cast<double*>(p);
    }
    void release(double* p, size_t n) {
        if (held_bytes + n * sizeof(double) > kMaxHeldBytes) {
            std::free(p);
            return;
        }
        held_bytes += n * sizeof(double);
        free_lists[n].push_back(p);
    }
};

thread_local BufferPool t_pool;

struct BlasInit {
    BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit g_blas_init;

}  // namespace

TensorBuf::TensorBuf(size_t n) : n_(n) { p_ = t_pool.acquire(n); }
TensorBuf::~TensorBuf() { t_pool.release(p_, n_); }

Tensor::Tensor(const Shape& s, double fill) {
    shape_ = s;
    buf_ = std::make_shared<TensorBuf>(static_cast<size_t>(s.numel()));
    std::fill(buf_->data(), buf_->data() + s.numel(), fill);
}

Tensor Tensor::uninit(const Shape& s) {
    Tensor t;
    t.shape_ = s;
    t.buf_ = std::make_shared<TensorBuf>(static_cast<size_t>(s.numel()));
    return t;
}

Tensor Tensor::from_vec(const Shape& s, const std::vector<double>& v) {
    if (static_cast<int64_t>(v.size()) != s.numel())
        throw ShapeError("from_vec: " + std::to_string(v.size()) + " values for shape " + s.str());
    Tensor t = uninit(s);
    std::copy(v.begin(), v.end(), t.mut());
    return t;
}

Tensor Tensor::scalar(double v) {
    Tensor t = uninit(Shape{1});
    t.mut()[0] = v;
    return t;
}

double Tensor::scalar_value() const {
    if (numel() != 1) throw ShapeError("scalar_value: tensor has shape " + shape_.str());
    return data()[0];
}

Tensor Tensor::clone() const {
    Tensor t = uninit(shape_);
    std::memcpy(t.mut(), data(), sizeof(double) * numel());
    return t;
}

Tensor Tensor::reshaped(const Shape& s) const {
    if (s.numel() != numel())
        throw ShapeError("reshape: " + shape_.str() + " -> " + s.str() + " changes element count");
    Tensor t = *this;
    t.shape_ = s;
    return t;
}

bool Tensor::all_finite() const {
    const double* p = data();
    for (int64_t i = 0, n = numel(); i < n; ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

// ---------------------------------------------------------------------------
// broadcast machinery (numpy trailing-axis rules, capped at rank 4)
// ---------------------------------------------------------------------------
namespace {

struct BcPlan {
    Shape out;
    std::array<int64_t, 4> sa{0, 0, 0, 0};  // strides into a, 0 on broadcast axes
    std::array<int64_t, 4> sb{0, 0, 0, 0};
    bool same_shape = false;
};

BcPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
    BcPlan p;
    if (a == b) {
        p.out = a;
        p.same_shape = true;
        return p;
    }
    int rank = std::max(a.rank, b.rank);
    std::array<int64_t, 4> da{1, 1, 1, 1}, db{1, 1, 1, 1}, out{1, 1, 1, 1};
    for (int i = 0; i < a.rank; ++i) da[rank - a.rank + i] = a.d[i];
    for (int i = 0; i < b.rank; ++i) db[rank - b.rank + i] = b.d[i];
    for (int i = 0; i < rank; ++i) {
        if (da[i] != db[i] && da[i] != 1 && db[i] != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + a.str() + " with " + b.str());
        out[i] = std::max(da[i], db[i]);
    }
    p.out.rank = rank;
    p.out.d = out;
    int64_t stra = 1, strb = 1;
    for (int i = rank - 1; i >= 0; --i) {
        p.sa[i] = (da[i] == 1 && out[i] != 1) ? 0 : stra;
        p.sb[i] = (db[i] == 1 && out[i] != 1) ? 0 : strb;
        stra *= da[i];
        strb *= db[i];
    }
    return p;
}

template <class F>
Tensor apply_binary(const Tensor& a, const Tensor& b, const char* op, F&& f) {
    BcPlan p = plan_broadcast(a.shape(), b.shape(), op);
    Tensor out = Tensor::uninit(p.out);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.mut();
    if (p.same_shape) {
        for (int64_t i = 0, n = out.numel(); i < n; ++i) po[i] = f(pa[i], pb[i]);
        return out;
    }
    const auto& d = p.out.d;
    int64_t i = 0;
    for (int64_t i0 = 0; i0 < d[0]; ++i0)
        for (int64_t i1 = 0; i1 < d[1]; ++i1)
            for (int64_t i2 = 0; i2 < d[2]; ++i2) {
                int64_t oa = i0 * p.sa[0] + i1 * p.sa[1] + i2 * p.sa[2];
                int64_t ob = i0 * p.sb[0] + i1 * p.sb[1] + i2 * p.sb[2];
                for (int64_t i3 = 0; i3 < d[3]; ++i3)
                    po[i++] = f(pa[oa + i3 * p.sa[3]], pb[ob + i3 * p.sb[3]]);
            }
    return out;
}

template <class F>
Tensor apply_unary(const Tensor& a, F&& f) {
    Tensor out = Tensor::uninit(a.shape());
    const double* pa = a.data();
    double* po = out.mut();
    for (int64_t i = 0, n = a.numel(); i < n; ++i) po[i] = f(pa[i]);
    return out;
}

// Collapse a shape around `axis` into (outer, n, inner).
void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& n, int64_t& inner) {
    if (axis < 0 || axis >= s.rank)
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + s.str());
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s.d[i];
    n = s.d[axis];
    for (int i = axis + 1; i < s.rank; ++i) inner *= s.d[i];
}

Shape drop_axis(const Shape& s, int axis) {
    Shape r;
    r.rank = 0;
    for (int i = 0; i < s.rank; ++i)
        if (i != axis) r.d[r.rank++] = s.d[i];
    if (r.rank == 0) {
        r.rank = 1;
        r.d[0] = 1;
    }
    return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return apply_binary(a, b, "add", [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
    return apply_binary(a, b, "sub", [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
    return apply_binary(a, b, "mul", [](double x, double y) { return x * y; });
}
Tensor scalar_mul(const Tensor& a, double s) {
    return apply_unary(a, [s](double x) { return x * s; });
}
Tensor add_scalar(const Tensor& a, double s) {
    return apply_unary(a, [s](double x) { return x + s; });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------
namespace detail {

void dgemm_rm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha,
              const double* A, int64_t lda, const double* B, int64_t ldb,
              double beta, double* C, int64_t ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, A,
                static_cast<int>(lda), B, static_cast<int>(ldb), beta, C, static_cast<int>(ldc));
}

void vexp(double* dst, const double* src, int64_t n) {
    for (int64_t i = 0; i < n; ++i) dst[i] = std::exp(src[i]);
}

}  // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.rank < 2 || sb.rank < 2)
        throw ShapeError("matmul: operands must have rank >= 2, got " + sa.str() + " and " + sb.str());

    int64_t k = sa.d[sa.rank - 1];
    int64_t m = sa.d[sa.rank - 2];

    if (sb.rank == 2) {
        if (sb.d[0] != k)
            throw ShapeError("matmul: inner dims " + std::to_string(k) + " vs " + std::to_string(sb.d[0]) +
                             " (" + sa.str() + " @ " + sb.str() + ")");
        int64_t n = sb.d[1];
        Shape os = sa;
        os.d[sa.rank - 1] = n;
        Tensor out = Tensor::uninit(os);
        int64_t rows = sa.numel() / k;  // fold all leading dims
        detail::dgemm_rm(false, false, rows, n, k, 1.0, a.data(), k, b.data(), n, 0.0, out.mut(), n);
        return out;
    }

    if (sb.rank != sa.rank)
        throw ShapeError("matmul: rank mismatch " + sa.str() + " @ " + sb.str());
    for (int i = 0; i < sa.rank - 2; ++i)
        if (sa.d[i] != sb.d[i])
            throw ShapeError("matmul: batch dims differ, " + sa.str() + " @ " + sb.str());
    if (sb.d[sb.rank - 2] != k)
        throw ShapeError("matmul: inner dims " + std::to_string(k) + " vs " + std::to_string(sb.d[sb.rank - 2]) +
                         " (" + sa.str() + " @ " + sb.str() + ")");

    int64_t n = sb.d[sb.rank - 1];
    Shape os = sa;
    os.d[sa.rank - 1] = n;
    Tensor out = Tensor::uninit(os);
    int64_t batch = 1;
    for (int i = 0; i < sa.rank - 2; ++i) batch *= sa.d[i];
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.mut();
    for (int64_t bi = 0; bi < batch; ++bi)
        detail::dgemm_rm(false, false, m, n, k, 1.0, pa + bi * m * k, k, pb + bi * k * n, n, 0.0,
                         po + bi * m * n, n);
    return out;
}

// ---------------------------------------------------------------------------
// layout ops
// ---------------------------------------------------------------------------
Tensor transpose(const Tensor& a, int ax0, int ax1) {
    const Shape& s = a.shape();
    if (ax0 < 0 || ax1 < 0 || ax0 >= s.rank || ax1 >= s.rank)
        throw ShapeError("transpose: axes (" + std::to_string(ax0) + "," + std::to_string(ax1) +
                         ") out of range for " + s.str());
    if (ax0 == ax1) return a;
    Shape os = s;
    std::swap(os.d[ax0], os.d[ax1]);
    Tensor out = Tensor::uninit(os);

    std::array<int64_t, 4> stride{0, 0, 0, 0};
    int64_t acc = 1;
    for (int i = s.rank - 1; i >= 0; --i) {
        stride[i] = acc;
        acc *= s.d[i];
    }
    std::array<int64_t, 4> pstride{0, 0, 0, 0};  // stride into a, permuted axis order
    for (int i = 0; i < s.rank; ++i) pstride[i] = stride[i];
    std::swap(pstride[ax0], pstride[ax1]);

    std::array<int64_t, 4> od{1, 1, 1, 1};
    for (int i = 0; i < os.rank; ++i) od[i] = os.d[i];
    const double* pa = a.data();
    double* po = out.mut();
    int64_t idx = 0;
    for (int64_t i0 = 0; i0 < od[0]; ++i0)
        for (int64_t i1 = 0; i1 < od[1]; ++i1)
            for (int64_t i2 = 0; i2 < od[2]; ++i2) {
                int64_t base = i0 * pstride[0] + i1 * pstride[1] + i2 * pstride[2];
                for (int64_t i3 = 0; i3 < od[3]; ++i3) po[idx++] = pa[base + i3 * pstride[3]];
            }
    return out;
}

Tensor reshape(const Tensor& a, const Shape& s) { return a.reshaped(s); }

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.rank != sb.rank) throw ShapeError("concat: rank mismatch " + sa.str() + " vs " + sb.str());
    for (int i = 0; i < sa.rank; ++i)
        if (i != axis && sa.d[i] != sb.d[i])
            throw ShapeError("concat: dims differ off-axis, " + sa.str() + " vs " + sb.str());
    int64_t outer, na, inner;
    axis_split(sa, axis, outer, na, inner);
    int64_t nb = sb.d[axis];
    Shape os = sa;
    os.d[axis] = na + nb;
    Tensor out = Tensor::uninit(os);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.mut();
    for (int64_t o = 0; o < outer; ++o) {
        std::memcpy(po + o * (na + nb) * inner, pa + o * na * inner, sizeof(double) * na * inner);
        std::memcpy(po + (o * (na + nb) + na) * inner, pb + o * nb * inner, sizeof(double) * nb * inner);
    }
    return out;
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
    const Shape& s = a.shape();
    int64_t outer, n, inner;
    axis_split(s, axis, outer, n, inner);
    if (start < 0 || len <= 0 || start + len > n)
        throw ShapeError("slice: [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for axis " + std::to_string(axis) + " of " + s.str());
    Shape os = s;
    os.d[axis] = len;
    Tensor out = Tensor::uninit(os);
    const double* pa = a.data();
    double* po = out.mut();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(po + o * len * inner, pa + (o * n + start) * inner, sizeof(double) * len * inner);
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------
Tensor sum_all(const Tensor& a) {
    const double* p = a.data();
    double acc = 0;
    for (int64_t i = 0, n = a.numel(); i < n; ++i) acc += p[i];
    return Tensor::scalar(acc);
}

Tensor mean_all(const Tensor& a) { return Tensor::scalar(sum_all(a).scalar_value() / double(a.numel())); }

Tensor sum_axis(const Tensor& a, int axis) {
    int64_t outer, n, inner;
    axis_split(a.shape(), axis, outer, n, inner);
    Tensor out(drop_axis(a.shape(), axis), 0.0);
    const double* pa = a.data();
    double* po = out.mut();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < n; ++j) {
            const double* src = pa + (o * n + j) * inner;
            double* dst = po + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    return out;
}

Tensor mean_axis(const Tensor& a, int axis) {
    Tensor s = sum_axis(a, axis);
    return scalar_mul(s, 1.0 / double(a.shape().d[axis]));
}

Tensor min_axis(const Tensor& a, int axis, std::vector<int64_t>* argmin) {
    int64_t outer, n, inner;
    axis_split(a.shape(), axis, outer, n, inner);
    Tensor out = Tensor::uninit(drop_axis(a.shape(), axis));
    if (argmin) argmin->assign(outer * inner, 0);
    const double* pa = a.data();
    double* po = out.mut();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            double best = pa[o * n * inner + i];
            int64_t bj = 0;
            for (int64_t j = 1; j < n; ++j) {
                double v = pa[(o * n + j) * inner + i];
                if (v < best) {
                    best = v;
                    bj = j;
                }
            }
            po[o * inner + i] = best;
            if (argmin) (*argmin)[o * inner + i] = bj;
        }
    return out;
}

// ---------------------------------------------------------------------------
// nonlinear maps
// ---------------------------------------------------------------------------
Tensor softmax(const Tensor& a) {
    const Shape& s = a.shape();
    int64_t n = s.d[s.rank - 1];
    int64_t rows = a.numel() / n;
    Tensor out = Tensor::uninit(s);
    const double* pa = a.data();
    double* po = out.mut();
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = pa + r * n;
        double* y = po + r * n;
        double mx = x[0];
        for (int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
        for (int64_t i = 0; i < n; ++i) y[i] = x[i] - mx;
        detail::vexp(y, y, n);
        double sum = 0;
        for (int64_t i = 0; i < n; ++i) sum += y[i];
        double inv = 1.0 / sum;
        for (int64_t i = 0; i < n; ++i) y[i] *= inv;
    }
    return out;
}

Tensor rms_normalize(const Tensor& a, double eps) {
    const Shape& s = a.shape();
    int64_t n = s.d[s.rank - 1];
    int64_t rows = a.numel() / n;
    Tensor out = Tensor::uninit(s);
    const double* pa = a.data();
    double* po = out.mut();
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = pa + r * n;
        double* y = po + r * n;
        double ms = 0;
        for (int64_t i = 0; i < n; ++i) ms += x[i] * x[i];
        double m = 1.0 / std::sqrt(ms / double(n) + eps);
        for (int64_t i = 0; i < n; ++i) y[i] = x[i] * m;
    }
    return out;
}

Tensor layer_normalize(const Tensor& a, double eps) {
    const Shape& s = a.shape();
    int64_t n = s.d[s.rank - 1];
    int64_t rows = a.numel() / n;
    Tensor out = Tensor::uninit(s);
    const double* pa = a.data();
    double* po = out.mut();
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = pa + r * n;
        double* y = po + r * n;
        double mu = 0;
        for (int64_t i = 0; i < n; ++i) mu += x[i];
        mu /= double(n);
        double var = 0;
        for (int64_t i = 0; i < n; ++i) var += (x[i] - mu) * (x[i] - mu);
        var /= double(n);
        double iv = 1.0 / std::sqrt(var + eps);
        for (int64_t i = 0; i < n; ++i) y[i] = (x[i] - mu) * iv;
    }
    return out;
}

Tensor gelu(const Tensor& a) {
    return apply_unary(a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); });
}

Tensor silu(const Tensor& a) {
    Tensor out = Tensor::uninit(a.shape());
    const double* pa = a.data();
    double* po = out.mut();
    int64_t n = a.numel();
    // sigmoid via exp(-|x|) to stay overflow-free
    for (int64_t i = 0; i < n; ++i) po[i] = -std::abs(pa[i]);
    detail::vexp(po, po, n);
    for (int64_t i = 0; i < n; ++i) {
        double e = po[i];
        double sig = pa[i] >= 0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
        po[i] = pa[i] * sig;
    }
    return out;
}

Tensor sqrt(const Tensor& a) {
    return apply_unary(a, [](double x) { return std::sqrt(x); });
}
Tensor reciprocal(const Tensor& a) {
    return apply_unary(a, [](double x) { return 1.0 / x; });
}
Tensor sin(const Tensor& a) {
    return apply_unary(a, [](double x) { return std::sin(x); });
}
Tensor cos(const Tensor& a) {
    return apply_unary(a, [](double x) { return std::cos(x); });
}

Tensor reduce_to_shape(const Tensor& g, const Shape& target) {
    if (g.shape() == target) return g;
    const Shape& s = g.shape();
    std::array<int64_t, 4> td{1, 1, 1, 1};
    int off = s.rank - target.rank;
    if (off < 0) throw ShapeError("reduce_to_shape: grad rank below target rank");
    for (int i = 0; i < target.rank; ++i) td[off + i] = target.d[i];

    Tensor cur = g;
    for (int i = 0; i < s.rank; ++i) {
        if (cur.shape().d[i] != td[i]) {
            if (td[i] != 1)
                throw ShapeError("reduce_to_shape: " + g.shape().str() + " -> " + target.str());
            Tensor r = sum_axis(cur, i);
            // re-insert the reduced axis as size 1 to keep alignment
            Shape ns = cur.shape();
            ns.d[i] = 1;
            cur = r.reshaped(ns);
        }
    }
    return cur.reshaped(target);
}

}  // namespace pmf
