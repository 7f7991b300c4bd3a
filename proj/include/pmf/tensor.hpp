#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmf {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense shapes up to rank 4 (batch x tokens x features and weight matrices).
struct Shape {
    std::array<int64_t, 4> d{1, 1, 1, 1};
    int rank = 0;

    Shape() = default;
    Shape(std::initializer_list<int64_t> dims) {
        if (dims.size() > 4) throw ShapeError("Shape: rank > 4 unsupported");
        rank = static_cast<int>(dims.size());
        int i = 0;
        for (int64_t v : dims) {
            if (v <= 0) throw ShapeError("Shape: non-positive dim " + std::to_string(v));
            d[i++] = v;
        }
    }

    int64_t operator[](int i) const { return d[i]; }
    int64_t numel() const {
        int64_t n = 1;
        for (int i = 0; i < rank; ++i) n *= d[i];
        return n;
    }
    bool operator==(const Shape& o) const {
        if (rank != o.rank) return false;
        for (int i = 0; i < rank; ++i)
            if (d[i] != o.d[i]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::string s = "[";
        for (int i = 0; i < rank; ++i) {
            if (i) s += "x";
            s += std::to_string(d[i]);
        }
        return s + "]";
    }
};

// 64-byte-aligned pooled buffer
class TensorBuf {
public:
    explicit TensorBuf(size_t n);
    ~TensorBuf();
    TensorBuf(const TensorBuf&) = delete;
    TensorBuf& operator=(const TensorBuf&) = delete;
    double* data() { return p_; }
    const double* data() const { return p_; }

private:
    double* p_;
    size_t n_;
};

// Contiguous row-major double tensor. The buffer is shared so copies are O(1);
// ops never mutate inputs, only freshly allocated outputs.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(const Shape& s, double fill = 0.0);

    // Pool-allocated, contents unspecified; caller must overwrite every entry.
    static Tensor uninit(const Shape& s);
    static Tensor from_vec(const Shape& s, const std::vector<double>& v);
    static Tensor scalar(double v);

    bool defined() const { return buf_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int64_t numel() const { return shape_.numel(); }

    const double* data() const { return buf_->data(); }
    double* mut() { return buf_->data(); }
    double at(int64_t i) const { return buf_->data()[i]; }
    double scalar_value() const;

    Tensor clone() const;
    Tensor reshaped(const Shape& s) const;  // shares the buffer

    bool all_finite() const;

private:
    Shape shape_;
    std::shared_ptr<TensorBuf> buf_;
};

// --- element-wise with numpy-style trailing-axis broadcast ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// --- contractions ---
// a: (..., m, k) @ b: (k, n), or batched with equal leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);

// --- layout ---
Tensor transpose(const Tensor& a, int ax0, int ax1);
Tensor reshape(const Tensor& a, const Shape& s);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);

// --- reductions ---
Tensor sum_all(const Tensor& a);   // shape (1)
Tensor mean_all(const Tensor& a);  // shape (1)
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);
Tensor min_axis(const Tensor& a, int axis, std::vector<int64_t>* argmin = nullptr);

// --- nonlinear maps (last axis where applicable) ---
Tensor softmax(const Tensor& a);  // max-subtracted, last axis
Tensor rms_normalize(const Tensor& a, double eps = 1e-6);
Tensor layer_normalize(const Tensor& a, double eps = 1e-6);
Tensor gelu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);

// Sums g over broadcast axes so the result has shape `target`.
Tensor reduce_to_shape(const Tensor& g, const Shape& target);

namespace detail {
// Row-major C (m x n) = alpha * op(A) @ op(B) + beta * C.
void dgemm_rm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha,
              const double* A, int64_t lda, const double* B, int64_t ldb,
              double beta, double* C, int64_t ldc);
void vexp(double* dst, const double* src, int64_t n);
}  // namespace detail

}  // namespace pmf
