#include "pmf/graph.hpp"

#include <cmath>
#include <cstring>
#include <unordered_set>

namespace pmf {

namespace {
std::atomic<int64_t> g_nodes_created{0};

Tensor fill_like(const Shape& s, double v) { return Tensor(s, v); }

// Expands a reduced tensor back over `axis` of `target`.
Tensor expand_axis(const Tensor& g, const Shape& target, int axis) {
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= target.d[i];
    int64_t n = target.d[axis];
    for (int i = axis + 1; i < target.rank; ++i) inner *= target.d[i];
    Tensor out = Tensor::uninit(target);
    const double* pg = g.data();
    double* po = out.mut();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < n; ++j)
            std::memcpy(po + (o * n + j) * inner, pg + o * inner, sizeof(double) * inner);
    return out;
}

Tensor pad_slice(const Tensor& g, const Shape& target, int axis, int64_t start) {
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= target.d[i];
    int64_t n = target.d[axis];
    int64_t len = g.shape().d[axis];
    for (int i = axis + 1; i < target.rank; ++i) inner *= target.d[i];
    Tensor out(target, 0.0);
    const double* pg = g.data();
    double* po = out.mut();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(po + (o * n + start) * inner, pg + o * len * inner, sizeof(double) * len * inner);
    return out;
}
}  // namespace

int64_t graph_nodes_created() { return g_nodes_created.load(); }

void Node::accum(Tensor&& g) {
    if (!grad.defined()) {
        grad = std::move(g);
        grad_shared = true;  // may alias a child's buffer until we must mutate
        return;
    }
    if (grad_shared) {
        grad = grad.clone();
        grad_shared = false;
    }
    double* d = grad.mut();
    const double* s = g.data();
    for (int64_t i = 0, n = grad.numel(); i < n; ++i) d[i] += s[i];
}

Value Value::leaf(const Tensor& t, bool requires_grad) {
    Value v;
    v.n_ = std::make_shared<Node>();
    v.n_->data = t;
    v.n_->requires_grad = requires_grad;
    g_nodes_created.fetch_add(1, std::memory_order_relaxed);
    return v;
}

Value Value::make(Tensor data, std::vector<Value> parents, std::function<void(Node&)> backprop,
                  const char* op) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (!needs) return leaf(std::move(data), false);
    Value v;
    v.n_ = std::make_shared<Node>();
    v.n_->data = std::move(data);
    v.n_->requires_grad = true;
    v.n_->op = op;
    v.n_->parents.reserve(parents.size());
    for (auto& p : parents) v.n_->parents.push_back(p.node_ptr());
    v.n_->backprop = std::move(backprop);
    g_nodes_created.fetch_add(1, std::memory_order_relaxed);
    return v;
}

Tensor Value::grad() const {
    if (n_->grad.defined()) return n_->grad;
    return Tensor(n_->data.shape(), 0.0);
}

void backward(const Value& loss) {
    if (!loss.defined()) throw ShapeError("backward: undefined loss");
    if (loss.data().numel() != 1)
        throw ShapeError("backward: loss must be scalar, got shape " + loss.data().shape().str());
    if (!loss.requires_grad()) return;  // nothing trainable reachable

    // iterative postorder over grad-requiring ancestors
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({loss.node(), 0});
    visited.insert(loss.node());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        bool descended = false;
        while (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
                descended = true;
                break;
            }
        }
        if (descended) continue;
        order.push_back(n);
        stack.pop_back();
    }

    loss.node()->accum(Tensor(Shape{1}, 1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->grad.defined()) n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

Value add(const Value& a, const Value& b) {
    auto pa = a.node_ptr(), pb = b.node_ptr();
    return Value::make(add(a.data(), b.data()), {a, b},
                       [pa, pb](Node& self) {
                           if (pa->requires_grad) pa->accum(reduce_to_shape(self.grad, pa->data.shape()));
                           if (pb->requires_grad) pb->accum(reduce_to_shape(self.grad, pb->data.shape()));
                       },
                       "add");
}

Value sub(const Value& a, const Value& b) {
    auto pa = a.node_ptr(), pb = b.node_ptr();
    return Value::make(sub(a.data(), b.data()), {a, b},
                       [pa, pb](Node& self) {
                           if (pa->requires_grad) pa->accum(reduce_to_shape(self.grad, pa->data.shape()));
                           if (pb->requires_grad)
                               pb->accum(reduce_to_shape(scalar_mul(self.grad, -1.0), pb->data.shape()));
                       },
                       "sub");
}

Value mul(const Value& a, const Value& b) {
    auto pa = a.node_ptr(), pb = b.node_ptr();
    return Value::make(mul(a.data(), b.data()), {a, b},
                       [pa, pb](Node& self) {
                           if (pa->requires_grad)
                               pa->accum(reduce_to_shape(mul(self.grad, pb->data), pa->data.shape()));
                           if (pb->requires_grad)
                               pb->accum(reduce_to_shape(mul(self.grad, pa->data), pb->data.shape()));
                       },
                       "mul");
}

Value scalar_mul(const Value& a, double s) {
    auto pa = a.node_ptr();
    return Value::make(scalar_mul(a.data(), s), {a},
                       [pa, s](Node& self) { pa->accum(scalar_mul(self.grad, s)); }, "scalar_mul");
}

Value add_scalar(const Value& a, double s) {
    auto pa = a.node_ptr();
    return Value::make(add_scalar(a.data(), s), {a},
                       [pa](Node& self) { pa->accum(Tensor(self.grad)); }, "add_scalar");
}

Value matmul(const Value& a, const Value& b) {
    auto pa = a.node_ptr(), pb = b.node_ptr();
    return Value::make(
        matmul(a.data(), b.data()), {a, b},
        [pa, pb](Node& self) {
            const Tensor& A = pa->data;
            const Tensor& B = pb->data;
            const Tensor& G = self.grad;
            const Shape& sa = A.shape();
            const Shape& sb = B.shape();
            int64_t k = sa.d[sa.rank - 1];
            if (sb.rank == 2) {
                int64_t rows = A.numel() / k;
                int64_t n = sb.d[1];
                if (pa->requires_grad) {
                    Tensor dA = Tensor::uninit(sa);  // G @ B^T
                    detail::dgemm_rm(false, true, rows, k, n, 1.0, G.data(), n, B.data(), n, 0.0,
                                     dA.mut(), k);
                    pa->accum(std::move(dA));
                }
                if (pb->requires_grad) {
                    Tensor dB = Tensor::uninit(sb);  // A^T @ G
                    detail::dgemm_rm(true, false, k, n, rows, 1.0, A.data(), k, G.data(), n, 0.0,
                                     dB.mut(), n);
                    pb->accum(std::move(dB));
                }
                return;
            }
            int64_t m = sa.d[sa.rank - 2];
            int64_t n = sb.d[sb.rank - 1];
            int64_t batch = 1;
            for (int i = 0; i < sa.rank - 2; ++i) batch *= sa.d[i];
            if (pa->requires_grad) {
                Tensor dA = Tensor::uninit(sa);
                for (int64_t bi = 0; bi < batch; ++bi)
                    detail::dgemm_rm(false, true, m, k, n, 1.0, G.data() + bi * m * n, n,
                                     B.data() + bi * k * n, n, 0.0, dA.mut() + bi * m * k, k);
                pa->accum(std::move(dA));
            }
            if (pb->requires_grad) {
                Tensor dB = Tensor::uninit(sb);
                for (int64_t bi = 0; bi < batch; ++bi)
                    detail::dgemm_rm(true, false, k, n, m, 1.0, A.data() + bi * m * k, k,
                                     G.data() + bi * m * n, n, 0.0, dB.mut() + bi * k * n, n);
                pb->accum(std::move(dB));
            }
        },
        "matmul");
}

Value transpose(const Value& a, int ax0, int ax1) {
    auto pa = a.node_ptr();
    return Value::make(transpose(a.data(), ax0, ax1), {a},
                       [pa, ax0, ax1](Node& self) { pa->accum(transpose(self.grad, ax0, ax1)); },
                       "transpose");
}

Value reshape(const Value& a, const Shape& s) {
    auto pa = a.node_ptr();
    Shape orig = a.shape();
    return Value::make(a.data().reshaped(s), {a},
                       [pa, orig](Node& self) { pa->accum(self.grad.reshaped(orig)); }, "reshape");
}

Value concat(const Value& a, const Value& b, int axis) {
    auto pa = a.node_ptr(), pb = b.node_ptr();
    int64_t na = a.shape().d[axis];
    int64_t nb = b.shape().d[axis];
    return Value::make(concat(a.data(), b.data(), axis), {a, b},
                       [pa, pb, axis, na, nb](Node& self) {
                           if (pa->requires_grad) pa->accum(slice(self.grad, axis, 0, na));
                           if (pb->requires_grad) pb->accum(slice(self.grad, axis, na, nb));
                       },
                       "concat");
}

Value slice(const Value& a, int axis, int64_t start, int64_t len) {
    auto pa = a.node_ptr();
    Shape orig = a.shape();
    return Value::make(slice(a.data(), axis, start, len), {a},
                       [pa, orig, axis, start](Node& self) {
                           pa->accum(pad_slice(self.grad, orig, axis, start));
                       },
                       "slice");
}

Value sum_all(const Value& a) {
    auto pa = a.node_ptr();
    return Value::make(sum_all(a.data()), {a},
                       [pa](Node& self) {
                           pa->accum(fill_like(pa->data.shape(), self.grad.scalar_value()));
                       },
                       "sum_all");
}

Value mean_all(const Value& a) {
    auto pa = a.node_ptr();
    double inv = 1.0 / double(a.data().numel());
    return Value::make(mean_all(a.data()), {a},
                       [pa, inv](Node& self) {
                           pa->accum(fill_like(pa->data.shape(), self.grad.scalar_value() * inv));
                       },
                       "mean_all");
}

Value sum_axis(const Value& a, int axis) {
    auto pa = a.node_ptr();
    return Value::make(sum_axis(a.data(), axis), {a},
                       [pa, axis](Node& self) {
                           pa->accum(expand_axis(self.grad, pa->data.shape(), axis));
                       },
                       "sum_axis");
}

Value mean_axis(const Value& a, int axis) {
    auto pa = a.node_ptr();
    double inv = 1.0 / double(a.shape().d[axis]);
    return Value::make(mean_axis(a.data(), axis), {a},
                       [pa, axis, inv](Node& self) {
                           pa->accum(scalar_mul(expand_axis(self.grad, pa->data.shape(), axis), inv));
                       },
                       "mean_axis");
}

Value min_axis(const Value& a, int axis) {
    auto pa = a.node_ptr();
    auto argmin = std::make_shared<std::vector<int64_t>>();
    Tensor out = min_axis(a.data(), axis, argmin.get());
    return Value::make(std::move(out), {a},
                       [pa, axis, argmin](Node& self) {
                           const Shape& s = pa->data.shape();
                           int64_t outer = 1, inner = 1;
                           for (int i = 0; i < axis; ++i) outer *= s.d[i];
                           int64_t n = s.d[axis];
                           for (int i = axis + 1; i < s.rank; ++i) inner *= s.d[i];
                           Tensor g(s, 0.0);
                           double* pg = g.mut();
                           const double* up = self.grad.data();
                           for (int64_t o = 0; o < outer; ++o)
                               for (int64_t i = 0; i < inner; ++i) {
                                   int64_t j = (*argmin)[o * inner + i];
                                   pg[(o * n + j) * inner + i] += up[o * inner + i];
                               }
                           pa->accum(std::move(g));
                       },
                       "min_axis");
}

Value softmax(const Value& a) {
    auto pa = a.node_ptr();
    Tensor y = softmax(a.data());
    Tensor ycopy = y;
    return Value::make(std::move(y), {a},
                       [pa, ycopy](Node& self) {
                           const Shape& s = ycopy.shape();
                           int64_t n = s.d[s.rank - 1];
                           int64_t rows = ycopy.numel() / n;
                           Tensor dx = Tensor::uninit(s);
                           const double* py = ycopy.data();
                           const double* pg = self.grad.data();
                           double* pd = dx.mut();
                           for (int64_t r = 0; r < rows; ++r) {
                               const double* yr = py + r * n;
                               const double* gr = pg + r * n;
                               double dot = 0;
                               for (int64_t i = 0; i < n; ++i) dot += yr[i] * gr[i];
                               double* dr = pd + r * n;
                               for (int64_t i = 0; i < n; ++i) dr[i] = yr[i] * (gr[i] - dot);
                           }
                           pa->accum(std::move(dx));
                       },
                       "softmax");
}

Value rms_normalize(const Value& a, double eps) {
    auto pa = a.node_ptr();
    return Value::make(rms_normalize(a.data(), eps), {a},
                       [pa, eps](Node& self) {
                           const Tensor& x = pa->data;
                           const Shape& s = x.shape();
                           int64_t n = s.d[s.rank - 1];
                           int64_t rows = x.numel() / n;
                           Tensor dx = Tensor::uninit(s);
                           const double* px = x.data();
                           const double* pg = self.grad.data();
                           double* pd = dx.mut();
                           for (int64_t r = 0; r < rows; ++r) {
                               const double* xr = px + r * n;
                               const double* gr = pg + r * n;
                               double ms = 0, dot = 0;
                               for (int64_t i = 0; i < n; ++i) ms += xr[i] * xr[i];
                               double m = 1.0 / std::sqrt(ms / double(n) + eps);
                               for (int64_t i = 0; i < n; ++i) dot += gr[i] * xr[i];
                               double c = m * m * m * dot / double(n);
                               double* dr = pd + r * n;
                               for (int64_t i = 0; i < n; ++i) dr[i] = m * gr[i] - c * xr[i];
                           }
                           pa->accum(std::move(dx));
                       },
                       "rms_normalize");
}

Value layer_normalize(const Value& a, double eps) {
    auto pa = a.node_ptr();
    return Value::make(layer_normalize(a.data(), eps), {a},
                       [pa, eps](Node& self) {
                           const Tensor& x = pa->data;
                           const Shape& s = x.shape();
                           int64_t n = s.d[s.rank - 1];
                           int64_t rows = x.numel() / n;
                           Tensor dx = Tensor::uninit(s);
                           const double* px = x.data();
                           const double* pg = self.grad.data();
                           double* pd = dx.mut();
                           for (int64_t r = 0; r < rows; ++r) {
                               const double* xr = px + r * n;
                               const double* gr = pg + r * n;
                               double mu = 0;
                               for (int64_t i = 0; i < n; ++i) mu += xr[i];
                               mu /= double(n);
                               double var = 0;
                               for (int64_t i = 0; i < n; ++i) var += (xr[i] - mu) * (xr[i] - mu);
                               var /= double(n);
                               double iv = 1.0 / std::sqrt(var + eps);
                               double gmean = 0, gy = 0;
                               for (int64_t i = 0; i < n; ++i) {
                                   gmean += gr[i];
                                   gy += gr[i] * (xr[i] - mu) * iv;
                               }
                               gmean /= double(n);
                               gy /= double(n);
                               double* dr = pd + r * n;
                               for (int64_t i = 0; i < n; ++i) {
                                   double y = (xr[i] - mu) * iv;
                                   dr[i] = iv * (gr[i] - gmean - y * gy);
                               }
                           }
                           pa->accum(std::move(dx));
                       },
                       "layer_normalize");
}

Value gelu(const Value& a) {
    auto pa = a.node_ptr();
    return Value::make(gelu(a.data()), {a},
                       [pa](Node& self) {
                           const double* px = pa->data.data();
                           const double* pg = self.grad.data();
                           Tensor dx = Tensor::uninit(pa->data.shape());
                           double* pd = dx.mut();
                           constexpr double inv_sqrt2pi = 0.3989422804014326779399461;
                           for (int64_t i = 0, n = dx.numel(); i < n; ++i) {
                               double x = px[i];
                               double phi = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                               double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                               pd[i] = pg[i] * (phi + x * pdf);
                           }
                           pa->accum(std::move(dx));
                       },
                       "gelu");
}

Value silu(const Value& a) {
    auto pa = a.node_ptr();
    return Value::make(silu(a.data()), {a},
                       [pa](Node& self) {
                           const double* px = pa->data.data();
                           const double* pg = self.grad.data();
                           Tensor dx = Tensor::uninit(pa->data.shape());
                           double* pd = dx.mut();
                           for (int64_t i = 0, n = dx.numel(); i < n; ++i) {
                               double x = px[i];
                               double e = std::exp(-std::abs(x));
                               double sig = x >= 0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
                               pd[i] = pg[i] * sig * (1.0 + x * (1.0 - sig));
                           }
                           pa->accum(std::move(dx));
                       },
                       "silu");
}

Value sqrt(const Value& a) {
    auto pa = a.node_ptr();
    Tensor y = sqrt(a.data());
    Tensor ycopy = y;
    return Value::make(std::move(y), {a},
                       [pa, ycopy](Node& self) {
                           const double* py = ycopy.data();
                           const double* pg = self.grad.data();
                           Tensor dx = Tensor::uninit(ycopy.shape());
                           double* pd = dx.mut();
                           for (int64_t i = 0, n = dx.numel(); i < n; ++i) pd[i] = pg[i] / (2.0 * py[i]);
                           pa->accum(std::move(dx));
                       },
                       "sqrt");
}

Value reciprocal(const Value& a) {
    auto pa = a.node_ptr();
    Tensor y = reciprocal(a.data());
    Tensor ycopy = y;
    return Value::make(std::move(y), {a},
                       [pa, ycopy](Node& self) {
                           const double* py = ycopy.data();
                           const double* pg = self.grad.data();
                           Tensor dx = Tensor::uninit(ycopy.shape());
                           double* pd = dx.mut();
                           for (int64_t i = 0, n = dx.numel(); i < n; ++i)
                               pd[i] = -pg[i] * py[i] * py[i];
                           pa->accum(std::move(dx));
                       },
                       "reciprocal");
}

Value sin(const Value& a) {
    auto pa = a.node_ptr();
    return Value::make(sin(a.data()), {a},
                       [pa](Node& self) { pa->accum(mul(self.grad, cos(pa->data))); }, "sin");
}

Value cos(const Value& a) {
    auto pa = a.node_ptr();
    return Value::make(cos(a.data()), {a},
                       [pa](Node& self) {
                           pa->accum(scalar_mul(mul(self.grad, sin(pa->data)), -1.0));
                       },
                       "cos");
}

}  // namespace pmf
