#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <vector>

#include "pmf/tensor.hpp"

namespace pmf {

// Reverse-mode node. Edges point parent-ward only, so shared_ptr ownership is
// acyclic. A graph instance is confined to one thread.
struct Node {
    Tensor data;
    Tensor grad;
    bool grad_shared = false;  // grad currently aliases a child's buffer
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    void accum(Tensor&& g);
};

int64_t graph_nodes_created();

class Value {
public:
    Value() = default;

    static Value leaf(const Tensor& t, bool requires_grad = false);
    static Value make(Tensor data, std::vector<Value> parents, std::function<void(Node&)> backprop,
                      const char* op);

    bool defined() const { return n_ != nullptr; }
    const Tensor& data() const { return n_->data; }
    Tensor grad() const;  // zeros if never reached by backward
    bool requires_grad() const { return n_ && n_->requires_grad; }
    const Shape& shape() const { return n_->data.shape(); }
    Node* node() const { return n_.get(); }
    std::shared_ptr<Node> node_ptr() const { return n_; }

private:
    std::shared_ptr<Node> n_;
};

// Runs reverse accumulation from a scalar loss. Throws on non-scalar input.
void backward(const Value& loss);

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value scalar_mul(const Value& a, double s);
Value add_scalar(const Value& a, double s);
Value matmul(const Value& a, const Value& b);
Value transpose(const Value& a, int ax0, int ax1);
Value reshape(const Value& a, const Shape& s);
Value concat(const Value& a, const Value& b, int axis);
Value slice(const Value& a, int axis, int64_t start, int64_t len);
Value sum_all(const Value& a);
Value mean_all(const Value& a);
Value sum_axis(const Value& a, int axis);
Value mean_axis(const Value& a, int axis);
Value min_axis(const Value& a, int axis);
Value softmax(const Value& a);
Value rms_normalize(const Value& a, double eps = 1e-6);
Value layer_normalize(const Value& a, double eps = 1e-6);
Value gelu(const Value& a);
Value silu(const Value& a);
Value sqrt(const Value& a);
Value reciprocal(const Value& a);
Value sin(const Value& a);
Value cos(const Value& a);

}  // namespace pmf
