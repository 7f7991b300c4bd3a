#pragma once

#include <map>
#include <string>
#include <vector>

#include "pmf/dual.hpp"
#include "pmf/graph.hpp"
#include "pmf/tensor.hpp"

namespace pmf {

// Named parameter tensors with a stable iteration order (checkpoint layout and
// optimizer state depend on it).
class ParamStore {
public:
    void add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw DataError("ParamStore: duplicate parameter " + name);
        index_[name] = names_.size();
        names_.push_back(name);
        tensors_.push_back(std::move(t));
    }
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    const Tensor& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("ParamStore: unknown parameter " + name);
        return tensors_[it->second];
    }
    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("ParamStore: unknown parameter " + name);
        return tensors_[it->second];
    }
    const std::vector<std::string>& names() const { return names_; }
    size_t size() const { return names_.size(); }
    int64_t total_scalars() const {
        int64_t n = 0;
        for (const auto& t : tensors_) n += t.numel();
        return n;
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
    std::map<std::string, size_t> index_;
};

template <class T>
T constant(const Tensor& x);
template <>
inline Tensor constant<Tensor>(const Tensor& x) {
    return x;
}
template <>
inline Value constant<Value>(const Tensor& x) {
    return Value::leaf(x, false);
}
template <>
inline Dual constant<Dual>(const Tensor& x) {
    return Dual(x);
}

inline const Tensor& primal(const Tensor& x) { return x; }
inline const Tensor& primal(const Value& x) { return x.data(); }
inline const Tensor& primal(const Dual& x) { return x.p; }

// Per-mode parameter access. The Value bank caches one leaf per parameter so
// each gets a single grad accumulator per graph.
template <class T>
struct Bank;

template <>
struct Bank<Tensor> {
    const ParamStore* store;
    explicit Bank(const ParamStore& s) : store(&s) {}
    Tensor operator()(const std::string& name) const { return store->at(name); }
};

template <>
struct Bank<Value> {
    const ParamStore* store;
    std::map<std::string, Value> leaves;
    explicit Bank(const ParamStore& s) : store(&s) {}
    Value operator()(const std::string& name) {
        auto it = leaves.find(name);
        if (it != leaves.end()) return it->second;
        Value v = Value::leaf(store->at(name), true);
        leaves.emplace(name, v);
        return v;
    }
    // d(loss)/d(param); zero if the parameter never entered the graph
    Tensor grad(const std::string& name) const {
        auto it = leaves.find(name);
        if (it == leaves.end()) return Tensor(store->at(name).shape(), 0.0);
        return it->second.grad();
    }
};

template <>
struct Bank<Dual> {
    const ParamStore* store;
    explicit Bank(const ParamStore& s) : store(&s) {}
    Dual operator()(const std::string& name) const { return Dual(store->at(name)); }
};

}  // namespace pmf
