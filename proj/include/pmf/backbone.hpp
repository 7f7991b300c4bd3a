#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pmf/params.hpp"
#include "pmf/rng.hpp"

namespace pmf {

struct ModelConfig {
    int hidden = 64;      // token width H
    int blocks = 4;       // DiT depth L
    int heads = 4;        // self/cross attention heads
    int points = 256;     // points per set N
    int ctx_tokens = 16;  // condition context length M
    int cond_dim = 13;    // condition descriptor length D
    int pma_dim = 128;    // adapter MHSA width
    int pma_heads = 4;
    double ffn_mult = 4.0;

    int ffn_dim() const { return static_cast<int>(hidden * ffn_mult); }
    void validate() const;

    static ModelConfig desk_default() { return ModelConfig{}; }
};

// Raw per-batch condition input: descriptors plus which rows are forced to the
// learned null embedding (condition dropout / unconditional branch).
struct CondBatch {
    Tensor desc;                     // (B, cond_dim)
    std::vector<uint8_t> null_mask;  // size B

    static CondBatch plain(Tensor d) {
        CondBatch c;
        c.null_mask.assign(static_cast<size_t>(d.shape()[0]), 0);
        c.desc = std::move(d);
        return c;
    }
    static CondBatch all_null(Tensor d) {
        CondBatch c;
        c.null_mask.assign(static_cast<size_t>(d.shape()[0]), 1);
        c.desc = std::move(d);
        return c;
    }
};

// Encoded condition: pooled global vector e_img (B,H) plus context tokens
// Z_ctx (B,M,D) that feed the PMA adapter.
template <class T>
struct CondBundleT {
    T global;
    T ctx;
};
using ConditionBundle = CondBundleT<Tensor>;

ParamStore init_params(const ModelConfig& cfg, uint64_t seed);

struct BackboneCounters {
    uint64_t forward_calls = 0;
    uint64_t mhsa_calls = 0;
};
BackboneCounters& counters();

template <class T>
T sinusoidal_embed(const T& s, int dim);

template <class T>
CondBundleT<T> encode_condition(const ModelConfig& cfg, Bank<T>& bank, const Tensor& desc,
                                const std::vector<uint8_t>& null_mask);

template <class T>
T condition_vector(const ModelConfig& cfg, Bank<T>& bank, const T& t, const T& r, const T& e_img);

template <class T>
std::vector<T> pma_adapt(const ModelConfig& cfg, Bank<T>& bank, const T& ctx);

template <class T>
T dit_block(const ModelConfig& cfg, Bank<T>& bank, int layer, const T& tokens, const T& c,
            const T& ctx);

template <class T>
T forward_u(const ModelConfig& cfg, Bank<T>& bank, const T& x_t, const T& r, const T& t,
            const CondBundleT<T>& cond);

// plain evaluation with encoded-once condition
Tensor forward_u_plain(const ModelConfig& cfg, const ParamStore& params, const Tensor& x_t,
                       const Tensor& r, const Tensor& t, const CondBatch& cond);

// forward-mode sweep along tangents (x_tangent, dr=0, dt=1, dcond=0); dudt is
// detached by construction.
struct JvpResult {
    Tensor u;
    Tensor dudt;
};
JvpResult forward_u_jvp(const ModelConfig& cfg, const ParamStore& params, const Tensor& x_t,
                        const Tensor& r, const Tensor& t, const CondBatch& cond,
                        const Tensor& x_tangent);

extern template Tensor sinusoidal_embed<Tensor>(const Tensor&, int);
extern template Value sinusoidal_embed<Value>(const Value&, int);
extern template Dual sinusoidal_embed<Dual>(const Dual&, int);
extern template CondBundleT<Tensor> encode_condition<Tensor>(const ModelConfig&, Bank<Tensor>&,
                                                             const Tensor&,
                                                             const std::vector<uint8_t>&);
extern template CondBundleT<Value> encode_condition<Value>(const ModelConfig&, Bank<Value>&,
                                                           const Tensor&,
                                                           const std::vector<uint8_t>&);
extern template CondBundleT<Dual> encode_condition<Dual>(const ModelConfig&, Bank<Dual>&,
                                                         const Tensor&,
                                                         const std::vector<uint8_t>&);
extern template Tensor condition_vector<Tensor>(const ModelConfig&, Bank<Tensor>&, const Tensor&,
                                                const Tensor&, const Tensor&);
extern template Value condition_vector<Value>(const ModelConfig&, Bank<Value>&, const Value&,
                                              const Value&, const Value&);
extern template Dual condition_vector<Dual>(const ModelConfig&, Bank<Dual>&, const Dual&,
                                            const Dual&, const Dual&);
extern template std::vector<Tensor> pma_adapt<Tensor>(const ModelConfig&, Bank<Tensor>&,
                                                      const Tensor&);
extern template std::vector<Value> pma_adapt<Value>(const ModelConfig&, Bank<Value>&, const Value&);
extern template std::vector<Dual> pma_adapt<Dual>(const ModelConfig&, Bank<Dual>&, const Dual&);
extern template Tensor dit_block<Tensor>(const ModelConfig&, Bank<Tensor>&, int, const Tensor&,
                                         const Tensor&, const Tensor&);
extern template Value dit_block<Value>(const ModelConfig&, Bank<Value>&, int, const Value&,
                                       const Value&, const Value&);
extern template Dual dit_block<Dual>(const ModelConfig&, Bank<Dual>&, int, const Dual&, const Dual&,
                                     const Dual&);
extern template Tensor forward_u<Tensor>(const ModelConfig&, Bank<Tensor>&, const Tensor&,
                                         const Tensor&, const Tensor&, const CondBundleT<Tensor>&);
extern template Value forward_u<Value>(const ModelConfig&, Bank<Value>&, const Value&, const Value&,
                                       const Value&, const CondBundleT<Value>&);
extern template Dual forward_u<Dual>(const ModelConfig&, Bank<Dual>&, const Dual&, const Dual&,
                                     const Dual&, const CondBundleT<Dual>&);

}  // namespace pmf
