#pragma once

#include "pmf/backbone.hpp"
#include "pmf/flow.hpp"
#include "pmf/rng.hpp"

namespace pmf::test {

inline ModelConfig tiny_model() {
    ModelConfig c;
    c.hidden = 16;
    c.blocks = 2;
    c.heads = 2;
    c.points = 6;
    c.ctx_tokens = 4;
    c.cond_dim = 13;
    c.pma_dim = 16;
    c.pma_heads = 2;
    c.ffn_mult = 2.0;
    return c;
}

inline void perturb_params(ParamStore& ps, uint64_t seed, double std = 0.05) {
    Rng rng(seed, 0xabc);
    for (const auto& n : ps.names()) {
        Tensor& t = ps.at(n);
        double* p = t.mut();
        for (int64_t i = 0; i < t.numel(); ++i) p[i] += std * rng.next_normal();
    }
}

// batch of shape-like data with explicit time pairs
inline TrainBatch make_batch(const ModelConfig& cfg, int64_t B, uint64_t seed,
                             Branch branch, bool tie_r_to_t = false) {
    Rng rng(seed);
    TrainBatch b;
    b.x0 = randn(Shape{B, cfg.points, 3}, rng);
    b.eps = randn(Shape{B, cfg.points, 3}, rng);
    b.desc = rand_uniform(Shape{B, cfg.cond_dim}, rng);
    for (int64_t i = 0; i < B; ++i) {
        TimePair tp;
        tp.branch = branch;
        double t = 0.3 + 0.6 * rng.next_uniform();
        tp.t = t;
        tp.r = (branch == Branch::FM || tie_r_to_t) ? t : 0.5 * t * rng.next_uniform();
        b.times.push_back(tp);
        b.drop_mask.push_back(0);
    }
    return b;
}

}  // namespace pmf::test
