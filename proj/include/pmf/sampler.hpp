#pragma once

#include <functional>

#include "pmf/backbone.hpp"
#include "pmf/rng.hpp"

namespace pmf {

// mean-velocity evaluation for a single point set
using VelocityFn = std::function<Tensor(const Tensor& x /*(N,3)*/, double r, double t)>;

// binds the backbone with a condition encoded once; every invocation counts as
// one network function evaluation
VelocityFn bind_backbone(const ModelConfig& cfg, const ParamStore& params, const Tensor& desc_row,
                         bool is_null = false);

// Algorithm: draw eps from the seed, return eps - u(eps, 0, 1 | c). Exactly
// one evaluation of fn.
Tensor sample_one_step(const VelocityFn& fn, int n_points, uint64_t seed);

// k mean-flow jumps over a uniform grid t_k=1 > ... > t_0=0; k = 1 reproduces
// sample_one_step bitwise.
Tensor sample_k_step(const VelocityFn& fn, int n_points, int steps, uint64_t seed);

// Euler integration of the instantaneous field u(x,t,t) from t=1 to 0.
Tensor sample_fm_euler(const VelocityFn& fn, int n_points, int steps, uint64_t seed);

// noise drawn by the samplers for a given seed (for oracle constructions)
Tensor sampler_noise(int n_points, uint64_t seed);

}  // namespace pmf
