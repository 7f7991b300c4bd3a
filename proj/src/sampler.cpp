#include "pmf/sampler.hpp"

namespace pmf {

namespace {
constexpr uint64_t kNoiseStream = 0x6e6f6973;  // dedicated noise stream tag
}

Tensor sampler_noise(int n_points, uint64_t seed) {
    Rng rng(seed, kNoiseStream);
    return randn(Shape{n_points, 3}, rng);
}

VelocityFn bind_backbone(const ModelConfig& cfg, const ParamStore& params, const Tensor& desc_row,
                         bool is_null) {
    Tensor desc = desc_row.reshaped(Shape{1, cfg.cond_dim});
    Bank<Tensor> bank(params);
    std::vector<uint8_t> mask{is_null ? uint8_t(1) : uint8_t(0)};
    ConditionBundle bundle = encode_condition(cfg, bank, desc, mask);
    return [cfg, &params, bundle](const Tensor& x, double r, double t) {
        Bank<Tensor> b(params);
        Tensor xb = x.reshaped(Shape{1, x.shape()[0], 3});
        Tensor rv = Tensor::scalar(r);
        Tensor tv = Tensor::scalar(t);
        Tensor u = forward_u(cfg, b, xb, rv, tv, bundle);
        return u.reshaped(x.shape());
    };
}

Tensor sample_one_step(const VelocityFn& fn, int n_points, uint64_t seed) {
    Tensor eps = sampler_noise(n_points, seed);
    return sub(eps, fn(eps, 0.0, 1.0));
}

Tensor sample_k_step(const VelocityFn& fn, int n_points, int steps, uint64_t seed) {
    if (steps < 1) throw DataError("sample_k_step: steps must be >= 1");
    Tensor x = sampler_noise(n_points, seed);
    for (int i = steps; i >= 1; --i) {
        double t_hi = double(i) / double(steps);
        double t_lo = double(i - 1) / double(steps);
        Tensor u = fn(x, t_lo, t_hi);
        x = sub(x, scalar_mul(u, t_hi - t_lo));
    }
    return x;
}

Tensor sample_fm_euler(const VelocityFn& fn, int n_points, int steps, uint64_t seed) {
    if (steps < 1) throw DataError("sample_fm_euler: steps must be >= 1");
    Tensor x = sampler_noise(n_points, seed);
    for (int i = steps; i >= 1; --i) {
        double t = double(i) / double(steps);
        double dt = t - double(i - 1) / double(steps);
        Tensor u = fn(x, t, t);  // instantaneous field at r = t
        x = sub(x, scalar_mul(u, dt));
    }
    return x;
}

}  // namespace pmf
