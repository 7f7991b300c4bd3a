#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "pmf/backbone.hpp"
#include "pmf/dsa.hpp"
#include "pmf/rng.hpp"

namespace pmf {

enum class Branch { FM, MF };

struct TimePair {
    double t = 0.5;
    double r = 0.5;
    Branch branch = Branch::FM;
};

struct GuidanceConfig {
    double omega = 1.0;        // guidance scale
    double kappa = 0.5;        // conditional network mix-in
    double label_dropout = 0.1;
    double weight_p = 1.0;     // adaptive loss exponent
    double weight_c = 1e-3;    // adaptive loss constant

    void validate() const;
};

// logit-normal draws (mu=-0.4, sigma=1), FM/MF mixed with equal probability;
// the MF pair is min-max ordered with a strict t > r.
TimePair sample_time_pair(Rng& rng);

// x_t = (1-t) x0 + t eps, v_t = eps - x0; t is (B,) against (B,N,3) inputs.
std::pair<Tensor, Tensor> interpolate(const Tensor& x0, const Tensor& eps, const Tensor& t);

// approximate CFG instantaneous velocity
// omega * v_t + kappa * u_cond + (1 - omega - kappa) * u_uncond
Tensor cfg_tangent(const Tensor& v_t, const Tensor& u_cond, const Tensor& u_uncond,
                   const GuidanceConfig& cfg);

// w = 1 / (|delta|^2 + c)^p, always treated as a constant in gradients
double adaptive_weight(double delta_sq, const GuidanceConfig& cfg);

struct TrainBatch {
    Tensor x0;    // (B,N,3), centered point sets
    Tensor eps;   // (B,N,3)
    Tensor desc;  // (B,D) condition descriptors
    std::vector<TimePair> times;
    std::vector<uint8_t> drop_mask;  // condition dropout applied to the trained branch

    int64_t size() const { return x0.defined() ? x0.shape()[0] : 0; }
    Tensor t_vec() const;
    Tensor r_vec() const;
    void validate() const;
};

struct LossBuild {
    Value total;  // scalar on the reverse graph
    std::shared_ptr<Bank<Value>> bank;

    // detached diagnostics
    double loss_main = 0;       // adaptive-weighted objective, batch mean
    double loss_fm_branch = 0;  // restricted means (0 when a branch is absent)
    double loss_mf_branch = 0;
    double raw_sq_mean = 0;     // unweighted mean per-sample |delta|^2
    double loss_dsa = 0;        // E[L_DSA] over rows with t != r
    double scale_s = 0;
    double lambda_mean = 0;
    int fm_rows = 0;
    int mf_rows = 0;
};

// Full training objective: CFG-guided regression target built from one JVP
// sweep plus the denoised-space anchor term. Pass dsa = nullptr to train
// without the auxiliary loss.
LossBuild build_training_loss(const ModelConfig& mcfg, const ParamStore& params,
                              const TrainBatch& batch, const GuidanceConfig& gcfg,
                              const DsaConfig* dsa);

// branch-restricted wrappers (no DSA term)
LossBuild fm_loss(const ModelConfig& mcfg, const ParamStore& params, const TrainBatch& batch,
                  const GuidanceConfig& gcfg);
LossBuild mf_cfg_loss(const ModelConfig& mcfg, const ParamStore& params, const TrainBatch& batch,
                      const GuidanceConfig& gcfg);

}  // namespace pmf
