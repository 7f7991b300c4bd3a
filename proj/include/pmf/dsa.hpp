#pragma once

#include <vector>

#include "pmf/graph.hpp"
#include "pmf/tensor.hpp"

namespace pmf {

enum class SetDistance { APML, CHAMFER, MSE };

SetDistance set_distance_from_string(const std::string& s);
std::string set_distance_to_string(SetDistance d);

struct DsaConfig {
    double lambda_base = 0.5;
    double tau = 0.05;           // lower bound inside lambda(t)
    double delta = 1e-8;         // guards the batch-scale denominator
    SetDistance set_distance = SetDistance::APML;
    int sinkhorn_iters = 20;
    double target_peak = 0.99;   // p_max for the adaptive softmin rows

    void validate() const;
};

// 0 when t == r (FM branch), else lambda_base / max(t, tau).
double lambda_weight(double t, double r, const DsaConfig& cfg);

// x_theta = x_t - t * u. Gradients flow through u only; x_t rows with t == 0
// are rejected. t is (B,) for x_t (B,N,3), or a scalar for a single (N,3) set.
Value denoised_extrapolate(const Tensor& x_t, const Tensor& t, const Value& u);
Tensor denoised_extrapolate(const Tensor& x_t, const Tensor& t, const Tensor& u);

// Soft one-to-one matching distance: per-row adaptive-temperature softmin
// (bisection so the peak weight hits target_peak), Sinkhorn symmetrization,
// then the transport-weighted mean cost. Differentiable w.r.t. P, including
// the implicit dependence of the row temperatures on the cost matrix.
Value apml_distance(const Value& P, const Value& Q, const DsaConfig& cfg);
double apml_distance(const Tensor& P, const Tensor& Q, const DsaConfig& cfg);

// Same convention as metrics::chamfer_l1, built from graph ops.
Value chamfer_l1_distance(const Value& P, const Value& Q);
Value mse_distance(const Value& P, const Value& Q);

Value dsa_loss(const Value& x_theta, const Value& x0_gt, const DsaConfig& cfg);
double dsa_loss(const Tensor& x_theta, const Tensor& x0_gt, const DsaConfig& cfg);

// Mini-batch combination: total = L_mf + sum_i (s * lambda(t_i) / B) * D_i with
// s = detach(L_mf) / (mean_active(detach(D)) + delta). Gradients pass through
// L_mf and each D_i, never through s or lambda.
Value total_loss(const Value& l_mf, const std::vector<Value>& dsa_per_row,
                 const std::vector<double>& t, const std::vector<double>& r, int64_t batch,
                 const DsaConfig& cfg);

// single-sample convenience used by tests and diagnostics
double total_loss_scalar(double l_mf, double l_dsa, double t, double r, const DsaConfig& cfg);

}  // namespace pmf
