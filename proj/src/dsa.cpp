#include "pmf/dsa.hpp"

#include <algorithm>
#include <cmath>

namespace pmf {

namespace {
constexpr double kDistEps = 1e-18;  // keeps sqrt differentiable at coincident points
}

SetDistance set_distance_from_string(const std::string& s) {
    if (s == "apml") return SetDistance::APML;
    if (s == "chamfer") return SetDistance::CHAMFER;
    if (s == "mse") return SetDistance::MSE;
    throw DataError("unknown set distance '" + s + "' (expected apml|chamfer|mse)");
}

std::string set_distance_to_string(SetDistance d) {
    switch (d) {
        case SetDistance::APML: return "apml";
        case SetDistance::CHAMFER: return "chamfer";
        case SetDistance::MSE: return "mse";
    }
    return "?";
}

void DsaConfig::validate() const {
    if (lambda_base < 0) throw DataError("DsaConfig: lambda_base must be >= 0");
    if (tau <= 0 || tau >= 1) throw DataError("DsaConfig: tau must lie in (0,1)");
    if (delta <= 0) throw DataError("DsaConfig: delta must be positive");
    if (sinkhorn_iters < 0) throw DataError("DsaConfig: sinkhorn_iters must be >= 0");
    if (target_peak <= 0 || target_peak >= 1) throw DataError("DsaConfig: target_peak must lie in (0,1)");
}

double lambda_weight(double t, double r, const DsaConfig& cfg) {
    if (t == r) return 0.0;
    return cfg.lambda_base / std::max(t, cfg.tau);
}

namespace {

void check_extrapolate_shapes(const Tensor& x_t, const Tensor& t, const Tensor& u) {
    if (x_t.shape() != u.shape())
        throw ShapeError("denoised_extrapolate: u shape " + u.shape().str() + " != x_t " +
                         x_t.shape().str());
    const double* pt = t.data();
    for (int64_t i = 0; i < t.numel(); ++i)
        if (pt[i] == 0.0)
            throw DataError("denoised_extrapolate: t == 0 at element " + std::to_string(i));
}

Tensor t_broadcastable(const Tensor& x_t, const Tensor& t) {
    if (x_t.shape().rank == 3) {
        if (t.numel() != x_t.shape()[0])
            throw ShapeError("denoised_extrapolate: t must have one entry per batch element");
        return t.reshaped(Shape{x_t.shape()[0], 1, 1});
    }
    if (t.numel() != 1) throw ShapeError("denoised_extrapolate: scalar t expected for a single set");
    return t.reshaped(Shape{1, 1});
}

}  // namespace

Value denoised_extrapolate(const Tensor& x_t, const Tensor& t, const Value& u) {
    check_extrapolate_shapes(x_t, t, u.data());
    Tensor tb = t_broadcastable(x_t, t);
    return sub(Value::leaf(x_t, false), mul(Value::leaf(tb, false), u));
}

Tensor denoised_extrapolate(const Tensor& x_t, const Tensor& t, const Tensor& u) {
    check_extrapolate_shapes(x_t, t, u);
    return sub(x_t, mul(t_broadcastable(x_t, t), u));
}

// ---------------------------------------------------------------------------
// cost matrix and distances
// ---------------------------------------------------------------------------
namespace {

Value pairwise_euclid(const Value& P, const Value& Q) {
    const Shape& sp = P.shape();
    const Shape& sq = Q.shape();
    if (sp.rank != 2 || sq.rank != 2 || sp.d[1] != 3 || sq.d[1] != 3)
        throw ShapeError("pairwise_euclid: expected (N,3) sets, got " + sp.str() + " and " + sq.str());
    int64_t n = sp.d[0], m = sq.d[0];
    Value d = sub(reshape(P, Shape{n, 1, 3}), reshape(Q, Shape{1, m, 3}));
    return sqrt(add_scalar(sum_axis(mul(d, d), 2), kDistEps));
}

// Temperature rails relative to the mean nearest-neighbor cost. The rails are
// what keeps the transport within a few percent of the exact assignment:
// above the upper rail the coupling blurs, below the lower rail every row
// locks onto its argmin and the Sinkhorn balancing can no longer trade mass.
constexpr double kRailLo = 0.05;
constexpr double kRailHi = 0.09;

struct SoftminSolution {
    double tau = 1.0;
    int rail = 0;             // -1 low rail, +1 high rail, 0 median equation active
    int64_t median_row = -1;
    bool degenerate = false;  // all costs equal: uniform weights
    std::vector<int64_t> argmins;
    std::vector<double> rowmin;
};

// One shared temperature per cost matrix, bisected (30 iterations, Newton
// polished) so the median row's peak softmin weight equals p_max, then
// clamped to the rails.
SoftminSolution solve_softmin_temperature(const Tensor& C, double p_max) {
    int64_t n = C.shape()[0], m = C.shape()[1];
    const double* pc = C.data();
    SoftminSolution sol;
    sol.argmins.assign(n, 0);
    sol.rowmin.assign(n, 0.0);

    double cmin_all = pc[0], cmax_all = pc[0];
    for (int64_t i = 0; i < n; ++i) {
        const double* row = pc + i * m;
        double mn = row[0];
        int64_t am = 0;
        for (int64_t j = 1; j < m; ++j)
            if (row[j] < mn) {
                mn = row[j];
                am = j;
            }
        sol.rowmin[i] = mn;
        sol.argmins[i] = am;
        for (int64_t j = 0; j < m; ++j) {
            cmin_all = std::min(cmin_all, row[j]);
            cmax_all = std::max(cmax_all, row[j]);
        }
    }
    if (cmax_all - cmin_all < 1e-14) {
        sol.degenerate = true;
        return sol;
    }

    auto row_peak = [&](int64_t i, double tau) {
        const double* row = pc + i * m;
        double denom = 0;
        for (int64_t j = 0; j < m; ++j) denom += std::exp(-(row[j] - sol.rowmin[i]) / tau);
        return 1.0 / denom;
    };
    auto median_row_at = [&](double tau) {
        std::vector<std::pair<double, int64_t>> peaks(n);
        for (int64_t i = 0; i < n; ++i) peaks[i] = {row_peak(i, tau), i};
        std::nth_element(peaks.begin(), peaks.begin() + n / 2, peaks.end());
        return peaks[n / 2];
    };

    double lo = 1e-12, hi = 1.0;
    int guard = 0;
    while (median_row_at(hi).first > p_max && guard++ < 80) hi *= 2.0;
    for (int it = 0; it < 30; ++it) {
        double mid = 0.5 * (lo + hi);
        if (median_row_at(mid).first > p_max)
            lo = mid;
        else
            hi = mid;
    }
    double tau = 0.5 * (lo + hi);
    int64_t med = median_row_at(tau).second;
    sol.median_row = med;

    // Newton polish on the pivot row: removes the bisection staircase that
    // would otherwise alias into finite-difference gradient probes
    for (int it = 0; it < 4; ++it) {
        const double* row = pc + med * m;
        double denom = 0, cbar_num = 0;
        for (int64_t j = 0; j < m; ++j) {
            double e = std::exp(-(row[j] - sol.rowmin[med]) / tau);
            denom += e;
            cbar_num += e * row[j];
        }
        double w = 1.0 / denom;
        double cbar = cbar_num / denom;
        double dfdtau = w * (sol.rowmin[med] - cbar) / (tau * tau);
        if (std::abs(dfdtau) < 1e-300 || !std::isfinite(dfdtau)) break;
        double step = (w - p_max) / dfdtau;
        if (!std::isfinite(step)) break;
        double next = tau - step;
        if (next <= 0) break;
        tau = next;
    }

    double scale = 0;
    for (int64_t i = 0; i < n; ++i) scale += sol.rowmin[i] / double(n);
    double rail_lo = std::max(kRailLo * scale, 1e-12);
    double rail_hi = std::max(kRailHi * scale, 1e-12);
    if (tau < rail_lo) {
        tau = rail_lo;
        sol.rail = -1;
    } else if (tau > rail_hi) {
        tau = rail_hi;
        sol.rail = +1;
    }
    sol.tau = tau;
    return sol;
}

// Row softmin at the shared adaptive temperature. Backward includes the
// implicit derivative of tau w.r.t. the costs through whichever condition
// pinned it (median-row peak equation or a rail).
Value softmin_adaptive(const Value& C, double p_max) {
    int64_t n = C.shape()[0], m = C.shape()[1];
    auto sol = std::make_shared<SoftminSolution>(solve_softmin_temperature(C.data(), p_max));

    Tensor R = Tensor::uninit(C.data().shape());
    {
        const double* pc = C.data().data();
        double* pr = R.mut();
        if (sol->degenerate) {
            for (int64_t i = 0; i < n * m; ++i) pr[i] = 1.0 / double(m);
        } else {
            for (int64_t i = 0; i < n; ++i) {
                const double* row = pc + i * m;
                double mn = sol->rowmin[i];
                double denom = 0;
                double* out = pr + i * m;
                for (int64_t j = 0; j < m; ++j) {
                    out[j] = std::exp(-(row[j] - mn) / sol->tau);
                    denom += out[j];
                }
                for (int64_t j = 0; j < m; ++j) out[j] /= denom;
            }
        }
    }
    Tensor Rcopy = R;

    auto pc = C.node_ptr();
    return Value::make(
        std::move(R), {C},
        [pc, sol, Rcopy, n, m](Node& self) {
            if (sol->degenerate) return;  // uniform weights, locally constant
            const double tau = sol->tau;
            const double* pr = Rcopy.data();
            const double* pg = self.grad.data();
            const double* pcd = pc->data.data();
            Tensor dC(pc->data.shape(), 0.0);
            double* pd = dC.mut();

            double dtau = 0;  // dL/dtau accumulated over every row
            for (int64_t i = 0; i < n; ++i) {
                const double* r = pr + i * m;
                const double* g = pg + i * m;
                const double* c = pcd + i * m;
                double dot = 0;
                for (int64_t j = 0; j < m; ++j) dot += r[j] * g[j];
                for (int64_t j = 0; j < m; ++j) {
                    double gs = r[j] * (g[j] - dot);  // softmax vjp, s = -c/tau
                    pd[i * m + j] += -gs / tau;
                    dtau += gs * c[j] / (tau * tau);
                }
            }

            if (sol->rail != 0) {
                // tau = kRail * mean_i(min_j C_ij): route through the row minima
                double k = (sol->rail < 0 ? kRailLo : kRailHi) / double(n);
                for (int64_t i = 0; i < n; ++i) pd[i * m + sol->argmins[i]] += dtau * k;
            } else if (sol->median_row >= 0) {
                // tau solves peak(tau, c_med) = p_max on the pivot row
                int64_t i = sol->median_row;
                const double* r = pr + i * m;
                const double* c = pcd + i * m;
                int64_t am = sol->argmins[i];
                double ec = 0;
                for (int64_t j = 0; j < m; ++j) ec += r[j] * c[j];
                double denom = c[am] - ec;  // negative unless the row is degenerate
                if (std::abs(denom) > 1e-300) {
                    for (int64_t j = 0; j < m; ++j) {
                        double dtau_dc = -tau * (r[j] - (j == am ? 1.0 : 0.0)) / denom;
                        pd[i * m + j] += dtau * dtau_dc;
                    }
                }
            }
            pc->accum(std::move(dC));
        },
        "softmin_adaptive");
}

}  // namespace

Value apml_distance(const Value& P, const Value& Q, const DsaConfig& cfg) {
    const Shape& sp = P.shape();
    const Shape& sq = Q.shape();
    if (sp.d[0] != sq.d[0])
        throw ShapeError("apml_distance: cardinality mismatch " + sp.str() + " vs " + sq.str());
    int64_t n = sp.d[0];

    Value C = pairwise_euclid(P, Q);
    Value T = softmin_adaptive(C, cfg.target_peak);
    for (int it = 0; it < cfg.sinkhorn_iters; ++it) {
        T = mul(T, reciprocal(reshape(sum_axis(T, 0), Shape{1, n})));  // column marginals -> 1
        T = mul(T, reciprocal(reshape(sum_axis(T, 1), Shape{n, 1})));  // row marginals -> 1
    }
    return scalar_mul(sum_all(mul(T, C)), 1.0 / double(n));
}

double apml_distance(const Tensor& P, const Tensor& Q, const DsaConfig& cfg) {
    return apml_distance(Value::leaf(P, false), Value::leaf(Q, false), cfg).data().scalar_value();
}

Value chamfer_l1_distance(const Value& P, const Value& Q) {
    Value C = pairwise_euclid(P, Q);
    Value fwd = mean_all(min_axis(C, 1));
    Value bwd = mean_all(min_axis(C, 0));
    return scalar_mul(add(fwd, bwd), 0.5);
}

Value mse_distance(const Value& P, const Value& Q) {
    if (P.shape() != Q.shape())
        throw ShapeError("mse_distance: shape mismatch " + P.shape().str() + " vs " + Q.shape().str());
    Value d = sub(P, Q);
    return mean_all(mul(d, d));
}

Value dsa_loss(const Value& x_theta, const Value& x0_gt, const DsaConfig& cfg) {
    if (x_theta.shape() != x0_gt.shape())
        throw ShapeError("dsa_loss: shape mismatch " + x_theta.shape().str() + " vs " +
                         x0_gt.shape().str());
    switch (cfg.set_distance) {
        case SetDistance::APML: return apml_distance(x_theta, x0_gt, cfg);
        case SetDistance::CHAMFER: return chamfer_l1_distance(x_theta, x0_gt);
        case SetDistance::MSE: return mse_distance(x_theta, x0_gt);
    }
    throw DataError("dsa_loss: bad set distance");
}

double dsa_loss(const Tensor& x_theta, const Tensor& x0_gt, const DsaConfig& cfg) {
    return dsa_loss(Value::leaf(x_theta, false), Value::leaf(x0_gt, false), cfg).data().scalar_value();
}

Value total_loss(const Value& l_mf, const std::vector<Value>& dsa_per_row,
                 const std::vector<double>& t, const std::vector<double>& r, int64_t batch,
                 const DsaConfig& cfg) {
    if (dsa_per_row.empty()) return l_mf;
    if (dsa_per_row.size() != t.size() || t.size() != r.size())
        throw ShapeError("total_loss: per-row vectors disagree in length");

    double dsa_mean = 0;
    for (const auto& d : dsa_per_row) dsa_mean += d.data().scalar_value();
    dsa_mean /= double(dsa_per_row.size());
    double s = l_mf.data().scalar_value() / (dsa_mean + cfg.delta);

    Value out = l_mf;
    for (size_t i = 0; i < dsa_per_row.size(); ++i) {
        double lam = lambda_weight(t[i], r[i], cfg);
        if (lam == 0.0) continue;
        out = add(out, scalar_mul(dsa_per_row[i], s * lam / double(batch)));
    }
    return out;
}

double total_loss_scalar(double l_mf, double l_dsa, double t, double r, const DsaConfig& cfg) {
    if (!std::isfinite(l_mf) || !std::isfinite(l_dsa))
        throw NumericError("total_loss: non-finite loss input");
    double s = l_mf / (l_dsa + cfg.delta);
    return l_mf + s * lambda_weight(t, r, cfg) * l_dsa;
}

}  // namespace pmf
