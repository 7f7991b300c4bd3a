#include "pmf/flow.hpp"

#include <cmath>
#include <cstring>

namespace pmf {

void GuidanceConfig::validate() const {
    if (kappa < 0) throw DataError("GuidanceConfig: kappa must be >= 0");
    if (label_dropout < 0 || label_dropout > 1)
        throw DataError("GuidanceConfig: label_dropout must lie in [0,1]");
    if (weight_c <= 0) throw DataError("GuidanceConfig: weight_c must be positive");
}

TimePair sample_time_pair(Rng& rng) {
    auto logit_normal = [&] {
        double z = -0.4 + 1.0 * rng.next_normal();
        return 1.0 / (1.0 + std::exp(-z));
    };
    double a = logit_normal();
    double b = logit_normal();
    bool fm = rng.next_uniform() < 0.5;
    TimePair tp;
    if (fm) {
        tp.branch = Branch::FM;
        tp.t = tp.r = a;
    } else {
        while (a == b) b = logit_normal();  // strict ordering required
        tp.branch = Branch::MF;
        tp.t = std::max(a, b);
        tp.r = std::min(a, b);
    }
    return tp;
}

std::pair<Tensor, Tensor> interpolate(const Tensor& x0, const Tensor& eps, const Tensor& t) {
    if (x0.shape() != eps.shape())
        throw ShapeError("interpolate: x0 " + x0.shape().str() + " vs eps " + eps.shape().str());
    const double* pt = t.data();
    for (int64_t i = 0; i < t.numel(); ++i)
        if (pt[i] < 0.0 || pt[i] > 1.0)
            throw DataError("interpolate: t outside [0,1] at element " + std::to_string(i));
    Tensor tb = t.reshaped(Shape{t.numel(), 1, 1});
    // literal form keeps the endpoints exact: t=0 -> x0, t=1 -> eps
    Tensor one_minus_t = add_scalar(scalar_mul(tb, -1.0), 1.0);
    Tensor x_t = add(mul(one_minus_t, x0), mul(tb, eps));
    Tensor v_t = sub(eps, x0);
    return {std::move(x_t), std::move(v_t)};
}

Tensor cfg_tangent(const Tensor& v_t, const Tensor& u_cond, const Tensor& u_uncond,
                   const GuidanceConfig& cfg) {
    Tensor out = scalar_mul(v_t, cfg.omega);
    if (cfg.kappa != 0.0) out = add(out, scalar_mul(u_cond, cfg.kappa));
    double w_u = 1.0 - cfg.omega - cfg.kappa;
    if (w_u != 0.0) out = add(out, scalar_mul(u_uncond, w_u));
    return out;
}

double adaptive_weight(double delta_sq, const GuidanceConfig& cfg) {
    if (delta_sq < 0) throw DataError("adaptive_weight: negative squared error");
    return 1.0 / std::pow(delta_sq + cfg.weight_c, cfg.weight_p);
}

Tensor TrainBatch::t_vec() const {
    Tensor t = Tensor::uninit(Shape{int64_t(times.size())});
    for (size_t i = 0; i < times.size(); ++i) t.mut()[i] = times[i].t;
    return t;
}

Tensor TrainBatch::r_vec() const {
    Tensor r = Tensor::uninit(Shape{int64_t(times.size())});
    for (size_t i = 0; i < times.size(); ++i) r.mut()[i] = times[i].r;
    return r;
}

void TrainBatch::validate() const {
    int64_t b = size();
    if (b == 0) throw DataError("TrainBatch: empty batch");
    if (eps.shape() != x0.shape()) throw ShapeError("TrainBatch: eps shape mismatch");
    if (desc.shape().rank != 2 || desc.shape()[0] != b) throw ShapeError("TrainBatch: desc shape mismatch");
    if (int64_t(times.size()) != b || int64_t(drop_mask.size()) != b)
        throw ShapeError("TrainBatch: per-sample vectors have wrong length");
    for (const auto& tp : times) {
        if (tp.branch == Branch::FM && tp.t != tp.r)
            throw DataError("TrainBatch: FM sample with t != r");
        if (tp.branch == Branch::MF && tp.r > tp.t)
            throw DataError("TrainBatch: MF sample requires r <= t");
    }
}

namespace {

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& rows) {
    Shape s = x.shape();
    s.d[0] = int64_t(rows.size());
    Tensor out = Tensor::uninit(s);
    int64_t stride = x.numel() / x.shape()[0];
    for (size_t i = 0; i < rows.size(); ++i)
        std::memcpy(out.mut() + i * stride, x.data() + rows[i] * stride, sizeof(double) * stride);
    return out;
}

}  // namespace

LossBuild build_training_loss(const ModelConfig& mcfg, const ParamStore& params,
                              const TrainBatch& batch, const GuidanceConfig& gcfg,
                              const DsaConfig* dsa) {
    gcfg.validate();
    batch.validate();
    const int64_t B = batch.size();
    const int64_t N = batch.x0.shape()[1];

    Tensor t = batch.t_vec();
    Tensor r = batch.r_vec();
    auto [x_t, v_t] = interpolate(batch.x0, batch.eps, t);

    // one-timepoint predictions feeding the guided tangent; both are consumed
    // only inside the stop-gradded target, so plain evaluations suffice
    Tensor u_c = forward_u_plain(mcfg, params, x_t, t, t, CondBatch::plain(batch.desc));
    Tensor u_u = forward_u_plain(mcfg, params, x_t, t, t, CondBatch::all_null(batch.desc));
    Tensor vt_tilde = cfg_tangent(v_t, u_c, u_u, gcfg);

    // du/dt via forward-mode sweep, MF rows only ((t-r) vanishes on FM rows)
    std::vector<int64_t> mf_rows;
    for (int64_t i = 0; i < B; ++i)
        if (batch.times[i].branch == Branch::MF) mf_rows.push_back(i);

    Tensor dudt(batch.x0.shape(), 0.0);
    Tensor u_dual_primal;  // kept for the primal drift guard
    if (!mf_rows.empty()) {
        CondBatch sub_cond;
        sub_cond.desc = gather_rows(batch.desc, mf_rows);
        for (int64_t i : mf_rows) sub_cond.null_mask.push_back(batch.drop_mask[i]);
        JvpResult jr = forward_u_jvp(mcfg, params, gather_rows(x_t, mf_rows), gather_rows(r, mf_rows),
                                     gather_rows(t, mf_rows), sub_cond, gather_rows(vt_tilde, mf_rows));
        if (!jr.dudt.all_finite())
            throw NumericError("build_training_loss: non-finite du/dt from the JVP sweep");
        u_dual_primal = jr.u;
        int64_t stride = N * 3;
        for (size_t i = 0; i < mf_rows.size(); ++i)
            std::memcpy(dudt.mut() + mf_rows[i] * stride, jr.dudt.data() + i * stride,
                        sizeof(double) * stride);
    }

    // reverse-mode pass over the full batch (condition dropout applied here)
    auto bank = std::make_shared<Bank<Value>>(params);
    CondBundleT<Value> bundle = encode_condition(mcfg, *bank, batch.desc, batch.drop_mask);
    Value u = forward_u(mcfg, *bank, Value::leaf(x_t, false), Value::leaf(r, false),
                        Value::leaf(t, false), bundle);

    if (!mf_rows.empty()) {
        // both evaluation paths must agree on the primal
        int64_t stride = N * 3;
        const double* a = u.data().data();
        const double* b = u_dual_primal.data();
        for (size_t i = 0; i < mf_rows.size(); ++i)
            for (int64_t k = 0; k < stride; ++k) {
                double da = a[mf_rows[i] * stride + k], db = b[i * stride + k];
                if (std::abs(da - db) > 1e-11 * std::max(1.0, std::abs(da)))
                    throw NumericError("build_training_loss: JVP/reverse primal drift");
            }
    }

    // u_tgt = vt_tilde - (t - r) * sg(du/dt), all detached
    Tensor t_minus_r = sub(t, r).reshaped(Shape{B, 1, 1});
    Tensor u_tgt = sub(vt_tilde, mul(t_minus_r, dudt));

    Value delta = sub(u, Value::leaf(u_tgt, false));
    Value per_sample_sq = sum_axis(sum_axis(mul(delta, delta), 2), 1);  // (B,)

    Tensor w = Tensor::uninit(Shape{B});
    LossBuild out;
    double fm_sum = 0, mf_sum = 0, raw_sum = 0;
    for (int64_t i = 0; i < B; ++i) {
        double sq = per_sample_sq.data().data()[i];
        double wi = adaptive_weight(sq, gcfg);
        w.mut()[i] = wi / double(B);
        raw_sum += sq;
        if (batch.times[i].branch == Branch::FM) {
            fm_sum += wi * sq;
            out.fm_rows++;
        } else {
            mf_sum += wi * sq;
            out.mf_rows++;
        }
    }
    Value loss_main = sum_all(mul(per_sample_sq, Value::leaf(w, false)));

    out.bank = bank;
    out.loss_main = loss_main.data().scalar_value();
    out.raw_sq_mean = raw_sum / double(B);
    out.loss_fm_branch = out.fm_rows ? fm_sum / double(out.fm_rows) : 0.0;
    out.loss_mf_branch = out.mf_rows ? mf_sum / double(out.mf_rows) : 0.0;

    if (dsa == nullptr || mf_rows.empty() || dsa->lambda_base == 0.0) {
        out.total = loss_main;
        return out;
    }

    // denoised-space anchor on the rows where lambda(t) is active
    dsa->validate();
    Value x_theta = denoised_extrapolate(x_t, t, u);  // (B,N,3), grads through u
    std::vector<Value> dsa_rows;
    std::vector<double> ts, rs;
    double lam_sum = 0;
    for (int64_t i : mf_rows) {
        if (batch.times[i].t == batch.times[i].r) continue;  // indicator zero
        Value row = reshape(slice(x_theta, 0, i, 1), Shape{N, 3});
        Value gt = Value::leaf(slice(batch.x0, 0, i, 1).reshaped(Shape{N, 3}), false);
        dsa_rows.push_back(dsa_loss(row, gt, *dsa));
        ts.push_back(batch.times[i].t);
        rs.push_back(batch.times[i].r);
        lam_sum += lambda_weight(batch.times[i].t, batch.times[i].r, *dsa);
    }
    if (dsa_rows.empty()) {
        out.total = loss_main;
        return out;
    }
    double dsa_sum = 0;
    for (const auto& d : dsa_rows) dsa_sum += d.data().scalar_value();
    out.loss_dsa = dsa_sum / double(dsa_rows.size());
    out.scale_s = out.loss_main / (out.loss_dsa + dsa->delta);
    out.lambda_mean = lam_sum / double(B);

    out.total = total_loss(loss_main, dsa_rows, ts, rs, B, *dsa);
    return out;
}

LossBuild fm_loss(const ModelConfig& mcfg, const ParamStore& params, const TrainBatch& batch,
                  const GuidanceConfig& gcfg) {
    for (const auto& tp : batch.times)
        if (tp.branch != Branch::FM) throw DataError("fm_loss: batch contains MF samples");
    return build_training_loss(mcfg, params, batch, gcfg, nullptr);
}

LossBuild mf_cfg_loss(const ModelConfig& mcfg, const ParamStore& params, const TrainBatch& batch,
                      const GuidanceConfig& gcfg) {
    for (const auto& tp : batch.times)
        if (tp.branch != Branch::MF) throw DataError("mf_cfg_loss: batch contains FM samples");
    return build_training_loss(mcfg, params, batch, gcfg, nullptr);
}

}  // namespace pmf
