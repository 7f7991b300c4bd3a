#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pmf/flow.hpp"
#include "pmf/train.hpp"
#include "model_fixtures.hpp"
#include "test_util.hpp"

using namespace pmf;
using namespace pmf::test;

TEST_CASE("time pairs: support, ordering, branch frequencies") {
    Rng rng(100);
    int mf = 0;
    const int n = 100000;
    double t_sum = 0;
    for (int i = 0; i < n; ++i) {
        TimePair tp = sample_time_pair(rng);
        CHECK(tp.t > 0.0);
        CHECK(tp.t < 1.0);
        CHECK(tp.r > 0.0);
        CHECK(tp.r <= tp.t);
        if (tp.branch == Branch::MF) {
            CHECK(tp.t > tp.r);
            ++mf;
        } else {
            CHECK(tp.t == tp.r);
        }
        t_sum += tp.t;
    }
    double mf_frac = double(mf) / n;
    CHECK(std::abs(mf_frac - 0.5) < 0.01);

    // Monte-Carlo oracle for the marginal logit-normal mean: each draw is
    // sigmoid(N(-0.4,1)); the FM t and the MF max/min pool back to that law.
    Rng oracle(999);
    double ref = 0;
    const int m = 1000000;
    for (int i = 0; i < m; ++i) ref += 1.0 / (1.0 + std::exp(0.4 - oracle.next_normal()));
    ref /= m;
    // mean of t mixes 0.5*E[a] + 0.5*E[max(a,b)]; compare the pooled (t+r)/2
    // which recovers the marginal mean exactly
    Rng rng2(101);
    double pooled = 0;
    for (int i = 0; i < n; ++i) {
        TimePair tp = sample_time_pair(rng2);
        pooled += 0.5 * (tp.t + tp.r);
    }
    pooled /= n;
    CHECK(std::abs(pooled - ref) < 0.01);
    (void)t_sum;
}

TEST_CASE("interpolate endpoints and direct example") {
    Rng rng(7);
    Tensor x0 = randn(Shape{2, 4, 3}, rng);
    Tensor eps = randn(Shape{2, 4, 3}, rng);

    auto [xt0, v0] = interpolate(x0, eps, Tensor::from_vec(Shape{2}, {0, 0}));
    CHECK(max_abs_diff(xt0, x0) == 0.0);
    auto [xt1, v1] = interpolate(x0, eps, Tensor::from_vec(Shape{2}, {1, 1}));
    CHECK(max_abs_diff(xt1, eps) == 0.0);
    CHECK(max_abs_diff(v0, sub(eps, x0)) == 0.0);

    Tensor a = Tensor::from_vec(Shape{1, 1, 3}, {0, 0, 0});
    Tensor b = Tensor::from_vec(Shape{1, 1, 3}, {2, 2, 2});
    auto [xt, vt] = interpolate(a, b, Tensor::from_vec(Shape{1}, {0.25}));
    for (int k = 0; k < 3; ++k) {
        CHECK(xt.at(k) == doctest::Approx(0.5));
        CHECK(vt.at(k) == 2.0);
    }

    CHECK_THROWS_AS(interpolate(a, b, Tensor::from_vec(Shape{1}, {1.5})), DataError);
}

TEST_CASE("cfg_tangent composition") {
    GuidanceConfig g;
    Rng rng(8);
    Tensor v = randn(Shape{1, 4, 3}, rng);
    Tensor uc = randn(Shape{1, 4, 3}, rng);
    Tensor uu = randn(Shape{1, 4, 3}, rng);

    // omega=1, kappa=0 recovers the FM target
    g.omega = 1.0;
    g.kappa = 0.0;
    CHECK(max_abs_diff(cfg_tangent(v, uc, uu, g), v) == 0.0);

    // kappa and (1-omega-kappa) cancel when cond == uncond
    g.kappa = 0.5;
    CHECK(max_abs_diff(cfg_tangent(v, uc, uc, g), v) < 1e-15);

    // direct arithmetic: [1,0] + 0.5[0,1] - 0.5[0,-1] = [1,1]
    Tensor v2 = Tensor::from_vec(Shape{1, 1, 2}, {1, 0});
    Tensor c2 = Tensor::from_vec(Shape{1, 1, 2}, {0, 1});
    Tensor u2 = Tensor::from_vec(Shape{1, 1, 2}, {0, -1});
    Tensor r2 = cfg_tangent(v2, c2, u2, g);
    CHECK(r2.at(0) == 1.0);
    CHECK(r2.at(1) == 1.0);
}

TEST_CASE("adaptive weight") {
    GuidanceConfig g;
    g.weight_p = 0.0;
    CHECK(adaptive_weight(3.7, g) == 1.0);
    g.weight_p = 1.0;
    g.weight_c = 1e-3;
    CHECK(adaptive_weight(0.0, g) == doctest::Approx(1000.0));
    double prev = adaptive_weight(0.0, g);
    for (double d : {0.1, 0.5, 2.0, 10.0}) {
        double w = adaptive_weight(d, g);
        CHECK(w < prev);
        prev = w;
    }
}

TEST_CASE("fm_loss at zero init regresses toward v_t") {
    ModelConfig cfg = tiny_model();
    ParamStore ps = init_params(cfg, 5);  // zero-init head: u == 0
    GuidanceConfig g;
    g.label_dropout = 0;
    TrainBatch b = make_batch(cfg, 3, 50, Branch::FM);

    LossBuild l = fm_loss(cfg, ps, b, g);
    // raw squared error equals mean ||v_t||^2 (u == 0 and the target is v_t)
    Tensor v_t = sub(b.eps, b.x0);
    double want = 0;
    for (int64_t i = 0; i < v_t.numel(); ++i) want += v_t.at(i) * v_t.at(i);
    want /= 3.0;
    CHECK(l.raw_sq_mean == doctest::Approx(want).epsilon(1e-12));

    // exact-match batch: x0 == eps makes the target zero, so the loss is zero
    TrainBatch b2 = make_batch(cfg, 2, 51, Branch::FM);
    b2.eps = b2.x0.clone();
    LossBuild l2 = fm_loss(cfg, ps, b2, g);
    CHECK(l2.total.data().scalar_value() == 0.0);
    CHECK(l.total.data().scalar_value() > 0.0);
}

TEST_CASE("one optimizer step decreases the FM loss") {
    ModelConfig cfg = tiny_model();
    ParamStore ps = init_params(cfg, 6);
    perturb_params(ps, 61, 0.02);
    GuidanceConfig g;
    g.label_dropout = 0;
    TrainBatch b = make_batch(cfg, 2, 52, Branch::FM);

    LossBuild l0 = fm_loss(cfg, ps, b, g);
    double before = l0.total.data().scalar_value();
    backward(l0.total);
    std::map<std::string, Tensor> grads;
    for (const auto& n : ps.names()) grads[n] = l0.bank->grad(n);
    AdamW opt;
    opt.init(ps);
    opt.step(ps, grads, 1e-3);
    double after = fm_loss(cfg, ps, b, g).total.data().scalar_value();
    CHECK(after < before);
}

TEST_CASE("FM/MF degeneracy: r == t collapses the pipelines to the same value") {
    ModelConfig cfg = tiny_model();
    ParamStore ps = init_params(cfg, 7);
    perturb_params(ps, 71);
    GuidanceConfig g;
    g.label_dropout = 0;

    TrainBatch fm = make_batch(cfg, 3, 53, Branch::FM);
    TrainBatch mf = fm;
    for (auto& tp : mf.times) tp.branch = Branch::MF;  // same times, r == t

    double a = fm_loss(cfg, ps, fm, g).total.data().scalar_value();
    double b = mf_cfg_loss(cfg, ps, mf, g).total.data().scalar_value();
    CHECK(std::abs(a - b) < 1e-12);
}

TEST_CASE("stop-gradient: the target path contributes no gradients") {
    ModelConfig cfg = tiny_model();
    ParamStore ps = init_params(cfg, 8);
    perturb_params(ps, 81);
    GuidanceConfig g;
    g.label_dropout = 0;
    TrainBatch b = make_batch(cfg, 2, 54, Branch::MF);

    LossBuild l = mf_cfg_loss(cfg, ps, b, g);
    backward(l.total);

    // replay: same forward, target replaced by a numerically equal constant
    auto [x_t, v_t] = interpolate(b.x0, b.eps, b.t_vec());
    Tensor u_c = forward_u_plain(cfg, ps, x_t, b.t_vec(), b.t_vec(), CondBatch::plain(b.desc));
    Tensor u_u = forward_u_plain(cfg, ps, x_t, b.t_vec(), b.t_vec(), CondBatch::all_null(b.desc));
    Tensor vt_tilde = cfg_tangent(v_t, u_c, u_u, g);
    JvpResult jr = forward_u_jvp(cfg, ps, x_t, b.r_vec(), b.t_vec(), CondBatch::plain(b.desc), vt_tilde);
    Tensor tmr = sub(b.t_vec(), b.r_vec()).reshaped(Shape{2, 1, 1});
    Tensor u_tgt = sub(vt_tilde, mul(tmr, jr.dudt));

    Bank<Value> bank(ps);
    auto bundle = encode_condition(cfg, bank, b.desc, b.drop_mask);
    Value u = forward_u(cfg, bank, Value::leaf(x_t), Value::leaf(b.r_vec()), Value::leaf(b.t_vec()),
                        bundle);
    Value delta = sub(u, Value::leaf(u_tgt));
    Value sq = sum_axis(sum_axis(mul(delta, delta), 2), 1);
    Tensor w = Tensor::uninit(Shape{2});
    for (int i = 0; i < 2; ++i) w.mut()[i] = adaptive_weight(sq.data().at(i), g) / 2.0;
    Value manual = sum_all(mul(sq, Value::leaf(w)));
    backward(manual);

    for (const auto& n : ps.names()) {
        INFO(n);
        CHECK(max_abs_diff(l.bank->grad(n), bank.grad(n)) < 1e-12);
    }
}

TEST_CASE("mean-flow target matches the closed form on a constant-field network") {
    // f(x, r, t) = x - (t - r) * k with a 2-parameter constant field k
    Rng rng(9);
    Tensor k = Tensor::from_vec(Shape{1, 2}, {0.3, -1.1});
    Tensor x0 = randn(Shape{1, 2}, rng);
    Tensor vt = randn(Shape{1, 2}, rng);
    double t = 0.8, r = 0.25;

    auto f = [&](const auto& x, const auto& rr, const auto& tt) {
        return sub(x, mul(sub(tt, rr), constant<std::decay_t<decltype(x)>>(k)));
    };

    Dual xd(x0, vt);
    Dual rd(Tensor::from_vec(Shape{1, 1}, {r}));
    Dual td(Tensor::from_vec(Shape{1, 1}, {t}), Tensor::from_vec(Shape{1, 1}, {1.0}));
    Dual u = f(xd, rd, td);

    // analytic: du/dt along (vt, 0, 1) = vt - k; u_tgt = vt - (t-r)(vt - k)
    Tensor dudt = u.tangent();
    Tensor want_dudt = sub(vt, k);
    CHECK(max_abs_diff(dudt, want_dudt) < 1e-12);

    Tensor u_tgt = sub(vt, scalar_mul(dudt, t - r));
    Tensor want = sub(vt, scalar_mul(want_dudt, t - r));
    CHECK(max_abs_diff(u_tgt, want) < 1e-10);
}

TEST_CASE("condition dropout reaches the null embeddings' gradients") {
    ModelConfig cfg = tiny_model();
    ParamStore ps = init_params(cfg, 10);
    perturb_params(ps, 101);
    GuidanceConfig g;
    g.label_dropout = 0;
    TrainBatch b = make_batch(cfg, 2, 55, Branch::MF);
    b.drop_mask = {1, 0};

    LossBuild l = build_training_loss(cfg, ps, b, g, nullptr);
    backward(l.total);
    CHECK(l2_norm(l.bank->grad("cond.null_global")) > 0.0);
    CHECK(l2_norm(l.bank->grad("cond.null_ctx")) > 0.0);
}

TEST_CASE("training steps stay finite on the tiny task") {
    ModelConfig cfg = tiny_model();
    cfg.points = 8;  // procedural sampler minimum
    RunConfig rc;
    rc.model = cfg;
    rc.data.n_points = cfg.points;
    rc.model.points = cfg.points;
    rc.data.n_train = 8;
    rc.data.n_test = 2;
    rc.optimizer.batch = 4;
    rc.optimizer.total_steps = 0;
    rc.guidance.label_dropout = 0.1;

    Splits s = make_splits(rc.data.n_train, rc.data.n_test, rc.data.split_seed);
    std::vector<Tensor> pts;
    for (size_t i = 0; i < s.train.specs.size(); ++i) {
        Rng prng(s.train.point_seeds[i]);
        pts.push_back(generate_sample(s.train.specs[i], cfg.points, prng).first);
    }
    Tensor desc = descriptor_batch(s.train.specs);

    ParamStore ps = init_params(cfg, rc.run_seed);
    AdamW opt;
    opt.init(ps);
    for (int step = 0; step < 20; ++step) {
        TrainBatch b = assemble_batch(rc, pts, desc, step);
        LossBuild l = build_training_loss(cfg, ps, b, rc.guidance, &rc.dsa);
        double total = l.total.data().scalar_value();
        CHECK(std::isfinite(total));
        backward(l.total);
        std::map<std::string, Tensor> grads;
        for (const auto& n : ps.names()) grads[n] = l.bank->grad(n);
        for (const auto& [_, gr] : grads) CHECK(gr.all_finite());
        clip_global_norm(grads, 1.0);
        opt.step(ps, grads, 1e-3);
    }
}
