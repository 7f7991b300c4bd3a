#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pmf/backbone.hpp"
#include "pmf/rng.hpp"
#include "test_util.hpp"

using namespace pmf;
using namespace pmf::test;

namespace {

ModelConfig tiny_config() {
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

// breaks the zero initializations so gradients reach every parameter
void perturb_params(ParamStore& ps, uint64_t seed, double std = 0.05) {
    Rng rng(seed, 0xabc);
    for (const auto& n : ps.names()) {
        Tensor& t = ps.at(n);
        double* p = t.mut();
        for (int64_t i = 0; i < t.numel(); ++i) p[i] += std * rng.next_normal();
    }
}

Tensor random_desc(int64_t b, Rng& rng) { return rand_uniform(Shape{b, 13}, rng); }

struct Probe {
    Tensor x, r, t, desc;
};

Probe random_probe(const ModelConfig& cfg, int64_t B, Rng& rng) {
    Probe p;
    p.x = randn(Shape{B, cfg.points, 3}, rng);
    p.t = Tensor::uninit(Shape{B});
    p.r = Tensor::uninit(Shape{B});
    for (int64_t i = 0; i < B; ++i) {
        double t = 0.2 + 0.7 * rng.next_uniform();
        p.t.mut()[i] = t;
        p.r.mut()[i] = rng.next_uniform() * (t - 0.05);
    }
    p.desc = random_desc(B, rng);
    return p;
}

}  // namespace

TEST_CASE("sinusoidal embedding basics") {
    Tensor z = Tensor::from_vec(Shape{1}, {0.0});
    Tensor e = sinusoidal_embed<Tensor>(z, 8);
    for (int i = 0; i < 4; ++i) CHECK(e.at(i) == 0.0);
    for (int i = 4; i < 8; ++i) CHECK(e.at(i) == 1.0);

    Rng rng(1);
    Tensor s = rand_uniform(Shape{5}, rng);
    Tensor emb = sinusoidal_embed<Tensor>(s, 32);
    for (int64_t i = 0; i < emb.numel(); ++i) {
        CHECK(emb.at(i) <= 1.0);
        CHECK(emb.at(i) >= -1.0);
    }

    // distinct times must be distinguishable
    Tensor e1 = sinusoidal_embed<Tensor>(Tensor::from_vec(Shape{1}, {0.1}), 32);
    Tensor e2 = sinusoidal_embed<Tensor>(Tensor::from_vec(Shape{1}, {0.9}), 32);
    double dot = 0, n1 = 0, n2 = 0;
    for (int i = 0; i < 32; ++i) {
        dot += e1.at(i) * e2.at(i);
        n1 += e1.at(i) * e1.at(i);
        n2 += e2.at(i) * e2.at(i);
    }
    CHECK(dot / std::sqrt(n1 * n2) < 0.999);

    CHECK_THROWS_AS(sinusoidal_embed<Tensor>(z, 7), ShapeError);
}

TEST_CASE("condition_vector structure") {
    ModelConfig cfg = tiny_config();
    ParamStore ps = init_params(cfg, 11);
    perturb_params(ps, 12);
    Rng rng(2);
    Tensor desc = random_desc(2, rng);
    Bank<Tensor> bank(ps);
    auto bundle = encode_condition(cfg, bank, desc, {0, 0});

    // r > t rejected
    Tensor t = Tensor::from_vec(Shape{2}, {0.5, 0.5});
    Tensor bad_r = Tensor::from_vec(Shape{2}, {0.2, 0.6});
    CHECK_THROWS_AS(condition_vector(cfg, bank, t, bad_r, bundle.global), DataError);

    // with zeroed time/dt MLPs the vector reduces to e_img
    ParamStore zeroed = init_params(cfg, 11);
    perturb_params(zeroed, 12);
    for (const char* n : {"time_mlp.l1.w", "time_mlp.l1.b", "time_mlp.l2.w", "time_mlp.l2.b",
                          "dt_mlp.l1.w", "dt_mlp.l1.b", "dt_mlp.l2.w", "dt_mlp.l2.b"}) {
        Tensor& w = zeroed.at(n);
        for (int64_t i = 0; i < w.numel(); ++i) w.mut()[i] = 0.0;
    }
    Bank<Tensor> zbank(zeroed);
    auto zbundle = encode_condition(cfg, zbank, desc, {0, 0});
    Tensor r = Tensor::from_vec(Shape{2}, {0.1, 0.5});
    Tensor c = condition_vector(cfg, zbank, t, r, zbundle.global);
    CHECK(max_abs_diff(c, zbundle.global) == 0.0);

    // changing only r moves the vector (nonzero dt branch)
    Tensor t1 = Tensor::from_vec(Shape{1}, {1.0});
    Tensor ra = Tensor::from_vec(Shape{1}, {0.0});
    Tensor rb = Tensor::from_vec(Shape{1}, {0.5});
    Tensor d1 = random_desc(1, rng);
    auto bu = encode_condition(cfg, bank, d1, {0});
    Tensor ca = condition_vector(cfg, bank, t1, ra, bu.global);
    Tensor cb = condition_vector(cfg, bank, t1, rb, bu.global);
    CHECK(max_abs_diff(ca, cb) > 1e-8);
}

TEST_CASE("condition_vector is linear in e_img at fixed times") {
    ModelConfig cfg = tiny_config();
    ParamStore ps = init_params(cfg, 13);
    perturb_params(ps, 14);
    Bank<Tensor> bank(ps);
    Rng rng(3);
    Tensor t = Tensor::from_vec(Shape{1}, {0.7});
    Tensor r = Tensor::from_vec(Shape{1}, {0.2});
    Tensor e1 = randn(Shape{1, cfg.hidden}, rng);
    Tensor e2 = randn(Shape{1, cfg.hidden}, rng);
    Tensor c1 = condition_vector(cfg, bank, t, r, e1);
    Tensor c2 = condition_vector(cfg, bank, t, r, e2);
    Tensor c12 = condition_vector(cfg, bank, t, r, add(e1, e2));
    // c(e1+e2) - c(e2) == c(e1) - c(0) termwise since e enters additively
    Tensor zero = Tensor(Shape{1, cfg.hidden}, 0.0);
    Tensor c0 = condition_vector(cfg, bank, t, r, zero);
    CHECK(max_abs_diff(sub(c12, c2), sub(c1, c0)) < 1e-12);
}

TEST_CASE("pma_adapt: zero-init residual, single MHSA pass, permutation equivariance") {
    ModelConfig cfg = tiny_config();
    ParamStore ps = init_params(cfg, 21);
    Bank<Tensor> bank(ps);
    Rng rng(4);
    Tensor desc = random_desc(1, rng);
    auto bundle = encode_condition(cfg, bank, desc, {0});

    uint64_t before = counters().mhsa_calls;
    auto outs = pma_adapt(cfg, bank, bundle.ctx);
    CHECK(counters().mhsa_calls == before + 1);
    CHECK(outs.size() == size_t(cfg.blocks));

    // psi output projections are zero-initialized: adapter output == base
    Tensor z_base = add(matmul(bundle.ctx, ps.at("pma.phi_in.w")), ps.at("pma.phi_in.b"));
    for (const auto& o : outs) CHECK(bitwise_equal(o, z_base));

    // permuting the M tokens permutes every output identically
    perturb_params(ps, 22);
    Bank<Tensor> bank2(ps);
    Tensor ctx = randn(Shape{1, cfg.ctx_tokens, cfg.cond_dim}, rng);
    std::vector<int64_t> perm{2, 0, 3, 1};
    Tensor ctx_p = Tensor::uninit(ctx.shape());
    for (int64_t m = 0; m < cfg.ctx_tokens; ++m)
        std::memcpy(ctx_p.mut() + m * cfg.cond_dim, ctx.data() + perm[m] * cfg.cond_dim,
                    sizeof(double) * cfg.cond_dim);
    auto a = pma_adapt(cfg, bank2, ctx);
    auto b = pma_adapt(cfg, bank2, ctx_p);
    for (int l = 0; l < cfg.blocks; ++l)
        for (int64_t m = 0; m < cfg.ctx_tokens; ++m)
            for (int64_t k = 0; k < cfg.hidden; ++k)
                CHECK(std::abs(b[l].at(m * cfg.hidden + k) -
                               a[l].at(perm[m] * cfg.hidden + k)) < 1e-9);
}

TEST_CASE("zero-init contract: blocks are the identity, the field is zero") {
    ModelConfig cfg = tiny_config();
    ParamStore ps = init_params(cfg, 31);
    Bank<Tensor> bank(ps);
    Rng rng(5);
    Probe p = random_probe(cfg, 2, rng);
    auto bundle = encode_condition(cfg, bank, p.desc, {0, 0});
    Tensor c = condition_vector(cfg, bank, p.t, p.r, bundle.global);
    auto ctxs = pma_adapt(cfg, bank, bundle.ctx);

    Tensor tokens = randn(Shape{2, cfg.points, cfg.hidden}, rng);
    for (int l = 0; l < cfg.blocks; ++l) {
        Tensor out = dit_block(cfg, bank, l, tokens, c, ctxs[l]);
        CHECK(bitwise_equal(out, tokens));  // gates are zero-initialized
    }

    Tensor u = forward_u(cfg, bank, p.x, p.r, p.t, bundle);
    for (int64_t i = 0; i < u.numel(); ++i) CHECK(u.at(i) == 0.0);
}

TEST_CASE("forward_u: determinism, NaN rejection, range checks") {
    ModelConfig cfg = tiny_config();
    ParamStore ps = init_params(cfg, 41);
    perturb_params(ps, 42);
    Rng rng(6);
    Probe p = random_probe(cfg, 2, rng);
    CondBatch cond = CondBatch::plain(p.desc);

    Tensor u1 = forward_u_plain(cfg, ps, p.x, p.r, p.t, cond);
    Tensor u2 = forward_u_plain(cfg, ps, p.x, p.r, p.t, cond);
    CHECK(bitwise_equal(u1, u2));

    Tensor bad = p.x.clone();
    bad.mut()[0] = std::nan("");
    CHECK_THROWS_AS(forward_u_plain(cfg, ps, bad, p.r, p.t, cond), NumericError);

    Tensor t_bad = p.t.clone();
    t_bad.mut()[0] = 1.5;
    CHECK_THROWS_AS(forward_u_plain(cfg, ps, p.x, p.r, t_bad, cond), DataError);
}

TEST_CASE("forward_u is permutation equivariant over point tokens") {
    ModelConfig cfg = tiny_config();
    ParamStore ps = init_params(cfg, 51);
    perturb_params(ps, 52);
    Rng rng(7);
    Probe p = random_probe(cfg, 1, rng);
    CondBatch cond = CondBatch::plain(p.desc);
    Tensor u = forward_u_plain(cfg, ps, p.x, p.r, p.t, cond);

    for (int trial = 0; trial < 5; ++trial) {
        std::vector<int64_t> perm(cfg.points);
        for (int64_t i = 0; i < cfg.points; ++i) perm[i] = i;
        for (int64_t i = cfg.points - 1; i > 0; --i)
            std::swap(perm[i], perm[rng.next_below(uint64_t(i + 1))]);

        Tensor xp = Tensor::uninit(p.x.shape());
        for (int64_t i = 0; i < cfg.points; ++i)
            std::memcpy(xp.mut() + i * 3, p.x.data() + perm[i] * 3, sizeof(double) * 3);
        Tensor up = forward_u_plain(cfg, ps, xp, p.r, p.t, cond);
        for (int64_t i = 0; i < cfg.points; ++i)
            for (int k = 0; k < 3; ++k)
                CHECK(std::abs(up.at(i * 3 + k) - u.at(perm[i] * 3 + k)) < 1e-9);
    }
}

TEST_CASE("null condition rows use the learned null embeddings") {
    ModelConfig cfg = tiny_config();
    ParamStore ps = init_params(cfg, 61);
    perturb_params(ps, 62);
    Rng rng(8);
    Tensor desc = random_desc(2, rng);
    Bank<Tensor> bank(ps);
    auto mixed = encode_condition(cfg, bank, desc, {0, 1});
    auto plain = encode_condition(cfg, bank, desc, {0, 0});

    // row 0 matches the plain encoding, row 1 matches the null embedding
    CHECK(max_abs_diff(slice(mixed.global, 0, 0, 1), slice(plain.global, 0, 0, 1)) == 0.0);
    Tensor null_g = ps.at("cond.null_global").reshaped(Shape{1, cfg.hidden});
    CHECK(max_abs_diff(slice(mixed.global, 0, 1, 1), null_g) == 0.0);
    Tensor null_c = ps.at("cond.null_ctx").reshaped(Shape{1, cfg.ctx_tokens, cfg.cond_dim});
    CHECK(max_abs_diff(slice(mixed.ctx, 0, 1, 1), null_c) == 0.0);
}

TEST_CASE("full-backbone JVP matches directional finite differences") {
    ModelConfig cfg = tiny_config();
    ParamStore ps = init_params(cfg, 71);
    perturb_params(ps, 72);
    Rng rng(9);
    const double h = 1e-4;
    for (int probe = 0; probe < 5; ++probe) {
        Probe p = random_probe(cfg, 1, rng);
        CondBatch cond = CondBatch::plain(p.desc);
        Tensor tangent = randn(p.x.shape(), rng);

        JvpResult jr = forward_u_jvp(cfg, ps, p.x, p.r, p.t, cond, tangent);
        // primal equals a plain forward bitwise
        CHECK(bitwise_equal(jr.u, forward_u_plain(cfg, ps, p.x, p.r, p.t, cond)));

        Tensor tp = add_scalar(p.t, h);
        Tensor tm = add_scalar(p.t, -h);
        Tensor up = forward_u_plain(cfg, ps, add(p.x, scalar_mul(tangent, h)), p.r, tp, cond);
        Tensor um = forward_u_plain(cfg, ps, add(p.x, scalar_mul(tangent, -h)), p.r, tm, cond);
        Tensor fd = scalar_mul(sub(up, um), 1.0 / (2 * h));
        CHECK(max_abs_diff(jr.dudt, fd) / std::max(1.0, l2_norm(fd)) < 1e-3);
    }
}

TEST_CASE("reverse-mode parameter gradients match finite differences") {
    ModelConfig cfg = tiny_config();
    ParamStore ps = init_params(cfg, 81);
    perturb_params(ps, 82);
    Rng rng(10);
    Probe p = random_probe(cfg, 2, rng);
    Tensor proj = randn(Shape{2, cfg.points, 3}, rng);  // fixed projection to a scalar

    auto loss_value = [&](const ParamStore& params) {
        Tensor u = forward_u_plain(cfg, params, p.x, p.r, p.t, CondBatch::plain(p.desc));
        return sum_all(mul(u, proj)).scalar_value();
    };

    Bank<Value> bank(ps);
    auto bundle = encode_condition(cfg, bank, p.desc, {0, 0});
    Value u = forward_u(cfg, bank, Value::leaf(p.x), Value::leaf(p.r), Value::leaf(p.t), bundle);
    backward(sum_all(mul(u, Value::leaf(proj))));

    const double h = 1e-5;
    Rng pick(11);
    for (const char* name :
         {"token_in.w", "blk.0.attn.qkv.w", "blk.1.ffn.l1.w", "blk.0.mod.w", "head.w",
          "pma.mhsa.qkv.w", "pma.psi.1.l2.w", "cond.null_global", "time_mlp.l1.w", "img_proj.w",
          "cond.ctx_table", "blk.1.cross.kv.w"}) {
        Tensor g = bank.grad(name);
        for (int k = 0; k < 3; ++k) {
            int64_t idx = int64_t(pick.next_below(uint64_t(g.numel())));
            ParamStore mod = init_params(cfg, 81);
            perturb_params(mod, 82);
            mod.at(name).mut()[idx] += h;
            double up = loss_value(mod);
            mod.at(name).mut()[idx] -= 2 * h;
            double dn = loss_value(mod);
            double fd = (up - dn) / (2 * h);
            INFO(name << "[" << idx << "]");
            if (std::abs(fd) < 1e-9 && std::abs(g.at(idx)) < 1e-9) continue;
            CHECK(rel_err(g.at(idx), fd, 1e-7) < 1e-4);
        }
    }
}

TEST_CASE("desk-default parameter count is pinned") {
    ModelConfig cfg;  // desk defaults
    ParamStore ps = init_params(cfg, 1);
    // golden value, computed once from the layout and frozen
    CHECK(ps.total_scalars() == 561331);
}
