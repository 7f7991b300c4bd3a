#include "pmf/backbone.hpp"

#include <cmath>

namespace pmf {

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v <= 0) throw DataError(std::string("ModelConfig: ") + name + " must be positive");
    };
    positive(hidden, "hidden");
    positive(blocks, "blocks");
    positive(heads, "heads");
    positive(points, "points");
    positive(ctx_tokens, "ctx_tokens");
    positive(cond_dim, "cond_dim");
    positive(pma_dim, "pma_dim");
    positive(pma_heads, "pma_heads");
    if (ffn_mult <= 0) throw DataError("ModelConfig: ffn_mult must be positive");
    if (hidden % heads != 0) throw DataError("ModelConfig: hidden not divisible by heads");
    if (pma_dim % pma_heads != 0) throw DataError("ModelConfig: pma_dim not divisible by pma_heads");
}

BackboneCounters& counters() {
    thread_local BackboneCounters c;
    return c;
}

// ---------------------------------------------------------------------------
// parameter initialization
// ---------------------------------------------------------------------------
namespace {

Tensor init_linear_w(int64_t fan_in, int64_t fan_out, Rng& rng) {
    Tensor w = Tensor::uninit(Shape{fan_in, fan_out});
    double std = 1.0 / std::sqrt(double(fan_in));
    double* p = w.mut();
    for (int64_t i = 0; i < w.numel(); ++i) p[i] = std * rng.next_normal();
    return w;
}

Tensor init_table(const Shape& s, Rng& rng, double std = 0.02) {
    Tensor t = Tensor::uninit(s);
    double* p = t.mut();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = std * rng.next_normal();
    return t;
}

void add_linear(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out, Rng& rng,
                bool zero_init = false) {
    ps.add(prefix + ".w", zero_init ? Tensor(Shape{in, out}, 0.0) : init_linear_w(in, out, rng));
    ps.add(prefix + ".b", Tensor(Shape{out}, 0.0));
}

}  // namespace

ParamStore init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed, /*stream=*/0x70617261);
    ParamStore ps;
    const int H = cfg.hidden;
    const int D = cfg.cond_dim;
    const int M = cfg.ctx_tokens;
    const int Hm = cfg.pma_dim;
    const int F = cfg.ffn_dim();

    add_linear(ps, "token_in", 3, H, rng);
    // zero-initialized output head: the untrained field is identically zero
    add_linear(ps, "head", H, 3, rng, /*zero_init=*/true);

    add_linear(ps, "time_mlp.l1", H, H, rng);
    add_linear(ps, "time_mlp.l2", H, H, rng);
    add_linear(ps, "dt_mlp.l1", H, H, rng);
    add_linear(ps, "dt_mlp.l2", H, H, rng);

    add_linear(ps, "img_proj", D, H, rng);
    ps.add("cond.ctx_table", init_table(Shape{M, D}, rng));
    ps.add("cond.ctx_proj.w", init_linear_w(D, int64_t(M) * D, rng));
    ps.add("cond.null_global", init_table(Shape{H}, rng));
    ps.add("cond.null_ctx", init_table(Shape{M, D}, rng));

    add_linear(ps, "pma.phi_in", D, H, rng);
    add_linear(ps, "pma.phi_mhsa", H, Hm, rng);
    add_linear(ps, "pma.mhsa.qkv", Hm, 3 * Hm, rng);
    add_linear(ps, "pma.mhsa.out", Hm, Hm, rng);
    for (int l = 0; l < cfg.blocks; ++l) {
        std::string p = "pma.psi." + std::to_string(l);
        add_linear(ps, p + ".l1", Hm, H, rng);
        add_linear(ps, p + ".l2", H, H, rng, /*zero_init=*/true);  // residual starts inert
    }

    for (int l = 0; l < cfg.blocks; ++l) {
        std::string p = "blk." + std::to_string(l);
        add_linear(ps, p + ".mod", H, 9 * H, rng, /*zero_init=*/true);
        add_linear(ps, p + ".attn.qkv", H, 3 * H, rng);
        add_linear(ps, p + ".attn.out", H, H, rng);
        add_linear(ps, p + ".cross.q", H, H, rng);
        add_linear(ps, p + ".cross.kv", H, 2 * H, rng);
        add_linear(ps, p + ".cross.out", H, H, rng);
        add_linear(ps, p + ".ffn.l1", H, F, rng);
        add_linear(ps, p + ".ffn.l2", F, H, rng);
    }
    return ps;
}

// ---------------------------------------------------------------------------
// templated forward pieces
// ---------------------------------------------------------------------------
namespace {

template <class T>
T linear(Bank<T>& bank, const std::string& prefix, const T& x) {
    return add(matmul(x, bank(prefix + ".w")), bank(prefix + ".b"));
}

template <class T>
T mlp_silu(Bank<T>& bank, const std::string& prefix, const T& x) {
    return linear(bank, prefix + ".l2", silu(linear(bank, prefix + ".l1", x)));
}

template <class T>
T mlp_gelu(Bank<T>& bank, const std::string& prefix, const T& x) {
    return linear(bank, prefix + ".l2", gelu(linear(bank, prefix + ".l1", x)));
}

// q: (B,S,Hq)  k,v: (B,S2,Hq/Hv) -> (B,S,Hv)
template <class T>
T attention_core(const T& q, const T& k, const T& v, int heads) {
    const Shape& sq = primal(q).shape();
    const Shape& sv = primal(v).shape();
    int64_t B = sq.d[0], S = sq.d[1], Hq = sq.d[2];
    int64_t S2 = sv.d[1], Hv = sv.d[2];
    int64_t dk = Hq / heads, dv = Hv / heads;

    T qh = transpose(reshape(q, Shape{B, S, heads, dk}), 1, 2);
    T kh = transpose(reshape(k, Shape{B, S2, heads, dk}), 1, 2);
    T vh = transpose(reshape(v, Shape{B, S2, heads, dv}), 1, 2);
    T scores = scalar_mul(matmul(qh, transpose(kh, 2, 3)), 1.0 / std::sqrt(double(dk)));
    T att = softmax(scores);
    T out = matmul(att, vh);  // (B,h,S,dv)
    return reshape(transpose(out, 1, 2), Shape{B, S, Hv});
}

}  // namespace

template <class T>
T sinusoidal_embed(const T& s, int dim) {
    if (dim % 2 != 0) throw ShapeError("sinusoidal_embed: dim must be even, got " + std::to_string(dim));
    const Shape& sh = primal(s).shape();
    if (sh.rank != 1) throw ShapeError("sinusoidal_embed: expected rank-1 input, got " + sh.str());
    int64_t B = sh.d[0];
    int half = dim / 2;
    Tensor freqs = Tensor::uninit(Shape{1, half});
    double* f = freqs.mut();
    for (int i = 0; i < half; ++i) f[i] = std::exp(-std::log(10000.0) * double(i) / double(half));
    // inputs live in [0,1]; spread phases across the frequency bank (the x100
    // scale keeps finite-difference probes of the time derivative well inside
    // the central-difference truncation budget)
    T arg = mul(scalar_mul(reshape(s, Shape{B, 1}), 100.0), constant<T>(freqs));
    return concat(sin(arg), cos(arg), 1);
}

template <class T>
CondBundleT<T> encode_condition(const ModelConfig& cfg, Bank<T>& bank, const Tensor& desc,
                                const std::vector<uint8_t>& null_mask) {
    const Shape& s = desc.shape();
    if (s.rank != 2 || s.d[1] != cfg.cond_dim)
        throw ShapeError("encode_condition: descriptor shape " + s.str() + ", expected (B," +
                         std::to_string(cfg.cond_dim) + ")");
    int64_t B = s.d[0];
    if (static_cast<int64_t>(null_mask.size()) != B)
        throw ShapeError("encode_condition: null_mask size mismatch");

    T d = constant<T>(desc);
    T e_img = linear(bank, "img_proj", layer_normalize(d));  // (B,H)
    // context tokens: learned table plus a per-token linear read of the descriptor
    T ctx = add(reshape(matmul(d, bank("cond.ctx_proj.w")), Shape{B, cfg.ctx_tokens, cfg.cond_dim}),
                bank("cond.ctx_table"));

    bool any_null = false;
    for (uint8_t m : null_mask) any_null = any_null || (m != 0);
    if (any_null) {
        Tensor m1 = Tensor::uninit(Shape{B, 1});
        Tensor k1 = Tensor::uninit(Shape{B, 1});
        for (int64_t i = 0; i < B; ++i) {
            m1.mut()[i] = null_mask[i] ? 1.0 : 0.0;
            k1.mut()[i] = null_mask[i] ? 0.0 : 1.0;
        }
        T eg = reshape(bank("cond.null_global"), Shape{1, cfg.hidden});
        e_img = add(mul(e_img, constant<T>(k1)), mul(eg, constant<T>(m1)));
        Tensor m2 = m1.reshaped(Shape{B, 1, 1});
        Tensor k2 = k1.reshaped(Shape{B, 1, 1});
        T ec = reshape(bank("cond.null_ctx"), Shape{1, cfg.ctx_tokens, cfg.cond_dim});
        ctx = add(mul(ctx, constant<T>(k2)), mul(ec, constant<T>(m2)));
    }
    return CondBundleT<T>{std::move(e_img), std::move(ctx)};
}

template <class T>
T condition_vector(const ModelConfig& cfg, Bank<T>& bank, const T& t, const T& r, const T& e_img) {
    const Tensor& tp = primal(t);
    const Tensor& rp = primal(r);
    for (int64_t i = 0; i < tp.numel(); ++i)
        if (rp.data()[i] > tp.data()[i])
            throw DataError("condition_vector: r > t at element " + std::to_string(i) + " (r=" +
                            std::to_string(rp.data()[i]) + ", t=" + std::to_string(tp.data()[i]) + ")");
    T et = mlp_silu(bank, "time_mlp", sinusoidal_embed(t, cfg.hidden));
    T edt = mlp_silu(bank, "dt_mlp", sinusoidal_embed(sub(t, r), cfg.hidden));
    return add(add(et, edt), e_img);
}

template <class T>
std::vector<T> pma_adapt(const ModelConfig& cfg, Bank<T>& bank, const T& ctx) {
    const Shape& s = primal(ctx).shape();
    if (s.rank != 3 || s.d[1] != cfg.ctx_tokens || s.d[2] != cfg.cond_dim)
        throw ShapeError("pma_adapt: ctx shape " + s.str());
    T z_base = linear(bank, "pma.phi_in", ctx);       // (B,M,H)
    T hm = linear(bank, "pma.phi_mhsa", z_base);      // (B,M,Hm)
    T qkv = linear(bank, "pma.mhsa.qkv", hm);         // (B,M,3Hm)
    int64_t Hm = cfg.pma_dim;
    T q = slice(qkv, 2, 0, Hm);
    T k = slice(qkv, 2, Hm, Hm);
    T v = slice(qkv, 2, 2 * Hm, Hm);
    // token interactions happen once here, shared by every DiT layer
    T a = linear(bank, "pma.mhsa.out", attention_core(q, k, v, cfg.pma_heads));
    counters().mhsa_calls++;

    std::vector<T> outs;
    outs.reserve(cfg.blocks);
    for (int l = 0; l < cfg.blocks; ++l)
        outs.push_back(add(z_base, mlp_gelu(bank, "pma.psi." + std::to_string(l), a)));
    return outs;
}

template <class T>
T dit_block(const ModelConfig& cfg, Bank<T>& bank, int layer, const T& tokens, const T& c,
            const T& ctx) {
    const int64_t H = cfg.hidden;
    const int64_t B = primal(tokens).shape().d[0];
    std::string p = "blk." + std::to_string(layer);

    T mod = linear(bank, p + ".mod", silu(c));  // (B,9H)
    auto chunk = [&](int i) { return reshape(slice(mod, 1, i * H, H), Shape{B, 1, H}); };

    auto modulate = [&](const T& x, const T& shift, const T& scale) {
        return add(mul(rms_normalize(x), add_scalar(scale, 1.0)), shift);
    };

    T x = tokens;
    {
        T h = modulate(x, chunk(0), chunk(1));
        T qkv = linear(bank, p + ".attn.qkv", h);
        T q = slice(qkv, 2, 0, H);
        T k = slice(qkv, 2, H, H);
        T v = slice(qkv, 2, 2 * H, H);
        T sa = linear(bank, p + ".attn.out", attention_core(q, k, v, cfg.heads));
        x = add(x, mul(chunk(2), sa));
    }
    {
        T h = modulate(x, chunk(3), chunk(4));
        T q = linear(bank, p + ".cross.q", h);
        T kv = linear(bank, p + ".cross.kv", ctx);
        T k = slice(kv, 2, 0, H);
        T v = slice(kv, 2, H, H);
        T ca = linear(bank, p + ".cross.out", attention_core(q, k, v, cfg.heads));
        x = add(x, mul(chunk(5), ca));
    }
    {
        T h = modulate(x, chunk(6), chunk(7));
        T f = linear(bank, p + ".ffn.l2", silu(linear(bank, p + ".ffn.l1", h)));
        x = add(x, mul(chunk(8), f));
    }
    return x;
}

template <class T>
T forward_u(const ModelConfig& cfg, Bank<T>& bank, const T& x_t, const T& r, const T& t,
            const CondBundleT<T>& cond) {
    const Tensor& xp = primal(x_t);
    const Tensor& rp = primal(r);
    const Tensor& tp = primal(t);
    if (xp.shape().rank != 3 || xp.shape()[2] != 3)
        throw ShapeError("forward_u: x_t must be (B,N,3), got " + xp.shape().str());
    int64_t B = xp.shape()[0];
    if (rp.numel() != B || tp.numel() != B)
        throw ShapeError("forward_u: r/t must have one entry per batch element");
    if (!xp.all_finite() || !rp.all_finite() || !tp.all_finite())
        throw NumericError("forward_u: non-finite input");
    for (int64_t i = 0; i < B; ++i) {
        double ri = rp.data()[i], ti = tp.data()[i];
        if (ri < 0.0 || ti > 1.0 || ri > ti)
            throw DataError("forward_u: require 0 <= r <= t <= 1, got (r=" + std::to_string(ri) +
                            ", t=" + std::to_string(ti) + ") at batch " + std::to_string(i));
    }
    counters().forward_calls++;

    std::vector<T> ctxs = pma_adapt(cfg, bank, cond.ctx);
    T c = condition_vector(cfg, bank, t, r, cond.global);
    T tokens = linear(bank, "token_in", x_t);
    for (int l = 0; l < cfg.blocks; ++l) tokens = dit_block(cfg, bank, l, tokens, c, ctxs[l]);
    return linear(bank, "head", rms_normalize(tokens));
}

Tensor forward_u_plain(const ModelConfig& cfg, const ParamStore& params, const Tensor& x_t,
                       const Tensor& r, const Tensor& t, const CondBatch& cond) {
    Bank<Tensor> bank(params);
    CondBundleT<Tensor> bundle = encode_condition(cfg, bank, cond.desc, cond.null_mask);
    return forward_u(cfg, bank, x_t, r, t, bundle);
}

JvpResult forward_u_jvp(const ModelConfig& cfg, const ParamStore& params, const Tensor& x_t,
                        const Tensor& r, const Tensor& t, const CondBatch& cond,
                        const Tensor& x_tangent) {
    Bank<Dual> bank(params);
    CondBundleT<Dual> bundle = encode_condition(cfg, bank, cond.desc, cond.null_mask);
    Dual xd(x_t, x_tangent);
    Dual rd(r);                                      // dr = 0
    Dual td(t, Tensor(t.shape(), 1.0));              // dt = 1
    Dual out = forward_u(cfg, bank, xd, rd, td, bundle);
    return JvpResult{out.p, out.tangent()};
}

template Tensor sinusoidal_embed<Tensor>(const Tensor&, int);
template Value sinusoidal_embed<Value>(const Value&, int);
template Dual sinusoidal_embed<Dual>(const Dual&, int);
template CondBundleT<Tensor> encode_condition<Tensor>(const ModelConfig&, Bank<Tensor>&,
                                                      const Tensor&, const std::vector<uint8_t>&);
template CondBundleT<Value> encode_condition<Value>(const ModelConfig&, Bank<Value>&, const Tensor&,
                                                    const std::vector<uint8_t>&);
template CondBundleT<Dual> encode_condition<Dual>(const ModelConfig&, Bank<Dual>&, const Tensor&,
                                                  const std::vector<uint8_t>&);
template Tensor condition_vector<Tensor>(const ModelConfig&, Bank<Tensor>&, const Tensor&,
                                         const Tensor&, const Tensor&);
template Value condition_vector<Value>(const ModelConfig&, Bank<Value>&, const Value&, const Value&,
                                       const Value&);
template Dual condition_vector<Dual>(const ModelConfig&, Bank<Dual>&, const Dual&, const Dual&,
                                     const Dual&);
template std::vector<Tensor> pma_adapt<Tensor>(const ModelConfig&, Bank<Tensor>&, const Tensor&);
template std::vector<Value> pma_adapt<Value>(const ModelConfig&, Bank<Value>&, const Value&);
template std::vector<Dual> pma_adapt<Dual>(const ModelConfig&, Bank<Dual>&, const Dual&);
template Tensor dit_block<Tensor>(const ModelConfig&, Bank<Tensor>&, int, const Tensor&,
                                  const Tensor&, const Tensor&);
template Value dit_block<Value>(const ModelConfig&, Bank<Value>&, int, const Value&, const Value&,
                                const Value&);
template Dual dit_block<Dual>(const ModelConfig&, Bank<Dual>&, int, const Dual&, const Dual&,
                              const Dual&);
template Tensor forward_u<Tensor>(const ModelConfig&, Bank<Tensor>&, const Tensor&, const Tensor&,
                                  const Tensor&, const CondBundleT<Tensor>&);
template Value forward_u<Value>(const ModelConfig&, Bank<Value>&, const Value&, const Value&,
                                const Value&, const CondBundleT<Value>&);
template Dual forward_u<Dual>(const ModelConfig&, Bank<Dual>&, const Dual&, const Dual&,
                              const Dual&, const CondBundleT<Dual>&);

}  // namespace pmf
