#include "pmf/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace pmf {

void AdamW::init(const ParamStore& params) {
    t = 0;
    m = ParamStore{};
    v = ParamStore{};
    for (const auto& n : params.names()) {
        m.add(n, Tensor(params.at(n).shape(), 0.0));
        v.add(n, Tensor(params.at(n).shape(), 0.0));
    }
}

void AdamW::step(ParamStore& params, const std::map<std::string, Tensor>& grads, double lr) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, double(t));
    double bc2 = 1.0 - std::pow(beta2, double(t));
    for (const auto& name : params.names()) {
        auto it = grads.find(name);
        if (it == grads.end()) continue;
        const double* g = it->second.data();
        Tensor& p = params.at(name);
        double* pm = m.at(name).mut();
        double* pv = v.at(name).mut();
        double* pp = p.mut();
        for (int64_t i = 0, n = p.numel(); i < n; ++i) {
            pm[i] = beta1 * pm[i] + (1.0 - beta1) * g[i];
            pv[i] = beta2 * pv[i] + (1.0 - beta2) * g[i] * g[i];
            double mhat = pm[i] / bc1;
            double vhat = pv[i] / bc2;
            pp[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * pp[i]);
        }
    }
}

double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm) {
    double sq = 0;
    for (const auto& [_, g] : grads) {
        const double* p = g.data();
        for (int64_t i = 0; i < g.numel(); ++i) sq += p[i] * p[i];
    }
    double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        double k = max_norm / norm;
        for (auto& [_, g] : grads) {
            double* p = g.mut();
            for (int64_t i = 0; i < g.numel(); ++i) p[i] *= k;
        }
    }
    return norm;
}

namespace {
constexpr uint64_t kStreamBatchIdx = 0x62617463;
constexpr uint64_t kStreamNoise = 0x6e6f6973;
constexpr uint64_t kStreamTimes = 0x74696d65;
constexpr uint64_t kStreamDrop = 0x64726f70;
}  // namespace

TrainBatch assemble_batch(const RunConfig& cfg, const std::vector<Tensor>& train_points,
                          const Tensor& train_desc, int64_t step) {
    const int64_t B = cfg.optimizer.batch;
    const int64_t N = cfg.data.n_points;
    const int64_t D = kDescriptorDim;
    uint64_t sseed = derive_seed(cfg.run_seed, uint64_t(step));
    Rng idx_rng(sseed, kStreamBatchIdx);
    Rng noise_rng(sseed, kStreamNoise);
    Rng time_rng(sseed, kStreamTimes);
    Rng drop_rng(sseed, kStreamDrop);

    TrainBatch b;
    b.x0 = Tensor::uninit(Shape{B, N, 3});
    b.desc = Tensor::uninit(Shape{B, D});
    for (int64_t i = 0; i < B; ++i) {
        int64_t j = int64_t(idx_rng.next_below(uint64_t(train_points.size())));
        std::memcpy(b.x0.mut() + i * N * 3, train_points[j].data(), sizeof(double) * N * 3);
        std::memcpy(b.desc.mut() + i * D, train_desc.data() + j * D, sizeof(double) * D);
    }
    b.eps = randn(Shape{B, N, 3}, noise_rng);
    for (int64_t i = 0; i < B; ++i) b.times.push_back(sample_time_pair(time_rng));
    for (int64_t i = 0; i < B; ++i)
        b.drop_mask.push_back(drop_rng.next_uniform() < cfg.guidance.label_dropout ? 1 : 0);
    return b;
}

std::string train_log_header() {
    return "step,loss_total,loss_mf,loss_fm_branch,loss_mf_branch,loss_dsa,scale_s,lambda_mean,"
           "grad_norm,wall_ms";
}

TrainStats run_training(const RunConfig& cfg, const std::string& out_dir,
                        const std::string& resume_path,
                        const std::function<void(int64_t, const LossBuild&)>& hook) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    ParamStore params;
    AdamW opt;
    opt.weight_decay = cfg.optimizer.weight_decay;
    int64_t start_step = 0;
    if (!resume_path.empty()) {
        Checkpoint c = load_checkpoint(resume_path);
        params = std::move(c.params);
        if (c.has_optimizer) {
            opt.m = std::move(c.opt_m);
            opt.v = std::move(c.opt_v);
            opt.t = c.step;
        } else {
            opt.init(params);
        }
        start_step = c.step;
    } else {
        params = init_params(cfg.model, cfg.run_seed);
        opt.init(params);
    }

    // materialize the training set once; specs are cheap to sample from
    Splits splits = make_splits(cfg.data.n_train, cfg.data.n_test, cfg.data.split_seed);
    std::vector<Tensor> train_points;
    train_points.reserve(splits.train.specs.size());
    for (size_t i = 0; i < splits.train.specs.size(); ++i) {
        Rng prng(splits.train.point_seeds[i]);
        train_points.push_back(generate_sample(splits.train.specs[i], cfg.data.n_points, prng).first);
    }
    Tensor train_desc = descriptor_batch(splits.train.specs);
    write_manifest(out_dir + "/train_manifest.txt", splits.train);
    write_manifest(out_dir + "/test_manifest.txt", splits.test);

    const DsaConfig* dsa = cfg.dsa.lambda_base > 0 ? &cfg.dsa : nullptr;

    TrainStats stats;
    stats.log_path = out_dir + "/train_log.csv";

    std::ofstream log(stats.log_path, start_step > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw DataError("run_training: cannot open " + stats.log_path);
    if (start_step == 0) log << train_log_header() << "\n";

    std::cout << "[train] out_dir=" << out_dir << " resume_step=" << start_step << "\n";
    std::cout << cfg.serialize() << std::flush;

    {
        TrainBatch b0 = assemble_batch(cfg, train_points, train_desc, start_step);
        LossBuild l0 = build_training_loss(cfg.model, params, b0, cfg.guidance, dsa);
        stats.initial_loss = l0.total.data().scalar_value();
        std::cout << "[train] initial loss = " << stats.initial_loss << "\n" << std::flush;
    }
    if (cfg.optimizer.total_steps == 0) {
        stats.final_step = start_step;
        stats.final_loss = stats.initial_loss;
        return stats;  // dry run
    }

    std::string last_path = out_dir + "/last.pmfckpt";
    auto save = [&](const std::string& path, int64_t step) {
        Checkpoint c;
        c.config_text = cfg.serialize();
        c.step = step;
        c.has_optimizer = true;
        for (const auto& n : params.names()) c.params.add(n, params.at(n).clone());
        for (const auto& n : opt.m.names()) c.opt_m.add(n, opt.m.at(n).clone());
        for (const auto& n : opt.v.names()) c.opt_v.add(n, opt.v.at(n).clone());
        save_checkpoint(path, c);
    };

    auto wall0 = std::chrono::steady_clock::now();
    for (int64_t step = start_step; step < cfg.optimizer.total_steps; ++step) {
        TrainBatch batch = assemble_batch(cfg, train_points, train_desc, step);
        LossBuild loss = build_training_loss(cfg.model, params, batch, cfg.guidance, dsa);
        double total = loss.total.data().scalar_value();
        if (!std::isfinite(total))
            throw NumericError("run_training: non-finite loss at step " + std::to_string(step) +
                               " (last good checkpoint: " + last_path + ")");

        backward(loss.total);
        std::map<std::string, Tensor> grads;
        for (const auto& name : params.names()) grads[name] = loss.bank->grad(name);
        for (const auto& [name, g] : grads)
            if (!g.all_finite())
                throw NumericError("run_training: non-finite gradient for " + name + " at step " +
                                   std::to_string(step) + " (last good checkpoint: " + last_path + ")");

        double gnorm = clip_global_norm(grads, cfg.optimizer.clip_norm);
        double lr = cfg.optimizer.lr;
        if (cfg.optimizer.warmup_steps > 0 && step < cfg.optimizer.warmup_steps)
            lr *= double(step + 1) / double(cfg.optimizer.warmup_steps);
        opt.step(params, grads, lr);

        double wall_ms = std::chrono::duration<double, std::milli>(
                             std::chrono::steady_clock::now() - wall0)
                             .count();
        if ((step + 1) % cfg.optimizer.log_every == 0 || step + 1 == cfg.optimizer.total_steps) {
            char buf[320];
            std::snprintf(buf, sizeof(buf), "%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.1f",
                          static_cast<long long>(step + 1), total, loss.loss_main,
                          loss.loss_fm_branch, loss.loss_mf_branch, loss.loss_dsa, loss.scale_s,
                          loss.lambda_mean, gnorm, wall_ms);
            log << buf << "\n";
        }
        if ((step + 1) % 100 == 0) {
            std::cout << "[train] step " << (step + 1) << "/" << cfg.optimizer.total_steps
                      << " loss=" << total << " grad_norm=" << gnorm << "\n"
                      << std::flush;
            log << std::flush;
        }
        if (hook) hook(step + 1, loss);

        if ((step + 1) % cfg.optimizer.checkpoint_every == 0 || step + 1 == cfg.optimizer.total_steps) {
            save(last_path, step + 1);
        }
        stats.final_step = step + 1;
        stats.final_loss = total;
    }

    stats.final_checkpoint = out_dir + "/final.pmfckpt";
    save(stats.final_checkpoint, cfg.optimizer.total_steps);
    return stats;
}

}  // namespace pmf
