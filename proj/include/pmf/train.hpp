#pragma once

#include <functional>
#include <map>
#include <string>

#include "pmf/checkpoint.hpp"
#include "pmf/config.hpp"
#include "pmf/flow.hpp"

namespace pmf {

// decoupled weight decay Adam
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int64_t t = 0;
    ParamStore m;
    ParamStore v;

    void init(const ParamStore& params);
    void step(ParamStore& params, const std::map<std::string, Tensor>& grads, double lr);
};

// clips in place; returns the pre-clip global norm
double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm);

struct TrainStats {
    int64_t final_step = 0;
    double initial_loss = 0;
    double final_loss = 0;
    std::string final_checkpoint;
    std::string log_path;
};

// Deterministic training loop driven entirely by the run config. Emits
// train_log.csv, periodic checkpoints (last.pmfckpt is retained on numeric
// failure) and final.pmfckpt. total_steps == 0 is a dry run: config echo and
// the initial loss only.
TrainStats run_training(const RunConfig& cfg, const std::string& out_dir,
                        const std::string& resume_path = "",
                        const std::function<void(int64_t, const LossBuild&)>& hook = nullptr);

// deterministic batch assembly for step `step` (exposed for tests)
TrainBatch assemble_batch(const RunConfig& cfg, const std::vector<Tensor>& train_points,
                          const Tensor& train_desc, int64_t step);

std::string train_log_header();

}  // namespace pmf
