// pmf: train / sample / eval / inspect for the point-set mean-flow toolkit.
//
// Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
// failure during compute.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "pmf/checkpoint.hpp"
#include "pmf/config.hpp"
#include "pmf/data.hpp"
#include "pmf/metrics.hpp"
#include "pmf/sampler.hpp"
#include "pmf/train.hpp"

extern "C" void openblas_set_num_threads(int);

namespace fs = std::filesystem;
using namespace pmf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

void apply_thread_cap() {
    if (const char* env = std::getenv("PMF_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) openblas_set_num_threads(n);
    }
}

int cmd_train(const std::string& config_path, const std::string& resume,
              const std::string& out_dir) {
    RunConfig cfg = RunConfig::load(config_path);
    TrainStats stats = run_training(cfg, out_dir, resume);
    std::cout << "[train] done: step=" << stats.final_step << " loss=" << stats.final_loss << "\n";
    if (!stats.final_checkpoint.empty())
        std::cout << "[train] final checkpoint: " << stats.final_checkpoint << "\n";
    std::cout << "[train] log: " << stats.log_path << "\n";
    return kExitOk;
}

ShapeSpec parse_shape_args(const std::string& family, const std::string& params_csv, double yaw,
                           double scale) {
    ShapeSpec spec;
    spec.family = family_from_string(family);
    spec.yaw = yaw;
    spec.scale = scale;
    std::stringstream ss(params_csv);
    std::string tok;
    int i = 0;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        if (i >= 3) throw DataError("sample: at most 3 shape parameters");
        spec.params[i++] = std::stod(tok);
    }
    spec.validate();
    return spec;
}

int cmd_sample(const std::string& ckpt_path, const std::string& family,
               const std::string& params_csv, double yaw, double scale, int steps, int count,
               uint64_t seed, const std::string& out_dir, const std::string& sampler,
               const std::string& format) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    RunConfig cfg = RunConfig::parse(ckpt.config_text);
    ShapeSpec spec = parse_shape_args(family, params_csv, yaw, scale);
    Tensor desc = descriptor_for(spec).as_tensor();

    fs::create_directories(out_dir);
    VelocityFn fn = bind_backbone(cfg.model, ckpt.params, desc);

    uint64_t nfe_before = counters().forward_calls;
    for (int i = 0; i < count; ++i) {
        uint64_t s = seed + uint64_t(i);
        Tensor pts;
        if (sampler == "fm-euler")
            pts = sample_fm_euler(fn, cfg.data.n_points, steps, s);
        else
            pts = sample_k_step(fn, cfg.data.n_points, steps, s);
        char name[160];
        std::snprintf(name, sizeof(name), "%s_s%llu_k%d_%03d.%s", family.c_str(),
                      static_cast<unsigned long long>(s), steps, i,
                      format == "pmf1" ? "pmf1" : "ply");
        std::string path = out_dir + "/" + name;
        if (format == "pmf1")
            write_pmf1(path, pts);
        else
            write_ply(path, pts);
    }
    uint64_t nfe = counters().forward_calls - nfe_before;
    std::cout << "NFE=" << nfe / std::max(1, count) << " per sample (" << nfe << " total, "
              << count << " files in " << out_dir << ")\n";
    return kExitOk;
}

Tensor read_points_any(const fs::path& p) {
    if (p.extension() == ".pmf1") return read_pmf1(p.string());
    return read_ply(p.string());
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, double pct,
             const std::string& out_csv) {
    std::map<std::string, fs::path> preds, gts;
    for (const auto& e : fs::directory_iterator(pred_dir)) {
        auto ext = e.path().extension();
        if (ext == ".ply" || ext == ".pmf1") preds[e.path().stem().string()] = e.path();
    }
    if (preds.empty()) {
        std::cerr << "eval: no point-set files in " << pred_dir << "\n";
        return kExitData;
    }
    for (const auto& e : fs::directory_iterator(gt_dir)) {
        auto ext = e.path().extension();
        if (ext == ".ply" || ext == ".pmf1") gts[e.path().stem().string()] = e.path();
    }

    std::ofstream csv(out_csv);
    if (!csv) {
        std::cerr << "eval: cannot open " << out_csv << "\n";
        return kExitData;
    }
    csv << eval_csv_header() << "\n";

    bool had_error = false;
    double sum_cd = 0, sum_emd = 0, sum_p = 0, sum_r = 0, sum_f = 0, sum_t = 0;
    int64_t used = 0;
    for (const auto& [stem, ppath] : preds) {
        auto it = gts.find(stem);
        if (it == gts.end()) {
            std::cerr << "eval: missing ground truth for '" << stem << "'\n";
            had_error = true;
            continue;
        }
        try {
            Tensor pred = read_points_any(ppath);
            Tensor gt = read_points_any(it->second);
            EvalReport rep = evaluate_pair(pred, gt, pct);
            csv << eval_csv_row(stem, rep) << "\n";
            sum_cd += rep.cd;
            sum_emd += rep.emd;
            sum_p += rep.precision;
            sum_r += rep.recall;
            sum_f += rep.fscore;
            sum_t += rep.threshold_used;
            ++used;
        } catch (const std::exception& e) {
            std::cerr << "eval: pair '" << stem << "' failed: " << e.what() << "\n";
            had_error = true;
        }
    }
    if (used > 0) {
        EvalReport mean;
        mean.cd = sum_cd / used;
        mean.emd = sum_emd / used;
        mean.precision = sum_p / used;
        mean.recall = sum_r / used;
        mean.fscore = sum_f / used;
        mean.threshold_used = sum_t / used;
        csv << eval_csv_row("mean", mean) << "\n";
        std::cout << "eval: " << used << " pairs, mean cd=" << mean.cd << " emd=" << mean.emd
                  << " f1=" << mean.fscore << " -> " << out_csv << "\n";
    }
    return had_error ? kExitData : kExitOk;
}

int cmd_inspect(const std::string& ckpt_path) {
    std::cout << inspect_checkpoint(ckpt_path);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    apply_thread_cap();
    CLI::App app{"point-set mean-flow generation toolkit"};
    app.require_subcommand(1);

    std::string config_path, resume, out_dir = "pmf_run";
    auto* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", config_path, "run configuration file")->required();
    train->add_option("--resume", resume, "checkpoint to resume from");
    train->add_option("--out", out_dir, "output directory (logs, checkpoints)");

    std::string ckpt_path, family, params_csv = "", sampler = "mf", format = "ply";
    std::string sample_out = "samples";
    double yaw = 0.0, scale = 0.8, pct = 1.0;
    int steps = 1, count = 1;
    uint64_t seed = 1;
    auto* sample = app.add_subcommand("sample", "generate point sets from a checkpoint");
    sample->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    sample->add_option("--family", family, "shape family for the condition")->required();
    sample->add_option("--params", params_csv, "family parameters, comma separated");
    sample->add_option("--yaw", yaw, "condition yaw (radians)");
    sample->add_option("--scale", scale, "condition scale");
    sample->add_option("--steps", steps, "sampler steps (1 = single mean-flow jump)");
    sample->add_option("--count", count, "number of samples");
    sample->add_option("--seed", seed, "base noise seed");
    sample->add_option("--out", sample_out, "output directory");
    sample->add_option("--sampler", sampler, "mf | fm-euler")
        ->check(CLI::IsMember({"mf", "fm-euler"}));
    sample->add_option("--format", format, "ply | pmf1")->check(CLI::IsMember({"ply", "pmf1"}));

    std::string pred_dir, gt_dir, eval_out = "eval.csv";
    auto* eval = app.add_subcommand("eval", "evaluate predicted point sets against ground truth");
    eval->add_option("--pred", pred_dir, "directory of predicted point sets")->required();
    eval->add_option("--gt", gt_dir, "directory of ground-truth point sets")->required();
    eval->add_option("--pct", pct, "F-score threshold, percent of longest gt bbox side");
    eval->add_option("--out", eval_out, "output CSV path");

    std::string inspect_path;
    auto* inspect = app.add_subcommand("inspect", "describe a checkpoint");
    inspect->add_option("--ckpt", inspect_path, "checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*train) return cmd_train(config_path, resume, out_dir);
        if (*sample)
            return cmd_sample(ckpt_path, family, params_csv, yaw, scale, steps, count, seed,
                              sample_out, sampler, format);
        if (*eval) return cmd_eval(pred_dir, gt_dir, pct, eval_out);
        if (*inspect) return cmd_inspect(inspect_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
