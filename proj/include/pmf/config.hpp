#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pmf/backbone.hpp"
#include "pmf/data.hpp"
#include "pmf/dsa.hpp"
#include "pmf/flow.hpp"

namespace pmf {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct OptimConfig {
    double lr = 1e-3;
    int warmup_steps = 1000;
    int total_steps = 20000;
    int batch = 32;
    double weight_decay = 0.0;
    double clip_norm = 1.0;  // <= 0 disables clipping
    int checkpoint_every = 2000;
    int log_every = 1;  // file logging cadence

    void validate() const;
};

struct DataConfig {
    std::vector<Family> families{Family::Sphere, Family::Torus, Family::Box, Family::Cylinder,
                                 Family::TwoSpheres};
    int n_points = 256;
    int n_train = 1000;
    int n_test = 200;
    uint64_t split_seed = 7;

    void validate() const;
};

// Full run description parsed from a sectioned key=value document. Unknown
// sections or keys are rejected before any compute starts.
struct RunConfig {
    ModelConfig model;
    GuidanceConfig guidance;
    DsaConfig dsa;
    OptimConfig optimizer;
    DataConfig data;
    uint64_t run_seed = 1;

    void validate() const;
    std::string serialize() const;

    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::string& path);
};

}  // namespace pmf
