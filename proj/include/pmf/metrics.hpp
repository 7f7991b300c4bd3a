#pragma once

#include <string>

#include "pmf/tensor.hpp"

namespace pmf {

// 0.5 * (mean_x min_y |x-y| + mean_y min_x |x-y|), Euclidean point-to-point
double chamfer_l1(const Tensor& X, const Tensor& Y);

// exact assignment cost / N via shortest-augmenting-path Hungarian (O(n^3));
// requires equal cardinality
double emd_hungarian(const Tensor& X, const Tensor& Y);

struct FScoreResult {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    double threshold = 0;
};

// threshold = pct/100 * longest axis-aligned bbox side of the ground truth
FScoreResult f_score(const Tensor& pred, const Tensor& gt, double pct);

struct EvalReport {
    double cd = 0;
    double emd = 0;
    double fscore = 0;
    double precision = 0;
    double recall = 0;
    double threshold_used = 0;
};

EvalReport evaluate_pair(const Tensor& pred, const Tensor& gt, double pct);

// CSV columns: id, cd, emd, precision, recall, f1, threshold
std::string eval_csv_header();
std::string eval_csv_row(const std::string& id, const EvalReport& r);

}  // namespace pmf
