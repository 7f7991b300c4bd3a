#include "pmf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

namespace pmf {

namespace {

void check_points(const Tensor& x, const char* who) {
    if (!x.defined() || x.shape().rank != 2 || x.shape()[1] != 3 || x.shape()[0] < 1)
        throw DataError(std::string(who) + ": expected a non-empty (N,3) point set" +
                        (x.defined() ? ", got " + x.shape().str() : ""));
}

double point_dist(const double* a, const double* b) {
    double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

double mean_nn(const Tensor& X, const Tensor& Y) {
    int64_t n = X.shape()[0], m = Y.shape()[0];
    const double* px = X.data();
    const double* py = Y.data();
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < m; ++j) best = std::min(best, point_dist(px + 3 * i, py + 3 * j));
        acc += best;
    }
    return acc / double(n);
}

}  // namespace

double chamfer_l1(const Tensor& X, const Tensor& Y) {
    check_points(X, "chamfer_l1");
    check_points(Y, "chamfer_l1");
    return 0.5 * (mean_nn(X, Y) + mean_nn(Y, X));
}

double emd_hungarian(const Tensor& X, const Tensor& Y) {
    check_points(X, "emd_hungarian");
    check_points(Y, "emd_hungarian");
    if (X.shape()[0] != Y.shape()[0])
        throw DataError("emd_hungarian: cardinality mismatch " + X.shape().str() + " vs " +
                        Y.shape().str());
    const int64_t n = X.shape()[0];
    const double* px = X.data();
    const double* py = Y.data();

    // shortest augmenting path with potentials (1-indexed scratch arrays)
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int64_t> match(n + 1, 0), way(n + 1, 0);
    std::vector<double> cost(n * n);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) cost[i * n + j] = point_dist(px + 3 * i, py + 3 * j);

    for (int64_t i = 1; i <= n; ++i) {
        match[0] = i;
        int64_t j0 = 0;
        std::vector<double> minv(n + 1, std::numeric_limits<double>::infinity());
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            int64_t i0 = match[j0], j1 = 0;
            double delta = std::numeric_limits<double>::infinity();
            for (int64_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int64_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            int64_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0);
    }

    double total = 0;
    for (int64_t j = 1; j <= n; ++j)
        if (match[j]) total += cost[(match[j] - 1) * n + (j - 1)];
    return total / double(n);
}

FScoreResult f_score(const Tensor& pred, const Tensor& gt, double pct) {
    check_points(pred, "f_score");
    check_points(gt, "f_score");
    if (pct <= 0) throw DataError("f_score: pct must be positive");

    const double* pg = gt.data();
    double lo[3], hi[3];
    for (int k = 0; k < 3; ++k) lo[k] = hi[k] = pg[k];
    for (int64_t i = 1; i < gt.shape()[0]; ++i)
        for (int k = 0; k < 3; ++k) {
            lo[k] = std::min(lo[k], pg[3 * i + k]);
            hi[k] = std::max(hi[k], pg[3 * i + k]);
        }
    double side = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
    if (side <= 0) throw DataError("f_score: degenerate zero-extent ground-truth bounding box");

    FScoreResult r;
    r.threshold = pct / 100.0 * side;

    auto frac_within = [&](const Tensor& A, const Tensor& B) {
        int64_t n = A.shape()[0], m = B.shape()[0];
        const double* pa = A.data();
        const double* pb = B.data();
        int64_t hits = 0;
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < m; ++j) {
                if (point_dist(pa + 3 * i, pb + 3 * j) <= r.threshold) {
                    ++hits;
                    break;
                }
            }
        }
        return double(hits) / double(n);
    };

    r.precision = frac_within(pred, gt);
    r.recall = frac_within(gt, pred);
    r.f1 = (r.precision + r.recall > 0) ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

EvalReport evaluate_pair(const Tensor& pred, const Tensor& gt, double pct) {
    EvalReport rep;
    rep.cd = chamfer_l1(pred, gt);
    rep.emd = emd_hungarian(pred, gt);
    FScoreResult f = f_score(pred, gt, pct);
    rep.fscore = f.f1;
    rep.precision = f.precision;
    rep.recall = f.recall;
    rep.threshold_used = f.threshold;
    return rep;
}

std::string eval_csv_header() { return "id,cd,emd,precision,recall,f1,threshold"; }

std::string eval_csv_row(const std::string& id, const EvalReport& r) {
    std::ostringstream os;
    os.precision(12);
    os << id << "," << r.cd << "," << r.emd << "," << r.precision << "," << r.recall << ","
       << r.fscore << "," << r.threshold_used;
    return os.str();
}

}  // namespace pmf
