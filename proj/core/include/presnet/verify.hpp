#pragma once

#include <string>
#include <vector>

#include "presnet/models.hpp"

namespace presnet::verify {

// ---------------------------------------------------------------------------
// Gradient certification: every hand-derived backward against the
// finite-difference oracle, per curvature, plus composed layers at a looser
// tolerance.

struct GradRow {
    std::string op;
    std::string slot;
    real curvature = 1;
    int dim = 0;
    int points = 0;
    real max_rel_err = 0;
    real tol = 0;
    bool pass = false;
};

struct GradReport {
    std::vector<GradRow> rows;
    bool all_pass() const;
};

GradReport gradcheck_all(std::uint64_t seed = 7, real tol_primitive = real(1e-5),
                         real tol_layer = real(1e-4));
std::string gradcheck_csv(const GradReport& report);

// ---------------------------------------------------------------------------
// Norm-preservation sweep: a stack of Poincare FC layers, identity vs
// normal-baseline init, mean output norm per layer.

struct NormRow {
    int layer = 0;
    real mean_norm = 0;
    real log_mean_norm = 0;
};

std::vector<NormRow> norm_sweep(int depth, int dim, models::InitScheme scheme, std::uint64_t seed,
                                int batch = 16, real curvature = 1);
std::string norm_sweep_csv(const std::vector<NormRow>& rows, models::InitScheme scheme);

// ---------------------------------------------------------------------------
// Midpoint vs Frechet-mean benchmark (aggregation alone and the full batch
// normalization step in both modes). Timings are medians over `reps` runs
// after two warmups, single-threaded.

struct BnBenchRow {
    std::string method;
    int batch = 0;
    int dim = 0;
    real curvature = 0;
    int reps = 0;
    double mean_s = 0;
    double median_s = 0;
    real dist_midpoint_frechet = 0;
    bool frechet_converged = true;
};

std::vector<BnBenchRow> bn_bench(const std::vector<int>& batches, const std::vector<int>& dims,
                                 int reps, std::uint64_t seed, real curvature = real(0.1));
std::string bn_bench_csv(const std::vector<BnBenchRow>& rows);

// ---------------------------------------------------------------------------
// Fused vs naive computation-graph size: node counts and saved/value bytes
// per primitive and for one residual-block forward+backward.

struct TapeRow {
    std::string scope;
    std::string mode; // fused | naive
    std::size_t nodes = 0;
    std::size_t saved_bytes = 0;
    std::size_t value_bytes = 0;
};

std::vector<TapeRow> tape_size_bench(std::uint64_t seed = 3);
std::string tape_bench_csv(const std::vector<TapeRow>& rows);

} // namespace presnet::verify
