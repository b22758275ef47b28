#pragma once

#include <optional>

#include "presnet/graph.hpp"
#include "presnet/rng.hpp"

namespace presnet::nn {

// ---------------------------------------------------------------------------
// Poincare multinomial logistic regression scores.
//
// v_k(x) = (2/sqrt(c)) ||z_k|| asinh( lambda_x <sqrt(c) x, z_k/||z_k||> cosh(2 sqrt(c) r_k)
//                                     - (lambda_x - 1) sinh(2 sqrt(c) r_k) )
//
// Zero columns z_k get score 0 (the analytic limit); their z-gradient uses
// the limiting non-radial term so identity-initialized zero columns can
// still start learning.

struct MlrSaved {
    Tensor P;      // x Z, [R x n]
    Tensor lambda; // conformal factors, [R x 1]
    Tensor nu;     // column norms of Z, [1 x n]
};

Tensor mlr_forward(const Tensor& x, const Tensor& Z, const Tensor& r, real c,
                   MlrSaved* saved = nullptr);
void mlr_backward(const Tensor& u, const Tensor& x, const Tensor& Z, const Tensor& r, real c,
                  const MlrSaved* saved, Tensor* grad_x, Tensor* grad_Z, Tensor* grad_r);

// ---------------------------------------------------------------------------
// Layer parameter bundles

struct FcParams {
    Tensor Z; // [m x n], columns are the tangent-at-origin hyperplane normals
    Tensor r; // [1 x n] offsets
    std::size_t fan_in() const { return Z.rows(); }
    std::size_t fan_out() const { return Z.cols(); }
};

enum class GammaMode { kScalar, kPerChannel };
enum class BnMode { kMidpoint, kFrechet };

struct BnState {
    Tensor bias_param; // [1 x n], tangent at the origin; beta = exp0(bias_param)
    Tensor log_gamma;  // [1 x 1] (scalar mode) or [1 x n]; gamma = exp(log_gamma) > 0
    GammaMode mode = GammaMode::kScalar;
    // Statistics of the most recent normalization step.
    Tensor last_mu;
    real last_var = 0;
};

BnState make_bn_state(std::size_t n, GammaMode mode);

struct ConvSpec {
    int k = 3;      // receptive field K x K, K odd
    int stride = 1;
    int pad = 0;
    int c_in = 1;
    int c_out = 1;
    void validate() const;
    int out_dim(int in) const; // floor((in + 2 pad - k)/stride) + 1
};

// A feature map of ball points: rows are (b, i, j) row-major, columns are
// the C-dimensional pixel coordinates in B_c^C.
struct BallFeatureMap {
    Tensor data; // [B*H*W x C]
    int b = 0, h = 0, w = 0;
    real c = 1;
    int channels() const { return static_cast<int>(data.cols()); }
};

// ---------------------------------------------------------------------------
// Graph builders (work with or without a recording tape)

Var fc(Graph& g, Var x, Var Z, Var r, real c);
Var relu_p(Graph& g, Var x, real c);
Var beta_concat(Graph& g, const std::vector<Var>& parts, real c);
// group_size == 0 pools all rows into one midpoint; otherwise one midpoint
// per consecutive group of rows.
Var poincare_midpoint(Graph& g, Var pts, real c, std::size_t group_size = 0);
Var frechet_mean(Graph& g, Var pts, real c, real tol, int max_iter, real step_size);
Var batchnorm(Graph& g, Var x, Var bias_param, Var log_gamma, real c, BnMode mode, GammaMode gmode,
              real tol, int max_iter, Tensor* out_mu = nullptr, real* out_var = nullptr);

std::shared_ptr<const UnfoldTable> make_unfold_index(int b, int h, int w, const ConvSpec& spec);
Var conv2d(Graph& g, Var x, int b, int h, int w, const ConvSpec& spec, Var Z, Var r, real c,
           std::shared_ptr<const UnfoldTable> idx = nullptr);

struct ResidualVars {
    Var conv1_z, conv1_r, bn1_bias, bn1_lgamma;
    Var conv2_z, conv2_r, bn2_bias, bn2_lgamma;
    std::optional<Var> down_z, down_r;
    // Optional precomputed unfold tables (models keep a cache).
    std::shared_ptr<const UnfoldTable> idx1, idx2, idx_down;
};
Var residual_block(Graph& g, Var x, int b, int h, int w, const ConvSpec& spec, ResidualVars vars,
                   real c, BnMode bn_mode, GammaMode gmode);

// ---------------------------------------------------------------------------
// Raw (non-recording) entry points matching the layer contracts

Tensor fc_forward(const Tensor& x, const FcParams& p, real c);
Tensor relu_p(const Tensor& x, real c);
real beta_fn(real a, real b);      // Euler beta via lgamma
real beta_ratio(std::size_t n, std::size_t ni); // beta_n / beta_ni
Tensor beta_concat(const std::vector<Tensor>& parts, real c);
Tensor poincare_midpoint(const Tensor& batch, real c);

struct FrechetOptions {
    real tol = real(1e-6);
    int max_iter = 200;
    real step_size = real(0.5); // eta_f
};
struct FrechetResult {
    Tensor mean;
    int iters = 0;
    bool converged = false;
};
FrechetResult frechet_mean_full(const Tensor& batch, real c, const FrechetOptions& opt = {});
// Throws DivergedError (carrying the last iterate norm) on non-convergence.
Tensor frechet_mean(const Tensor& batch, real c, const FrechetOptions& opt = {});

Tensor batchnorm_forward(const Tensor& batch, BnState& state, real c,
                         BnMode mode = BnMode::kMidpoint);

BallFeatureMap conv2d(const BallFeatureMap& input, const ConvSpec& spec, const FcParams& p);

} // namespace presnet::nn
