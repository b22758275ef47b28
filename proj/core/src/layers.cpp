#include "presnet/layers.hpp"

#include <cmath>

#include "presnet/elem_ops.hpp"
#include "presnet/error.hpp"
#include "presnet/gyro.hpp"
#include "presnet/parallel.hpp"

namespace presnet::nn {

namespace {
constexpr real kNuFloor = real(1e-15); // zero-column threshold for ||z_k||
constexpr real kVarFloor = real(1e-12); // degenerate-batch variance threshold
} // namespace

// ---------------------------------------------------------------------------
// MLR kernel

Tensor mlr_forward(const Tensor& x, const Tensor& Z, const Tensor& r, real c, MlrSaved* saved) {
    const std::size_t R = x.rows(), m = x.cols(), n = Z.cols();
    if (Z.rows() != m) throw ContractError("mlr: x/Z dimension mismatch");
    if (r.size() != n) throw ContractError("mlr: r must have one offset per class");
    const real sc = std::sqrt(c);
    Tensor P = elem::matmul(x, Z);
    Tensor nu = elem::colnorm(Z);
    Tensor lambda = gyro::conformal_factor(x, c);
    std::vector<real> ch(n), sh(n);
    for (std::size_t k = 0; k < n; ++k) {
        ch[k] = std::cosh(2 * sc * r.at(k));
        sh[k] = std::sinh(2 * sc * r.at(k));
    }
    TensorBuf out({R, n}, kUninit);
    const real* pp = P.data();
    const real* pl = lambda.data();
    const real* pn = nu.data();
    real* po = out.data();
    parallel_for(R, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            const real lam = pl[row];
            const real* Pr = pp + row * n;
            real* o = po + row * n;
            for (std::size_t k = 0; k < n; ++k) {
                if (pn[k] < kNuFloor) {
                    o[k] = 0;
                    continue;
                }
                const real A = sc * lam * (Pr[k] / pn[k]) * ch[k] - (lam - 1) * sh[k];
                o[k] = (2 / sc) * pn[k] * std::asinh(A);
            }
        }
    });
    if (saved) {
        saved->P = P;
        saved->lambda = lambda;
        saved->nu = nu;
    }
    return out.freeze();
}

void mlr_backward(const Tensor& u, const Tensor& x, const Tensor& Z, const Tensor& r, real c,
                  const MlrSaved* saved, Tensor* grad_x, Tensor* grad_Z, Tensor* grad_r) {
    const std::size_t R = x.rows(), m = x.cols(), n = Z.cols();
    if (u.rows() != R || u.cols() != n) throw ContractError("mlr_backward: gradient shape mismatch");
    MlrSaved local;
    if (!saved) {
        mlr_forward(x, Z, r, c, &local);
        saved = &local;
    }
    const real sc = std::sqrt(c);
    std::vector<real> ch(n), sh(n);
    for (std::size_t k = 0; k < n; ++k) {
        ch[k] = std::cosh(2 * sc * r.at(k));
        sh[k] = std::sinh(2 * sc * r.at(k));
    }
    const real* pp = saved->P.data();
    const real* pl = saved->lambda.data();
    const real* pn = saved->nu.data();
    const real* px = x.data();
    const real* pz = Z.data();
    const real* pu = u.data();

    // One rowwise pass produces per-(row, k) coefficients; the gradients
    // then assemble as two small GEMMs plus column sums:
    //   grad_x = W Z^T + diag(rowcoef) x
    //   grad_Z = Z diag(colsum ZC) + X^T WZ
    //   grad_r = colsum RC
    TensorBuf Wb({R, n}, kUninit), WZb({R, n}, kUninit), ZCb({R, n}, kUninit), RCb({R, n}, kUninit),
        rowco({R, 1}, kUninit);
    real* pW = Wb.data();
    real* pWZ = WZb.data();
    real* pZC = ZCb.data();
    real* pRC = RCb.data();
    real* prc = rowco.data();
    parallel_for(R, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            const real lam = pl[row];
            const real* Pr = pp + row * n;
            const real* ur = pu + row * n;
            real rowcoef = 0;
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t o = row * n + k;
                if (pn[k] < kNuFloor) {
                    // Analytic limit of the non-radial component as
                    // ||z_k|| -> 0: grad_z = 2 lam cosh(2 sqrt(c) r_k) x
                    // / sqrt(1 + A0^2); x and r see no gradient (v == 0).
                    const real A0 = -(lam - 1) * sh[k];
                    pW[o] = 0;
                    pWZ[o] = ur[k] * 2 * lam * ch[k] / std::sqrt(1 + A0 * A0);
                    pZC[o] = 0;
                    pRC[o] = 0;
                    continue;
                }
                const real nu_k = pn[k];
                const real Pn = Pr[k] / nu_k;
                const real A = sc * lam * Pn * ch[k] - (lam - 1) * sh[k];
                const real as = std::asinh(A);
                const real D = (2 / sc) * nu_k / std::sqrt(1 + A * A);
                const real uD = ur[k] * D;
                const real xc = uD * sc * lam * ch[k] / nu_k;
                pW[o] = xc;
                pWZ[o] = xc;
                pZC[o] = ur[k] * ((2 / sc) * as / nu_k -
                                  D * sc * lam * ch[k] * Pr[k] / (nu_k * nu_k * nu_k));
                pRC[o] = uD * 2 * sc * (sc * lam * Pn * sh[k] - (lam - 1) * ch[k]);
                rowcoef += uD * (sc * ch[k] * Pn - sh[k]) * c * lam * lam;
            }
            prc[row] = rowcoef;
        }
    });

    if (grad_x) {
        TensorBuf gx(x.shape(), kUninit);
        real* pgx = gx.data();
        parallel_for(R, [&](std::size_t r0, std::size_t r1) {
            for (std::size_t row = r0; row < r1; ++row) {
                const real* Wr = pW + row * n;
                const real* xr = px + row * m;
                real* o = pgx + row * m;
                for (std::size_t i = 0; i < m; ++i) o[i] = prc[row] * xr[i];
                for (std::size_t k = 0; k < n; ++k) {
                    const real w = Wr[k];
                    if (w == 0) continue;
                    const real* zrow = pz; // z_k read along column k
                    for (std::size_t i = 0; i < m; ++i) o[i] += w * zrow[i * n + k];
                }
            }
        });
        *grad_x = gx.freeze();
    }
    if (grad_Z) {
        std::vector<real> zc_sum(n, 0);
        for (std::size_t row = 0; row < R; ++row) {
            for (std::size_t k = 0; k < n; ++k) zc_sum[k] += pZC[row * n + k];
        }
        TensorBuf gZ(Z.shape(), kUninit);
        real* pgz = gZ.data();
        parallel_for(m, [&](std::size_t i0, std::size_t i1) {
            for (std::size_t i = i0; i < i1; ++i) {
                real* o = pgz + i * n;
                for (std::size_t k = 0; k < n; ++k) o[k] = zc_sum[k] * pz[i * n + k];
                for (std::size_t row = 0; row < R; ++row) {
                    const real xv = px[row * m + i];
                    const real* wz = pWZ + row * n;
                    for (std::size_t k = 0; k < n; ++k) o[k] += xv * wz[k];
                }
            }
        });
        *grad_Z = gZ.freeze();
    }
    if (grad_r) {
        TensorBuf gr(r.shape());
        real* pgr = gr.data();
        for (std::size_t row = 0; row < R; ++row) {
            for (std::size_t k = 0; k < n; ++k) pgr[k] += pRC[row * n + k];
        }
        *grad_r = gr.freeze();
    }
}

// ---------------------------------------------------------------------------
// FC layer and ReLU_P

namespace {

// w = sinh(sqrt(c) v)/sqrt(c); y = w / (1 + sqrt(1 + c ||w||^2))
Var fc_shrink(Graph& g, Var v, real c) {
    const real sc = std::sqrt(c);
    Var w = g.unary(UnaryFn::kSinh, v, sc, 1 / sc);
    Var nw = g.rownormsq(w);
    Var den = g.affine(g.unary(UnaryFn::kSqrt, g.affine(nw, c, 1)), 1, 1);
    Var y = g.rowscale(w, g.unary(UnaryFn::kRecip, den));
    return g.project(y, c);
}

} // namespace

Var fc(Graph& g, Var x, Var Z, Var r, real c) {
    Var v = g.mlr(x, Z, r, c);
    return fc_shrink(g, v, c);
}

Var relu_p(Graph& g, Var x, real c) {
    Var t = g.log0(x, c);
    Var a = g.unary(UnaryFn::kMaxc, t, 1, 1, 0);
    return g.project(g.exp0(a, c), c);
}

Tensor fc_forward(const Tensor& x, const FcParams& p, real c) {
    Graph g(nullptr);
    return fc(g, Var{x, -1}, Var{p.Z, -1}, Var{p.r, -1}, c).v;
}

Tensor relu_p(const Tensor& x, real c) {
    Graph g(nullptr);
    return relu_p(g, Var{x, -1}, c).v;
}

// ---------------------------------------------------------------------------
// Beta concatenation

real beta_fn(real a, real b) {
    return std::exp(std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b));
}

real beta_ratio(std::size_t n, std::size_t ni) {
    return beta_fn(real(n) / 2, real(0.5)) / beta_fn(real(ni) / 2, real(0.5));
}

Var beta_concat(Graph& g, const std::vector<Var>& parts, real c) {
    if (parts.empty()) throw ContractError("beta_concat: empty part list");
    std::size_t total = 0;
    for (const Var& p : parts) total += p.v.cols();
    std::vector<Var> scaled;
    scaled.reserve(parts.size());
    for (const Var& p : parts) {
        Var t = g.log0(p, c);
        const real s = beta_ratio(total, p.v.cols());
        scaled.push_back(s == 1 ? t : g.affine(t, s, 0));
    }
    Var v = scaled.size() == 1 ? scaled[0] : g.concat(scaled);
    return g.project(g.exp0(v, c), c);
}

Tensor beta_concat(const std::vector<Tensor>& parts, real c) {
    Graph g(nullptr);
    std::vector<Var> vars;
    vars.reserve(parts.size());
    for (const Tensor& t : parts) vars.push_back(Var{t, -1});
    return beta_concat(g, vars, c).v;
}

// ---------------------------------------------------------------------------
// Poincare midpoint and the iterative Frechet-mean baseline

Var poincare_midpoint(Graph& g, Var pts, real c, std::size_t group_size) {
    if (pts.v.rows() == 0) throw ContractError("poincare_midpoint: empty batch");
    Var lam = g.conformal(pts, c);
    Var weighted = g.rowscale(pts, lam);
    Var num = group_size ? g.sum_groups(weighted, group_size) : g.sum_rows(weighted);
    Var denv = g.affine(lam, 1, -1);
    Var den = group_size ? g.sum_groups(denv, group_size) : g.sum_rows(denv);
    Var m0 = g.rowscale(num, g.unary(UnaryFn::kRecip, den));
    return g.project(g.mobius_scalar(real(0.5), m0, c), c);
}

Tensor poincare_midpoint(const Tensor& batch, real c) {
    Graph g(nullptr);
    return poincare_midpoint(g, Var{batch, -1}, c).v;
}

Var frechet_mean(Graph& g, Var pts, real c, real tol, int max_iter, real step_size) {
    if (pts.v.rows() == 0) throw ContractError("frechet_mean: empty batch");
    // Initial iterate: the first point. The fixed point does not depend on
    // it, so recording it as a constant leaves the gradient path intact
    // through the unrolled iterations.
    Var mu = g.constant(Tensor(Shape{1, pts.v.cols()},
                               std::vector<real>(pts.v.data(), pts.v.data() + pts.v.cols())));
    real last_step = 0;
    for (int it = 0; it < max_iter; ++it) {
        Var v = g.log_at(mu, pts, c);
        Var vm = g.mean_rows(v);
        Var step = g.affine(vm, step_size, 0);
        mu = g.project(g.exp_at(mu, step, c), c);
        last_step = std::sqrt(elem::rownormsq(step.v).at(0));
        if (last_step < tol) return mu;
    }
    throw DivergedError("frechet_mean: no convergence after " + std::to_string(max_iter) +
                        " iterations (last step norm " + std::to_string(last_step) + ")");
}

FrechetResult frechet_mean_full(const Tensor& batch, real c, const FrechetOptions& opt) {
    if (batch.rows() == 0) throw ContractError("frechet_mean: empty batch");
    const std::size_t n = batch.cols();
    Tensor mu(Shape{1, n}, std::vector<real>(batch.data(), batch.data() + n));
    FrechetResult res;
    for (int it = 0; it < opt.max_iter; ++it) {
        Tensor v = gyro::log_at(mu, batch, c);
        Tensor vm = elem::mean_rows(v);
        Tensor step = elem::affine(vm, opt.step_size, 0);
        mu = gyro::project(gyro::exp_at_raw(mu, step, c), c);
        res.iters = it + 1;
        if (std::sqrt(elem::rownormsq(step).at(0)) < opt.tol) {
            res.converged = true;
            break;
        }
    }
    res.mean = mu;
    return res;
}

Tensor frechet_mean(const Tensor& batch, real c, const FrechetOptions& opt) {
    FrechetResult res = frechet_mean_full(batch, c, opt);
    if (!res.converged) {
        throw DivergedError("frechet_mean: no convergence after " + std::to_string(opt.max_iter) +
                            " iterations");
    }
    return res.mean;
}

// ---------------------------------------------------------------------------
// Midpoint batch normalization (Algorithm: mu, sigma^2, recenter, rescale)

BnState make_bn_state(std::size_t n, GammaMode mode) {
    BnState s;
    s.bias_param = Tensor::zeros({1, n});
    s.log_gamma = Tensor::zeros({1, mode == GammaMode::kPerChannel ? n : 1});
    s.mode = mode;
    return s;
}

Var batchnorm(Graph& g, Var x, Var bias_param, Var log_gamma, real c, BnMode mode, GammaMode gmode,
              real tol, int max_iter, Tensor* out_mu, real* out_var) {
    if (x.v.rows() < 2) throw ContractError("batchnorm: population must have at least 2 points");
    const real sc = std::sqrt(c);
    Var mu = mode == BnMode::kMidpoint ? poincare_midpoint(g, x, c)
                                       : frechet_mean(g, x, c, tol, max_iter, real(0.5));
    // z = (-mu) (+) x feeds both the variance and log_mu; share it.
    Var z = g.mobius_add(g.negate(mu), x, c);
    Var rho = g.unary(UnaryFn::kSqrt, g.rownormsq(z));
    Var d2 = g.unary(UnaryFn::kSquare, g.unary(UnaryFn::kAtanh, rho, sc), 1, 4 / c);
    Var var = g.mean_rows(d2);
    Var v = g.f_log(mu, z, c);
    Var beta = g.project(g.exp0(bias_param, c), c);
    Var w = g.parallel_transport(mu, beta, v, c);
    const real sigma2 = var.v.at(0);
    Var scaled = w;
    if (sigma2 >= kVarFloor) {
        Var gamma = g.unary(UnaryFn::kExp, log_gamma);
        if (gmode == GammaMode::kScalar) {
            Var f = g.unary(UnaryFn::kSqrt, g.hadamard(gamma, g.unary(UnaryFn::kRecip, var)));
            scaled = g.rowscale(w, f);
        } else {
            Var f = g.unary(UnaryFn::kSqrt, g.rowscale(gamma, g.unary(UnaryFn::kRecip, var)));
            scaled = g.hadamard(w, g.bcast_rows(f, w.v.rows()));
        }
    }
    Var out = g.project(g.exp_at(beta, scaled, c), c);
    if (out_mu) *out_mu = mu.v;
    if (out_var) *out_var = sigma2;
    return out;
}

Tensor batchnorm_forward(const Tensor& batch, BnState& state, real c, BnMode mode) {
    Graph g(nullptr);
    Tensor mu;
    real var = 0;
    Var out = batchnorm(g, Var{batch, -1}, Var{state.bias_param, -1}, Var{state.log_gamma, -1}, c,
                        mode, state.mode, real(1e-6), 200, &mu, &var);
    state.last_mu = mu;
    state.last_var = var;
    return out.v;
}

// ---------------------------------------------------------------------------
// 2D Poincare convolution

void ConvSpec::validate() const {
    if (k < 1 || k % 2 == 0) throw ContractError("ConvSpec: receptive field K must be odd");
    if (stride < 1) throw ContractError("ConvSpec: stride must be >= 1");
    if (pad < 0) throw ContractError("ConvSpec: padding must be >= 0");
    if (c_in < 1 || c_out < 1) throw ContractError("ConvSpec: channel counts must be >= 1");
}

int ConvSpec::out_dim(int in) const { return (in + 2 * pad - k) / stride + 1; }

std::shared_ptr<const UnfoldTable> make_unfold_index(int b, int h, int w, const ConvSpec& spec) {
    spec.validate();
    const int ho = spec.out_dim(h), wo = spec.out_dim(w);
    if (ho < 1 || wo < 1) throw ContractError("conv2d: output dimensions are empty");
    auto table = std::make_shared<UnfoldTable>();
    const std::size_t kk = static_cast<std::size_t>(spec.k) * spec.k;
    table->out_rows = static_cast<std::size_t>(b) * ho * wo;
    table->k = kk;
    table->in_rows = static_cast<std::size_t>(b) * h * w;
    table->fwd.reserve(table->out_rows * kk);
    for (int bi = 0; bi < b; ++bi) {
        for (int oi = 0; oi < ho; ++oi) {
            for (int oj = 0; oj < wo; ++oj) {
                // Receptive field in row-major order, channels innermost.
                for (int ki = 0; ki < spec.k; ++ki) {
                    for (int kj = 0; kj < spec.k; ++kj) {
                        const int ii = oi * spec.stride + ki - spec.pad;
                        const int jj = oj * spec.stride + kj - spec.pad;
                        if (ii < 0 || ii >= h || jj < 0 || jj >= w) {
                            table->fwd.push_back(-1); // ball-origin padding
                        } else {
                            table->fwd.push_back((bi * h + ii) * w + jj);
                        }
                    }
                }
            }
        }
    }
    // Inverse mapping (counting sort) for the race-free backward.
    table->inv_off.assign(table->in_rows + 1, 0);
    for (std::int32_t v : table->fwd) {
        if (v >= 0) ++table->inv_off[static_cast<std::size_t>(v) + 1];
    }
    for (std::size_t i = 0; i < table->in_rows; ++i) table->inv_off[i + 1] += table->inv_off[i];
    table->inv.resize(table->fwd.size());
    std::vector<std::int32_t> cursor(table->inv_off.begin(), table->inv_off.end() - 1);
    for (std::size_t slot = 0; slot < table->fwd.size(); ++slot) {
        const std::int32_t v = table->fwd[slot];
        if (v >= 0) table->inv[cursor[v]++] = static_cast<std::int32_t>(slot);
    }
    table->inv.resize(table->inv_off[table->in_rows]);
    return table;
}

Var conv2d(Graph& g, Var x, int b, int h, int w, const ConvSpec& spec, Var Z, Var r, real c,
           std::shared_ptr<const UnfoldTable> idx) {
    spec.validate();
    if (static_cast<int>(x.v.cols()) != spec.c_in) throw ContractError("conv2d: channel mismatch");
    if (Z.v.rows() != static_cast<std::size_t>(spec.k) * spec.k * spec.c_in ||
        Z.v.cols() != static_cast<std::size_t>(spec.c_out)) {
        throw ContractError("conv2d: params expect fan-in K^2*C_in and fan-out C_out");
    }
    if (!idx) idx = make_unfold_index(b, h, w, spec);
    // log0 of the whole map once; origin padding becomes zero rows of the
    // tangent unfold, and the equal part sizes collapse the beta scaling to
    // one constant beta_n / beta_{C_in}.
    Var t = g.log0(x, c);
    const real bscale = beta_ratio(static_cast<std::size_t>(spec.k) * spec.k * spec.c_in,
                                   static_cast<std::size_t>(spec.c_in));
    Var u = g.gather_rows(t, std::move(idx), bscale);
    Var cat = g.project(g.exp0(u, c), c);
    return fc(g, cat, Z, r, c);
}

BallFeatureMap conv2d(const BallFeatureMap& input, const ConvSpec& spec, const FcParams& p) {
    Graph g(nullptr);
    Var out = conv2d(g, Var{input.data, -1}, input.b, input.h, input.w, spec, Var{p.Z, -1},
                     Var{p.r, -1}, input.c);
    BallFeatureMap res;
    res.data = out.v;
    res.b = input.b;
    res.h = spec.out_dim(input.h);
    res.w = spec.out_dim(input.w);
    res.c = input.c;
    return res;
}

// ---------------------------------------------------------------------------
// Residual block: relu_p( shortcut(x) (+) G(x) ),
// G = conv -> bn -> relu_p -> conv -> bn

Var residual_block(Graph& g, Var x, int b, int h, int w, const ConvSpec& spec, ResidualVars vars,
                   real c, BnMode bn_mode, GammaMode gmode) {
    const bool shape_change = spec.stride != 1 || spec.c_in != spec.c_out;
    if (shape_change && !vars.down_z.has_value()) {
        throw ContractError("residual_block: downsample params required when shape changes");
    }
    Var hvar = conv2d(g, x, b, h, w, spec, vars.conv1_z, vars.conv1_r, c, vars.idx1);
    hvar = batchnorm(g, hvar, vars.bn1_bias, vars.bn1_lgamma, c, bn_mode, gmode, real(1e-6), 200);
    hvar = relu_p(g, hvar, c);
    const int h2 = spec.out_dim(h), w2 = spec.out_dim(w);
    ConvSpec spec2 = spec;
    spec2.stride = 1;
    spec2.c_in = spec.c_out;
    spec2.pad = spec.k / 2;
    hvar = conv2d(g, hvar, b, h2, w2, spec2, vars.conv2_z, vars.conv2_r, c, vars.idx2);
    hvar = batchnorm(g, hvar, vars.bn2_bias, vars.bn2_lgamma, c, bn_mode, gmode, real(1e-6), 200);
    Var shortcut = x;
    if (shape_change) {
        ConvSpec down;
        down.k = 1;
        down.stride = spec.stride;
        down.pad = 0;
        down.c_in = spec.c_in;
        down.c_out = spec.c_out;
        shortcut = conv2d(g, x, b, h, w, down, *vars.down_z, *vars.down_r, c, vars.idx_down);
    }
    Var sum = g.project(g.mobius_add(shortcut, hvar, c), c);
    return relu_p(g, sum, c);
}

} // namespace presnet::nn
