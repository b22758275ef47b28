#include "presnet/gyro.hpp"

#include <cmath>

#include "presnet/error.hpp"
#include "presnet/parallel.hpp"

namespace presnet::gyro {

namespace {

real dot(const real* a, const real* b, std::size_t n) {
    real s = 0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

real normsq(const real* a, std::size_t n) { return dot(a, a, n); }

struct BinShape {
    std::size_t rows, n;
    std::size_t sx, sy; // row strides (0 when broadcasting a 1-row operand)
};

BinShape bin_shape(const Tensor& x, const Tensor& y, const char* op) {
    if (x.cols() != y.cols()) {
        throw ContractError(std::string(op) + ": dimension mismatch " + shape_str(x.shape()) + " vs " +
                            shape_str(y.shape()));
    }
    const std::size_t rx = x.rows(), ry = y.rows();
    if (rx != ry && rx != 1 && ry != 1) {
        throw ContractError(std::string(op) + ": row mismatch " + shape_str(x.shape()) + " vs " +
                            shape_str(y.shape()));
    }
    BinShape s;
    s.n = x.cols();
    s.rows = std::max(rx, ry);
    s.sx = (rx == 1 && s.rows > 1) ? 0 : s.n;
    s.sy = (ry == 1 && s.rows > 1) ? 0 : s.n;
    return s;
}

Shape rowcol_shape(const Tensor& like, std::size_t rows, std::size_t ncols) {
    if (rows == like.rows() && ncols == like.cols()) return like.shape();
    return Shape{rows, ncols};
}

// Runs a two-output rowwise backward kernel. Broadcast (1-row) sides are
// reduced through kReduceChunks ordered partial sums, so the result is
// bit-identical for every thread count.
template <typename RowFn>
void binary_backward_rows(const BinShape& s, TensorBuf& gx, TensorBuf& gy, RowFn&& row_fn) {
    const bool bx = s.sx == 0, by = s.sy == 0;
    const std::size_t n = s.n;
    if (!bx && !by) {
        parallel_for(s.rows, [&](std::size_t r0, std::size_t r1) {
            std::vector<real> tx(n), ty(n);
            for (std::size_t r = r0; r < r1; ++r) {
                row_fn(r, tx.data(), ty.data());
                real* px = gx.data() + r * n;
                real* py = gy.data() + r * n;
                for (std::size_t i = 0; i < n; ++i) px[i] = tx[i];
                for (std::size_t i = 0; i < n; ++i) py[i] = ty[i];
            }
        });
        return;
    }
    const std::size_t nc = std::min<std::size_t>(kReduceChunks, s.rows);
    std::vector<real> partx(bx ? nc * n : 0, 0), party(by ? nc * n : 0, 0);
    parallel_for(
        nc,
        [&](std::size_t c0, std::size_t c1) {
            std::vector<real> tx(n), ty(n);
            for (std::size_t ci = c0; ci < c1; ++ci) {
                const std::size_t r0 = s.rows * ci / nc, r1 = s.rows * (ci + 1) / nc;
                real* ax = bx ? partx.data() + ci * n : nullptr;
                real* ay = by ? party.data() + ci * n : nullptr;
                for (std::size_t r = r0; r < r1; ++r) {
                    row_fn(r, tx.data(), ty.data());
                    if (bx) {
                        for (std::size_t i = 0; i < n; ++i) ax[i] += tx[i];
                    } else {
                        real* px = gx.data() + r * n;
                        for (std::size_t i = 0; i < n; ++i) px[i] = tx[i];
                    }
                    if (by) {
                        for (std::size_t i = 0; i < n; ++i) ay[i] += ty[i];
                    } else {
                        real* py = gy.data() + r * n;
                        for (std::size_t i = 0; i < n; ++i) py[i] = ty[i];
                    }
                }
            }
        },
        true);
    if (bx) {
        real* px = gx.data();
        for (std::size_t ci = 0; ci < nc; ++ci) {
            const real* ax = partx.data() + ci * n;
            for (std::size_t i = 0; i < n; ++i) px[i] += ax[i];
        }
    }
    if (by) {
        real* py = gy.data();
        for (std::size_t ci = 0; ci < nc; ++ci) {
            const real* ay = party.data() + ci * n;
            for (std::size_t i = 0; i < n; ++i) py[i] += ay[i];
        }
    }
}

} // namespace

Curvature::Curvature(real c_) : c(c_) {
    if (!(c > 0) || !std::isfinite(c)) throw ContractError("Curvature: c must be positive and finite");
}

real Curvature::radius() const { return real(1) / std::sqrt(c); }

BallTensor::BallTensor(Tensor coords_, Curvature curv_)
    : coords(project(coords_, curv_.c)), curv(curv_) {}

Tensor negate(const Tensor& x) { return scale(x, real(-1)); }

// ---------------------------------------------------------------------------
// Mobius addition

Tensor mobius_add_raw(const Tensor& x, const Tensor& y, real c, MobiusSaved* saved) {
    const BinShape s = bin_shape(x, y, "mobius_add");
    TensorBuf out(rowcol_shape(x.rows() >= y.rows() ? x : y, s.rows, s.n), kUninit);
    TensorBuf ta({s.rows, 1}, kUninit), tb({s.rows, 1}, kUninit), td({s.rows, 1}, kUninit);
    const real* px = x.data();
    const real* py = y.data();
    real* pa = ta.data();
    real* pb = tb.data();
    real* pd = td.data();
    real* po = out.data();
    parallel_for(s.rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
            const real* xr = px + r * s.sx;
            const real* yr = py + r * s.sy;
            const real xy = dot(xr, yr, s.n);
            const real nx = normsq(xr, s.n);
            const real ny = normsq(yr, s.n);
            const real a = 1 + 2 * c * xy + c * ny;
            const real b = 1 - c * nx;
            const real d = 1 + 2 * c * xy + c * c * nx * ny;
            pa[r] = a;
            pb[r] = b;
            pd[r] = d;
            real* o = po + r * s.n;
            const real inv = 1 / d;
            for (std::size_t i = 0; i < s.n; ++i) o[i] = (a * xr[i] + b * yr[i]) * inv;
        }
    });
    if (saved) {
        saved->a = ta.freeze();
        saved->b = tb.freeze();
        saved->d = td.freeze();
    }
    return out.freeze();
}

Tensor mobius_add(const Tensor& x, const Tensor& y, real c) {
    return project(mobius_add_raw(x, y, c), c);
}

void mobius_add_backward(const Tensor& u, const Tensor& x, const Tensor& y, real c,
                         Tensor* grad_x, Tensor* grad_y, const MobiusSaved* saved) {
    const BinShape s = bin_shape(x, y, "mobius_add_backward");
    if (u.rows() != s.rows || u.cols() != s.n) {
        throw ContractError("mobius_add_backward: output gradient shape mismatch");
    }
    MobiusSaved local;
    if (!saved) {
        mobius_add_raw(x, y, c, &local);
        saved = &local;
    }
    TensorBuf gx = s.sx ? TensorBuf(x.shape(), kUninit) : TensorBuf(x.shape());
    TensorBuf gy = s.sy ? TensorBuf(y.shape(), kUninit) : TensorBuf(y.shape());
    const real* px = x.data();
    const real* py = y.data();
    const real* pu = u.data();
    const real* pa = saved->a.data();
    const real* pb = saved->b.data();
    const real* pd = saved->d.data();
    binary_backward_rows(s, gx, gy, [&](std::size_t r, real* tmpx, real* tmpy) {
        const real* xr = px + r * s.sx;
        const real* yr = py + r * s.sy;
        const real* ur = pu + r * s.n;
        const real a = pa[r], b = pb[r], d = pd[r];
        const real nx = normsq(xr, s.n);
        const real ny = normsq(yr, s.n);
        const real ux = dot(ur, xr, s.n);
        const real uy = dot(ur, yr, s.n);
        const real theta = a * ux + b * uy;
        const real inv = 1 / d;
        const real k = 2 * c * inv;
        // u^T J_x = (a/d) u - (2c/d)(u.y + theta c||y||^2/d) x + (2c/d)(u.x - theta/d) y
        const real cx_x = -k * (uy + theta * c * ny * inv);
        const real cx_y = k * (ux - theta * inv);
        // u^T J_y = (b/d) u + (2c/d)(u.x - theta/d) x + (2c/d)(u.x - c||x||^2 theta/d) y
        const real cy_x = k * (ux - theta * inv);
        const real cy_y = k * (ux - c * nx * theta * inv);
        for (std::size_t i = 0; i < s.n; ++i) {
            tmpx[i] = a * inv * ur[i] + cx_x * xr[i] + cx_y * yr[i];
            tmpy[i] = b * inv * ur[i] + cy_x * xr[i] + cy_y * yr[i];
        }
    });
    if (grad_x) *grad_x = gx.freeze();
    if (grad_y) *grad_y = gy.freeze();
}

// ---------------------------------------------------------------------------
// Mobius scalar multiplication

Tensor mobius_scalar_raw(real r, const Tensor& x, real c) {
    const std::size_t n = x.cols(), rows = x.rows();
    const real sc = std::sqrt(c);
    TensorBuf out(x.shape(), kUninit);
    const real* px = x.data();
    real* po = out.data();
    parallel_for(rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            const real* xr = px + row * n;
            real* o = po + row * n;
            const real rho = std::sqrt(normsq(xr, n));
            real w;
            if (rho < kZeroEps) {
                w = r; // tanh(r atanh(t))/t -> r as t -> 0
            } else {
                w = std::tanh(r * std::atanh(sc * rho)) / (sc * rho);
            }
            for (std::size_t i = 0; i < n; ++i) o[i] = w * xr[i];
        }
    });
    return out.freeze();
}

Tensor mobius_scalar(real r, const Tensor& x, real c) {
    return project(mobius_scalar_raw(r, x, c), c);
}

Tensor mobius_scalar_backward(const Tensor& u, real r, const Tensor& x, real c) {
    if (!u.same_shape(x)) throw ContractError("mobius_scalar_backward: shape mismatch");
    const std::size_t n = x.cols(), rows = x.rows();
    const real sc = std::sqrt(c);
    TensorBuf out(x.shape(), kUninit);
    const real* px = x.data();
    const real* pu = u.data();
    real* po = out.data();
    parallel_for(rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            const real* xr = px + row * n;
            const real* ur = pu + row * n;
            real* o = po + row * n;
            const real rho = std::sqrt(normsq(xr, n));
            if (rho < kZeroEps) {
                for (std::size_t i = 0; i < n; ++i) o[i] = r * ur[i];
                continue;
            }
            const real t = std::atanh(sc * rho);
            const real T = std::tanh(r * t);
            const real w = T / (sc * rho);
            const real sech2 = 1 - T * T;
            const real coef = dot(ur, xr, n) *
                              (r * sech2 / (rho * rho * (1 - c * rho * rho)) - T / (sc * rho * rho * rho));
            for (std::size_t i = 0; i < n; ++i) o[i] = coef * xr[i] + w * ur[i];
        }
    });
    return out.freeze();
}

// ---------------------------------------------------------------------------
// Conformal factor

Tensor conformal_factor(const Tensor& x, real c) {
    const std::size_t n = x.cols(), rows = x.rows();
    TensorBuf out({rows, 1}, kUninit);
    const real* px = x.data();
    real* po = out.data();
    parallel_for(rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            po[row] = 2 / (1 - c * normsq(px + row * n, n));
        }
    });
    return out.freeze();
}

Tensor conformal_factor_backward(const Tensor& u, const Tensor& x, real c) {
    if (u.rows() != x.rows() || u.cols() != 1) {
        throw ContractError("conformal_factor_backward: gradient must be [rows x 1]");
    }
    const std::size_t n = x.cols(), rows = x.rows();
    TensorBuf out(x.shape(), kUninit);
    const real* px = x.data();
    const real* pu = u.data();
    real* po = out.data();
    parallel_for(rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            const real* xr = px + row * n;
            const real B = 1 - c * normsq(xr, n);
            const real coef = 4 * c * pu[row] / (B * B);
            real* o = po + row * n;
            for (std::size_t i = 0; i < n; ++i) o[i] = coef * xr[i];
        }
    });
    return out.freeze();
}

// ---------------------------------------------------------------------------
// Exponential / logarithmic maps at the origin

Tensor exp0_raw(const Tensor& v, real c) {
    const std::size_t n = v.cols(), rows = v.rows();
    const real sc = std::sqrt(c);
    TensorBuf out(v.shape(), kUninit);
    const real* pv = v.data();
    real* po = out.data();
    parallel_for(rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            const real* vr = pv + row * n;
            real* o = po + row * n;
            const real rho = std::sqrt(normsq(vr, n));
            const real s = rho < kZeroEps ? real(1) : std::tanh(sc * rho) / (sc * rho);
            for (std::size_t i = 0; i < n; ++i) o[i] = s * vr[i];
        }
    });
    return out.freeze();
}

Tensor exp0(const Tensor& v, real c) { return project(exp0_raw(v, c), c); }

Tensor exp0_backward(const Tensor& u, const Tensor& v, real c) {
    if (!u.same_shape(v)) throw ContractError("exp0_backward: shape mismatch");
    const std::size_t n = v.cols(), rows = v.rows();
    const real sc = std::sqrt(c);
    TensorBuf out(v.shape(), kUninit);
    const real* pv = v.data();
    const real* pu = u.data();
    real* po = out.data();
    parallel_for(rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            const real* vr = pv + row * n;
            const real* ur = pu + row * n;
            real* o = po + row * n;
            const real rho = std::sqrt(normsq(vr, n));
            if (rho < kZeroEps) {
                for (std::size_t i = 0; i < n; ++i) o[i] = ur[i];
                continue;
            }
            const real th = std::tanh(sc * rho);
            const real ch = std::cosh(sc * rho);
            const real s = th / (sc * rho);
            const real coef =
                dot(ur, vr, n) * (1 / (rho * rho * ch * ch) - th / (sc * rho * rho * rho));
            for (std::size_t i = 0; i < n; ++i) o[i] = coef * vr[i] + s * ur[i];
        }
    });
    return out.freeze();
}

Tensor log0(const Tensor& y, real c) {
    const std::size_t n = y.cols(), rows = y.rows();
    const real sc = std::sqrt(c);
    TensorBuf out(y.shape(), kUninit);
    const real* py = y.data();
    real* po = out.data();
    parallel_for(rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            const real* yr = py + row * n;
            real* o = po + row * n;
            const real rho = std::sqrt(normsq(yr, n));
            const real s = rho < kZeroEps ? real(1) : std::atanh(sc * rho) / (sc * rho);
            for (std::size_t i = 0; i < n; ++i) o[i] = s * yr[i];
        }
    });
    return out.freeze();
}

Tensor log0_backward(const Tensor& u, const Tensor& y, real c) {
    if (!u.same_shape(y)) throw ContractError("log0_backward: shape mismatch");
    const std::size_t n = y.cols(), rows = y.rows();
    const real sc = std::sqrt(c);
    TensorBuf out(y.shape(), kUninit);
    const real* py = y.data();
    const real* pu = u.data();
    real* po = out.data();
    parallel_for(rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            const real* yr = py + row * n;
            const real* ur = pu + row * n;
            real* o = po + row * n;
            const real rho = std::sqrt(normsq(yr, n));
            if (rho < kZeroEps) {
                for (std::size_t i = 0; i < n; ++i) o[i] = ur[i];
                continue;
            }
            const real at = std::atanh(sc * rho);
            const real s = at / (sc * rho);
            const real coef = dot(ur, yr, n) * (1 / (rho * rho * (1 - c * rho * rho)) -
                                                at / (sc * rho * rho * rho));
            for (std::size_t i = 0; i < n; ++i) o[i] = coef * yr[i] + s * ur[i];
        }
    });
    return out.freeze();
}

// ---------------------------------------------------------------------------
// z_c and f_c, the two halves of the general exp/log maps

Tensor zc_exp_raw(const Tensor& x, const Tensor& v, real c) {
    const BinShape s = bin_shape(x, v, "zc_exp");
    const real sc = std::sqrt(c);
    TensorBuf out(rowcol_shape(v.rows() >= x.rows() ? v : x, s.rows, s.n), kUninit);
    const real* px = x.data();
    const real* pv = v.data();
    real* po = out.data();
    parallel_for(s.rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            const real* xr = px + row * s.sx;
            const real* vr = pv + row * s.sy;
            real* o = po + row * s.n;
            const real B = 1 - c * normsq(xr, s.n);
            const real rho = std::sqrt(normsq(vr, s.n));
            const real w = rho < kZeroEps ? 1 / B : std::tanh(sc * rho / B) / (sc * rho);
            for (std::size_t i = 0; i < s.n; ++i) o[i] = w * vr[i];
        }
    });
    return out.freeze();
}

void zc_exp_backward(const Tensor& u, const Tensor& x, const Tensor& v, real c,
                     Tensor* grad_x, Tensor* grad_v) {
    const BinShape s = bin_shape(x, v, "zc_exp_backward");
    if (u.rows() != s.rows || u.cols() != s.n) throw ContractError("zc_exp_backward: shape mismatch");
    const real sc = std::sqrt(c);
    TensorBuf gx = s.sx ? TensorBuf(x.shape(), kUninit) : TensorBuf(x.shape());
    TensorBuf gv = s.sy ? TensorBuf(v.shape(), kUninit) : TensorBuf(v.shape());
    const real* px = x.data();
    const real* pv = v.data();
    const real* pu = u.data();
    binary_backward_rows(s, gx, gv, [&](std::size_t row, real* tmpx, real* tmpv) {
        const real* xr = px + row * s.sx;
        const real* vr = pv + row * s.sy;
        const real* ur = pu + row * s.n;
        const real B = 1 - c * normsq(xr, s.n);
        const real rho = std::sqrt(normsq(vr, s.n));
        const real uv = dot(ur, vr, s.n);
        if (rho < kZeroEps) {
            for (std::size_t i = 0; i < s.n; ++i) {
                tmpx[i] = 0;
                tmpv[i] = ur[i] / B;
            }
            return;
        }
        const real arg = sc * rho / B;
        const real th = std::tanh(arg);
        const real ch = std::cosh(arg);
        const real sech2 = 1 / (ch * ch);
        // u^T J_x = 2c u.v sech^2(arg) / B^2 * x^T
        const real cx = 2 * c * uv * sech2 / (B * B);
        // u^T J_v: note the single power of B in the first term; the
        // squared power printed in some sources fails the finite
        // difference check.
        const real coef = uv * (sech2 / (rho * rho * B) - th / (sc * rho * rho * rho));
        const real w = th / (sc * rho);
        for (std::size_t i = 0; i < s.n; ++i) {
            tmpx[i] = cx * xr[i];
            tmpv[i] = coef * vr[i] + w * ur[i];
        }
    });
    if (grad_x) *grad_x = gx.freeze();
    if (grad_v) *grad_v = gv.freeze();
}

Tensor f_log(const Tensor& x, const Tensor& z, real c) {
    const BinShape s = bin_shape(x, z, "f_log");
    const real sc = std::sqrt(c);
    TensorBuf out(rowcol_shape(z.rows() >= x.rows() ? z : x, s.rows, s.n), kUninit);
    const real* px = x.data();
    const real* pz = z.data();
    real* po = out.data();
    parallel_for(s.rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            const real* xr = px + row * s.sx;
            const real* zr = pz + row * s.sy;
            real* o = po + row * s.n;
            const real B = 1 - c * normsq(xr, s.n);
            const real rho = std::sqrt(normsq(zr, s.n));
            real w;
            if (rho < kZeroEps) {
                w = B;
            } else {
                const real t = std::min(sc * rho, real(1) - real(1e-15));
                w = B * std::atanh(t) / (sc * rho);
            }
            for (std::size_t i = 0; i < s.n; ++i) o[i] = w * zr[i];
        }
    });
    return out.freeze();
}

void f_log_backward(const Tensor& u, const Tensor& x, const Tensor& z, real c,
                    Tensor* grad_x, Tensor* grad_z) {
    const BinShape s = bin_shape(x, z, "f_log_backward");
    if (u.rows() != s.rows || u.cols() != s.n) throw ContractError("f_log_backward: shape mismatch");
    const real sc = std::sqrt(c);
    TensorBuf gx = s.sx ? TensorBuf(x.shape(), kUninit) : TensorBuf(x.shape());
    TensorBuf gz = s.sy ? TensorBuf(z.shape(), kUninit) : TensorBuf(z.shape());
    const real* px = x.data();
    const real* pz = z.data();
    const real* pu = u.data();
    binary_backward_rows(s, gx, gz, [&](std::size_t row, real* tmpx, real* tmpz) {
        const real* xr = px + row * s.sx;
        const real* zr = pz + row * s.sy;
        const real* ur = pu + row * s.n;
        const real B = 1 - c * normsq(xr, s.n);
        const real rho = std::sqrt(normsq(zr, s.n));
        const real uz = dot(ur, zr, s.n);
        if (rho < kZeroEps) {
            for (std::size_t i = 0; i < s.n; ++i) {
                tmpx[i] = 0;
                tmpz[i] = B * ur[i];
            }
            return;
        }
        const real at = std::atanh(std::min(sc * rho, real(1) - real(1e-15)));
        // u^T J_x = -atanh(sqrt(c)||z||) (2c u.z / (sqrt(c)||z||)) x^T
        const real cx = -at * 2 * c * uz / (sc * rho);
        const real coef =
            uz * (B / (rho * rho * (1 - c * rho * rho)) - at * B / (sc * rho * rho * rho));
        const real w = at * B / (sc * rho);
        for (std::size_t i = 0; i < s.n; ++i) {
            tmpx[i] = cx * xr[i];
            tmpz[i] = coef * zr[i] + w * ur[i];
        }
    });
    if (grad_x) *grad_x = gx.freeze();
    if (grad_z) *grad_z = gz.freeze();
}

// ---------------------------------------------------------------------------
// Projection onto the shell of radius (1 - kBoundaryEps)/sqrt(c)

Tensor project(const Tensor& x, real c) {
    const std::size_t n = x.cols(), rows = x.rows();
    const real shell = (1 - kBoundaryEps) / std::sqrt(c);
    const real* px = x.data();
    // Fast path: nothing to clamp, share the input buffer.
    bool clean = true;
    for (std::size_t row = 0; row < rows && clean; ++row) {
        if (normsq(px + row * n, n) > shell * shell) clean = false;
    }
    if (clean) return x;
    TensorBuf out(x.shape(), kUninit);
    real* po = out.data();
    parallel_for(rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            const real* xr = px + row * n;
            real* o = po + row * n;
            const real rho = std::sqrt(normsq(xr, n));
            const real s = rho > shell ? shell / rho : real(1);
            for (std::size_t i = 0; i < n; ++i) o[i] = s * xr[i];
        }
    });
    return out.freeze();
}

Tensor project_backward(const Tensor& u, const Tensor& x, real c) {
    if (!u.same_shape(x)) throw ContractError("project_backward: shape mismatch");
    const std::size_t n = x.cols(), rows = x.rows();
    const real shell = (1 - kBoundaryEps) / std::sqrt(c);
    {
        // Identity branch for the whole batch: pass the gradient through.
        const real* px = x.data();
        bool clean = true;
        for (std::size_t row = 0; row < rows && clean; ++row) {
            if (normsq(px + row * n, n) > shell * shell) clean = false;
        }
        if (clean) return u;
    }
    TensorBuf out(x.shape(), kUninit);
    const real* px = x.data();
    const real* pu = u.data();
    real* po = out.data();
    parallel_for(rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            const real* xr = px + row * n;
            const real* ur = pu + row * n;
            real* o = po + row * n;
            const real rho = std::sqrt(normsq(xr, n));
            if (rho <= shell) {
                for (std::size_t i = 0; i < n; ++i) o[i] = ur[i];
            } else {
                const real ux = dot(ur, xr, n);
                const real s1 = shell / rho;
                const real s2 = shell * ux / (rho * rho * rho);
                for (std::size_t i = 0; i < n; ++i) o[i] = s1 * ur[i] - s2 * xr[i];
            }
        }
    });
    return out.freeze();
}

// ---------------------------------------------------------------------------
// Distance

Tensor distance(const Tensor& x, const Tensor& y, real c) {
    Tensor z = mobius_add_raw(negate(x), y, c);
    const std::size_t n = z.cols(), rows = z.rows();
    const real sc = std::sqrt(c);
    TensorBuf out({rows, 1}, kUninit);
    const real* pz = z.data();
    real* po = out.data();
    parallel_for(rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            const real rho = std::sqrt(normsq(pz + row * n, n));
            const real t = std::min(sc * rho, real(1) - real(1e-15));
            po[row] = 2 / sc * std::atanh(t);
        }
    });
    return out.freeze();
}

void distance_backward(const Tensor& u, const Tensor& x, const Tensor& y, real c,
                       Tensor* grad_x, Tensor* grad_y) {
    const BinShape s = bin_shape(x, y, "distance_backward");
    if (u.rows() != s.rows || u.cols() != 1) throw ContractError("distance_backward: gradient shape");
    Tensor nx = negate(x);
    MobiusSaved saved;
    Tensor z = mobius_add_raw(nx, y, c, &saved);
    // d = (2/sqrt(c)) atanh(sqrt(c)||z||); dd/dz = 2 z / (||z|| (1 - c||z||^2))
    TensorBuf gz(z.shape(), kUninit);
    const real* pz = z.data();
    const real* pu = u.data();
    real* pg = gz.data();
    parallel_for(s.rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t row = r0; row < r1; ++row) {
            const real* zr = pz + row * s.n;
            real* g = pg + row * s.n;
            const real rho = std::sqrt(normsq(zr, s.n));
            if (rho < kZeroEps) {
                for (std::size_t i = 0; i < s.n; ++i) g[i] = 0; // subgradient at x == y
                continue;
            }
            const real coef = pu[row] * 2 / (rho * (1 - c * rho * rho));
            for (std::size_t i = 0; i < s.n; ++i) g[i] = coef * zr[i];
        }
    });
    Tensor gnx;
    mobius_add_backward(gz.freeze(), nx, y, c, &gnx, grad_y, &saved);
    if (grad_x) *grad_x = negate(gnx);
}

// ---------------------------------------------------------------------------
// General exp/log maps as the paper's two-step compositions

Tensor exp_at_raw(const Tensor& x, const Tensor& v, real c) {
    return mobius_add_raw(x, zc_exp_raw(x, v, c), c);
}

Tensor exp_at(const Tensor& x, const Tensor& v, real c) {
    return project(exp_at_raw(x, v, c), c);
}

void exp_at_backward(const Tensor& u, const Tensor& x, const Tensor& v, real c,
                     Tensor* grad_x, Tensor* grad_v) {
    Tensor z = zc_exp_raw(x, v, c);
    Tensor gx1, gz;
    // Broadcast subtlety: u has output rows; pass through in two steps.
    mobius_add_backward(u, x, z, c, &gx1, &gz, nullptr);
    Tensor gx2;
    zc_exp_backward(gz, x, v, c, &gx2, grad_v);
    if (grad_x) *grad_x = add(gx1, gx2);
}

Tensor log_at(const Tensor& x, const Tensor& y, real c) {
    return f_log(x, mobius_add_raw(negate(x), y, c), c);
}

void log_at_backward(const Tensor& u, const Tensor& x, const Tensor& y, real c,
                     Tensor* grad_x, Tensor* grad_y) {
    Tensor nx = negate(x);
    MobiusSaved saved;
    Tensor z = mobius_add_raw(nx, y, c, &saved);
    Tensor gfx, gz;
    f_log_backward(u, x, z, c, &gfx, &gz);
    Tensor gnx;
    mobius_add_backward(gz, nx, y, c, &gnx, grad_y, &saved);
    if (grad_x) *grad_x = sub(gfx, gnx);
}

// ---------------------------------------------------------------------------
// Gyration and parallel transport

Tensor gyration(const Tensor& x, const Tensor& y, const Tensor& z, real c) {
    Tensor xy = mobius_add_raw(x, y, c);
    Tensor inner = mobius_add_raw(x, mobius_add_raw(y, z, c), c);
    return mobius_add_raw(negate(xy), inner, c);
}

Tensor gyrate_vector(const Tensor& x, const Tensor& y, const Tensor& v, real c) {
    // gyr[x, y] is linear, so rescale v into the ball, gyrate, scale back.
    const std::size_t n = v.cols(), rows = v.rows();
    const real sc = std::sqrt(c);
    TensorBuf vball(v.shape(), kUninit);
    std::vector<real> alpha(rows);
    const real* pv = v.data();
    real* pb = vball.data();
    for (std::size_t row = 0; row < rows; ++row) {
        const real* vr = pv + row * n;
        const real rho = std::sqrt(normsq(vr, n));
        const real a = rho < kZeroEps ? real(1) : 2 * sc * rho;
        alpha[row] = a;
        real* b = pb + row * n;
        for (std::size_t i = 0; i < n; ++i) b[i] = vr[i] / a;
    }
    Tensor g = gyration(x, y, vball.freeze(), c);
    TensorBuf out(g.shape(), kUninit);
    const real* pg = g.data();
    real* po = out.data();
    for (std::size_t row = 0; row < out.rows(); ++row) {
        const real a = alpha[rows == 1 ? 0 : row];
        const real* gr = pg + row * n;
        real* o = po + row * n;
        for (std::size_t i = 0; i < n; ++i) o[i] = a * gr[i];
    }
    return out.freeze();
}

Tensor parallel_transport(const Tensor& x, const Tensor& y, const Tensor& v, real c) {
    Tensor g = gyrate_vector(y, negate(x), v, c);
    Tensor lx = conformal_factor(x, c);
    Tensor ly = conformal_factor(y, c);
    const std::size_t n = g.cols(), rows = g.rows();
    TensorBuf out(g.shape(), kUninit);
    const real* pg = g.data();
    real* po = out.data();
    for (std::size_t row = 0; row < rows; ++row) {
        const real s = lx.at(lx.rows() == 1 ? 0 : row) / ly.at(ly.rows() == 1 ? 0 : row);
        const real* gr = pg + row * n;
        real* o = po + row * n;
        for (std::size_t i = 0; i < n; ++i) o[i] = s * gr[i];
    }
    return out.freeze();
}

// ---------------------------------------------------------------------------
// Typed wrappers

namespace {

void check_pair(const BallTensor& x, const BallTensor& y, const char* op) {
    if (x.dim() != y.dim()) throw ContractError(std::string(op) + ": dimension mismatch");
    if (x.curv.c != y.curv.c) throw ContractError(std::string(op) + ": curvature mismatch");
}

} // namespace

BallTensor mobius_add(const BallTensor& x, const BallTensor& y) {
    check_pair(x, y, "mobius_add");
    return BallTensor(mobius_add_raw(x.coords, y.coords, x.curv.c), x.curv);
}

BallTensor mobius_scalar(real r, const BallTensor& x) {
    return BallTensor(mobius_scalar_raw(r, x.coords, x.curv.c), x.curv);
}

BallTensor gyration(const BallTensor& x, const BallTensor& y, const BallTensor& z) {
    check_pair(x, y, "gyration");
    check_pair(x, z, "gyration");
    return BallTensor(gyration(x.coords, y.coords, z.coords, x.curv.c), x.curv);
}

Tensor distance(const BallTensor& x, const BallTensor& y) {
    check_pair(x, y, "distance");
    return distance(x.coords, y.coords, x.curv.c);
}

Tensor conformal_factor(const BallTensor& x) { return conformal_factor(x.coords, x.curv.c); }

BallTensor exp_map(const Curvature& curv, const TangentTensor& v) {
    if (v.at_origin()) return BallTensor(exp0_raw(v.coords, curv.c), curv);
    if (v.basepoint->c != curv.c) throw ContractError("exp_map: curvature mismatch");
    return BallTensor(exp_at_raw(v.basepoint->coords, v.coords, curv.c), curv);
}

TangentTensor log_map_origin(const BallTensor& y) {
    return TangentTensor{log0(y.coords, y.curv.c), std::nullopt};
}

TangentTensor log_map(const BallTensor& x, const BallTensor& y) {
    check_pair(x, y, "log_map");
    return TangentTensor{log_at(x.coords, y.coords, x.curv.c), BallPointRef{x.coords, x.curv.c}};
}

TangentTensor parallel_transport(const BallTensor& x, const BallTensor& y, const TangentTensor& v) {
    check_pair(x, y, "parallel_transport");
    if (v.dim() != x.dim()) throw ContractError("parallel_transport: dimension mismatch");
    return TangentTensor{parallel_transport(x.coords, y.coords, v.coords, x.curv.c),
                         BallPointRef{y.coords, y.curv.c}};
}

} // namespace presnet::gyro
