#include "presnet/graph.hpp"

#include <cmath>

#include "presnet/elem_ops.hpp"
#include "presnet/error.hpp"
#include "presnet/gyro.hpp"
#include "presnet/layers.hpp"

namespace presnet {

Var Graph::rec(Op op, std::vector<Var> inputs, std::vector<Tensor> saved, std::vector<real> attrs,
               std::vector<std::int64_t> iattrs, Tensor value,
               std::shared_ptr<const std::vector<std::int32_t>> index, const CustomOp* custom) {
    if (!tape_) return Var{std::move(value), -1};
    std::vector<NodeId> ids;
    ids.reserve(inputs.size());
    for (const Var& in : inputs) {
        if (in.id < 0) throw ContractError("Graph: input Var was not created on this tape");
        ids.push_back(in.id);
    }
    Var out;
    out.v = value;
    out.id = tape_->record(op, std::move(ids), std::move(saved), std::move(attrs), std::move(iattrs),
                           std::move(value), std::move(index), custom);
    return out;
}

Var Graph::leaf(Tensor t) {
    if (!tape_) return Var{std::move(t), -1};
    Var out;
    out.v = t;
    out.id = tape_->leaf(std::move(t));
    return out;
}

Var Graph::constant(Tensor t) { return leaf(t.with_requires_grad(false)); }

// --------------------------------------------------------------------------
// Elementary builders

Var Graph::add(Var a, Var b) { return axpby(a, b, 1, 1, 0); }
Var Graph::sub(Var a, Var b) { return axpby(a, b, 1, -1, 0); }

Var Graph::axpby(Var a, Var b, real alpha, real beta, real gamma) {
    Tensor v = elem::axpby(a.v, b.v, alpha, beta, gamma);
    return rec(Op::kAxpby, {a, b}, {}, {alpha, beta, gamma},
               {static_cast<std::int64_t>(a.v.rows()), static_cast<std::int64_t>(b.v.rows())},
               std::move(v));
}

Var Graph::hadamard(Var a, Var b) {
    Tensor v = elem::hadamard(a.v, b.v);
    return rec(Op::kHadamard, {a, b}, {a.v, b.v}, {}, {}, std::move(v));
}

Var Graph::rowdot(Var a, Var b) {
    Tensor v = elem::rowdot(a.v, b.v);
    return rec(Op::kRowDot, {a, b}, {a.v, b.v}, {}, {}, std::move(v));
}

Var Graph::rownormsq(Var a) {
    Tensor v = elem::rownormsq(a.v);
    return rec(Op::kRowNormSq, {a}, {a.v}, {}, {}, std::move(v));
}

Var Graph::rowscale(Var a, Var s) {
    Tensor v = elem::rowscale(a.v, s.v);
    return rec(Op::kRowScale, {a, s}, {a.v, s.v}, {}, {}, std::move(v));
}

Var Graph::affine(Var a, real alpha, real beta) {
    Tensor v = elem::affine(a.v, alpha, beta);
    return rec(Op::kAffine, {a}, {}, {alpha, beta}, {}, std::move(v));
}

Var Graph::unary(UnaryFn f, Var a, real pre, real post, real carg) {
    Tensor v = elem::unary(f, a.v, pre, post, carg);
    return rec(Op::kUnary, {a}, {a.v}, {pre, post, carg}, {static_cast<std::int64_t>(f)},
               std::move(v));
}

Var Graph::matmul(Var a, Var b) {
    Tensor v = elem::matmul(a.v, b.v);
    return rec(Op::kMatmul, {a, b}, {a.v, b.v}, {}, {}, std::move(v));
}

Var Graph::colnorm(Var z) {
    Tensor v = elem::colnorm(z.v);
    return rec(Op::kColNorm, {z}, {z.v}, {}, {}, std::move(v));
}

Var Graph::bcast_rows(Var t, std::size_t rows) {
    Tensor v = elem::bcast_rows(t.v, rows);
    return rec(Op::kBcastRows, {t}, {}, {}, {}, std::move(v));
}

Var Graph::concat(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat: empty part list");
    std::vector<Tensor> vals;
    std::vector<std::int64_t> widths;
    for (const Var& p : parts) {
        vals.push_back(p.v);
        widths.push_back(static_cast<std::int64_t>(p.v.cols()));
    }
    Tensor v = elem::concat_cols(vals);
    return rec(Op::kConcat, parts, {}, {}, std::move(widths), std::move(v));
}

Var Graph::gather_rows(Var a, std::shared_ptr<const UnfoldTable> table, real scale) {
    Tensor v = elem::gather_rows(a.v, table->fwd, table->out_rows, table->k, scale);
    if (!tape_) return Var{std::move(v), -1};
    Node n;
    n.op = Op::kGatherRows;
    n.inputs = {a.id};
    n.attrs = {scale};
    n.iattrs = {static_cast<std::int64_t>(a.v.rows()), static_cast<std::int64_t>(table->k),
                static_cast<std::int64_t>(a.v.cols())};
    n.unfold = std::move(table);
    n.value = v;
    if (a.id < 0) throw ContractError("Graph: input Var was not created on this tape");
    Var out;
    out.v = std::move(v);
    out.id = tape_->record(std::move(n));
    return out;
}

Var Graph::sum_rows(Var a) {
    Tensor v = elem::sum_rows(a.v);
    return rec(Op::kSumRows, {a}, {}, {}, {static_cast<std::int64_t>(a.v.rows())}, std::move(v));
}

Var Graph::mean_rows(Var a) {
    Tensor v = elem::mean_rows(a.v);
    return rec(Op::kMeanRows, {a}, {}, {}, {static_cast<std::int64_t>(a.v.rows())}, std::move(v));
}

Var Graph::sum_groups(Var a, std::size_t group_size) {
    Tensor v = elem::sum_groups(a.v, group_size);
    return rec(Op::kSumGroups, {a}, {}, {}, {static_cast<std::int64_t>(group_size)}, std::move(v));
}

Var Graph::softmax_xent(Var scores, std::shared_ptr<const std::vector<std::int32_t>> labels) {
    Tensor probs;
    Tensor v = elem::softmax_xent(scores.v, *labels, &probs);
    return rec(Op::kSoftmaxXent, {scores}, {probs}, {}, {}, std::move(v), std::move(labels));
}

// --------------------------------------------------------------------------
// Hyperbolic primitives: fused node, or compositional subgraph in naive mode

Var Graph::mobius_add(Var x, Var y, real c) {
    if (naive()) {
        Var xy = rowdot(x, y);
        Var nx = rownormsq(x);
        Var ny = rownormsq(y);
        Var a = axpby(xy, ny, 2 * c, c, 1);
        Var b = affine(nx, -c, 1);
        Var t = hadamard(nx, ny);
        Var d = axpby(xy, t, 2 * c, c * c, 1);
        Var num = add(rowscale(x, a), rowscale(y, b));
        return rowscale(num, unary(UnaryFn::kRecip, d));
    }
    gyro::MobiusSaved ms;
    Tensor v = gyro::mobius_add_raw(x.v, y.v, c, &ms);
    return rec(Op::kMobiusAdd, {x, y}, {x.v, y.v, ms.a, ms.b, ms.d}, {c}, {}, std::move(v));
}

Var Graph::mobius_scalar(real r, Var x, real c) {
    if (naive()) {
        const real sc = std::sqrt(c);
        Var rho = unary(UnaryFn::kSqrt, rownormsq(x));
        Var at = unary(UnaryFn::kAtanh, rho, sc);
        Var T = unary(UnaryFn::kTanh, at, r);
        Var s = hadamard(T, unary(UnaryFn::kRecip, rho, sc));
        return rowscale(x, s);
    }
    Tensor v = gyro::mobius_scalar_raw(r, x.v, c);
    return rec(Op::kMobiusScalar, {x}, {x.v}, {c, r}, {}, std::move(v));
}

Var Graph::conformal(Var x, real c) {
    if (naive()) {
        Var B = affine(rownormsq(x), -c, 1);
        return unary(UnaryFn::kRecip, B, 1, 2);
    }
    Tensor v = gyro::conformal_factor(x.v, c);
    return rec(Op::kConformal, {x}, {x.v}, {c}, {}, std::move(v));
}

Var Graph::exp0(Var v, real c) {
    if (naive()) {
        const real sc = std::sqrt(c);
        Var rho = unary(UnaryFn::kSqrt, rownormsq(v));
        Var t = unary(UnaryFn::kTanh, rho, sc);
        Var s = hadamard(t, unary(UnaryFn::kRecip, rho, sc));
        return rowscale(v, s);
    }
    Tensor out = gyro::exp0_raw(v.v, c);
    return rec(Op::kExp0, {v}, {v.v}, {c}, {}, std::move(out));
}

Var Graph::log0(Var y, real c) {
    if (naive()) {
        const real sc = std::sqrt(c);
        Var rho = unary(UnaryFn::kSqrt, rownormsq(y));
        Var t = unary(UnaryFn::kAtanh, rho, sc);
        Var s = hadamard(t, unary(UnaryFn::kRecip, rho, sc));
        return rowscale(y, s);
    }
    Tensor out = gyro::log0(y.v, c);
    return rec(Op::kLog0, {y}, {y.v}, {c}, {}, std::move(out));
}

Var Graph::zc_exp(Var x, Var v, real c) {
    if (naive()) {
        const real sc = std::sqrt(c);
        Var B = affine(rownormsq(x), -c, 1);
        Var iB = unary(UnaryFn::kRecip, B);
        Var rho = unary(UnaryFn::kSqrt, rownormsq(v));
        Var arg = hadamard(rho, iB);
        Var th = unary(UnaryFn::kTanh, arg, sc);
        Var s = hadamard(th, unary(UnaryFn::kRecip, rho, sc));
        return rowscale(v, s);
    }
    Tensor out = gyro::zc_exp_raw(x.v, v.v, c);
    return rec(Op::kZcExp, {x, v}, {x.v, v.v}, {c}, {}, std::move(out));
}

Var Graph::f_log(Var x, Var z, real c) {
    if (naive()) {
        const real sc = std::sqrt(c);
        Var B = affine(rownormsq(x), -c, 1);
        Var rho = unary(UnaryFn::kSqrt, rownormsq(z));
        Var at = unary(UnaryFn::kAtanh, rho, sc);
        Var s0 = hadamard(at, unary(UnaryFn::kRecip, rho, sc));
        Var s = hadamard(s0, B);
        return rowscale(z, s);
    }
    Tensor out = gyro::f_log(x.v, z.v, c);
    return rec(Op::kFLog, {x, z}, {x.v, z.v}, {c}, {}, std::move(out));
}

Var Graph::project(Var x, real c) {
    if (naive()) {
        const real shell = (1 - gyro::kBoundaryEps) / std::sqrt(c);
        Var rho = unary(UnaryFn::kSqrt, rownormsq(x));
        Var rc = unary(UnaryFn::kMaxc, rho, 1, 1, shell);
        Var s = unary(UnaryFn::kRecip, rc, 1, shell);
        return rowscale(x, s);
    }
    Tensor out = gyro::project(x.v, c);
    return rec(Op::kProject, {x}, {x.v}, {c}, {}, std::move(out));
}

Var Graph::mlr(Var x, Var Z, Var r, real c) {
    if (naive()) {
        const real sc = std::sqrt(c);
        const std::size_t R = x.v.rows();
        Var P = matmul(x, Z);
        Var nu = colnorm(Z);
        Var Pn = hadamard(P, bcast_rows(unary(UnaryFn::kRecip, nu), R));
        Var lam = conformal(x, c);
        Var t1 = rowscale(Pn, lam);
        Var ch = unary(UnaryFn::kCosh, r, 2 * sc);
        Var sh = unary(UnaryFn::kSinh, r, 2 * sc);
        Var t2 = hadamard(affine(t1, sc, 0), bcast_rows(ch, R));
        Var t3 = rowscale(bcast_rows(sh, R), affine(lam, 1, -1));
        Var A = sub(t2, t3);
        Var As = unary(UnaryFn::kAsinh, A);
        return hadamard(As, bcast_rows(affine(nu, 2 / sc, 0), R));
    }
    nn::MlrSaved ms;
    Tensor v = nn::mlr_forward(x.v, Z.v, r.v, c, &ms);
    return rec(Op::kMlr, {x, Z, r}, {x.v, Z.v, r.v, ms.P, ms.lambda, ms.nu}, {c}, {}, std::move(v));
}

// --------------------------------------------------------------------------
// Compositions

Var Graph::exp_at(Var x, Var v, real c) { return mobius_add(x, zc_exp(x, v, c), c); }

Var Graph::log_at(Var x, Var y, real c) {
    return f_log(x, mobius_add(negate(x), y, c), c);
}

Var Graph::distance_sq(Var x, Var y, real c) {
    const real sc = std::sqrt(c);
    Var z = mobius_add(negate(x), y, c);
    Var rho = unary(UnaryFn::kSqrt, rownormsq(z));
    Var t = unary(UnaryFn::kAtanh, rho, sc);
    return unary(UnaryFn::kSquare, t, 1, 4 / c);
}

Var Graph::gyrate_vector(Var x, Var y, Var v, real c) {
    const real sc = std::sqrt(c);
    // Rescale into the ball, gyrate through the Mobius-addition identity,
    // scale back out; exact because gyr[x, y] is linear.
    Var rho = unary(UnaryFn::kSqrt, rownormsq(v));
    Var alpha = unary(UnaryFn::kMaxc, rho, 2 * sc, 1, 2 * sc * gyro::kZeroEps);
    Var vb = rowscale(v, unary(UnaryFn::kRecip, alpha));
    Var inner = mobius_add(x, mobius_add(y, vb, c), c);
    Var xy = mobius_add(x, y, c);
    Var gz = mobius_add(negate(xy), inner, c);
    return rowscale(gz, alpha);
}

Var Graph::parallel_transport(Var x, Var y, Var v, real c) {
    Var s = hadamard(conformal(x, c), unary(UnaryFn::kRecip, conformal(y, c)));
    Var g = gyrate_vector(y, negate(x), v, c);
    return rowscale(g, s);
}

} // namespace presnet
