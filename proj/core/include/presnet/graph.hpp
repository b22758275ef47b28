#pragma once

#include <memory>
#include <vector>

#include "presnet/tape.hpp"

namespace presnet {

// A value plus its tape node. id is -1 only when no tape is attached
// (inference mode); inside a recording context every Var is a real node.
struct Var {
    Tensor v;
    NodeId id = -1;
};

// Define-by-run builder over an optional Tape. Hyperbolic primitives record
// one fused node each; with tape->naive set they expand into elementary
// nodes instead (same math, many nodes) for the computation-graph study.
class Graph {
public:
    explicit Graph(Tape* tape) : tape_(tape) {}

    bool recording() const { return tape_ != nullptr; }
    bool naive() const { return tape_ && tape_->naive; }
    Tape* tape() { return tape_; }

    Var leaf(Tensor t);
    Var constant(Tensor t); // leaf that never requires grad

    // elementary
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var axpby(Var a, Var b, real alpha, real beta, real gamma);
    Var hadamard(Var a, Var b);
    Var rowdot(Var a, Var b);
    Var rownormsq(Var a);
    Var rowscale(Var a, Var s);
    Var affine(Var a, real alpha, real beta);
    Var unary(UnaryFn f, Var a, real pre = 1, real post = 1, real carg = 0);
    Var matmul(Var a, Var b);
    Var colnorm(Var z);
    Var bcast_rows(Var t, std::size_t rows);
    Var concat(const std::vector<Var>& parts);
    Var gather_rows(Var a, std::shared_ptr<const UnfoldTable> table, real scale);
    Var sum_rows(Var a);
    Var mean_rows(Var a);
    Var sum_groups(Var a, std::size_t group_size);
    Var softmax_xent(Var scores, std::shared_ptr<const std::vector<std::int32_t>> labels);

    // fused hyperbolic primitives
    Var mobius_add(Var x, Var y, real c);
    Var mobius_scalar(real r, Var x, real c);
    Var conformal(Var x, real c);
    Var exp0(Var v, real c);
    Var log0(Var y, real c);
    Var zc_exp(Var x, Var v, real c);
    Var f_log(Var x, Var z, real c);
    Var project(Var x, real c);
    Var mlr(Var x, Var Z, Var r, real c);

    // compositions of the primitives above
    Var negate(Var x) { return affine(x, -1, 0); }
    Var exp_at(Var x, Var v, real c);
    Var log_at(Var x, Var y, real c);
    Var distance_sq(Var x, Var y, real c);
    Var gyrate_vector(Var x, Var y, Var v, real c);
    Var parallel_transport(Var x, Var y, Var v, real c);

private:
    Var rec(Op op, std::vector<Var> inputs, std::vector<Tensor> saved, std::vector<real> attrs,
            std::vector<std::int64_t> iattrs, Tensor value,
            std::shared_ptr<const std::vector<std::int32_t>> index = nullptr,
            const CustomOp* custom = nullptr);

    Tape* tape_;
};

} // namespace presnet
