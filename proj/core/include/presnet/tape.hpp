#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "presnet/tensor.hpp"

namespace presnet {

using NodeId = std::int32_t;

// Node operations. Hyperbolic primitives are *fused*: one node per call,
// with a hand-derived backward rule over the few tensors it saves. The
// elementary ops below them exist for plumbing (matmul, reductions, ...)
// and for the naive compositional mode used by the memory benchmark.
enum class Op : std::uint8_t {
    kLeaf,
    // elementary
    kAdd,
    kSub,
    kAxpby,      // alpha*a + beta*b + gamma (attrs)
    kHadamard,
    kRowDot,     // [Rxn],[Rxn] -> [Rx1]
    kRowNormSq,  // [Rxn] -> [Rx1]
    kRowScale,   // [Rxn] * [Rx1 or 1x1]
    kAffine,     // alpha*a + beta (attrs)
    kUnary,      // post * f(pre * a); f selected by iattr[0]
    kMatmul,     // [Rxm] x [mxn]
    kColNorm,    // [mxn] -> [1xn]
    kBcastRows,  // [1xn] -> [Rxn]
    kConcat,     // along last axis
    kGatherRows, // unfold via index table, with constant scale
    kSumRows,    // [Rxn] -> [1xn]
    kMeanRows,   // [Rxn] -> [1x1] mean of everything (per-column? see impl)
    kSumGroups,  // [G*S x n] -> [G x n]
    kSoftmaxXent,
    // fused hyperbolic primitives
    kMobiusAdd,
    kMobiusScalar,
    kConformal,
    kExp0,
    kLog0,
    kZcExp,
    kFLog,
    kProject,
    kMlr,
    kCustom,
};

enum class UnaryFn : std::int64_t {
    kTanh = 0,
    kAtanh,
    kSinh,
    kAsinh,
    kCosh,
    kSqrt,
    kRecip,
    kSquare,
    kExp,
    kMaxc, // max(x, carg); carg = 0 gives ReLU
};

struct Node;

// Extension point: a fused node whose backward rule lives outside the tape.
struct CustomOp {
    const char* name;
    // Writes u^T J per input slot into input_grads (undefined = no gradient).
    void (*backward)(const Node& node, const Tensor& grad_out, std::vector<Tensor>& input_grads);
};

// Receptive-field index table for the unfold op, with the inverse mapping
// used by the scatter-free backward. fwd holds out_rows*k input-row ids
// (-1 = padding); inv lists each input row's consumer slots (out_row*k + t)
// packed by inv_off prefix offsets.
struct UnfoldTable {
    std::vector<std::int32_t> fwd;
    std::vector<std::int32_t> inv_off;
    std::vector<std::int32_t> inv;
    std::size_t out_rows = 0;
    std::size_t k = 0;
    std::size_t in_rows = 0;
};

struct Node {
    Op op = Op::kLeaf;
    std::vector<NodeId> inputs;
    std::vector<Tensor> saved;       // exactly what the backward rule references
    std::vector<real> attrs;
    std::vector<std::int64_t> iattrs;
    std::shared_ptr<const std::vector<std::int32_t>> index; // labels etc.
    std::shared_ptr<const UnfoldTable> unfold;              // kGatherRows only
    Tensor value;
    bool requires_grad = false;
    const CustomOp* custom = nullptr;
};

// Gradients keyed by node id. Shapes always match the node's value shape.
class GradMap {
public:
    explicit GradMap(std::size_t n) : grads_(n) {}
    const Tensor* find(NodeId id) const {
        return (id >= 0 && static_cast<std::size_t>(id) < grads_.size() && grads_[id].defined())
                   ? &grads_[id]
                   : nullptr;
    }
    Tensor& slot(NodeId id) { return grads_[id]; }
    std::size_t size() const { return grads_.size(); }

private:
    std::vector<Tensor> grads_;
};

// Append-only reverse-mode record. Single-threaded by contract; run one tape
// per thread. `naive` switches the graph builders to compositional elementary
// nodes for every hyperbolic primitive (slow; exists for the memory study).
class Tape {
public:
    bool naive = false;

    NodeId leaf(Tensor value);
    NodeId record(Node node);
    NodeId record(Op op, std::vector<NodeId> inputs, std::vector<Tensor> saved,
                  std::vector<real> attrs, std::vector<std::int64_t> iattrs, Tensor value,
                  std::shared_ptr<const std::vector<std::int32_t>> index = nullptr,
                  const CustomOp* custom = nullptr);

    std::size_t size() const { return nodes_.size(); }
    const Node& node(NodeId id) const { return nodes_.at(id); }
    const Tensor& value(NodeId id) const { return nodes_.at(id).value; }

    // Gradients of `root` w.r.t. every leaf that requires grad. Fan-out
    // accumulates by summation. Non-scalar roots need an explicit seed.
    GradMap backward(NodeId root) const;
    GradMap backward(NodeId root, Tensor seed) const;

    std::size_t saved_bytes() const;
    std::size_t value_bytes() const;

private:
    std::vector<Node> nodes_;
};

// Central-difference Jacobian oracle: entry (i, j) is
// (f(x + h e_j)_i - f(x - h e_j)_i) / (2h). Lives beside the tape so every
// hand-written backward rule can be certified against it.
Tensor finite_difference_jacobian(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                  real h);

// Convenience: u^T J via the oracle (matches the backward functions' output).
Tensor finite_difference_vjp(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                             const Tensor& u, real h);

bool debug_checks_enabled(); // RESNET_DEBUG_CHECKS=1

} // namespace presnet
