#include "presnet/tape.hpp"

#include <cmath>
#include <cstdlib>

#include "presnet/elem_ops.hpp"
#include "presnet/error.hpp"
#include "presnet/gyro.hpp"
#include "presnet/layers.hpp"
#include "presnet/parallel.hpp"

namespace presnet {

bool debug_checks_enabled() {
    static const bool on = [] {
        const char* v = std::getenv("RESNET_DEBUG_CHECKS");
        return v && v[0] == '1';
    }();
    return on;
}

// ---------------------------------------------------------------------------
// Elementary kernels

namespace elem {

namespace {

struct Bin {
    std::size_t rows, n, sa, sb;
};

Bin bin(const Tensor& a, const Tensor& b, const char* op) {
    if (a.cols() != b.cols()) throw ContractError(std::string(op) + ": column mismatch");
    const std::size_t ra = a.rows(), rb = b.rows();
    if (ra != rb && ra != 1 && rb != 1) throw ContractError(std::string(op) + ": row mismatch");
    Bin s;
    s.n = a.cols();
    s.rows = std::max(ra, rb);
    s.sa = (ra == 1 && s.rows > 1) ? 0 : s.n;
    s.sb = (rb == 1 && s.rows > 1) ? 0 : s.n;
    return s;
}

} // namespace

void binary_backward_reduce(const Tensor& per_row, std::size_t in_rows, Tensor* out) {
    if (!out) return;
    if (per_row.rows() == in_rows) {
        *out = per_row;
        return;
    }
    *out = sum_rows(per_row);
}

Tensor add(const Tensor& a, const Tensor& b) { return axpby(a, b, 1, 1, 0); }
Tensor sub(const Tensor& a, const Tensor& b) { return axpby(a, b, 1, -1, 0); }

Tensor axpby(const Tensor& a, const Tensor& b, real alpha, real beta, real gamma) {
    const Bin s = bin(a, b, "axpby");
    TensorBuf out({s.rows, s.n}, kUninit);
    const real* pa = a.data();
    const real* pb = b.data();
    real* po = out.data();
    parallel_for(s.rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
            const real* ar = pa + r * s.sa;
            const real* br = pb + r * s.sb;
            real* o = po + r * s.n;
            for (std::size_t i = 0; i < s.n; ++i) o[i] = alpha * ar[i] + beta * br[i] + gamma;
        }
    });
    return out.freeze();
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    const Bin s = bin(a, b, "hadamard");
    TensorBuf out({s.rows, s.n}, kUninit);
    const real* pa = a.data();
    const real* pb = b.data();
    real* po = out.data();
    parallel_for(s.rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
            const real* ar = pa + r * s.sa;
            const real* br = pb + r * s.sb;
            real* o = po + r * s.n;
            for (std::size_t i = 0; i < s.n; ++i) o[i] = ar[i] * br[i];
        }
    });
    return out.freeze();
}

Tensor rowdot(const Tensor& a, const Tensor& b) {
    const Bin s = bin(a, b, "rowdot");
    TensorBuf out({s.rows, 1}, kUninit);
    const real* pa = a.data();
    const real* pb = b.data();
    real* po = out.data();
    parallel_for(s.rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
            const real* ar = pa + r * s.sa;
            const real* br = pb + r * s.sb;
            real acc = 0;
            for (std::size_t i = 0; i < s.n; ++i) acc += ar[i] * br[i];
            po[r] = acc;
        }
    });
    return out.freeze();
}

Tensor rownormsq(const Tensor& a) { return rowdot(a, a); }

Tensor rowscale(const Tensor& a, const Tensor& s) {
    if (s.cols() != 1) throw ContractError("rowscale: scale must be [rows x 1]");
    const std::size_t ra = a.rows(), rs = s.rows();
    if (ra != rs && ra != 1 && rs != 1) throw ContractError("rowscale: row mismatch");
    const std::size_t rows = std::max(ra, rs);
    const std::size_t n = a.cols();
    const std::size_t sa = (ra == 1 && rows > 1) ? 0 : n;
    const std::size_t ss = (rs == 1 && rows > 1) ? 0 : 1;
    TensorBuf out({rows, n}, kUninit);
    const real* pa = a.data();
    const real* ps = s.data();
    real* po = out.data();
    parallel_for(rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
            const real* ar = pa + r * sa;
            const real f = ps[r * ss];
            real* o = po + r * n;
            for (std::size_t i = 0; i < n; ++i) o[i] = f * ar[i];
        }
    });
    return out.freeze();
}

Tensor affine(const Tensor& a, real alpha, real beta) {
    TensorBuf out(a.shape(), kUninit);
    const real* pa = a.data();
    real* po = out.data();
    const std::size_t sz = a.size();
    parallel_for(sz, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) po[i] = alpha * pa[i] + beta;
    });
    return out.freeze();
}

namespace {

real unary_eval(UnaryFn f, real t, real carg) {
    switch (f) {
        case UnaryFn::kTanh: return std::tanh(t);
        case UnaryFn::kAtanh: return std::atanh(t);
        case UnaryFn::kSinh: return std::sinh(t);
        case UnaryFn::kAsinh: return std::asinh(t);
        case UnaryFn::kCosh: return std::cosh(t);
        case UnaryFn::kSqrt: return std::sqrt(t);
        case UnaryFn::kRecip: return 1 / t;
        case UnaryFn::kSquare: return t * t;
        case UnaryFn::kExp: return std::exp(t);
        case UnaryFn::kMaxc: return t > carg ? t : carg;
    }
    throw ContractError("unary: unknown function");
}

} // namespace

real unary_deriv(UnaryFn f, real t, real carg) {
    switch (f) {
        case UnaryFn::kTanh: {
            const real T = std::tanh(t);
            return 1 - T * T;
        }
        case UnaryFn::kAtanh: return 1 / (1 - t * t);
        case UnaryFn::kSinh: return std::cosh(t);
        case UnaryFn::kAsinh: return 1 / std::sqrt(1 + t * t);
        case UnaryFn::kCosh: return std::sinh(t);
        case UnaryFn::kSqrt: return t > 0 ? 1 / (2 * std::sqrt(t)) : real(0);
        case UnaryFn::kRecip: return -1 / (t * t);
        case UnaryFn::kSquare: return 2 * t;
        case UnaryFn::kExp: return std::exp(t);
        case UnaryFn::kMaxc: return t > carg ? real(1) : real(0);
    }
    throw ContractError("unary: unknown function");
}

Tensor unary(UnaryFn f, const Tensor& a, real pre, real post, real carg) {
    TensorBuf out(a.shape(), kUninit);
    const real* pa = a.data();
    real* po = out.data();
    const std::size_t sz = a.size();
    parallel_for(sz, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) po[i] = post * unary_eval(f, pre * pa[i], carg);
    });
    return out.freeze();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    const std::size_t R = a.rows(), m = a.cols(), n = b.cols();
    if (b.rows() != m) throw ContractError("matmul: inner dimension mismatch");
    TensorBuf out({R, n}, kUninit);
    const real* pa = a.data();
    const real* pb = b.data();
    real* po = out.data();
    parallel_for(R, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
            const real* ar = pa + r * m;
            real* o = po + r * n;
            for (std::size_t i = 0; i < n; ++i) o[i] = 0;
            for (std::size_t k = 0; k < m; ++k) {
                const real av = ar[k];
                const real* bk = pb + k * n;
                for (std::size_t i = 0; i < n; ++i) o[i] += av * bk[i];
            }
        }
    });
    return out.freeze();
}

Tensor colnorm(const Tensor& z) {
    const std::size_t m = z.rows(), n = z.cols();
    TensorBuf out({1, n}, kUninit);
    real* po = out.data();
    const real* pz = z.data();
    for (std::size_t k = 0; k < n; ++k) {
        real acc = 0;
        for (std::size_t i = 0; i < m; ++i) acc += pz[i * n + k] * pz[i * n + k];
        po[k] = std::sqrt(acc);
    }
    return out.freeze();
}

Tensor bcast_rows(const Tensor& t, std::size_t rows) {
    if (t.rows() != 1) throw ContractError("bcast_rows: input must have one row");
    const std::size_t n = t.cols();
    TensorBuf out({rows, n}, kUninit);
    const real* pt = t.data();
    real* po = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < n; ++i) po[r * n + i] = pt[i];
    }
    return out.freeze();
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat: empty part list");
    const std::size_t R = parts[0].rows();
    std::size_t n = 0;
    for (const Tensor& p : parts) {
        if (p.rows() != R) throw ContractError("concat: row mismatch");
        n += p.cols();
    }
    TensorBuf out({R, n}, kUninit);
    real* po = out.data();
    for (std::size_t r = 0; r < R; ++r) {
        std::size_t off = 0;
        for (const Tensor& p : parts) {
            const real* pp = p.row_ptr(r);
            for (std::size_t i = 0; i < p.cols(); ++i) po[r * n + off + i] = pp[i];
            off += p.cols();
        }
    }
    return out.freeze();
}

Tensor gather_rows(const Tensor& a, const std::vector<std::int32_t>& idx, std::size_t out_rows,
                   std::size_t k, real scale) {
    const std::size_t C = a.cols();
    if (idx.size() != out_rows * k) throw ContractError("gather_rows: index table size mismatch");
    TensorBuf out({out_rows, k * C}, kUninit);
    const real* pa = a.data();
    real* po = out.data();
    parallel_for(out_rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
            real* o = po + r * k * C;
            for (std::size_t t = 0; t < k; ++t) {
                const std::int32_t ii = idx[r * k + t];
                if (ii < 0) {
                    for (std::size_t i = 0; i < C; ++i) o[t * C + i] = 0;
                } else {
                    const real* ar = pa + static_cast<std::size_t>(ii) * C;
                    for (std::size_t i = 0; i < C; ++i) o[t * C + i] = scale * ar[i];
                }
            }
        }
    });
    return out.freeze();
}

Tensor sum_rows(const Tensor& a) {
    const std::size_t R = a.rows(), n = a.cols();
    TensorBuf out({1, n});
    real* po = out.data();
    const real* pa = a.data();
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t i = 0; i < n; ++i) po[i] += pa[r * n + i];
    }
    return out.freeze();
}

Tensor mean_rows(const Tensor& a) { return affine(sum_rows(a), real(1) / real(a.rows()), 0); }

Tensor sum_groups(const Tensor& a, std::size_t group_size) {
    const std::size_t R = a.rows(), n = a.cols();
    if (group_size == 0 || R % group_size != 0) throw ContractError("sum_groups: bad group size");
    const std::size_t G = R / group_size;
    TensorBuf out({G, n});
    real* po = out.data();
    const real* pa = a.data();
    for (std::size_t g = 0; g < G; ++g) {
        real* o = po + g * n;
        for (std::size_t s = 0; s < group_size; ++s) {
            const real* ar = pa + (g * group_size + s) * n;
            for (std::size_t i = 0; i < n; ++i) o[i] += ar[i];
        }
    }
    return out.freeze();
}

Tensor softmax_xent(const Tensor& scores, const std::vector<std::int32_t>& labels, Tensor* probs) {
    const std::size_t B = scores.rows(), C = scores.cols();
    if (labels.size() != B) throw ContractError("softmax_xent: label count mismatch");
    TensorBuf p({B, C}, kUninit);
    const real* ps = scores.data();
    real* pp = p.data();
    real loss = 0;
    for (std::size_t r = 0; r < B; ++r) {
        const std::int32_t y = labels[r];
        if (y < 0 || static_cast<std::size_t>(y) >= C) {
            throw ContractError("softmax_xent: label " + std::to_string(y) + " out of range [0, " +
                                std::to_string(C) + ")");
        }
        const real* s = ps + r * C;
        real m = s[0];
        for (std::size_t i = 1; i < C; ++i) m = std::max(m, s[i]);
        real Zs = 0;
        for (std::size_t i = 0; i < C; ++i) Zs += std::exp(s[i] - m);
        const real lse = m + std::log(Zs);
        for (std::size_t i = 0; i < C; ++i) pp[r * C + i] = std::exp(s[i] - m) / Zs;
        loss += lse - s[y];
    }
    if (probs) *probs = p.freeze();
    return Tensor::scalar(loss / real(B));
}

} // namespace elem

// ---------------------------------------------------------------------------
// Tape

NodeId Tape::leaf(Tensor value) {
    Node n;
    n.op = Op::kLeaf;
    n.requires_grad = value.requires_grad();
    n.value = std::move(value);
    return record(std::move(n));
}

NodeId Tape::record(Node node) {
    const NodeId id = static_cast<NodeId>(nodes_.size());
    for (NodeId in : node.inputs) {
        if (in < 0 || in >= id) {
            throw ContractError("Tape::record: unknown input node id " + std::to_string(in));
        }
        node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
    }
    if (debug_checks_enabled() && !node.value.all_finite()) {
        throw ContractError("Tape::record: non-finite value at node " + std::to_string(id));
    }
    nodes_.push_back(std::move(node));
    return id;
}

NodeId Tape::record(Op op, std::vector<NodeId> inputs, std::vector<Tensor> saved,
                    std::vector<real> attrs, std::vector<std::int64_t> iattrs, Tensor value,
                    std::shared_ptr<const std::vector<std::int32_t>> index, const CustomOp* custom) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.saved = std::move(saved);
    n.attrs = std::move(attrs);
    n.iattrs = std::move(iattrs);
    n.value = std::move(value);
    n.index = std::move(index);
    n.custom = custom;
    return record(std::move(n));
}

std::size_t Tape::saved_bytes() const {
    std::size_t b = 0;
    for (const Node& n : nodes_) {
        for (const Tensor& t : n.saved) b += t.nbytes();
    }
    return b;
}

std::size_t Tape::value_bytes() const {
    std::size_t b = 0;
    for (const Node& n : nodes_) b += n.value.nbytes();
    return b;
}

namespace {

// Computes u^T J for each input slot of one node.
void node_backward(const Node& n, const Tensor& u, std::vector<Tensor>& g) {
    g.assign(n.inputs.size(), Tensor());
    switch (n.op) {
        case Op::kLeaf: return;
        case Op::kAdd:
        case Op::kSub:
        case Op::kAxpby: {
            real alpha = 1, beta = n.op == Op::kSub ? real(-1) : real(1);
            if (n.op == Op::kAxpby) {
                alpha = n.attrs[0];
                beta = n.attrs[1];
            }
            elem::binary_backward_reduce(alpha == 1 ? u : elem::affine(u, alpha, 0),
                                         static_cast<std::size_t>(n.iattrs[0]), &g[0]);
            elem::binary_backward_reduce(beta == 1 ? u : elem::affine(u, beta, 0),
                                         static_cast<std::size_t>(n.iattrs[1]), &g[1]);
            return;
        }
        case Op::kHadamard: {
            const Tensor& a = n.saved[0];
            const Tensor& b = n.saved[1];
            elem::binary_backward_reduce(elem::hadamard(u, b), a.rows(), &g[0]);
            elem::binary_backward_reduce(elem::hadamard(u, a), b.rows(), &g[1]);
            return;
        }
        case Op::kRowDot: {
            const Tensor& a = n.saved[0];
            const Tensor& b = n.saved[1];
            elem::binary_backward_reduce(elem::rowscale(b, u), a.rows(), &g[0]);
            elem::binary_backward_reduce(elem::rowscale(a, u), b.rows(), &g[1]);
            return;
        }
        case Op::kRowNormSq: {
            const Tensor& a = n.saved[0];
            g[0] = elem::rowscale(a, elem::affine(u, 2, 0));
            return;
        }
        case Op::kRowScale: {
            const Tensor& a = n.saved[0];
            const Tensor& s = n.saved[1];
            elem::binary_backward_reduce(elem::rowscale(u, s), a.rows(), &g[0]);
            Tensor gs = elem::rowdot(u, a.rows() == u.rows() ? a : elem::bcast_rows(a, u.rows()));
            elem::binary_backward_reduce(gs, s.rows(), &g[1]);
            return;
        }
        case Op::kAffine:
            g[0] = elem::affine(u, n.attrs[0], 0);
            return;
        case Op::kUnary: {
            const Tensor& a = n.saved[0];
            const UnaryFn f = static_cast<UnaryFn>(n.iattrs[0]);
            const real pre = n.attrs[0], post = n.attrs[1], carg = n.attrs[2];
            TensorBuf out(a.shape(), kUninit);
            const real* pa = a.data();
            const real* pu = u.data();
            real* po = out.data();
            const std::size_t sz = a.size();
            parallel_for(sz, [&](std::size_t i0, std::size_t i1) {
                for (std::size_t i = i0; i < i1; ++i) {
                    po[i] = pu[i] * post * pre * elem::unary_deriv(f, pre * pa[i], carg);
                }
            });
            g[0] = out.freeze();
            return;
        }
        case Op::kMatmul: {
            const Tensor& a = n.saved[0];
            const Tensor& b = n.saved[1];
            const std::size_t R = a.rows(), m = a.cols(), nn = b.cols();
            TensorBuf ga({R, m}, kUninit);
            const real* pu = u.data();
            const real* pb = b.data();
            real* pga = ga.data();
            parallel_for(R, [&](std::size_t r0, std::size_t r1) {
                for (std::size_t r = r0; r < r1; ++r) {
                    const real* ur = pu + r * nn;
                    real* o = pga + r * m;
                    for (std::size_t k = 0; k < m; ++k) {
                        const real* bk = pb + k * nn;
                        real acc = 0;
                        for (std::size_t j = 0; j < nn; ++j) acc += ur[j] * bk[j];
                        o[k] = acc;
                    }
                }
            });
            g[0] = ga.freeze();
            TensorBuf gb({m, nn});
            const real* pa = a.data();
            real* pgb = gb.data();
            parallel_for(m, [&](std::size_t k0, std::size_t k1) {
                for (std::size_t k = k0; k < k1; ++k) {
                    real* o = pgb + k * nn;
                    for (std::size_t r = 0; r < R; ++r) {
                        const real av = pa[r * m + k];
                        const real* ur = pu + r * nn;
                        for (std::size_t j = 0; j < nn; ++j) o[j] += av * ur[j];
                    }
                }
            });
            g[1] = gb.freeze();
            return;
        }
        case Op::kColNorm: {
            const Tensor& z = n.saved[0];
            const Tensor& nu = n.value;
            const std::size_t m = z.rows(), nn = z.cols();
            TensorBuf gz({m, nn});
            const real* pz = z.data();
            const real* pu = u.data();
            const real* pn = nu.data();
            real* pg = gz.data();
            for (std::size_t k = 0; k < nn; ++k) {
                if (pn[k] < real(1e-300)) continue;
                const real f = pu[k] / pn[k];
                for (std::size_t i = 0; i < m; ++i) pg[i * nn + k] = f * pz[i * nn + k];
            }
            g[0] = gz.freeze();
            return;
        }
        case Op::kBcastRows:
            g[0] = elem::sum_rows(u);
            return;
        case Op::kConcat: {
            const std::size_t R = u.rows();
            std::size_t off = 0;
            for (std::size_t p = 0; p < n.inputs.size(); ++p) {
                const std::size_t w = static_cast<std::size_t>(n.iattrs[p]);
                TensorBuf gp({R, w}, kUninit);
                const real* pu = u.data();
                real* pg = gp.data();
                for (std::size_t r = 0; r < R; ++r) {
                    for (std::size_t i = 0; i < w; ++i) pg[r * w + i] = pu[r * u.cols() + off + i];
                }
                g[p] = gp.freeze();
                off += w;
            }
            return;
        }
        case Op::kGatherRows: {
            const std::size_t in_rows = static_cast<std::size_t>(n.iattrs[0]);
            const std::size_t k = static_cast<std::size_t>(n.iattrs[1]);
            const std::size_t C = static_cast<std::size_t>(n.iattrs[2]);
            const real scale = n.attrs[0];
            const auto& idx = *n.index;
            TensorBuf ga({in_rows, C});
            const real* pu = u.data();
            real* pg = ga.data();
            const std::size_t out_rows = u.rows();
            for (std::size_t r = 0; r < out_rows; ++r) {
                for (std::size_t t = 0; t < k; ++t) {
                    const std::int32_t ii = idx[r * k + t];
                    if (ii < 0) continue;
                    real* o = pg + static_cast<std::size_t>(ii) * C;
                    const real* ur = pu + r * k * C + t * C;
                    for (std::size_t i = 0; i < C; ++i) o[i] += scale * ur[i];
                }
            }
            g[0] = ga.freeze();
            return;
        }
        case Op::kSumRows:
            g[0] = elem::bcast_rows(u, static_cast<std::size_t>(n.iattrs[0]));
            return;
        case Op::kMeanRows: {
            const std::size_t R = static_cast<std::size_t>(n.iattrs[0]);
            g[0] = elem::bcast_rows(elem::affine(u, real(1) / real(R), 0), R);
            return;
        }
        case Op::kSumGroups: {
            const std::size_t S = static_cast<std::size_t>(n.iattrs[0]);
            const std::size_t G = u.rows(), nn = u.cols();
            TensorBuf ga({G * S, nn}, kUninit);
            const real* pu = u.data();
            real* pg = ga.data();
            for (std::size_t gi = 0; gi < G; ++gi) {
                for (std::size_t s = 0; s < S; ++s) {
                    for (std::size_t i = 0; i < nn; ++i) pg[(gi * S + s) * nn + i] = pu[gi * nn + i];
                }
            }
            g[0] = ga.freeze();
            return;
        }
        case Op::kSoftmaxXent: {
            const Tensor& probs = n.saved[0];
            const auto& labels = *n.index;
            const std::size_t B = probs.rows(), C = probs.cols();
            const real f = u.at(0) / real(B);
            TensorBuf gs({B, C}, kUninit);
            const real* pp = probs.data();
            real* pg = gs.data();
            for (std::size_t r = 0; r < B; ++r) {
                for (std::size_t i = 0; i < C; ++i) pg[r * C + i] = f * pp[r * C + i];
                pg[r * C + static_cast<std::size_t>(labels[r])] -= f;
            }
            g[0] = gs.freeze();
            return;
        }
        case Op::kMobiusAdd: {
            const real c = n.attrs[0];
            gyro::MobiusSaved ms{n.saved[2], n.saved[3], n.saved[4]};
            gyro::mobius_add_backward(u, n.saved[0], n.saved[1], c, &g[0], &g[1], &ms);
            return;
        }
        case Op::kMobiusScalar:
            g[0] = gyro::mobius_scalar_backward(u, n.attrs[1], n.saved[0], n.attrs[0]);
            return;
        case Op::kConformal:
            g[0] = gyro::conformal_factor_backward(u, n.saved[0], n.attrs[0]);
            return;
        case Op::kExp0:
            g[0] = gyro::exp0_backward(u, n.saved[0], n.attrs[0]);
            return;
        case Op::kLog0:
            g[0] = gyro::log0_backward(u, n.saved[0], n.attrs[0]);
            return;
        case Op::kZcExp:
            gyro::zc_exp_backward(u, n.saved[0], n.saved[1], n.attrs[0], &g[0], &g[1]);
            return;
        case Op::kFLog:
            gyro::f_log_backward(u, n.saved[0], n.saved[1], n.attrs[0], &g[0], &g[1]);
            return;
        case Op::kProject:
            g[0] = gyro::project_backward(u, n.saved[0], n.attrs[0]);
            return;
        case Op::kMlr: {
            nn::MlrSaved ms{n.saved[3], n.saved[4], n.saved[5]};
            nn::mlr_backward(u, n.saved[0], n.saved[1], n.saved[2], n.attrs[0], &ms, &g[0], &g[1],
                             &g[2]);
            return;
        }
        case Op::kCustom:
            n.custom->backward(n, u, g);
            return;
    }
    throw ContractError("node_backward: unknown op");
}

void accumulate(GradMap& gm, NodeId id, Tensor&& t) {
    Tensor& slot = gm.slot(id);
    if (!slot.defined()) {
        slot = std::move(t);
    } else {
        slot = add(slot, t);
    }
}

} // namespace

GradMap Tape::backward(NodeId root) const {
    const Tensor& v = value(root);
    if (v.size() != 1) {
        throw ContractError("Tape::backward: non-scalar root requires an explicit seed gradient");
    }
    return backward(root, Tensor::full(v.shape(), 1));
}

GradMap Tape::backward(NodeId root, Tensor seed) const {
    if (root < 0 || static_cast<std::size_t>(root) >= nodes_.size()) {
        throw ContractError("Tape::backward: unknown root id");
    }
    if (!seed.same_shape(value(root))) {
        throw ContractError("Tape::backward: seed shape must match root value shape");
    }
    GradMap gm(nodes_.size());
    gm.slot(root) = std::move(seed);
    std::vector<Tensor> input_grads;
    for (NodeId id = root; id >= 0; --id) {
        const Node& n = nodes_[id];
        Tensor* gp = &gm.slot(id);
        if (!gp->defined() || !n.requires_grad) {
            if (n.op != Op::kLeaf) gm.slot(id) = Tensor();
            continue;
        }
        if (n.op == Op::kLeaf) continue; // keep leaf gradients for the caller
        Tensor gout = std::move(*gp);
        gm.slot(id) = Tensor(); // interior gradients are released once consumed
        node_backward(n, gout, input_grads);
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            if (!input_grads[i].defined()) continue;
            const Node& src = nodes_[n.inputs[i]];
            if (!src.requires_grad) continue;
            if (debug_checks_enabled() && !input_grads[i].same_shape(src.value)) {
                throw ContractError("Tape::backward: gradient shape mismatch at node " +
                                    std::to_string(n.inputs[i]));
            }
            accumulate(gm, n.inputs[i], std::move(input_grads[i]));
        }
    }
    return gm;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

Tensor finite_difference_jacobian(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                  real h) {
    if (!(h > 0)) throw OracleError("finite_difference_jacobian: h must be positive");
    const std::size_t in = x.size();
    std::vector<real> base(x.data(), x.data() + in);
    Tensor f0 = f(x);
    const std::size_t out = f0.size();
    TensorBuf J({out, in});
    for (std::size_t j = 0; j < in; ++j) {
        std::vector<real> xp = base, xm = base;
        xp[j] += h;
        xm[j] -= h;
        Tensor fp = f(Tensor(x.shape(), std::move(xp)));
        Tensor fm = f(Tensor(x.shape(), std::move(xm)));
        if (!fp.all_finite() || !fm.all_finite()) {
            throw OracleError("finite_difference_jacobian: non-finite f at coordinate " +
                              std::to_string(j));
        }
        for (std::size_t i = 0; i < out; ++i) {
            J[i * in + j] = (fp.at(i) - fm.at(i)) / (2 * h);
        }
    }
    return J.freeze();
}

Tensor finite_difference_vjp(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                             const Tensor& u, real h) {
    Tensor J = finite_difference_jacobian(f, x, h);
    const std::size_t out = J.rows(), in = J.cols();
    if (u.size() != out) throw OracleError("finite_difference_vjp: u size mismatch");
    TensorBuf g(x.shape());
    for (std::size_t j = 0; j < in; ++j) {
        real acc = 0;
        for (std::size_t i = 0; i < out; ++i) acc += u.at(i) * J.at(i * in + j);
        g[j] = acc;
    }
    return g.freeze();
}

} // namespace presnet
