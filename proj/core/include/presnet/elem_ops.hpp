#pragma once

#include <memory>

#include "presnet/tape.hpp"

// Elementary tensor kernels backing the non-fused tape ops. Binary rowwise
// ops accept a 1-row operand and broadcast it; the matching backward reduces
// over rows for that side.
namespace presnet::elem {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor axpby(const Tensor& a, const Tensor& b, real alpha, real beta, real gamma);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor rowdot(const Tensor& a, const Tensor& b);
Tensor rownormsq(const Tensor& a);
Tensor rowscale(const Tensor& a, const Tensor& s);
Tensor affine(const Tensor& a, real alpha, real beta);
Tensor unary(UnaryFn f, const Tensor& a, real pre, real post, real carg);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor colnorm(const Tensor& z);
Tensor bcast_rows(const Tensor& t, std::size_t rows);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& a, const std::vector<std::int32_t>& idx, std::size_t out_rows,
                   std::size_t k, real scale);
Tensor sum_rows(const Tensor& a);
Tensor mean_rows(const Tensor& a);
Tensor sum_groups(const Tensor& a, std::size_t group_size);
Tensor softmax_xent(const Tensor& scores, const std::vector<std::int32_t>& labels, Tensor* probs);

real unary_deriv(UnaryFn f, real t, real carg);

void binary_backward_reduce(const Tensor& per_row, std::size_t in_rows, Tensor* out);

} // namespace presnet::elem
