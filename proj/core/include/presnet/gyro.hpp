#pragma once

#include <optional>

#include "presnet/tensor.hpp"

namespace presnet::gyro {

// Points clamped to radius (1 - kBoundaryEps) / sqrt(c) by project().
inline constexpr real kBoundaryEps = real(1e-5);
// Below this norm the v/||v|| style maps branch to their analytic limit.
inline constexpr real kZeroEps = real(1e-12);

struct Curvature {
    real c;
    explicit Curvature(real c_);
    real radius() const; // c^{-1/2}
};

// Coordinates on the ball of curvature -c; construction projects onto the
// shell so the interior invariant c*||x||^2 < 1 holds for every row.
struct BallTensor {
    Tensor coords;
    Curvature curv;
    BallTensor(Tensor coords_, Curvature curv_);
    std::size_t dim() const { return coords.cols(); }
};

// Euclidean vector tagged with its basepoint (origin when basepoint is empty).
struct BallPointRef {
    Tensor coords;
    real c;
};
struct TangentTensor {
    Tensor coords;
    std::optional<BallPointRef> basepoint; // nullopt = tangent space at origin
    std::size_t dim() const { return coords.cols(); }
    bool at_origin() const { return !basepoint.has_value(); }
};

// ---------------------------------------------------------------------------
// Low-level batched kernels. All act rowwise on [R x n] tensors (one point
// per row); binary ops accept a 1-row operand and broadcast it. The *_raw
// forwards evaluate the bare formula; the unsuffixed versions project the
// result back to the shell. Backward functions return u^T J products exactly
// as derived for each op; they assume interior inputs.

// Saved scalars of the Mobius-addition forward, reused verbatim in backward:
//   a = 1 + 2c<x,y> + c||y||^2, b = 1 - c||x||^2,
//   d = 1 + 2c<x,y> + c^2 ||x||^2 ||y||^2.
struct MobiusSaved {
    Tensor a, b, d; // [R x 1] each
};

Tensor mobius_add_raw(const Tensor& x, const Tensor& y, real c, MobiusSaved* saved = nullptr);
Tensor mobius_add(const Tensor& x, const Tensor& y, real c);
void mobius_add_backward(const Tensor& u, const Tensor& x, const Tensor& y, real c,
                         Tensor* grad_x, Tensor* grad_y, const MobiusSaved* saved = nullptr);

Tensor mobius_scalar_raw(real r, const Tensor& x, real c);
Tensor mobius_scalar(real r, const Tensor& x, real c);
Tensor mobius_scalar_backward(const Tensor& u, real r, const Tensor& x, real c);

Tensor conformal_factor(const Tensor& x, real c); // lambda_x^c, [R x 1]
Tensor conformal_factor_backward(const Tensor& u, const Tensor& x, real c);

Tensor exp0_raw(const Tensor& v, real c);
Tensor exp0(const Tensor& v, real c);
Tensor exp0_backward(const Tensor& u, const Tensor& v, real c);

Tensor log0(const Tensor& y, real c);
Tensor log0_backward(const Tensor& u, const Tensor& y, real c);

// z_c(x, v) = tanh(sqrt(c) lambda_x ||v|| / 2) v / (sqrt(c)||v||), the
// tangent-scaling half of the exponential map at x.
Tensor zc_exp_raw(const Tensor& x, const Tensor& v, real c);
void zc_exp_backward(const Tensor& u, const Tensor& x, const Tensor& v, real c,
                     Tensor* grad_x, Tensor* grad_v);

// f_c(x, z) = (2 / (sqrt(c) lambda_x)) atanh(sqrt(c)||z||) z/||z||, the
// rescaling half of the logarithmic map at x (z = -x (+) y).
Tensor f_log(const Tensor& x, const Tensor& z, real c);
void f_log_backward(const Tensor& u, const Tensor& x, const Tensor& z, real c,
                    Tensor* grad_x, Tensor* grad_z);

Tensor project(const Tensor& x, real c);
Tensor project_backward(const Tensor& u, const Tensor& x, real c);

Tensor distance(const Tensor& x, const Tensor& y, real c); // [R x 1]
void distance_backward(const Tensor& u, const Tensor& x, const Tensor& y, real c,
                       Tensor* grad_x, Tensor* grad_y);

Tensor exp_at_raw(const Tensor& x, const Tensor& v, real c);
Tensor exp_at(const Tensor& x, const Tensor& v, real c);
void exp_at_backward(const Tensor& u, const Tensor& x, const Tensor& v, real c,
                     Tensor* grad_x, Tensor* grad_v);

Tensor log_at(const Tensor& x, const Tensor& y, real c);
void log_at_backward(const Tensor& u, const Tensor& x, const Tensor& y, real c,
                     Tensor* grad_x, Tensor* grad_y);

// gyr[x, y]z through its Mobius-addition definition; z must be on the ball.
Tensor gyration(const Tensor& x, const Tensor& y, const Tensor& z, real c);
// Gyration extended to arbitrary vectors by linearity (used for tangents).
Tensor gyrate_vector(const Tensor& x, const Tensor& y, const Tensor& v, real c);
// P_{x->y}(v) = (lambda_x / lambda_y) gyr[y, -x] v.
Tensor parallel_transport(const Tensor& x, const Tensor& y, const Tensor& v, real c);

Tensor negate(const Tensor& x);

// ---------------------------------------------------------------------------
// Typed wrappers enforcing the domain contracts (dimension and curvature
// checks, projection invariant).

BallTensor mobius_add(const BallTensor& x, const BallTensor& y);
BallTensor mobius_scalar(real r, const BallTensor& x);
BallTensor gyration(const BallTensor& x, const BallTensor& y, const BallTensor& z);
Tensor distance(const BallTensor& x, const BallTensor& y);
Tensor conformal_factor(const BallTensor& x);
BallTensor exp_map(const Curvature& curv, const TangentTensor& v);
TangentTensor log_map_origin(const BallTensor& y);
TangentTensor log_map(const BallTensor& x, const BallTensor& y);
TangentTensor parallel_transport(const BallTensor& x, const BallTensor& y, const TangentTensor& v);

} // namespace presnet::gyro
