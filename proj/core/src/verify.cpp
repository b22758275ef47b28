#include "presnet/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>

#include "presnet/elem_ops.hpp"
#include "presnet/error.hpp"
#include "presnet/gyro.hpp"
#include "presnet/parallel.hpp"

namespace presnet::verify {

namespace {

constexpr real kFdStep = real(1e-6);

Tensor random_point(Rng& rng, int dim, real max_norm, real min_norm = real(0.05)) {
    std::vector<real> d(dim);
    real ns = 0;
    for (auto& v : d) {
        v = real(rng.normal());
        ns += v * v;
    }
    const real target = min_norm + (max_norm - min_norm) * real(rng.uniform());
    const real s = target / std::max(std::sqrt(ns), real(1e-30));
    for (auto& v : d) v *= s;
    return Tensor({1, static_cast<std::size_t>(dim)}, std::move(d));
}

Tensor random_vec(Rng& rng, std::size_t rows, std::size_t cols, real sd = 1) {
    std::vector<real> d(rows * cols);
    for (auto& v : d) v = sd * real(rng.normal());
    return Tensor({rows, cols}, std::move(d));
}

real rel_inf_err(const Tensor& manual, const Tensor& fd) {
    return max_abs_diff(manual, fd) / std::max(real(1), max_abs(fd));
}

struct Check {
    std::string op, slot;
    // returns (manual vjp, fd vjp) for one random configuration
    std::function<std::pair<Tensor, Tensor>(Rng&, real)> run;
    bool layer = false; // layer checks use the looser tolerance
};

GradRow run_check(const Check& chk, real c, int dim, int points, real tol, Rng& rng) {
    GradRow row;
    row.op = chk.op;
    row.slot = chk.slot;
    row.curvature = c;
    row.dim = dim;
    row.points = points;
    row.tol = tol;
    real worst = 0;
    for (int p = 0; p < points; ++p) {
        auto [manual, fd] = chk.run(rng, c);
        worst = std::max(worst, rel_inf_err(manual, fd));
    }
    row.max_rel_err = worst;
    row.pass = worst <= tol;
    return row;
}

} // namespace

bool GradReport::all_pass() const {
    for (const auto& r : rows) {
        if (!r.pass) return false;
    }
    return true;
}

GradReport gradcheck_all(std::uint64_t seed, real tol_primitive, real tol_layer) {
    GradReport report;
    Rng rng(seed);
    const int dim = 5;
    const int n_points = 100;
    const int n_points_layer = 20;

    auto interior = [&](Rng& r, real c) { return random_point(r, dim, real(0.7) / std::sqrt(c)); };

    // -- primitives ---------------------------------------------------------
    std::vector<Check> checks;

    checks.push_back({"mobius_add", "x", [&](Rng& r, real c) {
        Tensor x = interior(r, c), y = interior(r, c), u = random_vec(r, 1, dim);
        Tensor gx;
        gyro::mobius_add_backward(u, x, y, c, &gx, nullptr);
        Tensor fd = finite_difference_vjp(
            [&](const Tensor& t) { return gyro::mobius_add_raw(t, y, c); }, x, u, kFdStep);
        return std::make_pair(gx, fd);
    }});
    checks.push_back({"mobius_add", "y", [&](Rng& r, real c) {
        Tensor x = interior(r, c), y = interior(r, c), u = random_vec(r, 1, dim);
        Tensor gy;
        gyro::mobius_add_backward(u, x, y, c, nullptr, &gy);
        Tensor fd = finite_difference_vjp(
            [&](const Tensor& t) { return gyro::mobius_add_raw(x, t, c); }, y, u, kFdStep);
        return std::make_pair(gy, fd);
    }});
    checks.push_back({"mobius_scalar_mul", "x", [&](Rng& r, real c) {
        Tensor x = interior(r, c), u = random_vec(r, 1, dim);
        const real rr = real(-1.3) + real(2.6) * real(r.uniform());
        Tensor g = gyro::mobius_scalar_backward(u, rr, x, c);
        Tensor fd = finite_difference_vjp(
            [&](const Tensor& t) { return gyro::mobius_scalar_raw(rr, t, c); }, x, u, kFdStep);
        return std::make_pair(g, fd);
    }});
    checks.push_back({"conformal_factor", "x", [&](Rng& r, real c) {
        Tensor x = interior(r, c);
        Tensor u = random_vec(r, 1, 1);
        Tensor g = gyro::conformal_factor_backward(u, x, c);
        Tensor fd = finite_difference_vjp(
            [&](const Tensor& t) { return gyro::conformal_factor(t, c); }, x, u, kFdStep);
        return std::make_pair(g, fd);
    }});
    checks.push_back({"exp0", "v", [&](Rng& r, real c) {
        Tensor v = random_point(r, dim, real(2) / std::sqrt(c), real(0.1) / std::sqrt(c));
        Tensor u = random_vec(r, 1, dim);
        Tensor g = gyro::exp0_backward(u, v, c);
        Tensor fd = finite_difference_vjp([&](const Tensor& t) { return gyro::exp0_raw(t, c); }, v,
                                          u, kFdStep);
        return std::make_pair(g, fd);
    }});
    checks.push_back({"log0", "y", [&](Rng& r, real c) {
        Tensor y = interior(r, c), u = random_vec(r, 1, dim);
        Tensor g = gyro::log0_backward(u, y, c);
        Tensor fd =
            finite_difference_vjp([&](const Tensor& t) { return gyro::log0(t, c); }, y, u, kFdStep);
        return std::make_pair(g, fd);
    }});
    checks.push_back({"zc_exp", "x", [&](Rng& r, real c) {
        Tensor x = interior(r, c);
        Tensor v = random_point(r, dim, real(1) / std::sqrt(c), real(0.1) / std::sqrt(c));
        Tensor u = random_vec(r, 1, dim);
        Tensor gx;
        gyro::zc_exp_backward(u, x, v, c, &gx, nullptr);
        Tensor fd = finite_difference_vjp(
            [&](const Tensor& t) { return gyro::zc_exp_raw(t, v, c); }, x, u, kFdStep);
        return std::make_pair(gx, fd);
    }});
    checks.push_back({"zc_exp", "v", [&](Rng& r, real c) {
        Tensor x = interior(r, c);
        Tensor v = random_point(r, dim, real(1) / std::sqrt(c), real(0.1) / std::sqrt(c));
        Tensor u = random_vec(r, 1, dim);
        Tensor gv;
        gyro::zc_exp_backward(u, x, v, c, nullptr, &gv);
        Tensor fd = finite_difference_vjp(
            [&](const Tensor& t) { return gyro::zc_exp_raw(x, t, c); }, v, u, kFdStep);
        return std::make_pair(gv, fd);
    }});
    checks.push_back({"exp_at", "x", [&](Rng& r, real c) {
        Tensor x = interior(r, c);
        Tensor v = random_point(r, dim, real(0.5) / std::sqrt(c), real(0.05) / std::sqrt(c));
        Tensor u = random_vec(r, 1, dim);
        Tensor gx;
        gyro::exp_at_backward(u, x, v, c, &gx, nullptr);
        Tensor fd = finite_difference_vjp(
            [&](const Tensor& t) { return gyro::exp_at_raw(t, v, c); }, x, u, kFdStep);
        return std::make_pair(gx, fd);
    }});
    checks.push_back({"exp_at", "v", [&](Rng& r, real c) {
        Tensor x = interior(r, c);
        Tensor v = random_point(r, dim, real(0.5) / std::sqrt(c), real(0.05) / std::sqrt(c));
        Tensor u = random_vec(r, 1, dim);
        Tensor gv;
        gyro::exp_at_backward(u, x, v, c, nullptr, &gv);
        Tensor fd = finite_difference_vjp(
            [&](const Tensor& t) { return gyro::exp_at_raw(x, t, c); }, v, u, kFdStep);
        return std::make_pair(gv, fd);
    }});
    checks.push_back({"f_log", "x", [&](Rng& r, real c) {
        Tensor x = interior(r, c), z = interior(r, c), u = random_vec(r, 1, dim);
        Tensor gx;
        gyro::f_log_backward(u, x, z, c, &gx, nullptr);
        Tensor fd = finite_difference_vjp([&](const Tensor& t) { return gyro::f_log(t, z, c); }, x,
                                          u, kFdStep);
        return std::make_pair(gx, fd);
    }});
    checks.push_back({"f_log", "z", [&](Rng& r, real c) {
        Tensor x = interior(r, c), z = interior(r, c), u = random_vec(r, 1, dim);
        Tensor gz;
        gyro::f_log_backward(u, x, z, c, nullptr, &gz);
        Tensor fd = finite_difference_vjp([&](const Tensor& t) { return gyro::f_log(x, t, c); }, z,
                                          u, kFdStep);
        return std::make_pair(gz, fd);
    }});
    checks.push_back({"log_at", "x", [&](Rng& r, real c) {
        Tensor x = interior(r, c), y = interior(r, c), u = random_vec(r, 1, dim);
        Tensor gx;
        gyro::log_at_backward(u, x, y, c, &gx, nullptr);
        Tensor fd = finite_difference_vjp([&](const Tensor& t) { return gyro::log_at(t, y, c); }, x,
                                          u, kFdStep);
        return std::make_pair(gx, fd);
    }});
    checks.push_back({"log_at", "y", [&](Rng& r, real c) {
        Tensor x = interior(r, c), y = interior(r, c), u = random_vec(r, 1, dim);
        Tensor gy;
        gyro::log_at_backward(u, x, y, c, nullptr, &gy);
        Tensor fd = finite_difference_vjp([&](const Tensor& t) { return gyro::log_at(x, t, c); }, y,
                                          u, kFdStep);
        return std::make_pair(gy, fd);
    }});
    checks.push_back({"project", "x_interior", [&](Rng& r, real c) {
        Tensor x = interior(r, c), u = random_vec(r, 1, dim);
        Tensor g = gyro::project_backward(u, x, c);
        return std::make_pair(g, u); // identity branch: exact pass-through
    }});
    checks.push_back({"project", "x_exterior", [&](Rng& r, real c) {
        Tensor x = random_point(r, dim, real(2) / std::sqrt(c), real(1.1) / std::sqrt(c));
        Tensor u = random_vec(r, 1, dim);
        Tensor g = gyro::project_backward(u, x, c);
        Tensor fd = finite_difference_vjp([&](const Tensor& t) { return gyro::project(t, c); }, x,
                                          u, kFdStep);
        return std::make_pair(g, fd);
    }});
    checks.push_back({"distance", "x", [&](Rng& r, real c) {
        Tensor x = interior(r, c), y = interior(r, c), u = random_vec(r, 1, 1);
        Tensor gx;
        gyro::distance_backward(u, x, y, c, &gx, nullptr);
        Tensor fd = finite_difference_vjp([&](const Tensor& t) { return gyro::distance(t, y, c); },
                                          x, u, kFdStep);
        return std::make_pair(gx, fd);
    }});

    // -- composed layers through the tape ------------------------------------
    auto tape_vjp = [](const std::function<Var(Graph&, Var)>& build, const Tensor& x,
                       const Tensor& u) {
        Tape tape;
        Graph g(&tape);
        Var in = g.leaf(x.with_requires_grad(true));
        Var out = build(g, in);
        GradMap gm = tape.backward(out.id, u);
        const Tensor* gt = gm.find(in.id);
        if (!gt) throw OracleError("gradcheck: layer produced no input gradient");
        return *gt;
    };

    std::vector<Check> layer_checks;
    layer_checks.push_back({"fc", "x", [&](Rng& r, real c) {
        Tensor x = interior(r, c);
        Tensor Z = random_vec(r, dim, 4, real(0.4));
        Tensor rr = random_vec(r, 1, 4, real(0.2));
        Tensor u = random_vec(r, 1, 4);
        Tensor manual = tape_vjp(
            [&](Graph& g, Var in) { return nn::fc(g, in, g.constant(Z), g.constant(rr), c); }, x, u);
        Tensor fd = finite_difference_vjp(
            [&](const Tensor& t) { return nn::fc_forward(t, nn::FcParams{Z, rr}, c); }, x, u,
            kFdStep);
        return std::make_pair(manual, fd);
    }, true});
    layer_checks.push_back({"fc", "Z", [&](Rng& r, real c) {
        Tensor x = interior(r, c);
        Tensor Z = random_vec(r, dim, 4, real(0.4));
        Tensor rr = random_vec(r, 1, 4, real(0.2));
        Tensor u = random_vec(r, 1, 4);
        Tape tape;
        Graph g(&tape);
        Var zin = g.leaf(Z.with_requires_grad(true));
        Var out = nn::fc(g, g.constant(x), zin, g.constant(rr), c);
        GradMap gm = tape.backward(out.id, u);
        Tensor fd = finite_difference_vjp(
            [&](const Tensor& t) { return nn::fc_forward(x, nn::FcParams{t, rr}, c); }, Z, u,
            kFdStep);
        return std::make_pair(*gm.find(zin.id), fd);
    }, true});
    layer_checks.push_back({"fc", "r", [&](Rng& r, real c) {
        Tensor x = interior(r, c);
        Tensor Z = random_vec(r, dim, 4, real(0.4));
        Tensor rr = random_vec(r, 1, 4, real(0.2));
        Tensor u = random_vec(r, 1, 4);
        Tape tape;
        Graph g(&tape);
        Var rin = g.leaf(rr.with_requires_grad(true));
        Var out = nn::fc(g, g.constant(x), g.constant(Z), rin, c);
        GradMap gm = tape.backward(out.id, u);
        Tensor fd = finite_difference_vjp(
            [&](const Tensor& t) { return nn::fc_forward(x, nn::FcParams{Z, t}, c); }, rr, u,
            kFdStep);
        return std::make_pair(*gm.find(rin.id), fd);
    }, true});
    layer_checks.push_back({"relu_p", "x", [&](Rng& r, real c) {
        // Keep tangent coordinates away from the ReLU kink.
        Tensor x;
        for (;;) {
            x = random_point(r, dim, real(0.7) / std::sqrt(c), real(0.2) / std::sqrt(c));
            Tensor t = gyro::log0(x, c);
            real m = real(1);
            for (std::size_t i = 0; i < t.size(); ++i) m = std::min(m, std::abs(t.at(i)));
            if (m > real(1e-3)) break;
        }
        Tensor u = random_vec(r, 1, dim);
        Tensor manual =
            tape_vjp([&](Graph& g, Var in) { return nn::relu_p(g, in, c); }, x, u);
        Tensor fd = finite_difference_vjp([&](const Tensor& t) { return nn::relu_p(t, c); }, x, u,
                                          kFdStep);
        return std::make_pair(manual, fd);
    }, true});
    layer_checks.push_back({"beta_concat", "parts", [&](Rng& r, real c) {
        Tensor x = random_point(r, 3, real(0.6) / std::sqrt(c), real(0.1) / std::sqrt(c));
        Tensor y = random_point(r, 4, real(0.6) / std::sqrt(c), real(0.1) / std::sqrt(c));
        Tensor u = random_vec(r, 1, 7);
        Tensor manual = tape_vjp(
            [&](Graph& g, Var in) {
                return nn::beta_concat(g, {in, g.constant(y)}, c);
            },
            x, u);
        Tensor fd = finite_difference_vjp(
            [&](const Tensor& t) { return nn::beta_concat(std::vector<Tensor>{t, y}, c); }, x, u,
            kFdStep);
        return std::make_pair(manual, fd);
    }, true});
    layer_checks.push_back({"poincare_midpoint", "batch", [&](Rng& r, real c) {
        Tensor pts = Tensor::zeros({6, static_cast<std::size_t>(dim)});
        {
            TensorBuf buf({6, static_cast<std::size_t>(dim)});
            for (int i = 0; i < 6; ++i) {
                Tensor p = interior(r, c);
                for (int j = 0; j < dim; ++j) buf[i * dim + j] = p.at(j);
            }
            pts = buf.freeze();
        }
        Tensor u = random_vec(r, 1, dim);
        Tensor manual = tape_vjp(
            [&](Graph& g, Var in) { return nn::poincare_midpoint(g, in, c); }, pts, u);
        Tensor fd = finite_difference_vjp(
            [&](const Tensor& t) { return nn::poincare_midpoint(t, c); }, pts, u, kFdStep);
        return std::make_pair(manual, fd);
    }, true});
    layer_checks.push_back({"batchnorm", "x", [&](Rng& r, real c) {
        const int m = 8;
        TensorBuf buf({m, static_cast<std::size_t>(dim)});
        for (int i = 0; i < m; ++i) {
            Tensor p = interior(r, c);
            for (int j = 0; j < dim; ++j) buf[i * dim + j] = p.at(j);
        }
        Tensor pts = buf.freeze();
        Tensor bias = random_vec(r, 1, dim, real(0.1));
        Tensor lg = random_vec(r, 1, 1, real(0.2));
        Tensor u = random_vec(r, m, dim);
        Tensor manual = tape_vjp(
            [&](Graph& g, Var in) {
                return nn::batchnorm(g, in, g.constant(bias), g.constant(lg), c,
                                     nn::BnMode::kMidpoint, nn::GammaMode::kScalar, real(1e-6),
                                     200);
            },
            pts, u);
        Tensor fd = finite_difference_vjp(
            [&](const Tensor& t) {
                Graph g(nullptr);
                return nn::batchnorm(g, Var{t, -1}, Var{bias, -1}, Var{lg, -1}, c,
                                     nn::BnMode::kMidpoint, nn::GammaMode::kScalar, real(1e-6),
                                     200)
                    .v;
            },
            pts, u, kFdStep);
        return std::make_pair(manual, fd);
    }, true});
    layer_checks.push_back({"conv2d", "x", [&](Rng& r, real c) {
        const int B = 1, H = 3, W = 3, Cin = 2, Cout = 2;
        nn::ConvSpec spec;
        spec.k = 3;
        spec.stride = 1;
        spec.pad = 1;
        spec.c_in = Cin;
        spec.c_out = Cout;
        TensorBuf buf({static_cast<std::size_t>(B * H * W), Cin});
        for (int i = 0; i < B * H * W; ++i) {
            Tensor p = random_point(r, Cin, real(0.5) / std::sqrt(c), real(0.05) / std::sqrt(c));
            for (int j = 0; j < Cin; ++j) buf[i * Cin + j] = p.at(j);
        }
        Tensor x = buf.freeze();
        Tensor Z = random_vec(r, 9 * Cin, Cout, real(0.2));
        Tensor rr = random_vec(r, 1, Cout, real(0.1));
        Tensor u = random_vec(r, B * H * W, Cout);
        Tensor manual = tape_vjp(
            [&](Graph& g, Var in) {
                return nn::conv2d(g, in, B, H, W, spec, g.constant(Z), g.constant(rr), c);
            },
            x, u);
        Tensor fd = finite_difference_vjp(
            [&](const Tensor& t) {
                Graph g(nullptr);
                return nn::conv2d(g, Var{t, -1}, B, H, W, spec, Var{Z, -1}, Var{rr, -1}, c).v;
            },
            x, u, kFdStep);
        return std::make_pair(manual, fd);
    }, true});

    for (const real c : {real(1), real(0.1), real(0.01)}) {
        for (const Check& chk : checks) {
            report.rows.push_back(run_check(chk, c, dim, n_points, tol_primitive, rng));
        }
    }
    for (const real c : {real(1), real(0.1)}) {
        for (const Check& chk : layer_checks) {
            report.rows.push_back(run_check(chk, c, dim, n_points_layer, tol_layer, rng));
        }
    }
    return report;
}

std::string gradcheck_csv(const GradReport& report) {
    std::string out = "op,slot,curvature,dim,points,max_rel_err,tol,pass\n";
    for (const auto& r : report.rows) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s,%s,%g,%d,%d,%.3e,%.0e,%d\n", r.op.c_str(),
                      r.slot.c_str(), static_cast<double>(r.curvature), r.dim, r.points,
                      static_cast<double>(r.max_rel_err), static_cast<double>(r.tol),
                      r.pass ? 1 : 0);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<NormRow> norm_sweep(int depth, int dim, models::InitScheme scheme, std::uint64_t seed,
                                int batch, real curvature) {
    if (depth < 1) throw ContractError("norm_sweep: depth must be >= 1");
    Rng rng(seed);
    const std::size_t n = static_cast<std::size_t>(dim);
    TensorBuf vbuf({static_cast<std::size_t>(batch), n});
    const real sd = real(1) / std::sqrt(real(10));
    for (std::size_t i = 0; i < vbuf.size(); ++i) vbuf[i] = sd * real(rng.normal());
    Tensor x = gyro::exp0(vbuf.freeze(), curvature);

    auto mean_norm = [](const Tensor& t) {
        real acc = 0;
        for (std::size_t r = 0; r < t.rows(); ++r) {
            real ns = 0;
            const real* p = t.row_ptr(r);
            for (std::size_t i = 0; i < t.cols(); ++i) ns += p[i] * p[i];
            acc += std::sqrt(ns);
        }
        return acc / real(t.rows());
    };

    std::vector<NormRow> rows;
    rows.push_back({0, mean_norm(x), std::log(mean_norm(x))});
    for (int layer = 1; layer <= depth; ++layer) {
        nn::FcParams p = scheme == models::InitScheme::kIdentity
                             ? models::identity_init(n, n)
                             : models::normal_init(n, n, rng);
        x = nn::fc_forward(x, p, curvature);
        const real mn = mean_norm(x);
        rows.push_back({layer, mn, std::log(mn)});
    }
    return rows;
}

std::string norm_sweep_csv(const std::vector<NormRow>& rows, models::InitScheme scheme) {
    const char* init = scheme == models::InitScheme::kIdentity ? "identity" : "normal";
    std::string out = "layer,mean_norm,log_mean_norm,init\n";
    for (const auto& r : rows) {
        char buf[120];
        std::snprintf(buf, sizeof(buf), "%d,%.12g,%.12g,%s\n", r.layer,
                      static_cast<double>(r.mean_norm), static_cast<double>(r.log_mean_norm), init);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

template <typename F>
std::pair<double, double> time_median_mean(F&& fn, int reps) {
    fn();
    fn(); // two warmups
    std::vector<double> times(reps);
    for (int i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        times[i] = std::chrono::duration<double>(t1 - t0).count();
    }
    std::vector<double> sorted = times;
    std::sort(sorted.begin(), sorted.end());
    const double median = reps % 2 ? sorted[reps / 2]
                                   : real(0.5) * (sorted[reps / 2 - 1] + sorted[reps / 2]);
    double mean = 0;
    for (double t : times) mean += t;
    return {median, mean / reps};
}

} // namespace

std::vector<BnBenchRow> bn_bench(const std::vector<int>& batches, const std::vector<int>& dims,
                                 int reps, std::uint64_t seed, real curvature) {
    if (reps < 10) reps = 10; // timing contract: at least 10 repetitions
    const int saved_threads = num_threads();
    set_num_threads(1); // benchmarks are single-threaded by contract
    std::vector<BnBenchRow> rows;
    Rng rng(seed);
    for (int batch : batches) {
        for (int dim : dims) {
            TensorBuf buf({static_cast<std::size_t>(batch), static_cast<std::size_t>(dim)});
            for (int i = 0; i < batch; ++i) {
                Tensor p = random_point(rng, dim, real(0.5) / std::sqrt(curvature));
                for (int j = 0; j < dim; ++j) buf[i * dim + j] = p.at(j);
            }
            Tensor pts = buf.freeze();
            Tensor mid = nn::poincare_midpoint(pts, curvature);
            nn::FrechetResult fre = nn::frechet_mean_full(pts, curvature);
            const real dist = gyro::distance(mid, fre.mean, curvature).at(0);

            auto add_row = [&](const char* method, auto&& fn) {
                auto [median, mean] = time_median_mean(fn, reps);
                BnBenchRow row;
                row.method = method;
                row.batch = batch;
                row.dim = dim;
                row.curvature = curvature;
                row.reps = reps;
                row.median_s = median;
                row.mean_s = mean;
                row.dist_midpoint_frechet = dist;
                row.frechet_converged = fre.converged;
                rows.push_back(row);
            };
            add_row("midpoint", [&] { nn::poincare_midpoint(pts, curvature); });
            add_row("frechet", [&] { nn::frechet_mean_full(pts, curvature); });
            nn::BnState st_mid = nn::make_bn_state(dim, nn::GammaMode::kScalar);
            nn::BnState st_fre = nn::make_bn_state(dim, nn::GammaMode::kScalar);
            add_row("bn_midpoint",
                    [&] { nn::batchnorm_forward(pts, st_mid, curvature, nn::BnMode::kMidpoint); });
            add_row("bn_frechet",
                    [&] { nn::batchnorm_forward(pts, st_fre, curvature, nn::BnMode::kFrechet); });
        }
    }
    set_num_threads(saved_threads);
    return rows;
}

std::string bn_bench_csv(const std::vector<BnBenchRow>& rows) {
    std::string out =
        "method,batch,dim,curvature,reps,mean_s,median_s,dist_midpoint_frechet,frechet_converged\n";
    for (const auto& r : rows) {
        char buf[200];
        std::snprintf(buf, sizeof(buf), "%s,%d,%d,%g,%d,%.6e,%.6e,%.6e,%d\n", r.method.c_str(),
                      r.batch, r.dim, static_cast<double>(r.curvature), r.reps, r.mean_s,
                      r.median_s, static_cast<double>(r.dist_midpoint_frechet),
                      r.frechet_converged ? 1 : 0);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

TapeRow measure_tape(const std::string& scope, bool naive, std::uint64_t seed,
                     const std::function<Var(Graph&, Rng&)>& build, bool run_backward) {
    Tape tape;
    tape.naive = naive;
    Graph g(&tape);
    Rng rng(seed);
    Var out = build(g, rng);
    std::size_t leaves = 0;
    for (NodeId i = 0; i < static_cast<NodeId>(tape.size()); ++i) {
        if (tape.node(i).op == Op::kLeaf) ++leaves;
    }
    TapeRow row;
    row.scope = scope;
    row.mode = naive ? "naive" : "fused";
    row.nodes = tape.size() - leaves; // operation nodes only
    row.saved_bytes = tape.saved_bytes();
    row.value_bytes = tape.value_bytes();
    if (run_backward) {
        Tensor seed_grad = Tensor::full(out.v.shape(), 1);
        tape.backward(out.id, seed_grad);
    }
    return row;
}

} // namespace

std::vector<TapeRow> tape_size_bench(std::uint64_t seed) {
    std::vector<TapeRow> rows;
    const real c = real(0.1);
    const int dim = 8;

    struct Prim {
        const char* name;
        std::function<Var(Graph&, Rng&)> build;
    };
    auto leafpt = [&](Graph& g, Rng& rng, real maxn) {
        return g.leaf(random_point(rng, dim, maxn).with_requires_grad(true));
    };
    std::vector<Prim> prims;
    prims.push_back({"mobius_add", [&](Graph& g, Rng& r) {
        Var x = leafpt(g, r, real(0.5) / std::sqrt(c));
        Var y = leafpt(g, r, real(0.5) / std::sqrt(c));
        return g.mobius_add(x, y, c);
    }});
    prims.push_back({"mobius_scalar_mul", [&](Graph& g, Rng& r) {
        return g.mobius_scalar(real(0.5), leafpt(g, r, real(0.5) / std::sqrt(c)), c);
    }});
    prims.push_back({"conformal_factor", [&](Graph& g, Rng& r) {
        return g.conformal(leafpt(g, r, real(0.5) / std::sqrt(c)), c);
    }});
    prims.push_back({"exp0", [&](Graph& g, Rng& r) {
        return g.exp0(leafpt(g, r, real(1)), c);
    }});
    prims.push_back({"log0", [&](Graph& g, Rng& r) {
        return g.log0(leafpt(g, r, real(0.5) / std::sqrt(c)), c);
    }});
    prims.push_back({"zc_exp", [&](Graph& g, Rng& r) {
        Var x = leafpt(g, r, real(0.5) / std::sqrt(c));
        Var v = leafpt(g, r, real(1));
        return g.zc_exp(x, v, c);
    }});
    prims.push_back({"f_log", [&](Graph& g, Rng& r) {
        Var x = leafpt(g, r, real(0.5) / std::sqrt(c));
        Var z = leafpt(g, r, real(0.5) / std::sqrt(c));
        return g.f_log(x, z, c);
    }});
    prims.push_back({"project", [&](Graph& g, Rng& r) {
        return g.project(leafpt(g, r, real(0.5) / std::sqrt(c)), c);
    }});

    for (const Prim& p : prims) {
        for (bool naive : {false, true}) {
            rows.push_back(measure_tape(p.name, naive, seed, p.build, false));
        }
    }

    // Residual block, forward + backward, both modes.
    const int B = 2, H = 4, W = 4, C = 2;
    auto build_block = [&](Graph& g, Rng& rng) {
        TensorBuf buf({static_cast<std::size_t>(B * H * W), C});
        for (int i = 0; i < B * H * W; ++i) {
            Tensor p = random_point(rng, C, real(0.4) / std::sqrt(c), real(0.05) / std::sqrt(c));
            for (int j = 0; j < C; ++j) buf[i * C + j] = p.at(j);
        }
        Var x = g.leaf(buf.freeze().with_requires_grad(true));
        nn::ConvSpec spec;
        spec.k = 3;
        spec.stride = 1;
        spec.pad = 1;
        spec.c_in = C;
        spec.c_out = C;
        nn::ResidualVars rv;
        rv.conv1_z = g.leaf(random_vec(rng, 9 * C, C, real(0.2)).with_requires_grad(true));
        rv.conv1_r = g.leaf(random_vec(rng, 1, C, real(0.1)).with_requires_grad(true));
        rv.conv2_z = g.leaf(random_vec(rng, 9 * C, C, real(0.2)).with_requires_grad(true));
        rv.conv2_r = g.leaf(random_vec(rng, 1, C, real(0.1)).with_requires_grad(true));
        rv.bn1_bias = g.leaf(Tensor::zeros({1, C}).with_requires_grad(true));
        rv.bn1_lgamma = g.leaf(Tensor::zeros({1, 1}).with_requires_grad(true));
        rv.bn2_bias = g.leaf(Tensor::zeros({1, C}).with_requires_grad(true));
        rv.bn2_lgamma = g.leaf(Tensor::zeros({1, 1}).with_requires_grad(true));
        Var out = nn::residual_block(g, x, B, H, W, spec, rv, c, nn::BnMode::kMidpoint,
                                     nn::GammaMode::kScalar);
        // reduce to a scalar so backward has a canonical seed
        return g.mean_rows(g.rownormsq(out));
    };
    for (bool naive : {false, true}) {
        rows.push_back(measure_tape("residual_block", naive, seed, build_block, true));
    }
    return rows;
}

std::string tape_bench_csv(const std::vector<TapeRow>& rows) {
    std::string out = "scope,mode,nodes,saved_bytes,value_bytes\n";
    for (const auto& r : rows) {
        out += r.scope + "," + r.mode + "," + std::to_string(r.nodes) + "," +
               std::to_string(r.saved_bytes) + "," + std::to_string(r.value_bytes) + "\n";
    }
    return out;
}

} // namespace presnet::verify
