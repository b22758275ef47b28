#include "presnet/models.hpp"

#include <cmath>

#include "presnet/error.hpp"
#include "presnet/gyro.hpp"

namespace presnet::models {

void ArchSpec::validate() const {
    if (!(curvature > 0)) throw ContractError("ArchSpec: curvature must be positive");
    if (num_classes < 2) throw ContractError("ArchSpec: need at least two classes");
    if (kind == Kind::kResNet) {
        if (depth < 8 || (depth - 2) % 6 != 0) {
            throw ContractError("ArchSpec: resnet depth must be 6k + 2 with k >= 1");
        }
        if (!(widths[0] < widths[1] && widths[1] < widths[2])) {
            throw ContractError("ArchSpec: widths must be strictly increasing");
        }
    } else if (convnet_stages.empty()) {
        throw ContractError("ArchSpec: convnet needs at least one stage");
    }
}

nn::FcParams identity_init(std::size_t m, std::size_t n) {
    if (m > n) throw ContractError("identity_init: defined only for m <= n");
    TensorBuf Z({m, n});
    for (std::size_t i = 0; i < m; ++i) Z[i * n + i] = real(0.5);
    return nn::FcParams{Z.freeze(), Tensor::zeros({1, n})};
}

nn::FcParams normal_init(std::size_t m, std::size_t n, Rng& rng) {
    const real sd = real(1) / std::sqrt(real(2) * real(m) * real(n));
    TensorBuf Z({m, n});
    for (std::size_t i = 0; i < m * n; ++i) Z[i] = sd * real(rng.normal());
    return nn::FcParams{Z.freeze(), Tensor::zeros({1, n})};
}

Tensor pixel_embed(const Tensor& normalized, real c) {
    if (!normalized.all_finite()) throw ContractError("pixel_embed: non-finite pixel values");
    return gyro::exp0(normalized, c);
}

std::shared_ptr<const UnfoldTable> Model::unfold(int b, int h, int w, const nn::ConvSpec& spec) {
    const std::array<int, 6> key{b, h, w, spec.k, spec.stride, spec.pad};
    auto it = unfold_cache.find(key);
    if (it != unfold_cache.end()) return it->second;
    auto idx = nn::make_unfold_index(b, h, w, spec);
    unfold_cache.emplace(key, idx);
    return idx;
}

namespace {

int add_param(Model& m, std::string name, Tensor value) {
    m.params.push_back({std::move(name), std::move(value)});
    return static_cast<int>(m.params.size() - 1);
}

// Identity init where Eq.-defined (m <= n), normal fallback otherwise.
ConvDef make_conv(Model& m, const std::string& name, nn::ConvSpec spec, InitScheme scheme,
                  Rng& rng) {
    spec.validate();
    const std::size_t fan_in = static_cast<std::size_t>(spec.k) * spec.k * spec.c_in;
    const std::size_t fan_out = static_cast<std::size_t>(spec.c_out);
    ConvDef def;
    def.spec = spec;
    nn::FcParams p;
    if (scheme == InitScheme::kIdentity && fan_in <= fan_out) {
        p = identity_init(fan_in, fan_out);
        def.identity = true;
    } else {
        p = normal_init(fan_in, fan_out, rng);
        if (scheme == InitScheme::kIdentity) {
            m.init_notes.push_back(name + ": identity init needs fan-in <= fan-out (" +
                                   std::to_string(fan_in) + " > " + std::to_string(fan_out) +
                                   "), fell back to normal baseline");
        }
    }
    def.zi = add_param(m, name + ".Z", p.Z);
    def.ri = add_param(m, name + ".r", p.r);
    return def;
}

BnDef make_bn(Model& m, const std::string& name, int channels, nn::GammaMode mode) {
    nn::BnState s = nn::make_bn_state(static_cast<std::size_t>(channels), mode);
    BnDef def;
    def.bias = add_param(m, name + ".bias", s.bias_param);
    def.lgamma = add_param(m, name + ".log_gamma", s.log_gamma);
    return def;
}

} // namespace

Model build_model(const ArchSpec& spec, Rng& rng) {
    spec.validate();
    Model m;
    m.arch = spec;
    if (spec.kind == ArchSpec::Kind::kResNet) {
        nn::ConvSpec stem;
        stem.k = 3;
        stem.stride = 1;
        stem.pad = 1;
        stem.c_in = spec.image_channels;
        stem.c_out = spec.widths[0];
        m.stem = make_conv(m, "stem", stem, spec.init, rng);
        m.stem_bn = make_bn(m, "stem.bn", stem.c_out, spec.gamma_mode);
        const int k = spec.blocks_per_stage();
        for (int stage = 0; stage < 3; ++stage) {
            const int c_in_stage = stage == 0 ? spec.widths[0] : spec.widths[stage - 1];
            for (int bi = 0; bi < k; ++bi) {
                const bool transition = stage > 0 && bi == 0;
                BlockDef blk;
                nn::ConvSpec cs;
                cs.k = 3;
                cs.stride = transition ? 2 : 1;
                cs.pad = 1;
                cs.c_in = bi == 0 ? c_in_stage : spec.widths[stage];
                cs.c_out = spec.widths[stage];
                const std::string base =
                    "stage" + std::to_string(stage + 1) + ".block" + std::to_string(bi + 1);
                blk.conv1 = make_conv(m, base + ".conv1", cs, spec.init, rng);
                nn::ConvSpec cs2 = cs;
                cs2.stride = 1;
                cs2.c_in = cs.c_out;
                blk.conv2 = make_conv(m, base + ".conv2", cs2, spec.init, rng);
                blk.bn1 = make_bn(m, base + ".bn1", cs.c_out, spec.gamma_mode);
                blk.bn2 = make_bn(m, base + ".bn2", cs.c_out, spec.gamma_mode);
                if (cs.stride != 1 || cs.c_in != cs.c_out) {
                    nn::ConvSpec ds;
                    ds.k = 1;
                    ds.stride = cs.stride;
                    ds.pad = 0;
                    ds.c_in = cs.c_in;
                    ds.c_out = cs.c_out;
                    blk.down = make_conv(m, base + ".down", ds, spec.init, rng);
                }
                m.blocks.push_back(std::move(blk));
            }
        }
        // Head per the baseline scheme; identity init does not cover m > n.
        nn::FcParams head = normal_init(static_cast<std::size_t>(spec.widths[2]),
                                        static_cast<std::size_t>(spec.num_classes), rng);
        m.head_z = add_param(m, "head.Z", head.Z);
        m.head_r = add_param(m, "head.r", head.r);
    } else {
        int c_in = spec.image_channels;
        for (std::size_t i = 0; i < spec.convnet_stages.size(); ++i) {
            nn::ConvSpec cs;
            cs.k = 3;
            cs.stride = spec.convnet_stages[i].stride;
            cs.pad = 1;
            cs.c_in = c_in;
            cs.c_out = spec.convnet_stages[i].c_out;
            const std::string base = "conv" + std::to_string(i + 1);
            m.convnet_convs.push_back(make_conv(m, base, cs, spec.init, rng));
            m.convnet_bns.push_back(make_bn(m, base + ".bn", cs.c_out, spec.gamma_mode));
            c_in = cs.c_out;
        }
        nn::FcParams head = normal_init(static_cast<std::size_t>(c_in),
                                        static_cast<std::size_t>(spec.num_classes), rng);
        m.head_z = add_param(m, "head.Z", head.Z);
        m.head_r = add_param(m, "head.r", head.r);
    }
    return m;
}

std::size_t count_params(const Model& m) {
    std::size_t total = 0;
    for (const Param& p : m.params) total += p.value.size();
    return total;
}

Var forward_scores(Graph& g, Model& m, const Tensor& images, int batch, nn::BnMode bn_mode,
                   std::vector<Var>* param_vars) {
    const ArchSpec& spec = m.arch;
    const real c = spec.curvature;
    const int hw = spec.image_hw;
    if (images.rows() != static_cast<std::size_t>(batch) * hw * hw ||
        images.cols() != static_cast<std::size_t>(spec.image_channels)) {
        throw ContractError("forward: image batch shape mismatch");
    }
    std::vector<Var> pv;
    pv.reserve(m.params.size());
    for (const Param& p : m.params) pv.push_back(g.leaf(p.value.with_requires_grad(true)));
    auto P = [&](int i) { return pv[i]; };

    const bool debug = debug_checks_enabled();
    auto check_ball = [&](const Var& v, const char* where) {
        if (!debug) return;
        const real shell = (1 - gyro::kBoundaryEps) / std::sqrt(c);
        for (std::size_t row = 0; row < v.v.rows(); ++row) {
            real s = 0;
            const real* p = v.v.row_ptr(row);
            for (std::size_t i = 0; i < v.v.cols(); ++i) s += p[i] * p[i];
            if (!(std::sqrt(s) <= shell * (1 + real(1e-12)))) {
                throw ContractError(std::string("forward: point escaped the ball after ") + where);
            }
        }
    };

    Var x = g.project(g.exp0(g.constant(images), c), c);
    check_ball(x, "pixel_embed");
    int h = hw, w = hw;

    auto conv_apply = [&](Var in, const ConvDef& def) {
        Var out = nn::conv2d(g, in, batch, h, w, def.spec, P(def.zi), P(def.ri), c,
                             m.unfold(batch, h, w, def.spec));
        h = def.spec.out_dim(h);
        w = def.spec.out_dim(w);
        check_ball(out, "conv2d");
        return out;
    };
    auto bn_apply = [&](Var in, const BnDef& def) {
        Var out = nn::batchnorm(g, in, P(def.bias), P(def.lgamma), c, bn_mode, spec.gamma_mode,
                                real(1e-6), 200);
        check_ball(out, "batchnorm");
        return out;
    };

    if (spec.kind == ArchSpec::Kind::kResNet) {
        x = conv_apply(x, m.stem);
        x = bn_apply(x, m.stem_bn);
        x = nn::relu_p(g, x, c);
        for (const BlockDef& blk : m.blocks) {
            nn::ResidualVars rv;
            rv.conv1_z = P(blk.conv1.zi);
            rv.conv1_r = P(blk.conv1.ri);
            rv.conv2_z = P(blk.conv2.zi);
            rv.conv2_r = P(blk.conv2.ri);
            rv.bn1_bias = P(blk.bn1.bias);
            rv.bn1_lgamma = P(blk.bn1.lgamma);
            rv.bn2_bias = P(blk.bn2.bias);
            rv.bn2_lgamma = P(blk.bn2.lgamma);
            if (blk.down) {
                rv.down_z = P(blk.down->zi);
                rv.down_r = P(blk.down->ri);
            }
            const int h_in = h, w_in = w;
            nn::ConvSpec s1 = blk.conv1.spec;
            rv.idx1 = m.unfold(batch, h_in, w_in, s1);
            rv.idx2 = m.unfold(batch, s1.out_dim(h_in), s1.out_dim(w_in), blk.conv2.spec);
            if (blk.down) rv.idx_down = m.unfold(batch, h_in, w_in, blk.down->spec);
            x = nn::residual_block(g, x, batch, h_in, w_in, s1, rv, c, bn_mode, spec.gamma_mode);
            h = s1.out_dim(h_in);
            w = s1.out_dim(w_in);
            check_ball(x, "residual_block");
        }
    } else {
        for (std::size_t i = 0; i < m.convnet_convs.size(); ++i) {
            x = conv_apply(x, m.convnet_convs[i]);
            x = bn_apply(x, m.convnet_bns[i]);
            x = nn::relu_p(g, x, c);
        }
    }

    Var pooled = nn::poincare_midpoint(g, x, c, static_cast<std::size_t>(h) * w);
    check_ball(pooled, "global_midpoint");
    Var scores = g.mlr(pooled, P(m.head_z), P(m.head_r), c);
    if (param_vars) *param_vars = std::move(pv);
    return scores;
}

Tensor forward(Model& m, const Tensor& images, int batch, nn::BnMode bn_mode) {
    Graph g(nullptr);
    return forward_scores(g, m, images, batch, bn_mode, nullptr).v;
}

} // namespace presnet::models
