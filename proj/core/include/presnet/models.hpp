#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>

#include "presnet/layers.hpp"

namespace presnet::models {

enum class InitScheme { kIdentity, kNormalBaseline };

struct ConvStage {
    int c_out = 4;
    int stride = 1;
};

struct ArchSpec {
    enum class Kind { kResNet, kConvNet };
    Kind kind = Kind::kResNet;
    int depth = 20; // 6k + 2: three stages of k blocks
    std::array<int, 3> widths{4, 8, 16};
    real curvature = real(0.1);
    int num_classes = 10;
    InitScheme init = InitScheme::kIdentity;
    nn::GammaMode gamma_mode = nn::GammaMode::kScalar;
    std::vector<ConvStage> convnet_stages; // kConvNet only: 3x3 convs
    int image_hw = 32;
    int image_channels = 3;

    void validate() const;
    int blocks_per_stage() const { return (depth - 2) / 6; }
};

// Eq.-style initializations. identity_init requires m <= n.
nn::FcParams identity_init(std::size_t m, std::size_t n);
nn::FcParams normal_init(std::size_t m, std::size_t n, Rng& rng);

// Normalized pixels enter the ball as tangent vectors at the origin.
Tensor pixel_embed(const Tensor& normalized, real c);

struct Param {
    std::string name;
    Tensor value;
};

struct ConvDef {
    nn::ConvSpec spec;
    int zi = -1, ri = -1;
    bool identity = false;
};

struct BnDef {
    int bias = -1, lgamma = -1;
};

struct BlockDef {
    ConvDef conv1, conv2;
    BnDef bn1, bn2;
    std::optional<ConvDef> down;
};

struct Model {
    ArchSpec arch;
    std::vector<Param> params;
    ConvDef stem;
    BnDef stem_bn;
    std::vector<BlockDef> blocks;        // resnet path
    std::vector<ConvDef> convnet_convs;  // convnet path
    std::vector<BnDef> convnet_bns;
    int head_z = -1, head_r = -1;
    std::vector<std::string> init_notes; // run metadata (init fallbacks etc.)

    std::map<std::array<int, 6>, std::shared_ptr<const UnfoldTable>> unfold_cache;
    std::shared_ptr<const UnfoldTable> unfold(int b, int h, int w, const nn::ConvSpec& spec);
};

Model build_model(const ArchSpec& spec, Rng& rng);
std::size_t count_params(const Model& m);

// Builds the score graph for a batch of already-normalized images
// ([B*H*W x 3] rows). When param_vars is non-null it receives one Var per
// model parameter, aligned with model.params, for the optimizer step.
Var forward_scores(Graph& g, Model& m, const Tensor& images, int batch, nn::BnMode bn_mode,
                   std::vector<Var>* param_vars = nullptr);

// Raw inference: scores tensor for a batch.
Tensor forward(Model& m, const Tensor& images, int batch, nn::BnMode bn_mode);

} // namespace presnet::models
