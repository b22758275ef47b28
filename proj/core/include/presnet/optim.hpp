#pragma once

#include <string>

#include "presnet/models.hpp"

namespace presnet::optim {

enum class Kind { kAdam, kSgd };

struct Options {
    Kind kind = Kind::kAdam;
    real lr = real(1e-3);
    real weight_decay = real(1e-4); // classic L2, added to the gradient
    real momentum = real(0.9);      // sgd only
    real beta1 = real(0.9);
    real beta2 = real(0.999);
    real eps = real(1e-8);
};

struct State {
    Kind kind = Kind::kAdam;
    std::int64_t t = 0;
    std::vector<Tensor> m; // first moment / momentum buffer
    std::vector<Tensor> v; // second moment (adam only)
    static State make(Kind kind, const std::vector<models::Param>& params);
};

struct StepResult {
    bool applied = true;
    std::string diagnostic;
};

// Updates params in place. Undefined grad slots count as zero gradients.
// Any non-finite gradient rejects the whole step and reports which tensor.
StepResult step(std::vector<models::Param>& params, const std::vector<Tensor>& grads, State& state,
                const Options& opt);

} // namespace presnet::optim
