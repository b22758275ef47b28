#include "presnet/optim.hpp"

#include <cmath>

#include "presnet/error.hpp"

namespace presnet::optim {

State State::make(Kind kind, const std::vector<models::Param>& params) {
    State s;
    s.kind = kind;
    s.m.reserve(params.size());
    for (const auto& p : params) s.m.push_back(Tensor::zeros(p.value.shape()));
    if (kind == Kind::kAdam) {
        s.v.reserve(params.size());
        for (const auto& p : params) s.v.push_back(Tensor::zeros(p.value.shape()));
    }
    return s;
}

StepResult step(std::vector<models::Param>& params, const std::vector<Tensor>& grads, State& state,
                const Options& opt) {
    if (params.size() != grads.size() || params.size() != state.m.size()) {
        throw ContractError("optim::step: params/grads/state size mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].defined() && !grads[i].all_finite()) {
            return {false, "non-finite gradient for " + params[i].name + ", step rejected"};
        }
        if (grads[i].defined() && !grads[i].same_shape(params[i].value)) {
            throw ContractError("optim::step: gradient shape mismatch for " + params[i].name);
        }
    }
    state.t += 1;
    const real bc1 = 1 - std::pow(opt.beta1, static_cast<real>(state.t));
    const real bc2 = 1 - std::pow(opt.beta2, static_cast<real>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& p = params[i].value;
        const std::size_t sz = p.size();
        TensorBuf np(p.shape()), nm(p.shape());
        const real* pg = grads[i].defined() ? grads[i].data() : nullptr;
        const real* pp = p.data();
        const real* pm = state.m[i].data();
        if (state.kind == Kind::kAdam) {
            TensorBuf nv(p.shape());
            const real* pv = state.v[i].data();
            for (std::size_t j = 0; j < sz; ++j) {
                const real g = (pg ? pg[j] : real(0)) + opt.weight_decay * pp[j];
                const real m = opt.beta1 * pm[j] + (1 - opt.beta1) * g;
                const real v = opt.beta2 * pv[j] + (1 - opt.beta2) * g * g;
                nm[j] = m;
                nv[j] = v;
                np[j] = pp[j] - opt.lr * (m / bc1) / (std::sqrt(v / bc2) + opt.eps);
            }
            state.v[i] = nv.freeze();
        } else {
            for (std::size_t j = 0; j < sz; ++j) {
                const real g = (pg ? pg[j] : real(0)) + opt.weight_decay * pp[j];
                const real m = opt.momentum * pm[j] + g;
                nm[j] = m;
                np[j] = pp[j] - opt.lr * m;
            }
        }
        state.m[i] = nm.freeze();
        params[i].value = np.freeze();
    }
    return {true, ""};
}

} // namespace presnet::optim
