// optim.hpp -- training configuration and the Adam update rule.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fusenet/backbones.hpp"
#include "fusenet/errors.hpp"

namespace fusenet {

struct TrainConfig {
    std::size_t batch_size = 16;
    double learning_rate = 0.003;
    std::size_t epochs = 50;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
    double dropout_p = 0.2;
    std::size_t class_count = 2;
    // With select_best the epoch of highest validation accuracy wins (ties
    // to the earliest); without it the final epoch is kept and an empty
    // validation split is tolerated.
    bool select_best = true;

    void validate() const {
        if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be > 0");
        if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
        if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
            throw ConfigError("train config: betas must lie in (0, 1)");
        if (!(epsilon > 0.0)) throw ConfigError("train config: epsilon must be > 0");
        if (dropout_p < 0.0 || dropout_p >= 1.0)
            throw ConfigError("train config: dropout_p must lie in [0, 1)");
        if (class_count < 2) throw ConfigError("train config: class_count must be >= 2");
    }
};

// First/second moment buffers congruent with the parameter store, in store
// key order. The beta powers are maintained incrementally so the bias
// correction never calls pow.
template <typename T>
struct AdamState {
    struct Slot {
        std::vector<T> m, v;
    };
    std::vector<Slot> slots;
    std::uint64_t t = 0;
    double beta1_pow = 1.0;
    double beta2_pow = 1.0;

    static AdamState init(const ParamStore<T>& params) {
        AdamState s;
        s.slots.reserve(params.keys().size());
        for (const auto& key : params.keys()) {
            const std::size_t n = params.at(key).size();
            s.slots.push_back({std::vector<T>(n, T(0)), std::vector<T>(n, T(0))});
        }
        return s;
    }
};

// One Adam step over every parameter in store order:
//   m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
//   theta <- theta - lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, const TrainConfig& cfg) {
    const auto& keys = params.keys();
    if (state.slots.size() != keys.size())
        throw TrainError("adam: state holds " + std::to_string(state.slots.size()) +
                         " slots for " + std::to_string(keys.size()) + " parameters");
    state.t += 1;
    state.beta1_pow *= cfg.beta1;
    state.beta2_pow *= cfg.beta2;
    const T lr = T(cfg.learning_rate);
    const T b1 = T(cfg.beta1), b2 = T(cfg.beta2), eps = T(cfg.epsilon);
    const T c1 = T(1.0 / (1.0 - state.beta1_pow));
    const T c2 = T(1.0 / (1.0 - state.beta2_pow));
    for (std::size_t k = 0; k < keys.size(); ++k) {
        auto& p = params.at(keys[k]);
        if (!p.has_grad()) throw TrainError("adam: no gradient for parameter \"" + keys[k] + "\"");
        auto theta = p.values_mut();
        const auto g = p.grad();
        auto& slot = state.slots[k];
        if (slot.m.size() != theta.size())
            throw TrainError("adam: state size mismatch for \"" + keys[k] + "\"");
        for (std::size_t i = 0; i < theta.size(); ++i) {
            slot.m[i] = b1 * slot.m[i] + (T(1) - b1) * g[i];
            slot.v[i] = b2 * slot.v[i] + (T(1) - b2) * g[i] * g[i];
            const T mhat = slot.m[i] * c1;
            const T vhat = slot.v[i] * c2;
            theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

} // namespace fusenet
