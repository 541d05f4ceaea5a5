// gradcheck.hpp -- central-finite-difference verification of backward passes.
#pragma once

#include <cmath>
#include <functional>
#include <type_traits>
#include <vector>

#include "fusenet/errors.hpp"
#include "fusenet/rng.hpp"
#include "fusenet/tensor.hpp"

namespace fusenet {

// Compares the analytic gradient of a scalar-valued tensor function against
// central finite differences, coordinate by coordinate, over every input that
// requires grad. Returns the maximum relative error
//   |analytic - numeric| / max(|analytic|, |numeric|, floor)
// where floor is 1e-3 * the largest analytic gradient across all checked
// inputs. Without the floor, coordinates whose true gradient is tiny surface
// pure central-difference roundoff (about 1e-16 * |f| / h) as a large
// relative error and drown out real defects.
//
// Only meaningful in double precision; single-precision calls are refused.
template <typename T, typename F>
double grad_check(F&& f, std::vector<Tensor<T>> inputs, double h = 1e-6) {
    if constexpr (!std::is_same_v<T, double>) {
        throw PrecisionError("grad_check: requires double precision tensors");
    } else {
        for (auto& in : inputs)
            if (in.requires_grad()) in.zero_grad();
        Tensor<T> loss = f(inputs);
        if (loss.size() != 1)
            throw UsageError("grad_check: function must be scalar-valued, got shape " +
                             shape_str(loss.shape()));
        loss.backward();
        std::vector<std::vector<double>> analytic;
        analytic.reserve(inputs.size());
        for (auto& in : inputs) {
            if (in.requires_grad()) {
                auto g = in.grad();
                analytic.emplace_back(g.begin(), g.end());
            } else {
                analytic.emplace_back();
            }
        }

        double scale = 0.0;
        for (const auto& g : analytic)
            for (double a : g) scale = std::max(scale, std::abs(a));
        const double floor = std::max(1e-3 * scale, 1e-12);

        double max_rel = 0.0;
        NoGradGuard guard; // finite differences need values only, not a tape
        for (std::size_t k = 0; k < inputs.size(); ++k) {
            if (!inputs[k].requires_grad()) continue;
            auto vals = inputs[k].values_mut();
            for (std::size_t i = 0; i < vals.size(); ++i) {
                const double saved = vals[i];
                vals[i] = saved + h;
                const double up = f(inputs).item();
                vals[i] = saved - h;
                const double down = f(inputs).item();
                vals[i] = saved;
                const double numeric = (up - down) / (2.0 * h);
                const double a = analytic[k][i];
                const double denom = std::max({std::abs(a), std::abs(numeric), floor});
                max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
            }
        }
        return max_rel;
    }
}

// Random-filled leaf tensor helper for gradient checks and property tests.
template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = true) {
    std::vector<T> vals(numel(shape));
    for (auto& v : vals) v = static_cast<T>(rng.uniform(lo, hi));
    return Tensor<T>(std::move(shape), std::move(vals), requires_grad);
}

} // namespace fusenet
