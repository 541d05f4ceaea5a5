// verification.hpp -- the double-precision gradient-check suite covering
// every differentiable op, each block type, and one whole fusion model.
#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "fusenet/backbones.hpp"
#include "fusenet/gradcheck.hpp"
#include "fusenet/model.hpp"
#include "fusenet/tensor.hpp"

namespace fusenet {

struct GradCheckEntry {
    std::string name;
    double error = std::numeric_limits<double>::infinity();
    double tolerance = 0.0;
    std::string note; // failure detail when a check throws

    bool pass() const { return error < tolerance; }
};

namespace detail {

using D = double;
using Fn = std::function<Tensor<D>(std::vector<Tensor<D>>&)>;

inline void run_entry(std::vector<GradCheckEntry>& out, const std::string& name, double tol,
                      const Fn& f, std::vector<Tensor<D>> inputs) {
    GradCheckEntry e;
    e.name = name;
    e.tolerance = tol;
    try {
        e.error = grad_check<D>(f, std::move(inputs));
    } catch (const std::exception& ex) {
        e.note = ex.what();
    }
    out.push_back(std::move(e));
}

// Push values near the relu/max kink away from it so finite differences
// stay on one side.
inline Tensor<D> kink_free_tensor(Shape shape, Rng& rng) {
    auto t = random_tensor<D>(std::move(shape), rng);
    for (auto& v : t.values_mut())
        if (v > -1e-3 && v < 1e-3) v += v >= 0 ? 0.5 : -0.5;
    return t;
}

// Blocks are built with zero biases, which parks a unit exactly on the relu
// corner whenever its input window is all dark: the analytic slope there is 0
// but a bias perturbation activates the unit, so the finite difference
// disagrees no matter how small the step. Nudge biases off zero before
// checking.
template <typename T>
void randomize_biases(ParamStore<T>& ps, Rng& rng) {
    for (const auto& key : ps.keys())
        if (key.size() >= 5 && key.compare(key.size() - 5, 5, ".bias") == 0)
            for (auto& v : ps.at(key).values_mut()) v = rng.uniform(0.05, 0.3);
}

} // namespace detail

// Every op is wrapped as loss = sum(op(x) * c) with a fixed random c, so the
// upstream gradient is non-uniform and layout mistakes cannot cancel out.
inline std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed = 2024) {
    using detail::run_entry;
    using D = double;
    constexpr double kOpTol = 1e-5;
    constexpr double kModelTol = 1e-4;
    std::vector<GradCheckEntry> out;
    Rng rng(seed);

    auto weigh = [](const Tensor<D>& y, const Tensor<D>& c) { return sum(mul(y, c)); };
    auto coeffs = [&rng](Shape shape) {
        return random_tensor<D>(std::move(shape), rng, -1.0, 1.0, false);
    };

    {
        auto c = coeffs({3, 4});
        run_entry(out, "add", kOpTol,
                  [c, &weigh](auto& in) { return weigh(add(in[0], in[1]), c); },
                  {random_tensor<D>({3, 4}, rng), random_tensor<D>({3, 4}, rng)});
        run_entry(out, "sub", kOpTol,
                  [c, &weigh](auto& in) { return weigh(sub(in[0], in[1]), c); },
                  {random_tensor<D>({3, 4}, rng), random_tensor<D>({3, 4}, rng)});
        run_entry(out, "mul", kOpTol,
                  [c, &weigh](auto& in) { return weigh(mul(in[0], in[1]), c); },
                  {random_tensor<D>({3, 4}, rng), random_tensor<D>({3, 4}, rng)});
        run_entry(out, "scale", kOpTol,
                  [c, &weigh](auto& in) { return weigh(scale(in[0], D(-1.7)), c); },
                  {random_tensor<D>({3, 4}, rng)});
        run_entry(out, "sum", kOpTol, [](auto& in) { return sum(mul(in[0], in[0])); },
                  {random_tensor<D>({3, 4}, rng)});
        run_entry(out, "reshape", kOpTol,
                  [c, &weigh](auto& in) { return weigh(reshape(in[0], {3, 4}), c); },
                  {random_tensor<D>({2, 6}, rng)});
        run_entry(out, "relu", kOpTol,
                  [c, &weigh](auto& in) { return weigh(relu(in[0]), c); },
                  {detail::kink_free_tensor({3, 4}, rng)});
        run_entry(out, "sigmoid", kOpTol,
                  [c, &weigh](auto& in) { return weigh(sigmoid(in[0]), c); },
                  {random_tensor<D>({3, 4}, rng, -3.0, 3.0)});
    }
    {
        auto c = coeffs({4, 5});
        run_entry(out, "log_softmax", kOpTol,
                  [c, &weigh](auto& in) { return weigh(log_softmax(in[0]), c); },
                  {random_tensor<D>({4, 5}, rng, -2.0, 2.0)});
    }
    {
        auto c = coeffs({3, 2});
        run_entry(out, "matmul", kOpTol,
                  [c, &weigh](auto& in) { return weigh(matmul(in[0], in[1]), c); },
                  {random_tensor<D>({3, 4}, rng), random_tensor<D>({4, 2}, rng)});
    }
    {
        auto c = coeffs({3, 5});
        run_entry(out, "linear", kOpTol,
                  [c, &weigh](auto& in) { return weigh(linear(in[0], in[1], in[2]), c); },
                  {random_tensor<D>({3, 4}, rng), random_tensor<D>({5, 4}, rng),
                   random_tensor<D>({5}, rng)});
    }
    {
        auto c = coeffs({2, 4, 8, 8});
        run_entry(out, "conv2d_3x3", kOpTol,
                  [c, &weigh](auto& in) { return weigh(conv2d(in[0], in[1], in[2], 1, 1), c); },
                  {random_tensor<D>({2, 3, 8, 8}, rng), random_tensor<D>({4, 3, 3, 3}, rng),
                   random_tensor<D>({4}, rng)});
    }
    {
        auto c = coeffs({2, 4, 4, 4});
        run_entry(out, "conv2d_strided", kOpTol,
                  [c, &weigh](auto& in) { return weigh(conv2d(in[0], in[1], in[2], 2, 1), c); },
                  {random_tensor<D>({2, 3, 8, 8}, rng), random_tensor<D>({4, 3, 3, 3}, rng),
                   random_tensor<D>({4}, rng)});
    }
    {
        auto c = coeffs({2, 6, 6, 6});
        run_entry(out, "conv2d_grouped", kOpTol,
                  [c, &weigh](auto& in) { return weigh(conv2d(in[0], in[1], in[2], 1, 1, 2), c); },
                  {random_tensor<D>({2, 4, 6, 6}, rng), random_tensor<D>({6, 2, 3, 3}, rng),
                   random_tensor<D>({6}, rng)});
    }
    {
        auto c = coeffs({2, 6, 4, 4});
        run_entry(out, "channel_shuffle", kOpTol,
                  [c, &weigh](auto& in) { return weigh(channel_shuffle(in[0], 2), c); },
                  {random_tensor<D>({2, 6, 4, 4}, rng)});
    }
    {
        auto c = coeffs({2, 5});
        run_entry(out, "concat", kOpTol,
                  [c, &weigh](auto& in) { return weigh(concat<D>({in[0], in[1]}, 1), c); },
                  {random_tensor<D>({2, 2}, rng), random_tensor<D>({2, 3}, rng)});
    }
    {
        auto c = coeffs({2, 3, 2, 2});
        run_entry(out, "pool_max", kOpTol,
                  [c, &weigh](auto& in) { return weigh(pool2d(in[0], PoolKind::max, 2, 2), c); },
                  {detail::kink_free_tensor({2, 3, 4, 4}, rng)});
    }
    {
        auto c = coeffs({2, 3, 4, 4});
        run_entry(out, "pool_avg", kOpTol,
                  [c, &weigh](auto& in) {
                      return weigh(pool2d(in[0], PoolKind::avg, 3, 2, 1), c);
                  },
                  {random_tensor<D>({2, 3, 7, 7}, rng)});
    }
    {
        auto c = coeffs({2, 3, 1, 1});
        run_entry(out, "pool_global_avg", kOpTol,
                  [c, &weigh](auto& in) { return weigh(pool2d(in[0], PoolKind::global_avg), c); },
                  {random_tensor<D>({2, 3, 5, 5}, rng)});
    }
    {
        auto c = coeffs({4, 6});
        run_entry(out, "dropout", kOpTol,
                  [c, &weigh](auto& in) {
                      Rng mask_rng(11);
                      return weigh(dropout(in[0], 0.3, true, mask_rng), c);
                  },
                  {random_tensor<D>({4, 6}, rng)});
    }
    {
        const std::vector<int> labels{0, 2, 1};
        run_entry(out, "nll_loss", kOpTol,
                  [labels](auto& in) { return nll_loss(log_softmax(in[0]), labels); },
                  {random_tensor<D>({3, 3}, rng, -2.0, 2.0)});
    }
    {
        const std::vector<int> labels{1, 0, 1, 1};
        run_entry(out, "binary_sigmoid_nll", kOpTol,
                  [labels](auto& in) { return binary_sigmoid_nll(in[0], labels); },
                  {random_tensor<D>({4}, rng, -3.0, 3.0)});
    }

    // one of each block type, all parameters plus the input
    {
        ParamStore<D> ps;
        Rng wrng(derive_seed(seed, 51));
        build_residual_block(ps, "blk", 4, 8, 2, wrng);
        detail::randomize_biases(ps, wrng);
        auto x = random_tensor<D>({2, 4, 8, 8}, rng, 0.05, 1.0);
        auto c = coeffs({2, 8, 4, 4});
        std::vector<Tensor<D>> inputs{x};
        for (const auto& k : ps.keys()) inputs.push_back(ps.at(k));
        run_entry(out, "residual_block", kOpTol,
                  [&ps, c, &weigh](auto& in) {
                      return weigh(residual_block_forward(ps, "blk", in[0], 2), c);
                  },
                  inputs);
    }
    {
        ParamStore<D> ps;
        Rng wrng(derive_seed(seed, 52));
        const auto widths = InceptionWidths::derive(8);
        build_inception_module(ps, "mod", 4, widths, wrng);
        detail::randomize_biases(ps, wrng);
        auto x = random_tensor<D>({2, 4, 6, 6}, rng, 0.05, 1.0);
        auto c = coeffs({2, 8, 6, 6});
        std::vector<Tensor<D>> inputs{x};
        for (const auto& k : ps.keys()) inputs.push_back(ps.at(k));
        run_entry(out, "inception_module", kOpTol,
                  [&ps, widths, c, &weigh](auto& in) {
                      return weigh(inception_module_forward(ps, "mod", in[0], widths), c);
                  },
                  inputs);
    }
    {
        ParamStore<D> ps;
        Rng wrng(derive_seed(seed, 53));
        build_shuffle_unit(ps, "unit", 8, 8, 1, 2, wrng);
        detail::randomize_biases(ps, wrng);
        auto x = random_tensor<D>({2, 8, 6, 6}, rng, 0.05, 1.0);
        auto c = coeffs({2, 8, 6, 6});
        std::vector<Tensor<D>> inputs{x};
        for (const auto& k : ps.keys()) inputs.push_back(ps.at(k));
        run_entry(out, "shuffle_unit_s1", kOpTol,
                  [&ps, c, &weigh](auto& in) {
                      return weigh(shuffle_unit_forward(ps, "unit", in[0], 1, 2), c);
                  },
                  inputs);
    }
    {
        ParamStore<D> ps;
        Rng wrng(derive_seed(seed, 54));
        build_shuffle_unit(ps, "unit", 4, 8, 2, 2, wrng);
        detail::randomize_biases(ps, wrng);
        auto x = random_tensor<D>({2, 4, 8, 8}, rng, 0.05, 1.0);
        auto c = coeffs({2, 8, 4, 4});
        std::vector<Tensor<D>> inputs{x};
        for (const auto& k : ps.keys()) inputs.push_back(ps.at(k));
        run_entry(out, "shuffle_unit_s2", kOpTol,
                  [&ps, c, &weigh](auto& in) {
                      return weigh(shuffle_unit_forward(ps, "unit", in[0], 2, 2), c);
                  },
                  inputs);
    }

    // whole fusion model: two samples, NLL loss, every parameter perturbed
    {
        std::vector<BackboneSpec> specs;
        for (auto kind :
             {BackboneKind::residual, BackboneKind::inception, BackboneKind::shuffle}) {
            BackboneSpec s;
            s.kind = kind;
            s.stem_channels = 4;
            s.stages = {{1, 8}};
            s.feature_dim = 6;
            s.groups = 2;
            s.input_h = s.input_w = 8;
            specs.push_back(s);
        }
        auto model = FusionModel<D>::make(specs, 2, 0.2, derive_seed(seed, 55));
        Rng brng(derive_seed(seed, 56));
        detail::randomize_biases(model.params(), brng);
        auto images = random_tensor<D>({2, 1, 8, 8}, rng, 0.0, 1.0, false);
        const std::vector<int> labels{1, 0};
        std::vector<Tensor<D>> inputs;
        for (const auto& k : model.params().keys()) inputs.push_back(model.params().at(k));
        run_entry(out, "fusion_model", kModelTol,
                  [&model, images, labels](auto&) {
                      Rng unused(0);
                      return nll_loss(model.forward(images, false, unused).log_probs, labels);
                  },
                  inputs);
    }
    return out;
}

} // namespace fusenet
