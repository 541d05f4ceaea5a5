// model.hpp -- parallel backbone composition: shared input image, per-kind
// feature vectors, concatenation, and the 512-wide classifier head.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fusenet/backbones.hpp"
#include "fusenet/errors.hpp"
#include "fusenet/rng.hpp"
#include "fusenet/tensor.hpp"

namespace fusenet {

template <typename T>
struct Prediction {
    Tensor<T> logits;    // [B, C]
    Tensor<T> log_probs; // [B, C]
    std::vector<int> predicted_class;
    std::vector<double> positive_prob;
};

template <typename T>
class FusionModel {
  public:
    static constexpr std::size_t kHeadHidden = 512;

    // Backbones are stored and concatenated in the fixed order residual,
    // inception, shuffle regardless of the order given; fewer than three is
    // allowed (single-backbone baselines use the same head machinery).
    static FusionModel make(std::vector<BackboneSpec> specs, std::size_t classes,
                            double dropout_p, std::uint64_t seed) {
        if (specs.empty() || specs.size() > 3)
            throw ConfigError("model: between one and three backbones required");
        std::sort(specs.begin(), specs.end(), [](const BackboneSpec& a, const BackboneSpec& b) {
            return int(a.kind) < int(b.kind);
        });
        for (std::size_t i = 0; i + 1 < specs.size(); ++i)
            if (specs[i].kind == specs[i + 1].kind)
                throw ConfigError("model: duplicate backbone kind " + kind_name(specs[i].kind));
        for (const auto& s : specs) {
            s.validate();
            if (s.input_h != specs[0].input_h || s.input_w != specs[0].input_w)
                throw ConfigError("model: backbones disagree on input size");
            if (s.feature_dim != specs[0].feature_dim)
                throw ConfigError("model: backbones disagree on feature_dim");
        }
        if (classes < 2) throw ConfigError("model: class_count must be >= 2");
        if (dropout_p < 0.0 || dropout_p >= 1.0)
            throw ConfigError("model: dropout_p must lie in [0, 1)");

        FusionModel m;
        m.specs_ = std::move(specs);
        m.classes_ = classes;
        m.dropout_p_ = dropout_p;
        m.seed_ = seed;
        Rng rng(seed);
        for (const auto& s : m.specs_) build_backbone(m.params_, s, kind_name(s.kind) + ".", rng);
        const std::size_t fused = m.specs_.size() * m.specs_[0].feature_dim;
        m.params_.add_uniform("head.fc1.weight", {kHeadHidden, fused}, fused, rng);
        m.params_.add_zeros("head.fc1.bias", {kHeadHidden});
        m.params_.add_uniform("head.fc2.weight", {classes, kHeadHidden}, kHeadHidden, rng);
        m.params_.add_zeros("head.fc2.bias", {classes});
        return m;
    }

    const std::vector<BackboneSpec>& specs() const { return specs_; }
    std::size_t class_count() const { return classes_; }
    double dropout_p() const { return dropout_p_; }
    std::uint64_t seed() const { return seed_; }
    std::size_t feature_dim() const { return specs_[0].feature_dim; }
    std::size_t input_h() const { return specs_[0].input_h; }
    std::size_t input_w() const { return specs_[0].input_w; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    std::size_t param_count(const std::string& prefix = "") const {
        return params_.param_count(prefix);
    }

    // All backbones see the same batch; their feature vectors concatenate to
    // [B, n*F] and pass through FC -> relu -> dropout -> FC -> log_softmax.
    Prediction<T> forward(const Tensor<T>& images, bool training, Rng& rng) const {
        std::vector<Tensor<T>> features;
        features.reserve(specs_.size());
        for (const auto& s : specs_)
            features.push_back(backbone_forward(params_, s, kind_name(s.kind) + ".", images));
        Tensor<T> fused = features.size() == 1
                              ? features.front()
                              : concat<T>(std::span<const Tensor<T>>(features.data(),
                                                                     features.size()),
                                          1);
        auto h = relu(linear(fused, params_.at("head.fc1.weight"), params_.at("head.fc1.bias")));
        h = dropout(h, dropout_p_, training, rng);
        auto logits = linear(h, params_.at("head.fc2.weight"), params_.at("head.fc2.bias"));
        auto lp = log_softmax(logits);

        Prediction<T> pred{logits, lp, {}, {}};
        const std::size_t b = lp.dim(0), c = lp.dim(1);
        const auto vals = lp.values();
        pred.predicted_class.resize(b);
        pred.positive_prob.resize(b);
        for (std::size_t i = 0; i < b; ++i) {
            const T* row = vals.data() + i * c;
            std::size_t best = 0;
            for (std::size_t j = 1; j < c; ++j)
                if (row[j] > row[best]) best = j;
            pred.predicted_class[i] = int(best);
            if (c == 2) {
                pred.positive_prob[i] = std::exp(double(row[1]));
            } else {
                // probability of class 1 renormalized against class 0 only
                pred.positive_prob[i] = 1.0 / (1.0 + std::exp(double(row[0]) - double(row[1])));
            }
        }
        return pred;
    }

  private:
    std::vector<BackboneSpec> specs_;
    std::size_t classes_ = 2;
    double dropout_p_ = 0.2;
    std::uint64_t seed_ = 0;
    ParamStore<T> params_;
};

} // namespace fusenet
