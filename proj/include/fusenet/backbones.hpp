// backbones.hpp -- three miniature convolutional feature extractors:
// residual (skip connections), inception (parallel reduced branches) and
// shuffle (grouped pointwise convs + channel shuffle).
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "fusenet/errors.hpp"
#include "fusenet/rng.hpp"
#include "fusenet/tensor.hpp"

namespace fusenet {

enum class BackboneKind { residual, inception, shuffle };

inline std::string kind_name(BackboneKind k) {
    switch (k) {
        case BackboneKind::residual: return "residual";
        case BackboneKind::inception: return "inception";
        case BackboneKind::shuffle: return "shuffle";
    }
    throw UsageError("kind_name: bad enum value");
}

inline BackboneKind parse_kind(const std::string& name) {
    if (name == "residual") return BackboneKind::residual;
    if (name == "inception") return BackboneKind::inception;
    if (name == "shuffle") return BackboneKind::shuffle;
    throw ConfigError("unknown backbone kind \"" + name + "\"");
}

struct StageSpec {
    std::size_t blocks = 0;
    std::size_t channels = 0;
};

struct BackboneSpec {
    BackboneKind kind = BackboneKind::residual;
    std::size_t stem_channels = 16;
    std::vector<StageSpec> stages;
    std::size_t feature_dim = 1000;
    std::size_t groups = 2; // shuffle kind only
    std::size_t input_h = 64;
    std::size_t input_w = 64;

    // Miniature three-stage configuration; the full-size originals remain
    // expressible by passing explicit stages.
    static BackboneSpec defaults(BackboneKind k, std::size_t feature_dim = 1000,
                                 std::size_t input = 64) {
        BackboneSpec s;
        s.kind = k;
        s.feature_dim = feature_dim;
        s.input_h = s.input_w = input;
        s.stem_channels = 16;
        if (k == BackboneKind::shuffle) {
            s.stages = {{2, 32}, {2, 64}, {2, 128}};
            s.groups = 2;
        } else {
            s.stages = {{2, 16}, {2, 32}, {2, 64}};
        }
        return s;
    }

    void validate() const {
        if (feature_dim < 2) throw ConfigError(kind_name(kind) + ": feature_dim must be >= 2");
        if (stem_channels == 0) throw ConfigError(kind_name(kind) + ": stem_channels must be positive");
        if (stages.empty()) throw ConfigError(kind_name(kind) + ": at least one stage required");
        if (input_h == 0 || input_w == 0) throw ConfigError(kind_name(kind) + ": bad input size");
        for (const auto& st : stages)
            if (st.blocks == 0 || st.channels == 0)
                throw ConfigError(kind_name(kind) + ": stage blocks and channels must be positive");
        if (kind == BackboneKind::shuffle) {
            if (groups == 0) throw ConfigError("shuffle: groups must be positive");
            if (stem_channels % groups != 0)
                throw ConfigError("shuffle: stem_channels not divisible by groups");
            std::size_t c = stem_channels;
            for (const auto& st : stages) {
                if (st.channels % groups != 0)
                    throw ConfigError("shuffle: stage channels " + std::to_string(st.channels) +
                                      " not divisible by groups " + std::to_string(groups));
                if (st.channels != 2 * c)
                    throw ConfigError("shuffle: stage channels " + std::to_string(st.channels) +
                                      " must double the incoming " + std::to_string(c) +
                                      " (stride-2 concat shortcut)");
                c = st.channels;
            }
        }
        if (kind == BackboneKind::inception) {
            std::size_t in_c = stem_channels;
            for (const auto& st : stages) {
                if (st.channels < 2)
                    throw ConfigError("inception: stage channels must be >= 2");
                const std::size_t r3 = std::max<std::size_t>(st.channels / 4, 1);
                const std::size_t r5 = std::max<std::size_t>(st.channels / 8, 1);
                if (r3 >= in_c || r5 >= in_c)
                    throw ConfigError("inception: reduction width must stay below the incoming " +
                                      std::to_string(in_c) + " channels");
                in_c = st.channels;
            }
        }
    }
};

// Named parameter tensors in creation order. Creation order doubles as the
// initialization order, so one seed fixes every weight.
template <typename T>
class ParamStore {
  public:
    // Uniform in +-gain/sqrt(fan_in). The default gain 1 keeps initial
    // activations order-1 through a single linear layer; relu conv stacks
    // pass sqrt(6) (Kaiming uniform) so the signal survives depth.
    Tensor<T>& add_uniform(const std::string& key, Shape shape, std::size_t fan_in, Rng& rng,
                           double gain = 1.0) {
        const double bound = gain / std::sqrt(double(fan_in));
        std::vector<T> vals(numel(shape));
        for (auto& v : vals) v = T(rng.uniform(-bound, bound));
        return insert(key, Tensor<T>(std::move(shape), std::move(vals), true));
    }
    Tensor<T>& add_zeros(const std::string& key, Shape shape) {
        return insert(key, Tensor<T>(std::move(shape), std::vector<T>(numel(shape), T(0)), true));
    }
    Tensor<T>& insert(const std::string& key, Tensor<T> t) {
        if (index_.count(key)) throw ConfigError("parameter \"" + key + "\" already exists");
        keys_.push_back(key);
        index_.emplace(key, items_.size());
        items_.push_back(std::move(t));
        return items_.back();
    }
    bool contains(const std::string& key) const { return index_.count(key) != 0; }
    Tensor<T>& at(const std::string& key) {
        auto it = index_.find(key);
        if (it == index_.end()) throw ConfigError("unknown parameter \"" + key + "\"");
        return items_[it->second];
    }
    const Tensor<T>& at(const std::string& key) const {
        auto it = index_.find(key);
        if (it == index_.end()) throw ConfigError("unknown parameter \"" + key + "\"");
        return items_[it->second];
    }
    const std::vector<std::string>& keys() const { return keys_; }
    std::size_t size() const { return items_.size(); }

    std::size_t param_count(const std::string& prefix = "") const {
        std::size_t n = 0;
        for (std::size_t i = 0; i < keys_.size(); ++i)
            if (keys_[i].rfind(prefix, 0) == 0) n += items_[i].size();
        return n;
    }
    void zero_grad_all() {
        for (auto& t : items_) t.zero_grad();
    }

  private:
    std::vector<std::string> keys_;
    std::vector<Tensor<T>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

template <typename T>
void add_conv(ParamStore<T>& ps, const std::string& name, std::size_t cout, std::size_t cin,
              std::size_t k, std::size_t groups, Rng& rng) {
    if (cin % groups != 0 || cout % groups != 0)
        throw ConfigError(name + ": channels not divisible by groups");
    const std::size_t cin_g = cin / groups;
    ps.add_uniform(name + ".weight", {cout, cin_g, k, k}, cin_g * k * k, rng, std::sqrt(6.0));
    ps.add_zeros(name + ".bias", {cout});
}

template <typename T>
Tensor<T> conv_layer(const ParamStore<T>& ps, const std::string& name, const Tensor<T>& x,
                     std::size_t stride, std::size_t padding, std::size_t groups = 1) {
    return conv2d(x, ps.at(name + ".weight"), ps.at(name + ".bias"), stride, padding, groups);
}

} // namespace detail

// ---- residual blocks ------------------------------------------------------

template <typename T>
void build_residual_block(ParamStore<T>& ps, const std::string& prefix, std::size_t in_c,
                          std::size_t out_c, std::size_t stride, Rng& rng) {
    detail::add_conv(ps, prefix + ".conv1", out_c, in_c, 3, 1, rng);
    detail::add_conv(ps, prefix + ".conv2", out_c, out_c, 3, 1, rng);
    if (in_c != out_c || stride != 1) detail::add_conv(ps, prefix + ".proj", out_c, in_c, 1, 1, rng);
}

// y = relu(conv3x3(relu(conv3x3(x))) + shortcut(x)); the shortcut is the
// identity unless shape changes, then a strided 1x1 projection.
template <typename T>
Tensor<T> residual_block_forward(const ParamStore<T>& ps, const std::string& prefix,
                                 const Tensor<T>& x, std::size_t stride) {
    auto h = relu(detail::conv_layer(ps, prefix + ".conv1", x, stride, 1));
    h = detail::conv_layer(ps, prefix + ".conv2", h, 1, 1);
    Tensor<T> shortcut = x;
    if (ps.contains(prefix + ".proj.weight"))
        shortcut = detail::conv_layer(ps, prefix + ".proj", x, stride, 0);
    if (h.shape() != shortcut.shape())
        throw ConfigError(prefix + ": branch " + shape_str(h.shape()) + " vs shortcut " +
                          shape_str(shortcut.shape()));
    return relu(add(h, shortcut));
}

// ---- inception modules ----------------------------------------------------

// Branch widths: (a) 1x1 conv -> w1; (b) 1x1 reduce r3 -> 3x3 -> w3;
// (c) 1x1 reduce r5 -> two stacked 3x3 -> w5 (5x5-equivalent receptive
// field); (d) 3x3 max pool -> 1x1 -> wp. A zero width drops that branch.
struct InceptionWidths {
    std::size_t w1 = 0;
    std::size_t r3 = 0, w3 = 0;
    std::size_t r5 = 0, w5 = 0;
    std::size_t wp = 0;

    std::size_t out_channels() const { return w1 + w3 + w5 + wp; }

    static InceptionWidths derive(std::size_t out_c) {
        InceptionWidths w;
        w.w1 = out_c / 4;
        w.w3 = out_c / 2;
        w.w5 = out_c / 8;
        w.wp = out_c - w.w1 - w.w3 - w.w5;
        w.r3 = std::max<std::size_t>(out_c / 4, 1);
        w.r5 = std::max<std::size_t>(out_c / 8, 1);
        return w;
    }
    void validate(std::size_t in_c) const {
        if (out_channels() == 0) throw ConfigError("inception module: all branches empty");
        if ((w3 > 0 && (r3 == 0 || r3 >= in_c)) || (w5 > 0 && (r5 == 0 || r5 >= in_c)))
            throw ConfigError("inception module: reduction width must be positive and below " +
                              std::to_string(in_c) + " input channels");
    }
};

template <typename T>
void build_inception_module(ParamStore<T>& ps, const std::string& prefix, std::size_t in_c,
                            const InceptionWidths& w, Rng& rng) {
    w.validate(in_c);
    if (w.w1 > 0) detail::add_conv(ps, prefix + ".b1.conv", w.w1, in_c, 1, 1, rng);
    if (w.w3 > 0) {
        detail::add_conv(ps, prefix + ".b3.reduce", w.r3, in_c, 1, 1, rng);
        detail::add_conv(ps, prefix + ".b3.conv", w.w3, w.r3, 3, 1, rng);
    }
    if (w.w5 > 0) {
        detail::add_conv(ps, prefix + ".b5.reduce", w.r5, in_c, 1, 1, rng);
        detail::add_conv(ps, prefix + ".b5.conv1", w.w5, w.r5, 3, 1, rng);
        detail::add_conv(ps, prefix + ".b5.conv2", w.w5, w.w5, 3, 1, rng);
    }
    if (w.wp > 0) detail::add_conv(ps, prefix + ".pool.conv", w.wp, in_c, 1, 1, rng);
}

template <typename T>
Tensor<T> inception_module_forward(const ParamStore<T>& ps, const std::string& prefix,
                                   const Tensor<T>& x, const InceptionWidths& w) {
    std::vector<Tensor<T>> branches;
    if (w.w1 > 0) branches.push_back(relu(detail::conv_layer(ps, prefix + ".b1.conv", x, 1, 0)));
    if (w.w3 > 0) {
        auto b = relu(detail::conv_layer(ps, prefix + ".b3.reduce", x, 1, 0));
        branches.push_back(relu(detail::conv_layer(ps, prefix + ".b3.conv", b, 1, 1)));
    }
    if (w.w5 > 0) {
        auto b = relu(detail::conv_layer(ps, prefix + ".b5.reduce", x, 1, 0));
        b = relu(detail::conv_layer(ps, prefix + ".b5.conv1", b, 1, 1));
        branches.push_back(relu(detail::conv_layer(ps, prefix + ".b5.conv2", b, 1, 1)));
    }
    if (w.wp > 0) {
        auto b = pool2d(x, PoolKind::max, 3, 1, 1);
        branches.push_back(relu(detail::conv_layer(ps, prefix + ".pool.conv", b, 1, 0)));
    }
    if (branches.size() == 1) return branches.front();
    return concat<T>(std::span<const Tensor<T>>(branches.data(), branches.size()), 1);
}

// ---- shuffle units --------------------------------------------------------

inline std::size_t shuffle_mid_channels(std::size_t out_c, std::size_t g) {
    std::size_t mid = std::max<std::size_t>(out_c / 4, g);
    if (mid % g != 0) mid += g - mid % g;
    return mid;
}

template <typename T>
void build_shuffle_unit(ParamStore<T>& ps, const std::string& prefix, std::size_t in_c,
                        std::size_t out_c, std::size_t stride, std::size_t g, Rng& rng) {
    if (stride == 1 && in_c != out_c)
        throw ConfigError(prefix + ": stride-1 unit needs matching channels for the residual add");
    if (stride == 2 && out_c != 2 * in_c)
        throw ConfigError(prefix + ": stride-2 unit concatenates the shortcut, so out == 2*in");
    const std::size_t branch_out = stride == 1 ? out_c : in_c;
    const std::size_t mid = shuffle_mid_channels(out_c, g);
    detail::add_conv(ps, prefix + ".gconv1", mid, in_c, 1, g, rng);
    detail::add_conv(ps, prefix + ".dwconv", mid, mid, 3, mid, rng);
    detail::add_conv(ps, prefix + ".gconv2", branch_out, mid, 1, g, rng);
}

// 1x1 grouped conv -> channel shuffle -> 3x3 depthwise -> 1x1 grouped conv;
// stride 1 adds the input back, stride 2 concatenates a 3x3 avg-pool
// shortcut (doubling the channels while halving the spatial size).
template <typename T>
Tensor<T> shuffle_unit_forward(const ParamStore<T>& ps, const std::string& prefix,
                               const Tensor<T>& x, std::size_t stride, std::size_t g) {
    auto b = relu(detail::conv_layer(ps, prefix + ".gconv1", x, 1, 0, g));
    b = channel_shuffle(b, g);
    const std::size_t mid = b.dim(1);
    b = detail::conv_layer(ps, prefix + ".dwconv", b, stride, 1, mid);
    b = detail::conv_layer(ps, prefix + ".gconv2", b, 1, 0, g);
    if (stride == 1) return relu(add(x, b));
    auto shortcut = pool2d(x, PoolKind::avg, 3, 2, 1);
    return relu(concat<T>({shortcut, b}, 1));
}

// ---- whole backbone -------------------------------------------------------

template <typename T>
void build_backbone(ParamStore<T>& ps, const BackboneSpec& spec, const std::string& prefix,
                    Rng& rng) {
    spec.validate();
    detail::add_conv(ps, prefix + "stem", spec.stem_channels, 1, 3, 1, rng);
    std::size_t in_c = spec.stem_channels;
    for (std::size_t s = 0; s < spec.stages.size(); ++s) {
        const auto& st = spec.stages[s];
        const std::string stage = prefix + "stage" + std::to_string(s + 1);
        for (std::size_t b = 0; b < st.blocks; ++b) {
            const bool first = b == 0;
            switch (spec.kind) {
                case BackboneKind::residual:
                    build_residual_block(ps, stage + ".block" + std::to_string(b), in_c,
                                         st.channels, first ? 2 : 1, rng);
                    break;
                case BackboneKind::inception:
                    build_inception_module(ps, stage + ".module" + std::to_string(b), in_c,
                                           InceptionWidths::derive(st.channels), rng);
                    break;
                case BackboneKind::shuffle:
                    build_shuffle_unit(ps, stage + ".unit" + std::to_string(b), in_c, st.channels,
                                       first ? 2 : 1, spec.groups, rng);
                    break;
            }
            in_c = st.channels;
        }
    }
    ps.add_uniform(prefix + "fc.weight", {spec.feature_dim, in_c}, in_c, rng, std::sqrt(3.0));
    ps.add_zeros(prefix + "fc.bias", {spec.feature_dim});
}

// stem conv -> stages -> global average pool -> fully connected feature
// vector of spec.feature_dim per image.
template <typename T>
Tensor<T> backbone_forward(const ParamStore<T>& ps, const BackboneSpec& spec,
                           const std::string& prefix, const Tensor<T>& images) {
    if (images.rank() != 4 || images.dim(1) != 1)
        throw ShapeError("backbone: expected B x 1 x H x W input, got " +
                         shape_str(images.shape()));
    if (images.dim(2) != spec.input_h || images.dim(3) != spec.input_w)
        throw ShapeError("backbone: expected " + std::to_string(spec.input_h) + "x" +
                         std::to_string(spec.input_w) + " input, got " +
                         std::to_string(images.dim(2)) + "x" + std::to_string(images.dim(3)));
    auto h = relu(detail::conv_layer(ps, prefix + "stem", images, 1, 1));
    for (std::size_t s = 0; s < spec.stages.size(); ++s) {
        const auto& st = spec.stages[s];
        const std::string stage = prefix + "stage" + std::to_string(s + 1);
        if (spec.kind == BackboneKind::inception) h = pool2d(h, PoolKind::max, 2, 2, 0);
        for (std::size_t b = 0; b < st.blocks; ++b) {
            const bool first = b == 0;
            switch (spec.kind) {
                case BackboneKind::residual:
                    h = residual_block_forward(ps, stage + ".block" + std::to_string(b), h,
                                               first ? 2 : 1);
                    break;
                case BackboneKind::inception:
                    h = inception_module_forward(ps, stage + ".module" + std::to_string(b), h,
                                                 InceptionWidths::derive(st.channels));
                    break;
                case BackboneKind::shuffle:
                    h = shuffle_unit_forward(ps, stage + ".unit" + std::to_string(b), h,
                                             first ? 2 : 1, spec.groups);
                    break;
            }
        }
    }
    h = pool2d(h, PoolKind::global_avg);
    h = reshape(h, {h.dim(0), h.dim(1)});
    return linear(h, ps.at(prefix + "fc.weight"), ps.at(prefix + "fc.bias"));
}

} // namespace fusenet
