// trainer.hpp -- the training loop (shuffle, batch, Adam, per-epoch
// validation, best-epoch retention) and dataset evaluation.
#pragma once

#include <cmath>
#include <cstdint>
#include <ctime>
#include <functional>
#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "fusenet/data.hpp"
#include "fusenet/errors.hpp"
#include "fusenet/metrics.hpp"
#include "fusenet/model.hpp"
#include "fusenet/optim.hpp"
#include "fusenet/rng.hpp"
#include "fusenet/tensor.hpp"

namespace fusenet {

struct EpochStats {
    std::size_t epoch = 0; // 1-based
    double train_loss = 0.0;
    double val_accuracy = 0.0;
    std::string timestamp; // wall-clock, kept out of serialized records
};

struct TrainRecord {
    std::vector<EpochStats> epochs;
    std::size_t best_epoch = 0; // 1-based
    double best_val_accuracy = 0.0;

    // One JSON object per epoch. Timestamps are deliberately omitted so two
    // runs with the same seed produce identical bytes.
    std::string jsonl() const {
        std::string out;
        for (const auto& e : epochs) {
            nlohmann::ordered_json j;
            j["epoch"] = e.epoch;
            j["train_loss"] = e.train_loss;
            j["val_accuracy"] = e.val_accuracy;
            out += j.dump();
            out += "\n";
        }
        return out;
    }
};

struct TrainHooks {
    // (epoch, batch index within epoch, samples in batch, batch mean loss)
    std::function<void(std::size_t, std::size_t, std::size_t, double)> on_batch;
    std::function<void(const EpochStats&)> on_epoch;
};

// Parameter values frozen at one point in time, in store key order.
template <typename T>
struct ParamSnapshot {
    std::vector<std::vector<T>> values;

    static ParamSnapshot take(const ParamStore<T>& params) {
        ParamSnapshot s;
        s.values.reserve(params.keys().size());
        for (const auto& key : params.keys()) {
            const auto v = params.at(key).values();
            s.values.emplace_back(v.begin(), v.end());
        }
        return s;
    }
    void restore(ParamStore<T>& params) const {
        const auto& keys = params.keys();
        if (values.size() != keys.size())
            throw CheckpointError("snapshot: parameter count mismatch");
        for (std::size_t k = 0; k < keys.size(); ++k) {
            auto dst = params.at(keys[k]).values_mut();
            if (values[k].size() != dst.size())
                throw CheckpointError("snapshot: size mismatch for \"" + keys[k] + "\"");
            std::copy(values[k].begin(), values[k].end(), dst.begin());
        }
    }
};

template <typename T>
struct TrainResult {
    ParamSnapshot<T> best_params;
    TrainRecord record;
};

template <typename T>
struct EvalResult {
    ConfusionMatrix cm;
    MetricsReport metrics;
    std::vector<double> scores; // per-sample positive-class probability
    std::vector<int> labels;
    std::vector<int> preds;
};

namespace detail {

template <typename T>
std::pair<Tensor<T>, std::vector<int>> make_batch(const Dataset& ds,
                                                  const std::vector<std::size_t>& order,
                                                  std::size_t begin, std::size_t end) {
    const std::size_t b = end - begin;
    const std::size_t plane = ds.image_h * ds.image_w;
    std::vector<T> vals(b * plane);
    std::vector<int> labels(b);
    for (std::size_t i = 0; i < b; ++i) {
        const Sample& s = ds.samples[order[begin + i]];
        for (std::size_t j = 0; j < plane; ++j) vals[i * plane + j] = T(s.values[j]);
        labels[i] = s.label;
    }
    return {Tensor<T>({b, 1, ds.image_h, ds.image_w}, std::move(vals), false),
            std::move(labels)};
}

inline std::string utc_now() {
    std::time_t t = std::time(nullptr);
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Class-1-vs-class-0 readout: works for the default two-way head and for the
// ten-way head variant, whose labels still live on indices 0 and 1.
template <typename T>
int binary_readout(const Prediction<T>& pred, std::size_t row) {
    const auto lp = pred.log_probs.values();
    const std::size_t c = pred.log_probs.dim(1);
    return lp[row * c + 1] > lp[row * c + 0] ? 1 : 0;
}

} // namespace detail

// Validation-style accuracy: fraction of samples whose binary readout
// matches the label, computed with dropout disabled.
template <typename T>
double dataset_accuracy(const FusionModel<T>& model, const Dataset& ds,
                        std::size_t eval_batch = 32) {
    if (ds.size() == 0) throw DataError("accuracy: empty dataset");
    NoGradGuard guard;
    Rng unused(0);
    const auto order = iota_indices(ds.size());
    std::size_t correct = 0;
    for (std::size_t at = 0; at < ds.size(); at += eval_batch) {
        const std::size_t end = std::min(at + eval_batch, ds.size());
        auto [images, labels] = detail::make_batch<T>(ds, order, at, end);
        const auto pred = model.forward(images, false, unused);
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (detail::binary_readout(pred, i) == labels[i]) ++correct;
    }
    return double(correct) / double(ds.size());
}

// Full evaluation: confusion matrix, the eight metrics (AUC from the
// collected positive-class scores), and the per-sample scores themselves.
template <typename T>
EvalResult<T> evaluate(const FusionModel<T>& model, const Dataset& ds,
                       std::size_t eval_batch = 32) {
    if (ds.size() == 0) throw DataError("evaluate: empty dataset");
    NoGradGuard guard;
    Rng unused(0);
    EvalResult<T> result;
    const auto order = iota_indices(ds.size());
    for (std::size_t at = 0; at < ds.size(); at += eval_batch) {
        const std::size_t end = std::min(at + eval_batch, ds.size());
        auto [images, labels] = detail::make_batch<T>(ds, order, at, end);
        const auto pred = model.forward(images, false, unused);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] != 0 && labels[i] != 1)
                throw DataError("evaluate: label " + std::to_string(labels[i]) +
                                " at sample " + std::to_string(at + i) + " is not binary");
            result.labels.push_back(labels[i]);
            result.preds.push_back(detail::binary_readout(pred, i));
            result.scores.push_back(pred.positive_prob[i]);
        }
    }
    result.cm = confusion(result.labels, result.preds);
    result.metrics = compute_metrics(result.cm);
    result.metrics.auc = auc(roc_curve(result.scores, result.labels));
    return result;
}

// Per epoch: reshuffle the training set with an epoch-derived seed, sweep
// batches of cfg.batch_size (the final partial batch included), run
// forward / loss / backward / adam_step, then score the validation split
// with dropout off. The epoch with the highest validation accuracy is
// retained (ties to the earliest). A non-finite loss aborts training.
template <typename T>
TrainResult<T> train(FusionModel<T>& model, const Dataset& train_set, const Dataset& val_set,
                     const TrainConfig& cfg, const TrainHooks& hooks = {}) {
    cfg.validate();
    if (train_set.size() == 0) throw DataError("train: empty training split");
    if (cfg.select_best && val_set.size() == 0)
        throw DataError("train: empty validation split with best-epoch selection enabled");

    auto state = AdamState<T>::init(model.params());
    Rng dropout_rng(derive_seed(cfg.seed, 0));
    TrainResult<T> result;
    result.record.best_epoch = 0;
    result.record.best_val_accuracy = -1.0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto order = iota_indices(train_set.size());
        Rng shuffle_rng(derive_seed(cfg.seed, epoch));
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t at = 0; at < order.size(); at += cfg.batch_size, ++batch_index) {
            const std::size_t end = std::min(at + cfg.batch_size, order.size());
            auto [images, labels] = detail::make_batch<T>(train_set, order, at, end);
            const auto pred = model.forward(images, true, dropout_rng);
            auto loss = nll_loss(pred.log_probs, labels);
            const double loss_value = double(loss.item());
            if (!std::isfinite(loss_value))
                throw TrainError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(batch_index));
            model.params().zero_grad_all();
            loss.backward();
            adam_step(model.params(), state, cfg);
            loss_sum += loss_value * double(end - at);
            if (hooks.on_batch) hooks.on_batch(epoch, batch_index, end - at, loss_value);
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_sum / double(train_set.size());
        stats.val_accuracy = val_set.size() > 0 ? dataset_accuracy(model, val_set) : 0.0;
        stats.timestamp = detail::utc_now();
        result.record.epochs.push_back(stats);
        if (hooks.on_epoch) hooks.on_epoch(stats);

        const bool better = cfg.select_best
                                ? stats.val_accuracy > result.record.best_val_accuracy
                                : epoch == cfg.epochs;
        if (better) {
            result.record.best_epoch = epoch;
            result.record.best_val_accuracy = stats.val_accuracy;
            result.best_params = ParamSnapshot<T>::take(model.params());
        }
    }
    return result;
}

} // namespace fusenet
