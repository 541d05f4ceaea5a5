// metrics.hpp -- confusion matrix, the eight evaluation criteria, ROC/AUC.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "fusenet/errors.hpp"

namespace fusenet {

struct ConfusionMatrix {
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    std::int64_t fn = 0;
    std::int64_t tn = 0;

    std::int64_t total() const { return tp + fp + fn + tn; }
    std::int64_t positives() const { return tp + fn; }
    std::int64_t negatives() const { return tn + fp; }
};

inline ConfusionMatrix confusion(const std::vector<int>& labels, const std::vector<int>& preds) {
    if (labels.size() != preds.size())
        throw UsageError("confusion: got " + std::to_string(labels.size()) + " labels vs " +
                         std::to_string(preds.size()) + " predictions");
    if (labels.empty()) throw UsageError("confusion: empty input");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i], p = preds[i];
        if (y != 0 && y != 1)
            throw DataError("confusion: label " + std::to_string(y) + " at index " +
                            std::to_string(i) + " is not binary");
        if (p != 0 && p != 1)
            throw DataError("confusion: prediction " + std::to_string(p) + " at index " +
                            std::to_string(i) + " is not binary");
        if (p == 1)
            (y == 1 ? cm.tp : cm.fp) += 1;
        else
            (y == 1 ? cm.fn : cm.tn) += 1;
    }
    return cm;
}

// Fraction -> "NN.NNN" percent string, 3 decimals, rounding half away from zero.
inline std::string format_percent(double fraction) {
    const long long scaled = std::llround(fraction * 100.0 * 1000.0);
    const long long mag = scaled < 0 ? -scaled : scaled;
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%s%lld.%03lld", scaled < 0 ? "-" : "", mag / 1000,
                  mag % 1000);
    return buf;
}

// All values are fractions in [0,1]; the percent formatting above is applied
// only at serialization time. auc is absent until scores are available.
struct MetricsReport {
    double accuracy = 0.0;
    double balanced_accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double specificity = 0.0;
    double f_measure = 0.0;
    double g_mean = 0.0;
    std::optional<double> auc;

    static std::string csv_header() {
        return "model,accuracy,balanced_accuracy,precision,recall,specificity,"
               "f_measure,g_mean,auc";
    }
    std::string csv_row(const std::string& model) const {
        std::string row = model;
        for (double v : {accuracy, balanced_accuracy, precision, recall, specificity, f_measure,
                         g_mean})
            row += "," + format_percent(v);
        row += ",";
        if (auc) row += format_percent(*auc);
        return row;
    }
    std::string json(const std::string& model) const {
        std::string s = "{\"model\":\"" + model + "\"";
        auto field = [&s](const char* name, double v) {
            s += std::string(",\"") + name + "\":" + format_percent(v);
        };
        field("accuracy", accuracy);
        field("balanced_accuracy", balanced_accuracy);
        field("precision", precision);
        field("recall", recall);
        field("specificity", specificity);
        field("f_measure", f_measure);
        field("g_mean", g_mean);
        if (auc)
            field("auc", *auc);
        else
            s += ",\"auc\":null";
        s += "}";
        return s;
    }
};

// Accuracy, precision, recall, F-measure, specificity, balanced accuracy and
// G-mean from one confusion matrix. Zero-denominator policy: an undefined
// precision (no positive predictions) is 0 and drags F to 0; a test set
// missing one class entirely invalidates the evaluation protocol and raises.
inline MetricsReport compute_metrics(const ConfusionMatrix& cm) {
    if (cm.tp < 0 || cm.fp < 0 || cm.fn < 0 || cm.tn < 0)
        throw UsageError("compute_metrics: negative count");
    const std::int64_t pos = cm.positives();
    const std::int64_t neg = cm.negatives();
    if (pos == 0) throw EvalError("compute_metrics: no positive samples, recall undefined");
    if (neg == 0) throw EvalError("compute_metrics: no negative samples, specificity undefined");

    MetricsReport r;
    r.accuracy = double(cm.tp + cm.tn) / double(cm.total());
    r.precision = (cm.tp + cm.fp) == 0 ? 0.0 : double(cm.tp) / double(cm.tp + cm.fp);
    r.recall = double(cm.tp) / double(pos);
    r.specificity = double(cm.tn) / double(neg);
    r.balanced_accuracy = (r.recall + r.specificity) / 2.0;
    r.f_measure = (r.precision + r.recall) == 0.0
                      ? 0.0
                      : 2.0 * r.precision * r.recall / (r.precision + r.recall);
    r.g_mean = std::sqrt(r.recall * r.specificity);
    return r;
}

// ROC curve as cumulative integer counts. points[0] is always (fp=0, tp=0);
// one further point per distinct score value, swept in descending order, so
// tied scores move as a single block. The final point is (n_neg, n_pos).
struct RocCurve {
    std::vector<std::int64_t> fp;
    std::vector<std::int64_t> tp;
    std::int64_t n_pos = 0;
    std::int64_t n_neg = 0;

    std::vector<double> fpr() const {
        std::vector<double> x(fp.size());
        for (std::size_t i = 0; i < fp.size(); ++i) x[i] = double(fp[i]) / double(n_neg);
        return x;
    }
    std::vector<double> tpr() const {
        std::vector<double> y(tp.size());
        for (std::size_t i = 0; i < tp.size(); ++i) y[i] = double(tp[i]) / double(n_pos);
        return y;
    }
};

inline RocCurve roc_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw UsageError("roc_curve: got " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
    if (scores.empty()) throw UsageError("roc_curve: empty input");
    RocCurve c;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1)
            throw DataError("roc_curve: label " + std::to_string(labels[i]) + " at index " +
                            std::to_string(i) + " is not binary");
        (labels[i] == 1 ? c.n_pos : c.n_neg) += 1;
    }
    if (c.n_pos == 0 || c.n_neg == 0)
        throw EvalError("roc_curve: both classes required, AUC undefined on single-class labels");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&scores](std::size_t a, std::size_t b) {
        return scores[a] > scores[b];
    });

    c.fp.push_back(0);
    c.tp.push_back(0);
    std::int64_t fp_acc = 0, tp_acc = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double block = scores[order[i]];
        while (i < order.size() && scores[order[i]] == block) {
            (labels[order[i]] == 1 ? tp_acc : fp_acc) += 1;
            ++i;
        }
        c.fp.push_back(fp_acc);
        c.tp.push_back(tp_acc);
    }
    return c;
}

// Trapezoidal area under the ROC curve. Computed from the integer counts as
// S = sum over segments of dFP*(TP_i + TP_{i+1}), giving S / (2*N*P) with a
// single floating-point rounding; block-wise ties make this identical to the
// Mann-Whitney pair statistic with ties counted 1/2.
//
// A three-point curve (single effective threshold, i.e. hard predictions)
// reduces algebraically to (TPR + (1 - FPR))/2; that case is computed as
// (tp/P + tn/N)/2 so the result is bit-identical to balanced accuracy
// derived from the same counts.
inline double auc(const RocCurve& curve) {
    const std::size_t n = curve.fp.size();
    if (n < 2 || curve.tp.size() != n) throw UsageError("auc: malformed curve");
    if (curve.n_pos <= 0 || curve.n_neg <= 0) throw UsageError("auc: missing class counts");
    if (n == 3) {
        const double tpr1 = double(curve.tp[1]) / double(curve.n_pos);
        const double tnr1 = double(curve.n_neg - curve.fp[1]) / double(curve.n_neg);
        return (tpr1 + tnr1) / 2.0;
    }
    std::int64_t s = 0;
    for (std::size_t i = 0; i + 1 < n; ++i)
        s += (curve.fp[i + 1] - curve.fp[i]) * (curve.tp[i] + curve.tp[i + 1]);
    return double(s) / (2.0 * double(curve.n_pos) * double(curve.n_neg));
}

inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    return auc(roc_curve(scores, labels));
}

} // namespace fusenet
