// cli.hpp -- run configuration and the command implementations behind the
// split / train / eval / report / gradcheck subcommands.
#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <set>
#include <string>
#include <vector>

#include "fusenet/checkpoint.hpp"
#include "fusenet/data.hpp"
#include "fusenet/errors.hpp"
#include "fusenet/model.hpp"
#include "fusenet/report.hpp"
#include "fusenet/trainer.hpp"
#include "fusenet/verification.hpp"

namespace fusenet {

// Mirror of a JSON config file; every field optional there, flags win over
// file values. Unknown keys are rejected rather than ignored.
struct RunConfig {
    std::uint64_t seed = 0;
    std::size_t epochs = 50;
    std::size_t batch_size = 16;
    double learning_rate = 0.003;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double dropout = 0.2;
    std::size_t classes = 2;
    std::size_t feature_dim = 1000;
    bool select_best = true;
    std::vector<std::string> backbones{"residual", "inception", "shuffle"};

    std::string manifest;
    std::string split;
    std::string checkpoint;
    std::string out = "out";
    bool standardize = false;
    bool stratify = false;
    std::size_t n_val = 250;
    std::size_t n_test = 250;

    static RunConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw UsageError("config: cannot open " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw UsageError("config: " + path + ": " + e.what());
        }
        return from_json(j);
    }

    static RunConfig from_json(const nlohmann::json& j) {
        static const std::set<std::string> known{
            "seed",       "epochs",     "batch_size", "learning_rate", "beta1",
            "beta2",      "epsilon",    "dropout",    "classes",       "feature_dim",
            "select_best", "backbones", "manifest",   "split",         "checkpoint",
            "out",        "standardize", "stratify",  "n_val",         "n_test"};
        if (!j.is_object()) throw UsageError("config: top level must be a JSON object");
        for (const auto& item : j.items())
            if (!known.count(item.key()))
                throw ConfigError("config: unknown key \"" + item.key() + "\"");
        RunConfig c;
        try {
            auto get = [&j](const char* key, auto& slot) {
                if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
            };
            get("seed", c.seed);
            get("epochs", c.epochs);
            get("batch_size", c.batch_size);
            get("learning_rate", c.learning_rate);
            get("beta1", c.beta1);
            get("beta2", c.beta2);
            get("epsilon", c.epsilon);
            get("dropout", c.dropout);
            get("classes", c.classes);
            get("feature_dim", c.feature_dim);
            get("select_best", c.select_best);
            get("backbones", c.backbones);
            get("manifest", c.manifest);
            get("split", c.split);
            get("checkpoint", c.checkpoint);
            get("out", c.out);
            get("standardize", c.standardize);
            get("stratify", c.stratify);
            get("n_val", c.n_val);
            get("n_test", c.n_test);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
        return c;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["seed"] = seed;
        j["epochs"] = epochs;
        j["batch_size"] = batch_size;
        j["learning_rate"] = learning_rate;
        j["beta1"] = beta1;
        j["beta2"] = beta2;
        j["epsilon"] = epsilon;
        j["dropout"] = dropout;
        j["classes"] = classes;
        j["feature_dim"] = feature_dim;
        j["select_best"] = select_best;
        j["backbones"] = backbones;
        j["manifest"] = manifest;
        j["split"] = split;
        j["checkpoint"] = checkpoint;
        j["out"] = out;
        j["standardize"] = standardize;
        j["stratify"] = stratify;
        j["n_val"] = n_val;
        j["n_test"] = n_test;
        return j;
    }

    TrainConfig train_config() const {
        TrainConfig tc;
        tc.batch_size = batch_size;
        tc.learning_rate = learning_rate;
        tc.epochs = epochs;
        tc.beta1 = beta1;
        tc.beta2 = beta2;
        tc.epsilon = epsilon;
        tc.seed = seed;
        tc.dropout_p = dropout;
        tc.class_count = classes;
        tc.select_best = select_best;
        return tc;
    }

    std::vector<BackboneSpec> backbone_specs(std::size_t input_h, std::size_t input_w) const {
        if (backbones.empty()) throw ConfigError("config: backbones list is empty");
        std::vector<BackboneSpec> specs;
        for (const auto& name : backbones) {
            auto s = BackboneSpec::defaults(parse_kind(name), feature_dim);
            s.input_h = input_h;
            s.input_w = input_w;
            specs.push_back(s);
        }
        return specs;
    }

    std::string model_name() const {
        if (backbones.size() == 3) return "fusion";
        std::string name;
        for (const auto& b : backbones) name += (name.empty() ? "" : "+") + b;
        return name;
    }
};

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
}

inline std::string epoch_json_line(const EpochStats& e) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    j["val_accuracy"] = e.val_accuracy;
    return j.dump();
}

inline Dataset section_subset(const Dataset& ds, const SplitPlan& plan,
                              const std::string& section) {
    if (section == "train") return ds.subset(plan.train);
    if (section == "val") return ds.subset(plan.val);
    if (section == "test") return ds.subset(plan.test);
    throw UsageError("section must be train, val or test, got \"" + section + "\"");
}

inline std::string format_ratio(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace detail

inline int cmd_split(const RunConfig& cfg) {
    if (cfg.manifest.empty()) throw UsageError("split: --manifest is required");
    const Dataset ds = load_manifest(cfg.manifest, cfg.standardize);
    const SplitPlan plan = split_dataset(ds, cfg.n_val, cfg.n_test, cfg.seed, cfg.stratify);
    std::filesystem::create_directories(cfg.out);
    const auto path = std::filesystem::path(cfg.out) / "split.json";
    save_split(plan, path.string());
    std::cout << "split: " << plan.train.size() << " train / " << plan.val.size() << " val / "
              << plan.test.size() << " test -> " << path.string() << "\n";
    return 0;
}

inline int cmd_train(const RunConfig& cfg) {
    if (cfg.manifest.empty()) throw UsageError("train: --manifest is required");
    const Dataset ds = load_manifest(cfg.manifest, cfg.standardize);
    std::filesystem::create_directories(cfg.out);

    SplitPlan plan;
    if (!cfg.split.empty()) {
        plan = load_split(cfg.split);
        plan.validate(ds.size());
    } else {
        plan = split_dataset(ds, cfg.n_val, cfg.n_test, cfg.seed, cfg.stratify);
        save_split(plan, (std::filesystem::path(cfg.out) / "split.json").string());
    }
    const Dataset train_set = ds.subset(plan.train);
    const Dataset val_set = ds.subset(plan.val);

    detail::write_text(std::filesystem::path(cfg.out) / "config.json",
                       cfg.to_json().dump(2) + "\n");

    auto model = FusionModel<float>::make(cfg.backbone_specs(ds.image_h, ds.image_w),
                                          cfg.classes, cfg.dropout, cfg.seed);

    std::ofstream record_file(std::filesystem::path(cfg.out) / "train_record.jsonl",
                              std::ios::binary | std::ios::trunc);
    if (!record_file) throw DataError("train: cannot write train_record.jsonl");
    TrainHooks hooks;
    hooks.on_epoch = [&record_file](const EpochStats& e) {
        const std::string line = detail::epoch_json_line(e);
        std::cout << line << "\n" << std::flush;
        record_file << line << "\n" << std::flush;
    };

    auto result = train(model, train_set, val_set, cfg.train_config(), hooks);
    result.best_params.restore(model.params());
    CheckpointMeta meta;
    meta.epoch = result.record.best_epoch;
    meta.val_accuracy = result.record.best_val_accuracy;
    meta.seed = cfg.seed;
    const auto ckpt = std::filesystem::path(cfg.out) / "best.ckpt";
    save_checkpoint(model, meta, ckpt.string());
    std::cout << "best epoch " << meta.epoch << ", val_accuracy "
              << detail::format_ratio(meta.val_accuracy) << " -> " << ckpt.string() << "\n";
    return 0;
}

inline int cmd_eval(const RunConfig& cfg, const std::string& section) {
    if (section != "train" && section != "val" && section != "test")
        throw UsageError("section must be train, val or test, got \"" + section + "\"");
    if (cfg.checkpoint.empty()) throw UsageError("eval: --checkpoint is required");
    if (cfg.manifest.empty()) throw UsageError("eval: --manifest is required");
    if (cfg.split.empty()) throw UsageError("eval: --split is required");
    auto [model, meta] = load_checkpoint<float>(cfg.checkpoint);
    const Dataset ds = load_manifest(cfg.manifest, cfg.standardize);
    SplitPlan plan = load_split(cfg.split);
    plan.validate(ds.size());
    const Dataset part = detail::section_subset(ds, plan, section);

    const auto ev = evaluate(model, part);
    std::string name;
    for (const auto& s : model.specs()) name += (name.empty() ? "" : "+") + kind_name(s.kind);
    if (model.specs().size() == 3) name = "fusion";

    std::filesystem::create_directories(cfg.out);
    const std::string csv = MetricsReport::csv_header() + "\n" + ev.metrics.csv_row(name) + "\n";
    detail::write_text(std::filesystem::path(cfg.out) / "metrics.csv", csv);
    detail::write_text(std::filesystem::path(cfg.out) / "metrics.json",
                       ev.metrics.json(name) + "\n");

    const auto curve = roc_curve(ev.scores, ev.labels);
    std::string roc = "fp,tp,fpr,tpr\n";
    const auto fpr = curve.fpr(), tpr = curve.tpr();
    for (std::size_t i = 0; i < curve.fp.size(); ++i)
        roc += std::to_string(curve.fp[i]) + "," + std::to_string(curve.tp[i]) + "," +
               detail::format_ratio(fpr[i]) + "," + detail::format_ratio(tpr[i]) + "\n";
    detail::write_text(std::filesystem::path(cfg.out) / "roc.csv", roc);

    std::cout << csv;
    return 0;
}

inline int cmd_report(const std::vector<std::string>& csv_paths, const std::string& out_dir) {
    if (csv_paths.empty()) throw UsageError("report: at least one metrics CSV required");
    const auto rows = merge_metric_files(csv_paths);
    write_report_files(rows, out_dir);
    std::cout << "report: " << rows.size() << " rows -> " << out_dir << "\n";
    return 0;
}

inline int cmd_gradcheck() {
    const auto entries = run_gradcheck_suite();
    bool all_pass = true;
    for (const auto& e : entries) {
        all_pass = all_pass && e.pass();
        char line[128];
        std::snprintf(line, sizeof(line), "%-20s max_rel_error %.3e tolerance %.0e %s",
                      e.name.c_str(), e.error, e.tolerance, e.pass() ? "ok" : "FAIL");
        std::cout << line << (e.note.empty() ? "" : " (" + e.note + ")") << "\n";
    }
    if (!all_pass) throw TrainError("gradient checks failed");
    return 0;
}

// Exit-code policy: 1 for usage/configuration problems, 2 for data and
// persistence problems, 3 for numeric failures.
template <typename F>
int run_command(F&& body) {
    try {
        return body();
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const PrecisionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const TrainError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) { // data, format, shape, checkpoint, eval
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace fusenet
