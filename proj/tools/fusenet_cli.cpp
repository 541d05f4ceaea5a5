// fusenet command line: split / train / eval / report / gradcheck.
#include <CLI11.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "fusenet/cli.hpp"

namespace {

// Shared flags; presence decides whether a flag overrides the config file.
struct Flags {
    std::string config;
    std::string manifest;
    std::string split;
    std::string checkpoint;
    std::string out;
    std::uint64_t seed = 0;
    std::size_t epochs = 0;
    std::size_t batch_size = 0;
    std::size_t n_val = 0;
    std::size_t n_test = 0;
    std::size_t classes = 0;
    std::size_t feature_dim = 0;
    double lr = 0.0;
    double dropout = 0.0;
    bool stratify = false;
    bool standardize = false;
    std::vector<std::string> backbones;

    CLI::Option* o_config = nullptr;
    CLI::Option* o_manifest = nullptr;
    CLI::Option* o_split = nullptr;
    CLI::Option* o_checkpoint = nullptr;
    CLI::Option* o_out = nullptr;
    CLI::Option* o_seed = nullptr;
    CLI::Option* o_epochs = nullptr;
    CLI::Option* o_batch_size = nullptr;
    CLI::Option* o_n_val = nullptr;
    CLI::Option* o_n_test = nullptr;
    CLI::Option* o_classes = nullptr;
    CLI::Option* o_feature_dim = nullptr;
    CLI::Option* o_lr = nullptr;
    CLI::Option* o_dropout = nullptr;
    CLI::Option* o_stratify = nullptr;
    CLI::Option* o_standardize = nullptr;
    CLI::Option* o_backbones = nullptr;

    void attach(CLI::App* cmd) {
        o_config = cmd->add_option("--config", config, "JSON config file");
        o_manifest = cmd->add_option("--manifest", manifest, "dataset manifest CSV");
        o_split = cmd->add_option("--split", split, "split plan JSON");
        o_checkpoint = cmd->add_option("--checkpoint", checkpoint, "model checkpoint");
        o_out = cmd->add_option("--out", out, "output directory");
        o_seed = cmd->add_option("--seed", seed, "master seed");
        o_epochs = cmd->add_option("--epochs", epochs, "training epochs");
        o_batch_size = cmd->add_option("--batch-size", batch_size, "minibatch size");
        o_n_val = cmd->add_option("--n-val", n_val, "validation sample count");
        o_n_test = cmd->add_option("--n-test", n_test, "test sample count");
        o_classes = cmd->add_option("--classes", classes, "output class count");
        o_feature_dim = cmd->add_option("--feature-dim", feature_dim, "per-backbone feature width");
        o_lr = cmd->add_option("--lr", lr, "learning rate");
        o_dropout = cmd->add_option("--dropout", dropout, "head dropout probability");
        o_stratify = cmd->add_flag("--stratify", stratify, "per-class proportional split");
        o_standardize = cmd->add_flag("--standardize", standardize, "per-image mean/sd normalization");
        o_backbones = cmd->add_option("--backbones", backbones, "backbone kinds to fuse");
    }

    fusenet::RunConfig resolve() const {
        fusenet::RunConfig cfg;
        if (o_config->count()) cfg = fusenet::RunConfig::load(config);
        if (o_manifest->count()) cfg.manifest = manifest;
        if (o_split->count()) cfg.split = split;
        if (o_checkpoint->count()) cfg.checkpoint = checkpoint;
        if (o_out->count()) cfg.out = out;
        if (o_seed->count()) cfg.seed = seed;
        if (o_epochs->count()) cfg.epochs = epochs;
        if (o_batch_size->count()) cfg.batch_size = batch_size;
        if (o_n_val->count()) cfg.n_val = n_val;
        if (o_n_test->count()) cfg.n_test = n_test;
        if (o_classes->count()) cfg.classes = classes;
        if (o_feature_dim->count()) cfg.feature_dim = feature_dim;
        if (o_lr->count()) cfg.learning_rate = lr;
        if (o_dropout->count()) cfg.dropout = dropout;
        if (o_stratify->count()) cfg.stratify = true;
        if (o_standardize->count()) cfg.standardize = true;
        if (o_backbones->count()) cfg.backbones = backbones;
        return cfg;
    }
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"three-backbone fusion classifier"};
    app.require_subcommand(1);

    Flags split_flags, train_flags, eval_flags;
    std::string section = "test";
    std::vector<std::string> report_inputs;
    std::string report_out = "out";

    auto* sp_split = app.add_subcommand("split", "partition a manifest into train/val/test");
    split_flags.attach(sp_split);

    auto* sp_train = app.add_subcommand("train", "train a fusion model");
    train_flags.attach(sp_train);

    auto* sp_eval = app.add_subcommand("eval", "evaluate a checkpoint on a split section");
    eval_flags.attach(sp_eval);
    sp_eval->add_option("--section", section, "split section: train, val or test");

    auto* sp_report = app.add_subcommand("report", "merge metrics CSVs into comparison tables");
    sp_report->add_option("inputs", report_inputs, "metrics CSV files")->required();
    sp_report->add_option("--out", report_out, "output directory");

    auto* sp_gradcheck = app.add_subcommand("gradcheck", "run double-precision gradient checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    return fusenet::run_command([&]() -> int {
        if (sp_split->parsed()) return fusenet::cmd_split(split_flags.resolve());
        if (sp_train->parsed()) return fusenet::cmd_train(train_flags.resolve());
        if (sp_eval->parsed()) return fusenet::cmd_eval(eval_flags.resolve(), section);
        if (sp_report->parsed()) return fusenet::cmd_report(report_inputs, report_out);
        if (sp_gradcheck->parsed()) return fusenet::cmd_gradcheck();
        throw fusenet::UsageError("no subcommand given");
    });
}
