// Command-line driver for the cross-modal robustness lab.
//
// Subcommands mirror the experiment stages: gen-data, pretrain-mt, train-tr,
// attack, finetune-fn, baseline-advspeech-fn, sweep-kl, analyze.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cmrt/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"cross-modal robustness transfer lab"};
    app.require_subcommand(1);

    std::string config_path, seed_arg, out_arg;
    app.add_option("--config", config_path, "experiment config (JSON)");
    app.add_option("--seed", seed_arg, "override config seed");
    app.add_option("--out", out_arg, "override output directory");

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
    auto* mt = app.add_subcommand("pretrain-mt", "pretrain the text-to-text path");
    auto* tr = app.add_subcommand("train-tr", "train with the combined objective");
    std::string mode_arg = "full";
    tr->add_option("--mode", mode_arg,
                   "loss variant: full | mixup-only | waco-only | st-only")
        ->check(CLI::IsMember({"full", "mixup-only", "waco-only", "st-only"}));
    auto* atk = app.add_subcommand("attack", "run the inflection attack");
    std::string split_arg = "test", victim_arg = "base";
    bool train_speech = false;
    atk->add_option("--split", split_arg, "corpus split to attack")
        ->check(CLI::IsMember({"train", "dev", "test"}));
    atk->add_option("--victim", victim_arg, "victim checkpoint tag");
    atk->add_flag("--with-train-speech", train_speech,
                  "also synthesize adversarial speech for the train split");
    auto* fn = app.add_subcommand("finetune-fn",
                                  "text-only adversarial fine-tune");
    double fn_lambda = -1.0;
    fn->add_option("--lambda-kl", fn_lambda,
                   "override the consistency weight for this run");
    auto* advsp = app.add_subcommand(
        "baseline-advspeech-fn", "fine-tune directly on adversarial speech");
    auto* sweep = app.add_subcommand("sweep-kl",
                                     "fine-tune across consistency weights");
    std::vector<double> lambdas = {1.0, 2.0, 5.0, 8.0, 10.0};
    sweep->add_option("--lambdas", lambdas, "consistency weights to sweep");
    auto* ana = app.add_subcommand("analyze", "emit the metrics report");

    CLI11_PARSE(app, argc, argv);

    try {
        cmrt::ExperimentConfig cfg;
        if (!config_path.empty()) cfg = cmrt::load_config(config_path);
        cmrt::apply_overrides(cfg, seed_arg, out_arg);

        if (gen->parsed()) {
            cmrt::stage_gen_data(cfg);
        } else if (mt->parsed()) {
            cmrt::stage_pretrain_mt(cfg);
        } else if (tr->parsed()) {
            cmrt::TrainMode mode = cmrt::TrainMode::Full;
            if (mode_arg == "mixup-only") mode = cmrt::TrainMode::MixupOnly;
            else if (mode_arg == "waco-only") mode = cmrt::TrainMode::WacoOnly;
            else if (mode_arg == "st-only") mode = cmrt::TrainMode::StOnly;
            cmrt::stage_train_tr(cfg, mode);
        } else if (atk->parsed()) {
            cmrt::stage_attack(cfg, split_arg, victim_arg, train_speech);
        } else if (fn->parsed()) {
            double lam = fn_lambda >= 0 ? fn_lambda : cfg.fn_lambda_kl;
            cmrt::stage_finetune_fn(cfg, lam, "fn");
        } else if (advsp->parsed()) {
            cmrt::stage_baseline_advspeech_fn(cfg);
        } else if (sweep->parsed()) {
            cmrt::stage_sweep_kl(cfg, lambdas);
        } else if (ana->parsed()) {
            cmrt::stage_analyze(cfg);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
