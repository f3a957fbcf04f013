#pragma once

// Experiment pipeline: stage entry points behind the CLI subcommands.
// Stages compose only through files under the output directory; every stage
// writes a manifest of the inputs it consumed.

#include <string>
#include <vector>

#include "cmrt/analysis.hpp"
#include "cmrt/corpus.hpp"
#include "cmrt/model.hpp"
#include "cmrt/objectives.hpp"

namespace cmrt {

struct ExperimentConfig {
    uint64_t seed = 1;
    std::string out_dir = "out";

    int64_t corpus_n = 2000;
    SynthSpec synth;
    ModelDims dims;  // vocab is derived from the lexicon at load time

    int mt_epochs = 20;
    int mt_patience = 3;
    double mt_lr = 1e-3;
    int mt_batch = 16;

    // tau, p_star, lambda_ctr, lambda_kl, lr, batch_size; the contrastive
    // weight is raised above the objectives-level default so the alignment
    // term converges within the short desk-scale epoch budget
    TrainConfig tr = default_tr();
    int tr_epochs = 6;
    int avg_last = 10;

    double fn_lambda_kl = 5.0;
    double fn_lr = 1e-4;  // gentler than training, protects clean accuracy
    int fn_budget_divisor = 8;  // FN step budget = TR steps / divisor

    static TrainConfig default_tr() {
        TrainConfig t;
        t.lambda_ctr = 4.0;
        return t;
    }

    int attack_beam = 1;
    int eval_beam = 5;
    int max_decode_len = 30;
};

ExperimentConfig load_config(const std::string& path);  // unknown keys rejected
void apply_overrides(ExperimentConfig& cfg, const std::string& seed_arg,
                     const std::string& out_arg);

enum class TrainMode { Full, MixupOnly, WacoOnly, StOnly };
std::string mode_tag(TrainMode mode);

void stage_gen_data(const ExperimentConfig& cfg);
void stage_pretrain_mt(const ExperimentConfig& cfg);
void stage_train_tr(const ExperimentConfig& cfg, TrainMode mode);
// victim_tag names a checkpoint under <out>/ckpt (e.g. "base"); speech
// output is always produced for dev/test, for train only when requested
void stage_attack(const ExperimentConfig& cfg, const std::string& split,
                  const std::string& victim_tag, bool train_speech);
void stage_finetune_fn(const ExperimentConfig& cfg, double lambda_kl,
                       const std::string& tag);
void stage_baseline_advspeech_fn(const ExperimentConfig& cfg);
void stage_sweep_kl(const ExperimentConfig& cfg, const std::vector<double>& lambdas);
void stage_analyze(const ExperimentConfig& cfg);

// helpers shared by stages, the CLI, and the acceptance suite
std::string ckpt_path(const ExperimentConfig& cfg, const std::string& tag);
Model load_model(const ExperimentConfig& cfg, const Vocab& vocab,
                 const std::string& tag);
double evaluate_st_bleu(const Model& model, const Vocab& vocab,
                        const std::vector<AlignedUtterance>& utts, int beam,
                        int max_len, int max_piece_len);

struct SeedResults {
    double base_clean = 0, base_adv = 0;
    double tr_clean = 0, tr_adv = 0;
    double fn_clean = 0, fn_adv = 0;
    double advsp_clean = 0, advsp_adv = 0;
    double cos_full = 0, cos_mixup_only = 0;
    double cka_fn = 0, cka_tr = 0;
    bool fn_consumed_adv_speech = true;  // must come out false
};

// gen-data, pretrain, base + TR + mixup-only training, attacks, FN,
// adversarial-speech baseline, analysis; returns the metrics the
// acceptance criteria compare
SeedResults run_full_experiment(const ExperimentConfig& cfg);

}  // namespace cmrt
