#include "cmrt/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cmrt/morpheus.hpp"

namespace cmrt {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

void check_keys(const json& j, const std::string& scope,
                const std::vector<std::string>& allowed) {
    for (const auto& [key, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw Error("config: unknown key '" + scope + key + "'");
    }
}

template <typename T>
void read_key(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

std::string corpus_prefix(const ExperimentConfig& cfg, const std::string& split) {
    return cfg.out_dir + "/corpus/" + split;
}

std::string lexicon_path(const ExperimentConfig& cfg) {
    return cfg.out_dir + "/corpus/lexicon.tsv";
}

void write_manifest(const ExperimentConfig& cfg, const std::string& stage,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
    fs::create_directories(cfg.out_dir + "/manifests");
    json j;
    j["stage"] = stage;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    std::ofstream out(cfg.out_dir + "/manifests/" + stage + ".json");
    out << j.dump(2) << '\n';
}

struct Env {
    InflectionLexicon lexicon;
    Vocab vocab;
    ModelDims dims;
    SpeechSynthesizer synth;
};

Env load_env(const ExperimentConfig& cfg) {
    InflectionLexicon lex = read_lexicon_tsv(lexicon_path(cfg));
    Vocab vocab = build_vocab(lex, cfg.synth.max_piece_len);
    ModelDims dims = cfg.dims;
    dims.d_in = cfg.synth.d_in;
    dims.vocab = vocab.size();
    SpeechSynthesizer synth = make_corpus_synth(lex, cfg.synth, cfg.seed);
    return {std::move(lex), std::move(vocab), dims, std::move(synth)};
}

Model fresh_model(const ExperimentConfig& cfg, const ModelDims& dims) {
    return Model::init(dims, hash_seed(cfg.seed, 0x30DE1));
}

std::vector<AlignedUtterance> load_split(const ExperimentConfig& cfg,
                                         const std::string& split) {
    std::string prefix = corpus_prefix(cfg, split);
    if (!fs::exists(prefix + ".jsonl"))
        throw Error("missing corpus split '" + prefix + ".jsonl' (run gen-data first)");
    return read_split(prefix, cfg.synth.d_in);
}

double dev_mt_ce(const Model& model, const Vocab& vocab,
                 const std::vector<AlignedUtterance>& dev, int max_piece_len) {
    double total = 0.0;
    for (const auto& u : dev) {
        EncoderOutput e =
            model.embed_text(tokenize_words(u.src_words, vocab, max_piece_len));
        ForwardResult fr =
            model.translate_forward(e, tokenize_words(u.tgt_words, vocab,
                                                      max_piece_len));
        total += fr.ce->value[0];
    }
    return total / static_cast<double>(dev.size());
}

TrainConfig mode_config(const ExperimentConfig& cfg, TrainMode mode) {
    TrainConfig tc = cfg.tr;
    switch (mode) {
        case TrainMode::Full: break;
        case TrainMode::MixupOnly: tc.lambda_ctr = 0.0; break;
        case TrainMode::WacoOnly: tc.use_mixup = false; break;
        case TrainMode::StOnly:
            tc.lambda_ctr = 0.0;
            tc.use_mixup = false;
            break;
    }
    return tc;
}

}  // namespace

std::string mode_tag(TrainMode mode) {
    switch (mode) {
        case TrainMode::Full: return "tr";
        case TrainMode::MixupOnly: return "mixup_only";
        case TrainMode::WacoOnly: return "waco_only";
        case TrainMode::StOnly: return "base";
    }
    return "tr";
}

std::string ckpt_path(const ExperimentConfig& cfg, const std::string& tag) {
    return cfg.out_dir + "/ckpt/" + tag + ".ckpt";
}

Model load_model(const ExperimentConfig& cfg, const Vocab& vocab,
                 const std::string& tag) {
    ModelDims dims = cfg.dims;
    dims.d_in = cfg.synth.d_in;
    dims.vocab = vocab.size();
    Model m = fresh_model(cfg, dims);
    std::string path = ckpt_path(cfg, tag);
    if (!fs::exists(path)) throw Error("missing checkpoint '" + path + "'");
    load_checkpoint(m, path);
    return m;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config file '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const std::exception& e) {
        throw Error("config parse error in '" + path + "': " + e.what());
    }
    ExperimentConfig cfg;
    check_keys(j, "", {"seed", "out_dir", "corpus", "model", "mt", "tr", "fn",
                       "attack", "eval"});
    read_key(j, "seed", cfg.seed);
    read_key(j, "out_dir", cfg.out_dir);
    if (j.contains("corpus")) {
        const auto& c = j["corpus"];
        check_keys(c, "corpus.", {"n", "d_in", "frames_min", "frames_max",
                                  "noise_amplitude", "min_words", "max_words",
                                  "max_piece_len"});
        read_key(c, "n", cfg.corpus_n);
        read_key(c, "d_in", cfg.synth.d_in);
        read_key(c, "frames_min", cfg.synth.frames_min);
        read_key(c, "frames_max", cfg.synth.frames_max);
        read_key(c, "noise_amplitude", cfg.synth.noise_amplitude);
        read_key(c, "min_words", cfg.synth.min_words);
        read_key(c, "max_words", cfg.synth.max_words);
        read_key(c, "max_piece_len", cfg.synth.max_piece_len);
    }
    if (j.contains("model")) {
        const auto& m = j["model"];
        check_keys(m, "model.",
                   {"d", "heads", "ffn", "n_speech", "n_enc", "n_dec", "max_pos"});
        read_key(m, "d", cfg.dims.d);
        read_key(m, "heads", cfg.dims.heads);
        read_key(m, "ffn", cfg.dims.ffn);
        read_key(m, "n_speech", cfg.dims.n_speech);
        read_key(m, "n_enc", cfg.dims.n_enc);
        read_key(m, "n_dec", cfg.dims.n_dec);
        read_key(m, "max_pos", cfg.dims.max_pos);
    }
    if (j.contains("mt")) {
        const auto& m = j["mt"];
        check_keys(m, "mt.", {"epochs", "patience", "lr", "batch"});
        read_key(m, "epochs", cfg.mt_epochs);
        read_key(m, "patience", cfg.mt_patience);
        read_key(m, "lr", cfg.mt_lr);
        read_key(m, "batch", cfg.mt_batch);
    }
    if (j.contains("tr")) {
        const auto& t = j["tr"];
        check_keys(t, "tr.", {"epochs", "batch", "lr", "tau", "p_star",
                              "lambda_ctr", "lambda_kl", "avg_last"});
        read_key(t, "epochs", cfg.tr_epochs);
        read_key(t, "batch", cfg.tr.batch_size);
        read_key(t, "lr", cfg.tr.lr);
        read_key(t, "tau", cfg.tr.tau);
        read_key(t, "p_star", cfg.tr.p_star);
        read_key(t, "lambda_ctr", cfg.tr.lambda_ctr);
        read_key(t, "lambda_kl", cfg.tr.lambda_kl);
        read_key(t, "avg_last", cfg.avg_last);
    }
    if (j.contains("fn")) {
        const auto& f = j["fn"];
        check_keys(f, "fn.", {"lambda_kl", "lr", "budget_divisor"});
        read_key(f, "lambda_kl", cfg.fn_lambda_kl);
        read_key(f, "lr", cfg.fn_lr);
        read_key(f, "budget_divisor", cfg.fn_budget_divisor);
    }
    if (j.contains("attack")) {
        const auto& a = j["attack"];
        check_keys(a, "attack.", {"beam"});
        read_key(a, "beam", cfg.attack_beam);
    }
    if (j.contains("eval")) {
        const auto& e = j["eval"];
        check_keys(e, "eval.", {"beam", "max_decode_len"});
        read_key(e, "beam", cfg.eval_beam);
        read_key(e, "max_decode_len", cfg.max_decode_len);
    }
    // validation
    if (cfg.tr.tau <= 0) throw Error("config: tr.tau must be > 0");
    if (cfg.tr.p_star < 0 || cfg.tr.p_star > 1)
        throw Error("config: tr.p_star must be in [0,1]");
    if (cfg.tr.lambda_ctr < 0 || cfg.tr.lambda_kl < 0 || cfg.fn_lambda_kl < 0)
        throw Error("config: lambda weights must be >= 0");
    if (cfg.corpus_n < 30) throw Error("config: corpus.n must be >= 30");
    return cfg;
}

void apply_overrides(ExperimentConfig& cfg, const std::string& seed_arg,
                     const std::string& out_arg) {
    if (!seed_arg.empty()) cfg.seed = std::stoull(seed_arg);
    if (!out_arg.empty()) cfg.out_dir = out_arg;
}

void stage_gen_data(const ExperimentConfig& cfg) {
    InflectionLexicon lex = make_toy_lexicon();
    Corpus corpus = generate_corpus(lex, cfg.synth, cfg.corpus_n, cfg.seed);
    fs::create_directories(cfg.out_dir + "/corpus");
    write_lexicon_tsv(lex, lexicon_path(cfg));
    write_split(corpus_prefix(cfg, "train"), corpus.train, cfg.synth.d_in);
    write_split(corpus_prefix(cfg, "dev"), corpus.dev, cfg.synth.d_in);
    write_split(corpus_prefix(cfg, "test"), corpus.test, cfg.synth.d_in);
    write_manifest(cfg, "gen-data", {},
                   {lexicon_path(cfg), corpus_prefix(cfg, "train") + ".jsonl",
                    corpus_prefix(cfg, "dev") + ".jsonl",
                    corpus_prefix(cfg, "test") + ".jsonl"});
}

void stage_pretrain_mt(const ExperimentConfig& cfg) {
    Env env = load_env(cfg);
    auto train = load_split(cfg, "train");
    auto dev = load_split(cfg, "dev");
    Model model = fresh_model(cfg, env.dims);
    Adam opt;
    opt.lr = cfg.mt_lr;
    Rng rng(hash_seed(cfg.seed, 0x347));
    int pl = cfg.synth.max_piece_len;

    fs::create_directories(cfg.out_dir + "/logs");
    fs::create_directories(cfg.out_dir + "/ckpt");
    std::ofstream log(cfg.out_dir + "/logs/mt_log.csv");
    log << "epoch,dev_ce\n";

    double best = 1e300;
    std::map<std::string, std::vector<double>> best_snap;
    int bad = 0;
    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.mt_epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.randint(0, static_cast<int64_t>(i) - 1)]);
        for (size_t b = 0; b < order.size(); b += cfg.mt_batch) {
            std::vector<Tensor> terms;
            for (size_t k = b; k < std::min(order.size(), b + cfg.mt_batch); ++k) {
                const auto& u = train[order[k]];
                EncoderOutput e =
                    model.embed_text(tokenize_words(u.src_words, env.vocab, pl));
                terms.push_back(
                    model.translate_forward(e, tokenize_words(u.tgt_words,
                                                              env.vocab, pl)).ce);
            }
            Tensor loss = terms[0];
            for (size_t k = 1; k < terms.size(); ++k) loss = add(loss, terms[k]);
            loss = scalar_mul(loss, 1.0 / static_cast<double>(terms.size()));
            backward(loss);
            opt.step(model);
        }
        double ce = dev_mt_ce(model, env.vocab, dev, pl);
        log << epoch << ',' << ce << '\n';
        if (ce < best - 1e-4) {
            best = ce;
            best_snap = snapshot_params(model);
            bad = 0;
        } else if (++bad >= cfg.mt_patience) {
            break;
        }
    }
    if (!best_snap.empty()) average_into(model, {best_snap});
    save_checkpoint(model, ckpt_path(cfg, "mt"));
    write_manifest(cfg, "pretrain-mt",
                   {corpus_prefix(cfg, "train") + ".jsonl",
                    corpus_prefix(cfg, "dev") + ".jsonl"},
                   {ckpt_path(cfg, "mt")});
}

void stage_train_tr(const ExperimentConfig& cfg, TrainMode mode) {
    Env env = load_env(cfg);
    auto train = load_split(cfg, "train");
    std::string tag = mode_tag(mode);
    Model model = fresh_model(cfg, env.dims);
    std::string mt = ckpt_path(cfg, "mt");
    if (!fs::exists(mt)) throw Error("missing checkpoint '" + mt + "'");
    load_checkpoint(model, mt);

    TrainConfig tc = mode_config(cfg, mode);
    Adam opt;
    opt.lr = tc.lr;
    Rng shuffle_rng(hash_seed(cfg.seed, 0x748));
    Rng draw_rng(hash_seed(cfg.seed, 0x749));
    DrawFn draw = draws_from_rng(draw_rng);
    int pl = cfg.synth.max_piece_len;

    fs::create_directories(cfg.out_dir + "/logs");
    fs::create_directories(cfg.out_dir + "/ckpt");
    std::ofstream log(cfg.out_dir + "/logs/" + tag + "_loss.csv");
    log << "step,l_st,l_mt,l_ctr,l_m,l_kl_ms,l_kl_mx,total\n";

    std::vector<std::map<std::string, std::vector<double>>> snaps;
    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    int64_t step = 0;
    for (int epoch = 0; epoch < cfg.tr_epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1],
                      order[shuffle_rng.randint(0, static_cast<int64_t>(i) - 1)]);
        for (size_t b = 0; b < order.size(); b += tc.batch_size) {
            std::vector<BatchItem> batch;
            for (size_t k = b; k < std::min(order.size(), b + tc.batch_size); ++k)
                batch.push_back({&train[order[k]], {}, {}});
            LossBreakdown lb = cmrt_tr_loss(model, env.vocab, batch, tc, draw, pl);
            backward(lb.total);
            opt.step(model);
            log << step++ << ',' << lb.st << ',' << lb.mt << ',' << lb.ctr << ','
                << lb.mix << ',' << lb.kl_ms << ',' << lb.kl_mx << ','
                << lb.total->value[0] << '\n';
        }
        snaps.push_back(snapshot_params(model));
        int keep = std::min(cfg.avg_last, cfg.tr_epochs);
        if (static_cast<int>(snaps.size()) > keep)
            snaps.erase(snaps.begin(), snaps.end() - keep);
    }
    average_into(model, snaps);
    save_checkpoint(model, ckpt_path(cfg, tag));
    write_manifest(cfg, "train-" + tag,
                   {mt, corpus_prefix(cfg, "train") + ".jsonl",
                    corpus_prefix(cfg, "train") + ".frames"},
                   {ckpt_path(cfg, tag)});
}

void stage_attack(const ExperimentConfig& cfg, const std::string& split,
                  const std::string& victim_tag, bool train_speech) {
    Env env = load_env(cfg);
    auto utts = load_split(cfg, split);
    Model victim = load_model(cfg, env.vocab, victim_tag);
    int pl = cfg.synth.max_piece_len;

    std::vector<std::pair<int64_t, AdversarialText>> records;
    std::vector<AlignedUtterance> adv_utts;
    for (const auto& u : utts) {
        VictimScorer scorer = make_bleu_victim(victim, env.vocab, u.tgt_words,
                                               cfg.attack_beam, cfg.max_decode_len,
                                               pl);
        AdversarialUtterance adv = speech_morpheus(u, scorer, env.lexicon, env.synth,
                                                   utterance_seed(cfg.seed, u.id));
        records.emplace_back(u.id, adv.text);
        adv_utts.push_back(std::move(adv.utt));
    }
    fs::create_directories(cfg.out_dir + "/attack");
    std::string report = cfg.out_dir + "/attack/adv_" + split + "_report.jsonl";
    write_attack_report(report, records);
    std::vector<std::string> outputs = {report};
    bool with_speech = split != "train" || train_speech;
    if (with_speech) {
        write_split(cfg.out_dir + "/attack/adv_" + split, adv_utts, cfg.synth.d_in);
        outputs.push_back(cfg.out_dir + "/attack/adv_" + split + ".jsonl");
        outputs.push_back(cfg.out_dir + "/attack/adv_" + split + ".frames");
    }
    write_manifest(cfg, "attack-" + split,
                   {corpus_prefix(cfg, split) + ".jsonl",
                    corpus_prefix(cfg, split) + ".frames",
                    ckpt_path(cfg, victim_tag)},
                   outputs);
}

void stage_finetune_fn(const ExperimentConfig& cfg, double lambda_kl,
                       const std::string& tag) {
    Env env = load_env(cfg);
    auto train = load_split(cfg, "train");
    std::string report = cfg.out_dir + "/attack/adv_train_report.jsonl";
    if (!fs::exists(report))
        throw Error("missing adversarial text '" + report + "' (run attack first)");
    auto records = read_attack_report(report);
    std::map<int64_t, const AdversarialText*> adv_by_id;
    for (const auto& [id, adv] : records) adv_by_id[id] = &adv;

    Model model = load_model(cfg, env.vocab, "tr");
    model.freeze_speech_encoder();
    TrainConfig tc = cfg.tr;
    tc.lambda_kl = lambda_kl;
    Adam opt;
    opt.lr = cfg.fn_lr;
    Rng shuffle_rng(hash_seed(cfg.seed, 0xF17));
    Rng draw_rng(hash_seed(cfg.seed, 0xF18));
    DrawFn draw = draws_from_rng(draw_rng);
    int pl = cfg.synth.max_piece_len;

    int64_t steps_per_epoch =
        (static_cast<int64_t>(train.size()) + tc.batch_size - 1) / tc.batch_size;
    int64_t budget = std::max<int64_t>(
        1, cfg.tr_epochs * steps_per_epoch / cfg.fn_budget_divisor);

    fs::create_directories(cfg.out_dir + "/logs");
    std::ofstream log(cfg.out_dir + "/logs/" + tag + "_loss.csv");
    log << "step,l_st,l_mt,l_ctr,l_m,l_kl_ms,l_kl_mx,total\n";

    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    int64_t step = 0;
    while (step < budget) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1],
                      order[shuffle_rng.randint(0, static_cast<int64_t>(i) - 1)]);
        for (size_t b = 0; b < order.size() && step < budget; b += tc.batch_size) {
            std::vector<BatchItem> batch;
            for (size_t k = b; k < std::min(order.size(), b + tc.batch_size); ++k) {
                const auto& u = train[order[k]];
                BatchItem item{&u, {}, {}};
                auto it = adv_by_id.find(u.id);
                if (it != adv_by_id.end() && !it->second->indices.empty()) {
                    item.adv_words = it->second->perturbed;
                    item.adv_indices = it->second->indices;
                }
                batch.push_back(std::move(item));
            }
            LossBreakdown lb = cmrt_fn_loss(model, env.vocab, batch, tc, draw, pl);
            backward(lb.total);
            opt.step(model);
            log << step++ << ',' << lb.st << ',' << lb.mt << ",0," << lb.mix << ','
                << lb.kl_ms << ',' << lb.kl_mx << ',' << lb.total->value[0] << '\n';
        }
    }
    save_checkpoint(model, ckpt_path(cfg, tag));
    // text-only fine-tune: consumes the adversarial transcripts, never
    // adversarial speech frames
    write_manifest(cfg, "finetune-" + tag,
                   {ckpt_path(cfg, "tr"), corpus_prefix(cfg, "train") + ".jsonl",
                    corpus_prefix(cfg, "train") + ".frames", report},
                   {ckpt_path(cfg, tag)});
}

void stage_baseline_advspeech_fn(const ExperimentConfig& cfg) {
    Env env = load_env(cfg);
    std::string adv_prefix = cfg.out_dir + "/attack/adv_train";
    if (!fs::exists(adv_prefix + ".frames"))
        throw Error("missing adversarial speech '" + adv_prefix +
                    ".frames' (run attack on train with speech output)");
    auto adv_train = read_split(adv_prefix, cfg.synth.d_in);

    Model model = load_model(cfg, env.vocab, "base");
    Adam opt;
    opt.lr = cfg.tr.lr;  // standard adversarial fine-tuning keeps the training rate
    Rng shuffle_rng(hash_seed(cfg.seed, 0xAD5));
    int pl = cfg.synth.max_piece_len;
    int batch = cfg.tr.batch_size;

    int64_t steps_per_epoch =
        (static_cast<int64_t>(adv_train.size()) + batch - 1) / batch;
    int64_t budget = std::max<int64_t>(
        1, cfg.tr_epochs * steps_per_epoch / cfg.fn_budget_divisor);

    std::vector<size_t> order(adv_train.size());
    std::iota(order.begin(), order.end(), 0);
    int64_t step = 0;
    while (step < budget) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1],
                      order[shuffle_rng.randint(0, static_cast<int64_t>(i) - 1)]);
        for (size_t b = 0; b < order.size() && step < budget; b += batch) {
            std::vector<Tensor> terms;
            for (size_t k = b; k < std::min(order.size(), b + batch); ++k) {
                const auto& u = adv_train[order[k]];
                Tensor raw = make_tensor({u.num_frames, cfg.synth.d_in}, u.frames);
                EncoderOutput a = model.encode_speech(raw);
                terms.push_back(
                    model.translate_forward(a, tokenize_words(u.tgt_words,
                                                              env.vocab, pl)).ce);
            }
            Tensor loss = terms[0];
            for (size_t k = 1; k < terms.size(); ++k) loss = add(loss, terms[k]);
            loss = scalar_mul(loss, 1.0 / static_cast<double>(terms.size()));
            backward(loss);
            opt.step(model);
            ++step;
        }
    }
    save_checkpoint(model, ckpt_path(cfg, "advspeech_fn"));
    write_manifest(cfg, "baseline-advspeech-fn",
                   {ckpt_path(cfg, "base"), adv_prefix + ".jsonl",
                    adv_prefix + ".frames"},
                   {ckpt_path(cfg, "advspeech_fn")});
}

double evaluate_st_bleu(const Model& model, const Vocab& vocab,
                        const std::vector<AlignedUtterance>& utts, int beam,
                        int max_len, int max_piece_len) {
    std::vector<std::vector<std::string>> hyps, refs;
    for (const auto& u : utts) {
        Tensor raw = make_tensor({u.num_frames, model.dims.d_in}, u.frames);
        EncoderOutput a = model.encode_speech(raw);
        std::vector<std::string> pieces;
        for (int64_t id : model.beam_decode(a, beam, max_len))
            pieces.push_back(vocab.to_str[id]);
        hyps.push_back(detokenize(pieces));
        refs.push_back(u.tgt_words);
    }
    return corpus_bleu(hyps, refs);
}

void stage_sweep_kl(const ExperimentConfig& cfg, const std::vector<double>& lambdas) {
    Env env = load_env(cfg);
    std::vector<double> sorted = lambdas;
    std::sort(sorted.begin(), sorted.end());
    auto adv_test = read_split(cfg.out_dir + "/attack/adv_test", cfg.synth.d_in);
    auto test = load_split(cfg, "test");
    auto dev = load_split(cfg, "dev");
    int pl = cfg.synth.max_piece_len;

    std::vector<SimilarityReport> rows;
    for (double lam : sorted) {
        std::ostringstream tag_s;
        tag_s << "fn_kl_" << lam;
        std::string tag = tag_s.str();
        stage_finetune_fn(cfg, lam, tag);
        Model m = load_model(cfg, env.vocab, tag);
        SimilarityReport adv_row;
        adv_row.model = tag;
        adv_row.dataset = "adv_test";
        adv_row.bleu = evaluate_st_bleu(m, env.vocab, adv_test, cfg.eval_beam,
                                        cfg.max_decode_len, pl);
        adv_row.mean_cosine = alignment_cosine(m, env.vocab, dev, pl);
        adv_row.lambda_kl = lam;
        adv_row.seed = cfg.seed;
        rows.push_back(adv_row);
        SimilarityReport clean_row = adv_row;
        clean_row.dataset = "test";
        clean_row.bleu = evaluate_st_bleu(m, env.vocab, test, cfg.eval_beam,
                                          cfg.max_decode_len, pl);
        rows.push_back(clean_row);
    }
    emit_report(rows, cfg.out_dir + "/sweep_kl.csv");
}

void stage_analyze(const ExperimentConfig& cfg) {
    Env env = load_env(cfg);
    auto test = load_split(cfg, "test");
    auto dev = load_split(cfg, "dev");
    auto adv_test = read_split(cfg.out_dir + "/attack/adv_test", cfg.synth.d_in);
    auto adv_dev = read_split(cfg.out_dir + "/attack/adv_dev", cfg.synth.d_in);
    int pl = cfg.synth.max_piece_len;

    std::vector<std::string> tags = {"base", "tr", "fn", "advspeech_fn",
                                     "mixup_only"};
    std::vector<SimilarityReport> rows;
    std::vector<std::vector<double>> ref_reps;
    {
        Model ref = load_model(cfg, env.vocab, "advspeech_fn");
        ref_reps = sentence_mean_representations(ref, adv_dev);
    }
    for (const auto& tag : tags) {
        if (!fs::exists(ckpt_path(cfg, tag))) continue;
        Model m = load_model(cfg, env.vocab, tag);
        double cos = alignment_cosine(m, env.vocab, dev, pl);
        double cka = -1.0;
        if (tag == "tr" || tag == "fn")
            cka = linear_cka(sentence_mean_representations(m, adv_dev), ref_reps);
        SimilarityReport clean;
        clean.model = tag;
        clean.dataset = "test";
        clean.bleu = evaluate_st_bleu(m, env.vocab, test, cfg.eval_beam,
                                      cfg.max_decode_len, pl);
        clean.mean_cosine = cos;
        clean.cka_vs_ref = cka;
        clean.seed = cfg.seed;
        rows.push_back(clean);
        SimilarityReport adv = clean;
        adv.dataset = "adv_test";
        adv.bleu = evaluate_st_bleu(m, env.vocab, adv_test, cfg.eval_beam,
                                    cfg.max_decode_len, pl);
        rows.push_back(adv);
    }
    emit_report(rows, cfg.out_dir + "/report.csv");
}

SeedResults run_full_experiment(const ExperimentConfig& cfg) {
    stage_gen_data(cfg);
    stage_pretrain_mt(cfg);
    stage_train_tr(cfg, TrainMode::StOnly);
    stage_train_tr(cfg, TrainMode::Full);
    stage_train_tr(cfg, TrainMode::MixupOnly);
    stage_attack(cfg, "train", "base", true);
    stage_attack(cfg, "dev", "base", false);
    stage_attack(cfg, "test", "base", false);
    stage_finetune_fn(cfg, cfg.fn_lambda_kl, "fn");
    stage_baseline_advspeech_fn(cfg);

    Env env = load_env(cfg);
    auto test = load_split(cfg, "test");
    auto dev = load_split(cfg, "dev");
    auto adv_test = read_split(cfg.out_dir + "/attack/adv_test", cfg.synth.d_in);
    auto adv_dev = read_split(cfg.out_dir + "/attack/adv_dev", cfg.synth.d_in);
    int pl = cfg.synth.max_piece_len;

    SeedResults r;
    std::vector<SimilarityReport> rows;
    std::vector<std::vector<double>> ref_reps;
    {
        Model ref = load_model(cfg, env.vocab, "advspeech_fn");
        ref_reps = sentence_mean_representations(ref, adv_dev);
    }
    double cos_mixup = 0.0;
    auto eval_pair = [&](const std::string& tag, double& clean, double& adv) {
        Model m = load_model(cfg, env.vocab, tag);
        clean = evaluate_st_bleu(m, env.vocab, test, cfg.eval_beam,
                                 cfg.max_decode_len, pl);
        adv = evaluate_st_bleu(m, env.vocab, adv_test, cfg.eval_beam,
                               cfg.max_decode_len, pl);
        double cos = alignment_cosine(m, env.vocab, dev, pl);
        if (tag == "tr") r.cos_full = cos;
        if (tag == "mixup_only") cos_mixup = cos;
        double cka = -1.0;
        if (tag == "tr" || tag == "fn")
            cka = linear_cka(sentence_mean_representations(m, adv_dev), ref_reps);
        if (tag == "tr") r.cka_tr = cka;
        if (tag == "fn") r.cka_fn = cka;
        SimilarityReport row;
        row.model = tag;
        row.dataset = "test";
        row.bleu = clean;
        row.mean_cosine = cos;
        row.cka_vs_ref = cka;
        row.seed = cfg.seed;
        rows.push_back(row);
        row.dataset = "adv_test";
        row.bleu = adv;
        rows.push_back(row);
    };
    eval_pair("base", r.base_clean, r.base_adv);
    eval_pair("tr", r.tr_clean, r.tr_adv);
    eval_pair("fn", r.fn_clean, r.fn_adv);
    eval_pair("advspeech_fn", r.advsp_clean, r.advsp_adv);
    {
        double mix_clean = 0.0, mix_adv = 0.0;
        eval_pair("mixup_only", mix_clean, mix_adv);
        r.cos_mixup_only = cos_mixup;
    }
    emit_report(rows, cfg.out_dir + "/report.csv");
    // provenance audit over the FN manifest
    {
        std::ifstream in(cfg.out_dir + "/manifests/finetune-fn.json");
        json j;
        in >> j;
        r.fn_consumed_adv_speech = false;
        for (const auto& input : j.at("inputs")) {
            std::string s = input.get<std::string>();
            if (s.find("attack") != std::string::npos &&
                s.find(".frames") != std::string::npos)
                r.fn_consumed_adv_speech = true;
        }
    }
    return r;
}

}  // namespace cmrt
