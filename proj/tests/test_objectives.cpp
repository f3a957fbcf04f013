#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <deque>

#include "cmrt/corpus.hpp"
#include "cmrt/model.hpp"
#include "cmrt/objectives.hpp"

using namespace cmrt;

namespace {

DrawFn replay(std::deque<double> vals) {
    auto q = std::make_shared<std::deque<double>>(std::move(vals));
    return [q]() {
        if (q->empty()) throw Error("replay: draw sequence exhausted");
        double v = q->front();
        q->pop_front();
        return v;
    };
}

// two aligned words over a 4-frame "speech" tensor and 3-piece "text" tensor
std::vector<WordAlignment> two_word_aligns() {
    return {{0, 0, 2, 0, 1}, {1, 2, 4, 1, 3}};
}

ModelDims tiny_dims(int64_t vocab) {
    ModelDims d;
    d.d_in = 6;
    d.d = 8;
    d.heads = 2;
    d.ffn = 12;
    d.n_speech = 1;
    d.n_enc = 1;
    d.n_dec = 1;
    d.vocab = vocab;
    return d;
}

}  // namespace

TEST_CASE("contrastive loss: identical orthogonal pairs give log(1+e^{-1/tau})") {
    // cosine matrix is the identity, so each row is CE([1/tau, 0], 0)
    std::vector<PooledWordPair> pairs(2);
    pairs[0].f_s = make_tensor({4}, {1, 0, 0, 0});
    pairs[0].f_t = make_tensor({4}, {1, 0, 0, 0});
    pairs[1].f_s = make_tensor({4}, {0, 1, 0, 0});
    pairs[1].f_t = make_tensor({4}, {0, 1, 0, 0});
    double got = contrastive_loss(pairs, 0.2)->value[0];
    double want = std::log(1.0 + std::exp(-5.0));  // 0.00671534848912...
    CHECK(std::abs(got - want) < 1e-9);
    CHECK(want == doctest::Approx(0.006715).epsilon(1e-3));
}

TEST_CASE("contrastive loss: batch of one identical pair is exactly zero") {
    std::vector<PooledWordPair> pairs(1);
    pairs[0].f_s = make_tensor({3}, {0.3, -1.2, 0.5});
    pairs[0].f_t = make_tensor({3}, {0.3, -1.2, 0.5});
    CHECK(contrastive_loss(pairs, 0.2)->value[0] == 0.0);
}

TEST_CASE("contrastive loss gradient check") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        Tensor s0 = randn({4}, rng, 1.0, true);
        Tensor t0 = randn({4}, rng, 1.0, true);
        Tensor s1 = randn({4}, rng, 1.0, true);
        Tensor t1 = randn({4}, rng, 1.0, true);
        GradCheckReport rep = grad_check(
            [&] {
                std::vector<PooledWordPair> pairs(2);
                pairs[0] = {s0, t0, 0};
                pairs[1] = {s1, t1, 1};
                return contrastive_loss(pairs, 0.2);
            },
            {{"s0", s0}, {"t0", t0}, {"s1", s1}, {"t1", t1}}, 1e-5, 1e-4);
        CHECK(rep.pass);
    }
}

TEST_CASE("KL constants match the closed forms") {
    Tensor log_p = make_tensor({1, 2}, {std::log(0.7), std::log(0.3)});
    Tensor log_q = make_tensor({1, 2}, {std::log(0.5), std::log(0.5)});
    double asym = kl_divergence(log_p, log_q, KlMode::Asym)->value[0];
    double want_asym = 0.7 * std::log(0.7 / 0.5) + 0.3 * std::log(0.3 / 0.5);
    CHECK(std::abs(asym - want_asym) < 1e-12);
    CHECK(want_asym == doctest::Approx(0.08228).epsilon(1e-3));
    double sym = kl_divergence(log_p, log_q, KlMode::Sym)->value[0];
    double want_sym =
        want_asym + 0.5 * std::log(0.5 / 0.7) + 0.5 * std::log(0.5 / 0.3);
    CHECK(std::abs(sym - want_sym) < 1e-12);
    CHECK(want_sym == doctest::Approx(0.16946).epsilon(1e-3));
}

TEST_CASE("KL identities: KL(P,P)=0 both modes; symmetric mode is symmetric") {
    Rng rng(4);
    Tensor a = log_softmax(randn({3, 5}, rng, 1.5));
    Tensor b = log_softmax(randn({3, 5}, rng, 1.5));
    CHECK(std::abs(kl_divergence(a, a, KlMode::Asym)->value[0]) < 1e-12);
    CHECK(std::abs(kl_divergence(a, a, KlMode::Sym)->value[0]) < 1e-12);
    double ab = kl_divergence(a, b, KlMode::Sym)->value[0];
    double ba = kl_divergence(b, a, KlMode::Sym)->value[0];
    CHECK(std::abs(ab - ba) < 1e-12);
    CHECK(kl_divergence(a, b, KlMode::Asym)->value[0] > 0.0);
}

TEST_CASE("KL gradient check, including the detached-teacher form") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        Tensor x = randn({3, 4}, rng, 1.0, true);
        Tensor y = randn({3, 4}, rng, 1.0, true);
        for (KlMode mode : {KlMode::Sym, KlMode::Asym}) {
            GradCheckReport rep = grad_check(
                [&] {
                    return kl_divergence(log_softmax(x), log_softmax(y), mode);
                },
                {{"x", x}, {"y", y}}, 1e-5, 1e-4);
            CHECK(rep.pass);
        }
    }
    // detached teacher: gradient flows only through the student side
    Tensor x = make_tensor({1, 3}, {0.2, -0.4, 1.0}, true);
    Tensor y = make_tensor({1, 3}, {0.9, 0.1, -0.3}, true);
    Tensor loss =
        kl_divergence(log_softmax(x), log_softmax(y), KlMode::Asym, true);
    backward(loss);
    for (double g : x->grad) CHECK(g == 0.0);
    double ysum = 0.0;
    for (double g : y->grad) ysum += std::abs(g);
    CHECK(ysum > 0.0);
}

TEST_CASE("mixup at the p* extremes is exact") {
    Rng rng(9);
    Tensor a = randn({4, 5}, rng, 1.0);
    Tensor e = randn({3, 5}, rng, 1.0);
    auto aligns = two_word_aligns();
    Rng draw_rng(1);
    DrawFn draw = draws_from_rng(draw_rng);

    MixupSequence all_speech = build_mixup(a, e, aligns, 1.0, draw);
    for (const auto& seg : all_speech.segments)
        CHECK(seg.tag == SegmentTag::Speech);
    CHECK(all_speech.concatenated->value == a->value);

    MixupSequence all_text = build_mixup(a, e, aligns, 0.0, draw);
    for (const auto& seg : all_text.segments) CHECK(seg.tag == SegmentTag::Text);
    CHECK(all_text.concatenated->value == e->value);
}

TEST_CASE("empty attacked set: adversarial mixup bit-equals standard mixup "
          "under replayed draws") {
    Rng rng(13);
    Tensor a = randn({4, 5}, rng, 1.0);
    Tensor e = randn({3, 5}, rng, 1.0);
    Tensor e_adv = randn({3, 5}, rng, 1.0);
    auto aligns = two_word_aligns();
    std::deque<double> drawn = {0.31, 0.92};
    MixupSequence std_mix = build_mixup(a, e, aligns, 0.8, replay(drawn));
    MixupSequence adv_mix = build_adversarial_mixup(a, e, e_adv, aligns, aligns,
                                                    {}, 0.8, replay(drawn));
    REQUIRE(adv_mix.segments.size() == std_mix.segments.size());
    for (size_t i = 0; i < adv_mix.segments.size(); ++i)
        CHECK(adv_mix.segments[i].tag == std_mix.segments[i].tag);
    CHECK(adv_mix.concatenated->value == std_mix.concatenated->value);
}

TEST_CASE("attacked words take the adversarial text span unconditionally") {
    Rng rng(13);
    Tensor a = randn({4, 5}, rng, 1.0);
    Tensor e = randn({3, 5}, rng, 1.0);
    Tensor e_adv = randn({3, 5}, rng, 1.0);
    auto aligns = two_word_aligns();
    // only one draw is consumed: word 1 is forced to AdvText
    MixupSequence mix = build_adversarial_mixup(a, e, e_adv, aligns, aligns, {1},
                                                0.8, replay({0.1}));
    CHECK(mix.segments[0].tag == SegmentTag::Speech);
    CHECK(mix.segments[1].tag == SegmentTag::AdvText);
    // the adv segment's rows come from e_adv
    for (int64_t r = 1; r < 3; ++r)
        for (int64_t c = 0; c < 5; ++c)
            CHECK(mix.segments[1].block->value[(r - 1) * 5 + c] ==
                  e_adv->value[r * 5 + c]);
}

TEST_CASE("speech fraction at p*=0.8 lands within 0.02 over 10,000 draws") {
    Rng rng(77);
    Tensor a = randn({4, 5}, rng, 1.0);
    Tensor e = randn({3, 5}, rng, 1.0);
    auto aligns = two_word_aligns();
    Rng draw_rng(2024);
    DrawFn draw = draws_from_rng(draw_rng);
    int64_t speech = 0, total = 0;
    for (int rep = 0; rep < 5000; ++rep) {
        MixupSequence mix = build_mixup(a, e, aligns, 0.8, draw);
        for (const auto& seg : mix.segments) {
            ++total;
            if (seg.tag == SegmentTag::Speech) ++speech;
        }
    }
    CHECK(total == 10000);
    double frac = static_cast<double>(speech) / static_cast<double>(total);
    CHECK(std::abs(frac - 0.8) <= 0.02);
}

TEST_CASE("encoder_alignments maps speech spans and keeps text spans") {
    std::vector<WordAlignment> in = {{0, 0, 4, 0, 1}, {1, 4, 13, 1, 3}};
    auto out = encoder_alignments(in, 4, 5);
    CHECK(out[0].speech_lo == 0);
    CHECK(out[0].speech_hi == 1);
    CHECK(out[1].speech_lo == 1);
    CHECK(out[1].speech_hi == 4);  // ceil(13/4), clamped to 4 only if needed
    CHECK(out[0].text_lo == 0);
    CHECK(out[0].text_hi == 1);
    CHECK(out[1].text_lo == 1);
    CHECK(out[1].text_hi == 3);
}

TEST_CASE("combined losses: totals equal their component sums") {
    InflectionLexicon lex = make_toy_lexicon();
    SynthSpec spec;
    spec.d_in = 6;
    Corpus c = generate_corpus(lex, spec, 30, 3);
    Vocab vocab = build_vocab(lex, spec.max_piece_len);
    Model m = Model::init(tiny_dims(vocab.size()), 7);

    TrainConfig tc;
    Rng draw_rng(5);
    DrawFn draw = draws_from_rng(draw_rng);
    std::vector<BatchItem> batch;
    for (int i = 0; i < 3; ++i) batch.push_back({&c.train[i], {}, {}});

    LossBreakdown tr = cmrt_tr_loss(m, vocab, batch, tc, draw, spec.max_piece_len);
    double tr_sum = tr.st + tr.mt + tc.lambda_ctr * tr.ctr + tr.mix +
                    tc.lambda_kl * (tr.kl_ms + tr.kl_mx) / 2.0;
    CHECK(std::abs(tr.total->value[0] - tr_sum) < 1e-12);
    CHECK(tr.ctr > 0.0);

    // give one item an adversarial transcript for the FN loss
    batch[1].adv_words = batch[1].utt->src_words;
    batch[1].adv_words[0] = "painted";
    batch[1].adv_indices = {0};
    TrainConfig fc = tc;
    fc.lambda_kl = 5.0;
    LossBreakdown fn = cmrt_fn_loss(m, vocab, batch, fc, draw, spec.max_piece_len);
    double fn_sum =
        fn.st + fn.mt + fn.mix + fc.lambda_kl * (fn.kl_ms + fn.kl_mx) / 2.0;
    CHECK(std::abs(fn.total->value[0] - fn_sum) < 1e-12);
    CHECK(fn.ctr == 0.0);  // no contrastive term in fine-tuning
}

TEST_CASE("FN loss keeps frozen speech parameters gradient-free") {
    InflectionLexicon lex = make_toy_lexicon();
    SynthSpec spec;
    spec.d_in = 6;
    Corpus c = generate_corpus(lex, spec, 30, 3);
    Vocab vocab = build_vocab(lex, spec.max_piece_len);
    Model m = Model::init(tiny_dims(vocab.size()), 7);
    m.freeze_speech_encoder();
    Rng draw_rng(5);
    DrawFn draw = draws_from_rng(draw_rng);
    std::vector<BatchItem> batch = {{&c.train[0], {}, {}}};
    LossBreakdown fn =
        cmrt_fn_loss(m, vocab, batch, TrainConfig{}, draw, spec.max_piece_len);
    backward(fn.total);
    for (const auto& [name, t] : m.params) {
        if (name.rfind("frontend.", 0) == 0 || name.rfind("speech.", 0) == 0) {
            for (double g : t->grad) CHECK(g == 0.0);
        }
    }
    double moved = 0.0;
    for (double g : m.p("embed.table")->grad) moved += std::abs(g);
    CHECK(moved > 0.0);
}
