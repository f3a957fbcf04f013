#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cmrt/corpus.hpp"
#include "cmrt/model.hpp"

using namespace cmrt;
namespace fs = std::filesystem;

namespace {

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

Tensor random_frames(int64_t t, int d_in, uint64_t seed) {
    Rng rng(seed);
    return randn({t, d_in}, rng, 1.0);
}

}  // namespace

TEST_CASE("speech frontend downsamples by exactly four") {
    Model m = Model::init(tiny_dims(11), 3);
    for (int64_t t : {4, 5, 7, 8, 9, 16, 23}) {
        EncoderOutput e = m.encode_speech(random_frames(t, 6, t));
        int64_t expect = (t + 1) / 2;
        expect = (expect + 1) / 2;
        CHECK(e.frames->shape[0] == expect);
        CHECK(e.frames->shape[1] == 8);
        CHECK(e.source == Modality::Speech);
    }
    // fewer frames than one downsampled step is a hard error
    CHECK_THROWS_AS((void)m.encode_speech(random_frames(3, 6, 1)), Error);
}

TEST_CASE("text path shapes and end-to-end CE gradient check") {
    Model m = Model::init(tiny_dims(9), 5);
    std::vector<int64_t> src = {3, 4, 5, 6};
    std::vector<int64_t> tgt = {7, 8, 3};
    EncoderOutput e = m.embed_text(src);
    CHECK(e.frames->shape == std::vector<int64_t>{4, 8});
    ForwardResult fr = m.translate_forward(e, tgt);
    CHECK(fr.log_probs->shape == std::vector<int64_t>{4, 9});
    CHECK(fr.ce->is_scalar());

    // finite-difference check through the full network on a few parameters
    std::vector<GradCheckLeaf> leaves;
    for (const std::string& name :
         {"embed.table", "dec.l0.cross.q.W", "enc.l0.ffn1.W", "dec.lnf.g"})
        leaves.push_back({name, m.p(name)});
    GradCheckReport rep = grad_check(
        [&] {
            return m.translate_forward(m.embed_text(src), tgt).ce;
        },
        leaves, 1e-5, 1e-4);
    for (const auto& l : rep.leaves) {
        INFO(l.name << " rel_err=" << l.max_rel_err);
        CHECK(l.pass);
    }
}

TEST_CASE("speech path end-to-end CE gradient check") {
    Model m = Model::init(tiny_dims(9), 8);
    Tensor raw = random_frames(9, 6, 2);
    std::vector<int64_t> tgt = {3, 4};
    std::vector<GradCheckLeaf> leaves;
    for (const std::string& name :
         {"frontend.proj.W", "frontend.conv2.W", "speech.l0.attn.v.W"})
        leaves.push_back({name, m.p(name)});
    GradCheckReport rep = grad_check(
        [&] {
            return m.translate_forward(m.encode_speech(raw), tgt).ce;
        },
        leaves, 1e-5, 1e-4);
    for (const auto& l : rep.leaves) {
        INFO(l.name << " rel_err=" << l.max_rel_err);
        CHECK(l.pass);
    }
}

TEST_CASE("decoder is causal: a later target token cannot change earlier rows") {
    Model m = Model::init(tiny_dims(9), 4);
    EncoderOutput e = m.embed_text({3, 4, 5});
    ForwardResult a = m.translate_forward(e, {6, 7, 8});
    ForwardResult b = m.translate_forward(e, {6, 7, 3});
    // rows 0..2 of log_probs depend only on the prefix [BOS, 6, 7]
    for (int64_t r = 0; r < 3; ++r)
        for (int64_t c = 0; c < 9; ++c)
            CHECK(a.log_probs->value[r * 9 + c] ==
                  b.log_probs->value[r * 9 + c]);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    Model m = Model::init(tiny_dims(13), 21);
    fs::path p = fs::temp_directory_path() / "cmrt_ckpt_rt.ckpt";
    save_checkpoint(m, p.string());
    Model n = Model::init(tiny_dims(13), 99);
    load_checkpoint(n, p.string());
    for (const auto& [name, t] : m.params) CHECK(n.p(name)->value == t->value);
    // dimension mismatch is a hard error
    Model wrong = Model::init(tiny_dims(7), 1);
    CHECK_THROWS_AS(load_checkpoint(wrong, p.string()), Error);
}

TEST_CASE("parameter averaging is the arithmetic mean") {
    Model m = Model::init(tiny_dims(9), 2);
    auto s1 = snapshot_params(m);
    auto s2 = snapshot_params(m);
    for (auto& [name, v] : s2)
        for (double& x : v) x += 3.0;
    average_into(m, {s1, s2});
    for (const auto& [name, t] : m.params)
        for (size_t i = 0; i < t->value.size(); ++i)
            CHECK(t->value[i] == doctest::Approx(s1[name][i] + 1.5).epsilon(1e-12));
}

TEST_CASE("freezing the speech encoder stops its updates") {
    Model m = Model::init(tiny_dims(9), 6);
    m.freeze_speech_encoder();
    auto before = snapshot_params(m);
    Adam opt;
    Tensor raw = random_frames(8, 6, 3);
    for (int step = 0; step < 3; ++step) {
        ForwardResult fr = m.translate_forward(m.encode_speech(raw), {3, 4, 5});
        backward(fr.ce);
        opt.step(m);
    }
    for (const auto& [name, t] : m.params) {
        bool speech = name.rfind("frontend.", 0) == 0 || name.rfind("speech.", 0) == 0;
        if (speech) {
            CHECK(t->value == before[name]);
        }
    }
    // the decoder did move
    CHECK(m.p("dec.l0.ffn1.W")->value != before["dec.l0.ffn1.W"]);
}

TEST_CASE("beam search: width one is greedy; width five finds the argmax of "
          "short sequences") {
    Model m = Model::init(tiny_dims(5), 17);
    EncoderOutput e = m.embed_text({3, 4});

    // greedy reference
    std::vector<int64_t> greedy;
    {
        std::vector<int64_t> prefix;
        for (int step = 0; step < 4; ++step) {
            ForwardResult fr = m.translate_forward(e, prefix);
            int64_t t = static_cast<int64_t>(prefix.size());
            int64_t best = 0;
            const double* row = &fr.log_probs->value[t * 5];
            for (int64_t c = 1; c < 5; ++c)
                if (row[c] > row[best]) best = c;
            if (best == 1) break;  // EOS
            prefix.push_back(best);
        }
        greedy = prefix;
    }
    CHECK(m.beam_decode(e, 1, 4) == greedy);

    // exhaustive search over all sequences up to length 3 under the
    // length-normalized score beam_decode optimizes
    auto score_of = [&](const std::vector<int64_t>& seq) {
        ForwardResult fr = m.translate_forward(e, seq);
        double lp = 0.0;
        for (size_t t = 0; t < seq.size(); ++t)
            lp += fr.log_probs->value[t * 5 + seq[t]];
        lp += fr.log_probs->value[seq.size() * 5 + 1];  // EOS
        return lp / (static_cast<double>(seq.size()) + 1.0);
    };
    std::vector<int64_t> best_seq;
    double best_score = -1e300;
    std::vector<std::vector<int64_t>> pool = {{}};
    for (int len = 0; len <= 3; ++len) {
        std::vector<std::vector<int64_t>> next;
        for (const auto& seq : pool) {
            if (static_cast<int>(seq.size()) == len) {
                double s = score_of(seq);
                if (s > best_score) {
                    best_score = s;
                    best_seq = seq;
                }
                for (int64_t c = 2; c < 5; ++c) {
                    auto ext = seq;
                    ext.push_back(c);
                    next.push_back(ext);
                }
            }
        }
        pool = next;
    }
    std::vector<int64_t> beam = m.beam_decode(e, 5 * 5 * 5, 3);
    ForwardResult fr = m.translate_forward(e, beam);
    double beam_score = 0.0;
    for (size_t t = 0; t < beam.size(); ++t)
        beam_score += fr.log_probs->value[t * 5 + beam[t]];
    beam_score += fr.log_probs->value[beam.size() * 5 + 1];
    beam_score /= static_cast<double>(beam.size()) + 1.0;
    CHECK(beam_score == doctest::Approx(best_score).epsilon(1e-9));
}

TEST_CASE("Adam decreases the training loss on a fixed batch") {
    Model m = Model::init(tiny_dims(9), 11);
    Adam opt;
    opt.lr = 5e-3;
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 30; ++step) {
        ForwardResult fr = m.translate_forward(m.embed_text({3, 4, 5}), {6, 7});
        if (step == 0) first = fr.ce->value[0];
        last = fr.ce->value[0];
        backward(fr.ce);
        opt.step(m);
    }
    CHECK(last < first);
}
