#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cmrt/analysis.hpp"
#include "cmrt/corpus.hpp"
#include "cmrt/model.hpp"

using namespace cmrt;
namespace fs = std::filesystem;

namespace {

using Sent = std::vector<std::string>;

// independent corpus BLEU-4 written against the textbook definition:
// clipped modified n-gram precision, geometric mean, brevity penalty
double reference_corpus_bleu(const std::vector<Sent>& hyps,
                             const std::vector<Sent>& refs) {
    long double correct[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0};
    long double hyp_len = 0, ref_len = 0;
    for (size_t s = 0; s < hyps.size(); ++s) {
        hyp_len += hyps[s].size();
        ref_len += refs[s].size();
        for (int n = 1; n <= 4; ++n) {
            std::map<Sent, long long> rg, hg;
            for (size_t i = 0; i + n <= refs[s].size(); ++i)
                ++rg[Sent(refs[s].begin() + i, refs[s].begin() + i + n)];
            for (size_t i = 0; i + n <= hyps[s].size(); ++i)
                ++hg[Sent(hyps[s].begin() + i, hyps[s].begin() + i + n)];
            for (const auto& [g, cnt] : hg) {
                total[n - 1] += cnt;
                auto it = rg.find(g);
                if (it != rg.end())
                    correct[n - 1] += std::min<long long>(cnt, it->second);
            }
        }
    }
    long double logsum = 0;
    for (int n = 0; n < 4; ++n) {
        if (correct[n] == 0) return 0.0;
        logsum += std::log(correct[n] / total[n]);
    }
    long double bp =
        hyp_len < ref_len ? std::exp(1.0L - ref_len / hyp_len) : 1.0L;
    return static_cast<double>(100.0L * bp * std::exp(logsum / 4.0L));
}

// direct centered-HSIC form of linear CKA:
// HSIC(K,L) = tr(KHLH)/(n-1)^2 with K = X X^T, L = Y Y^T, H the centerer
double reference_cka(const std::vector<std::vector<double>>& x,
                     const std::vector<std::vector<double>>& y) {
    size_t n = x.size();
    auto gram = [n](const std::vector<std::vector<double>>& m) {
        std::vector<std::vector<double>> k(n, std::vector<double>(n, 0.0));
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < n; ++j)
                for (size_t d = 0; d < m[i].size(); ++d)
                    k[i][j] += m[i][d] * m[j][d];
        return k;
    };
    auto center = [n](std::vector<std::vector<double>> k) {
        std::vector<double> row(n, 0.0), col(n, 0.0);
        double all = 0.0;
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < n; ++j) {
                row[i] += k[i][j];
                col[j] += k[i][j];
                all += k[i][j];
            }
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < n; ++j)
                k[i][j] += -row[i] / n - col[j] / n + all / (n * n);
        return k;
    };
    auto hsic = [n](const std::vector<std::vector<double>>& a,
                    const std::vector<std::vector<double>>& b) {
        double t = 0.0;
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < n; ++j) t += a[i][j] * b[j][i];
        return t;
    };
    auto kc = center(gram(x));
    auto lc = center(gram(y));
    return hsic(kc, lc) / std::sqrt(hsic(kc, kc) * hsic(lc, lc));
}

std::vector<std::vector<double>> random_mat(size_t n, size_t d, uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<double>> m(n, std::vector<double>(d));
    for (auto& row : m)
        for (double& v : row) v = rng.normal();
    return m;
}

}  // namespace

TEST_CASE("corpus BLEU matches an independent reference on 10 hand-built pairs") {
    std::vector<std::pair<std::vector<Sent>, std::vector<Sent>>> cases = {
        {{{"a", "b", "c", "d"}}, {{"a", "b", "c", "d"}}},
        {{{"a", "b", "c", "d", "e"}}, {{"a", "b", "c", "d"}}},
        {{{"a", "b", "c", "d"}}, {{"a", "b", "c", "d", "e"}}},
        {{{"a", "b", "x", "d", "e"}}, {{"a", "b", "c", "d", "e"}}},
        {{{"the", "cat", "sat", "on", "the", "mat"}},
         {{"the", "cat", "sat", "on", "a", "mat"}}},
        {{{"a", "a", "a", "a", "a"}}, {{"a", "a", "b", "c", "d"}}},
        {{{"x", "y", "z", "w"}}, {{"a", "b", "c", "d"}}},
        {{{"a", "b", "c", "d"}, {"e", "f", "g", "h"}},
         {{"a", "b", "c", "d"}, {"e", "f", "g", "x"}}},
        {{{"p", "q", "r", "s", "t", "u"}, {"a", "b"}},
         {{"p", "q", "r", "s", "t", "u"}, {"a", "b"}}},
        {{{"one", "two", "three", "four", "five"},
          {"six", "seven", "eight", "nine"}},
         {{"one", "two", "four", "three", "five"},
          {"six", "seven", "eight", "nine", "ten"}}},
    };
    for (size_t i = 0; i < cases.size(); ++i) {
        INFO("case " << i);
        double got = corpus_bleu(cases[i].first, cases[i].second);
        double want = reference_corpus_bleu(cases[i].first, cases[i].second);
        CHECK(std::abs(got - want) < 0.01);
    }
}

TEST_CASE("corpus BLEU endpoints: identity is 100, zero overlap is 0") {
    std::vector<Sent> hyps = {{"a", "b", "c", "d"}, {"e", "f", "g", "h", "i"}};
    CHECK(corpus_bleu(hyps, hyps) == doctest::Approx(100.0).epsilon(1e-12));
    std::vector<Sent> refs = {{"x", "y", "z", "w"}, {"q", "r", "s", "t", "u"}};
    CHECK(corpus_bleu(hyps, refs) == 0.0);
    CHECK_THROWS_AS((void)corpus_bleu(hyps, {{"a"}}), Error);
}

TEST_CASE("sentence BLEU floors zero precisions instead of vanishing") {
    double s = sentence_bleu({"a", "b"}, {"a", "b"});
    CHECK(s > 0.0);   // 3- and 4-gram counts are empty but smoothed
    CHECK(s < 100.0);
    CHECK(sentence_bleu({"a", "b", "c", "d"}, {"a", "b", "c", "d"}) ==
          doctest::Approx(100.0).epsilon(1e-12));
    // smoothing makes the score strictly monotone in overlap here
    double lo = sentence_bleu({"x", "b", "c"}, {"a", "b", "c"});
    double hi = sentence_bleu({"a", "b", "c"}, {"a", "b", "c"});
    CHECK(lo < hi);
}

TEST_CASE("CKA: self-similarity, symmetry, invariances") {
    auto x = random_mat(6, 4, 1);
    auto y = random_mat(6, 3, 2);
    CHECK(std::abs(linear_cka(x, x) - 1.0) < 1e-10);
    CHECK(std::abs(linear_cka(x, y) - linear_cka(y, x)) < 1e-10);

    // isotropic scaling invariance
    auto xs = x;
    for (auto& row : xs)
        for (double& v : row) v *= 3.7;
    CHECK(std::abs(linear_cka(x, y) - linear_cka(xs, y)) < 1e-10);

    // orthogonal (rotation) invariance in feature space: 2-D rotation applied
    // to the first two columns
    auto xr = x;
    double c = std::cos(0.6), s = std::sin(0.6);
    for (size_t i = 0; i < xr.size(); ++i) {
        double a = x[i][0], b = x[i][1];
        xr[i][0] = c * a - s * b;
        xr[i][1] = s * a + c * b;
    }
    CHECK(std::abs(linear_cka(x, y) - linear_cka(xr, y)) < 1e-10);

    // values live in [0, 1]
    double v = linear_cka(x, y);
    CHECK(v >= -1e-12);
    CHECK(v <= 1.0 + 1e-12);
}

TEST_CASE("CKA equals brute-force centered HSIC on 20 random 5x3 instances") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        auto x = random_mat(5, 3, seed);
        auto y = random_mat(5, 3, seed + 1000);
        CHECK(std::abs(linear_cka(x, y) - reference_cka(x, y)) < 1e-10);
    }
}

TEST_CASE("CKA rejects degenerate input") {
    std::vector<std::vector<double>> flat(4, std::vector<double>(3, 2.0));
    auto y = random_mat(4, 3, 3);
    CHECK_THROWS_AS((void)linear_cka(flat, y), Error);
    CHECK_THROWS_AS((void)linear_cka(y, random_mat(5, 3, 4)), Error);
}

TEST_CASE("alignment cosine is deterministic and bounded") {
    InflectionLexicon lex = make_toy_lexicon();
    SynthSpec spec;
    spec.d_in = 6;
    Corpus c = generate_corpus(lex, spec, 30, 9);
    Vocab vocab = build_vocab(lex, spec.max_piece_len);
    ModelDims dims;
    dims.d_in = 6;
    dims.d = 8;
    dims.heads = 2;
    dims.ffn = 12;
    dims.n_speech = 1;
    dims.n_enc = 1;
    dims.n_dec = 1;
    dims.vocab = vocab.size();
    Model m = Model::init(dims, 3);
    double v1 = alignment_cosine(m, vocab, c.dev, spec.max_piece_len);
    double v2 = alignment_cosine(m, vocab, c.dev, spec.max_piece_len);
    CHECK(v1 == v2);
    CHECK(v1 >= -1.0);
    CHECK(v1 <= 1.0);
    auto reps = sentence_mean_representations(m, c.dev);
    CHECK(reps.size() == c.dev.size());
    CHECK(reps[0].size() == 8);
}

TEST_CASE("report CSV has the pinned column order and formatting") {
    SimilarityReport r;
    r.model = "tr";
    r.dataset = "test";
    r.bleu = 12.345678;
    r.mean_cosine = 0.5;
    r.cka_vs_ref = -1.0;
    r.lambda_kl = 2.0;
    r.seed = 3;
    fs::path p = fs::temp_directory_path() / "cmrt_report.csv";
    emit_report({r}, p.string());
    std::ifstream in(p.string());
    std::string header, line;
    std::getline(in, header);
    std::getline(in, line);
    CHECK(header == "model,dataset,bleu,mean_cosine,cka_vs_ref,lambda_kl,seed");
    CHECK(line == "tr,test,12.345678,0.500000,,2.000000,3");
}
