#include "cmrt/analysis.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "cmrt/objectives.hpp"

namespace cmrt {

namespace {

constexpr int kMaxOrder = 4;

struct NgramCounts {
    // matched and total n-gram counts per order, plus lengths
    int64_t correct[kMaxOrder] = {0, 0, 0, 0};
    int64_t total[kMaxOrder] = {0, 0, 0, 0};
    int64_t hyp_len = 0;
    int64_t ref_len = 0;
};

NgramCounts count_ngrams(const std::vector<std::string>& hyp,
                         const std::vector<std::string>& ref) {
    NgramCounts c;
    c.hyp_len = static_cast<int64_t>(hyp.size());
    c.ref_len = static_cast<int64_t>(ref.size());
    for (int n = 1; n <= kMaxOrder; ++n) {
        std::map<std::string, int64_t> ref_grams;
        for (size_t i = 0; n <= static_cast<int>(ref.size()) &&
                           i + n <= ref.size(); ++i) {
            std::string g;
            for (int k = 0; k < n; ++k) g += ref[i + k] + "\x01";
            ++ref_grams[g];
        }
        for (size_t i = 0; n <= static_cast<int>(hyp.size()) &&
                           i + n <= hyp.size(); ++i) {
            std::string g;
            for (int k = 0; k < n; ++k) g += hyp[i + k] + "\x01";
            ++c.total[n - 1];
            auto it = ref_grams.find(g);
            if (it != ref_grams.end() && it->second > 0) {
                --it->second;
                ++c.correct[n - 1];
            }
        }
    }
    return c;
}

double bleu_from_counts(const NgramCounts& c, bool smooth) {
    if (c.hyp_len == 0) return 0.0;
    double log_prec = 0.0;
    for (int n = 0; n < kMaxOrder; ++n) {
        double p;
        if (c.correct[n] > 0) {
            p = static_cast<double>(c.correct[n]) / static_cast<double>(c.total[n]);
        } else if (!smooth) {
            return 0.0;
        } else {
            p = 0.1 / static_cast<double>(std::max<int64_t>(1, c.total[n]));
        }
        log_prec += std::log(p);
    }
    double bp = 1.0;
    if (c.hyp_len < c.ref_len)
        bp = std::exp(1.0 - static_cast<double>(c.ref_len) /
                                static_cast<double>(c.hyp_len));
    return 100.0 * bp * std::exp(log_prec / kMaxOrder);
}

}  // namespace

double corpus_bleu(const std::vector<std::vector<std::string>>& hyps,
                   const std::vector<std::vector<std::string>>& refs) {
    if (hyps.size() != refs.size())
        throw Error("corpus_bleu: hypothesis/reference count mismatch");
    NgramCounts agg;
    for (size_t i = 0; i < hyps.size(); ++i) {
        NgramCounts c = count_ngrams(hyps[i], refs[i]);
        for (int n = 0; n < kMaxOrder; ++n) {
            agg.correct[n] += c.correct[n];
            agg.total[n] += c.total[n];
        }
        agg.hyp_len += c.hyp_len;
        agg.ref_len += c.ref_len;
    }
    return bleu_from_counts(agg, false);
}

double sentence_bleu(const std::vector<std::string>& hyp,
                     const std::vector<std::string>& ref) {
    return bleu_from_counts(count_ngrams(hyp, ref), true);
}

double linear_cka(const std::vector<std::vector<double>>& x,
                  const std::vector<std::vector<double>>& y) {
    size_t n = x.size();
    if (n < 2 || y.size() != n)
        throw Error("linear_cka: need >= 2 paired rows");
    Eigen::MatrixXd X(n, x[0].size()), Y(n, y[0].size());
    for (size_t i = 0; i < n; ++i) {
        if (x[i].size() != x[0].size() || y[i].size() != y[0].size())
            throw Error("linear_cka: ragged input rows");
        for (size_t j = 0; j < x[i].size(); ++j) X(i, j) = x[i][j];
        for (size_t j = 0; j < y[i].size(); ++j) Y(i, j) = y[i][j];
    }
    X.rowwise() -= X.colwise().mean();
    Y.rowwise() -= Y.colwise().mean();
    double cross = (X.transpose() * Y).squaredNorm();
    double nx = (X.transpose() * X).norm();
    double ny = (Y.transpose() * Y).norm();
    if (nx == 0.0 || ny == 0.0)
        throw Error("linear_cka: degenerate input (zero Gram norm)");
    return cross / (nx * ny);
}

double alignment_cosine(const Model& model, const Vocab& vocab,
                        const std::vector<AlignedUtterance>& utts,
                        int max_piece_len) {
    double sum = 0.0;
    int64_t count = 0;
    for (const auto& u : utts) {
        Tensor raw = make_tensor({u.num_frames, model.dims.d_in}, u.frames);
        EncoderOutput a = model.encode_speech(raw);
        EncoderOutput e =
            model.embed_text(tokenize_words(u.src_words, vocab, max_piece_len));
        auto aligns = encoder_alignments(u.alignments, a.frames->shape[0],
                                         e.frames->shape[0]);
        for (const auto& pair : pool_word_reps(a.frames, e.frames, aligns)) {
            sum += cosine_similarity(pair.f_s, pair.f_t)->value[0];
            ++count;
        }
    }
    if (count == 0) throw Error("alignment_cosine: no word pairs");
    return sum / static_cast<double>(count);
}

std::vector<std::vector<double>> sentence_mean_representations(
    const Model& model, const std::vector<AlignedUtterance>& utts) {
    std::vector<std::vector<double>> rows;
    rows.reserve(utts.size());
    for (const auto& u : utts) {
        Tensor raw = make_tensor({u.num_frames, model.dims.d_in}, u.frames);
        EncoderOutput a = model.encode_speech(raw);
        Tensor memory = model.translation_encode(a.frames);
        Tensor mean = mean_pool_rows(memory);
        rows.push_back(mean->value);
    }
    return rows;
}

void emit_report(const std::vector<SimilarityReport>& reports,
                 const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open report path '" + path + "' for writing");
    out << "model,dataset,bleu,mean_cosine,cka_vs_ref,lambda_kl,seed\n";
    char buf[64];
    auto fmt = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        return std::string(buf);
    };
    for (const auto& r : reports) {
        out << r.model << ',' << r.dataset << ',' << fmt(r.bleu) << ','
            << fmt(r.mean_cosine) << ','
            << (r.cka_vs_ref < 0 ? "" : fmt(r.cka_vs_ref)) << ','
            << (r.lambda_kl < 0 ? "" : fmt(r.lambda_kl)) << ',' << r.seed << '\n';
    }
}

}  // namespace cmrt
