#pragma once

// Evaluation: BLEU-4 (corpus and smoothed sentence level), linear CKA, and
// speech-text alignment cosine, with CSV report emission.

#include <string>
#include <vector>

#include "cmrt/corpus.hpp"
#include "cmrt/model.hpp"

namespace cmrt {

// scores in [0,100]; corpus level aggregates n-gram counts unsmoothed,
// sentence level applies floor smoothing (eps = 0.1) to zero precisions
double corpus_bleu(const std::vector<std::vector<std::string>>& hyps,
                   const std::vector<std::vector<std::string>>& refs);
double sentence_bleu(const std::vector<std::string>& hyp,
                     const std::vector<std::string>& ref);

// rows of X and Y are paired observations; columns are centered internally
double linear_cka(const std::vector<std::vector<double>>& x,
                  const std::vector<std::vector<double>>& y);

// mean cosine of pooled (f_s, f_t) word pairs over a dataset
double alignment_cosine(const Model& model, const Vocab& vocab,
                        const std::vector<AlignedUtterance>& utts,
                        int max_piece_len);

// sentence-mean of the final translation-encoder output for the speech path;
// feeds linear_cka between two models
std::vector<std::vector<double>> sentence_mean_representations(
    const Model& model, const std::vector<AlignedUtterance>& utts);

struct SimilarityReport {
    std::string model;
    std::string dataset;
    double bleu = 0.0;
    double mean_cosine = 0.0;
    double cka_vs_ref = -1.0;   // negative means not computed
    double lambda_kl = -1.0;    // negative means not applicable
    uint64_t seed = 0;
};

// deterministic CSV, fixed column order:
// model,dataset,bleu,mean_cosine,cka_vs_ref,lambda_kl,seed
void emit_report(const std::vector<SimilarityReport>& reports,
                 const std::string& path);

}  // namespace cmrt
