#pragma once

// CMRT training objectives: word-level pooling, contrastive alignment loss,
// mixup and adversarial mixup construction, KL consistency terms, and the
// combined training (TR) and robustness fine-tuning (FN) losses.

#include <functional>
#include <vector>

#include "cmrt/corpus.hpp"
#include "cmrt/model.hpp"
#include "cmrt/tensor.hpp"

namespace cmrt {

struct PooledWordPair {
    Tensor f_s;  // mean-pooled speech representation
    Tensor f_t;  // mean-pooled text representation
    int64_t word = 0;
};

enum class SegmentTag { Speech, Text, AdvText };

struct MixupSegment {
    int64_t word = 0;
    SegmentTag tag = SegmentTag::Speech;
    Tensor block;
};

struct MixupSequence {
    std::vector<MixupSegment> segments;
    Tensor concatenated;  // segments joined in word order
};

struct TrainConfig {
    double tau = 0.2;
    double p_star = 0.8;
    double lambda_ctr = 1.0;
    double lambda_kl = 2.0;
    double lr = 1e-3;
    int batch_size = 8;
    int beam = 5;
    uint64_t seed = 0;
    bool use_mixup = true;  // ablation switch; also disables the KL terms
};

enum class KlMode { Sym, Asym };

// uniform [0,1) draw source; tests replay recorded sequences through it
using DrawFn = std::function<double()>;
DrawFn draws_from_rng(Rng& rng);

// speech spans mapped through the encoder's downsampling (text spans kept)
std::vector<WordAlignment> encoder_alignments(const std::vector<WordAlignment>& in,
                                              int64_t a_len, int64_t e_len);

std::vector<PooledWordPair> pool_word_reps(const Tensor& a, const Tensor& e,
                                           const std::vector<WordAlignment>& aligns);

Tensor contrastive_loss(const std::vector<PooledWordPair>& pairs, double tau);

MixupSequence build_mixup(const Tensor& a, const Tensor& e,
                          const std::vector<WordAlignment>& aligns, double p_star,
                          const DrawFn& draw);

// adv_aligns give each word's span into e_adv; adv_indices is the attacked
// index set
MixupSequence build_adversarial_mixup(const Tensor& a, const Tensor& e_clean,
                                      const Tensor& e_adv,
                                      const std::vector<WordAlignment>& aligns,
                                      const std::vector<WordAlignment>& adv_aligns,
                                      const std::vector<int64_t>& adv_indices,
                                      double p_star, const DrawFn& draw);

// per-position KL over matching log-distributions, averaged over positions.
// Asym computes D_KL(P||Q) with P the clean-path teacher; detach_teacher
// treats P as a constant.
Tensor kl_divergence(const Tensor& log_p, const Tensor& log_q, KlMode mode,
                     bool detach_teacher = false);

struct BatchItem {
    const AlignedUtterance* utt = nullptr;
    // adversarial transcript for FN; empty adv_words means unattacked
    std::vector<std::string> adv_words;
    std::vector<int64_t> adv_indices;
};

struct LossBreakdown {
    Tensor total;
    double st = 0, mt = 0, ctr = 0, mix = 0, kl_ms = 0, kl_mx = 0;
};

LossBreakdown cmrt_tr_loss(const Model& model, const Vocab& vocab,
                           const std::vector<BatchItem>& batch,
                           const TrainConfig& cfg, const DrawFn& draw,
                           int max_piece_len);

LossBreakdown cmrt_fn_loss(const Model& model, const Vocab& vocab,
                           const std::vector<BatchItem>& batch,
                           const TrainConfig& cfg, const DrawFn& draw,
                           int max_piece_len);

}  // namespace cmrt
