#include "cmrt/objectives.hpp"

#include <algorithm>
#include <set>

namespace cmrt {

DrawFn draws_from_rng(Rng& rng) {
    Rng* r = &rng;
    return [r]() { return r->uniform(); };
}

std::vector<WordAlignment> encoder_alignments(const std::vector<WordAlignment>& in,
                                              int64_t a_len, int64_t e_len) {
    std::vector<WordAlignment> out;
    out.reserve(in.size());
    for (const auto& al : in) {
        WordAlignment d = al;
        auto [lo, hi] = downsample_span(al.speech_lo, al.speech_hi);
        d.speech_lo = lo;
        d.speech_hi = std::min(hi, a_len);
        if (d.speech_hi <= d.speech_lo || d.text_hi > e_len)
            throw Error("encoder_alignments: span out of range for word " +
                        std::to_string(al.word));
        out.push_back(d);
    }
    return out;
}

std::vector<PooledWordPair> pool_word_reps(const Tensor& a, const Tensor& e,
                                           const std::vector<WordAlignment>& aligns) {
    std::vector<PooledWordPair> pairs;
    pairs.reserve(aligns.size());
    for (const auto& al : aligns) {
        if (al.speech_hi > a->shape[0] || al.text_hi > e->shape[0] ||
            al.speech_lo >= al.speech_hi || al.text_lo >= al.text_hi)
            throw Error("pool_word_reps: span out of range for word " +
                        std::to_string(al.word));
        PooledWordPair p;
        p.word = al.word;
        p.f_s = mean_pool_rows(slice_rows(a, al.speech_lo, al.speech_hi));
        p.f_t = mean_pool_rows(slice_rows(e, al.text_lo, al.text_hi));
        pairs.push_back(std::move(p));
    }
    return pairs;
}

Tensor contrastive_loss(const std::vector<PooledWordPair>& pairs, double tau) {
    if (pairs.empty()) throw Error("contrastive_loss: empty batch");
    if (tau <= 0) throw Error("contrastive_loss: temperature must be positive");
    int64_t n = static_cast<int64_t>(pairs.size());
    std::vector<Tensor> rows;
    std::vector<int64_t> labels(n);
    rows.reserve(n);
    for (int64_t i = 0; i < n; ++i) {
        std::vector<Tensor> cells;
        cells.reserve(n);
        for (int64_t j = 0; j < n; ++j)
            cells.push_back(
                reshape(cosine_similarity(pairs[i].f_s, pairs[j].f_t), {1, 1}));
        rows.push_back(concat(cells, 1));
        labels[i] = i;
    }
    Tensor scores = scalar_mul(concat(rows, 0), 1.0 / tau);
    return cross_entropy_with_logits(scores, labels);
}

MixupSequence build_mixup(const Tensor& a, const Tensor& e,
                          const std::vector<WordAlignment>& aligns, double p_star,
                          const DrawFn& draw) {
    MixupSequence seq;
    std::vector<Tensor> blocks;
    for (const auto& al : aligns) {
        double p = draw();
        MixupSegment seg;
        seg.word = al.word;
        if (p < p_star) {
            seg.tag = SegmentTag::Speech;
            seg.block = slice_rows(a, al.speech_lo, al.speech_hi);
        } else {
            seg.tag = SegmentTag::Text;
            seg.block = slice_rows(e, al.text_lo, al.text_hi);
        }
        blocks.push_back(seg.block);
        seq.segments.push_back(std::move(seg));
    }
    seq.concatenated = concat(blocks, 0);
    return seq;
}

MixupSequence build_adversarial_mixup(const Tensor& a, const Tensor& e_clean,
                                      const Tensor& e_adv,
                                      const std::vector<WordAlignment>& aligns,
                                      const std::vector<WordAlignment>& adv_aligns,
                                      const std::vector<int64_t>& adv_indices,
                                      double p_star, const DrawFn& draw) {
    std::set<int64_t> attacked(adv_indices.begin(), adv_indices.end());
    MixupSequence seq;
    std::vector<Tensor> blocks;
    for (const auto& al : aligns) {
        MixupSegment seg;
        seg.word = al.word;
        if (attacked.count(al.word)) {
            if (al.word >= static_cast<int64_t>(adv_aligns.size()))
                throw Error("build_adversarial_mixup: no adversarial span for word " +
                            std::to_string(al.word));
            const auto& aal = adv_aligns[al.word];
            seg.tag = SegmentTag::AdvText;
            seg.block = slice_rows(e_adv, aal.text_lo, aal.text_hi);
        } else {
            double p = draw();
            if (p < p_star) {
                seg.tag = SegmentTag::Speech;
                seg.block = slice_rows(a, al.speech_lo, al.speech_hi);
            } else {
                seg.tag = SegmentTag::Text;
                seg.block = slice_rows(e_clean, al.text_lo, al.text_hi);
            }
        }
        blocks.push_back(seg.block);
        seq.segments.push_back(std::move(seg));
    }
    seq.concatenated = concat(blocks, 0);
    return seq;
}

Tensor kl_divergence(const Tensor& log_p, const Tensor& log_q, KlMode mode,
                     bool detach_teacher) {
    if (log_p->shape != log_q->shape)
        throw Error("kl_divergence: length mismatch between distributions");
    Tensor p = detach_teacher ? detach(log_p) : log_p;
    if (mode == KlMode::Asym) return kl_from_log_probs(p, log_q);
    return add(kl_from_log_probs(p, log_q), kl_from_log_probs(log_q, p));
}

namespace {

struct ItemTensors {
    EncoderOutput a;  // speech encoder output
    EncoderOutput e;  // text embeddings
    std::vector<WordAlignment> aligns;  // spans valid against a and e
    std::vector<int64_t> tgt_ids;
};

ItemTensors prepare_item(const Model& model, const Vocab& vocab,
                         const AlignedUtterance& utt, int max_piece_len) {
    ItemTensors it;
    Tensor raw = make_tensor({utt.num_frames, model.dims.d_in}, utt.frames);
    it.a = model.encode_speech(raw);
    it.e = model.embed_text(tokenize_words(utt.src_words, vocab, max_piece_len));
    it.aligns = encoder_alignments(utt.alignments, it.a.frames->shape[0],
                                   it.e.frames->shape[0]);
    it.tgt_ids = tokenize_words(utt.tgt_words, vocab, max_piece_len);
    return it;
}

Tensor batch_mean(const std::vector<Tensor>& terms) {
    Tensor sum = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) sum = add(sum, terms[i]);
    return scalar_mul(sum, 1.0 / static_cast<double>(terms.size()));
}

}  // namespace

LossBreakdown cmrt_tr_loss(const Model& model, const Vocab& vocab,
                           const std::vector<BatchItem>& batch,
                           const TrainConfig& cfg, const DrawFn& draw,
                           int max_piece_len) {
    if (batch.empty()) throw Error("cmrt_tr_loss: empty batch");
    std::vector<Tensor> st_terms, mt_terms, mix_terms, kl_ms_terms, kl_mx_terms;
    std::vector<PooledWordPair> all_pairs;
    for (const auto& item : batch) {
        ItemTensors it = prepare_item(model, vocab, *item.utt, max_piece_len);
        ForwardResult st = model.translate_forward(it.a, it.tgt_ids);
        ForwardResult mt = model.translate_forward(it.e, it.tgt_ids);
        st_terms.push_back(st.ce);
        mt_terms.push_back(mt.ce);
        if (cfg.lambda_ctr > 0.0) {
            auto pairs = pool_word_reps(it.a.frames, it.e.frames, it.aligns);
            all_pairs.insert(all_pairs.end(), pairs.begin(), pairs.end());
        }
        if (cfg.use_mixup) {
            MixupSequence m = build_mixup(it.a.frames, it.e.frames, it.aligns,
                                          cfg.p_star, draw);
            ForwardResult mx = model.translate_forward(
                {m.concatenated, Modality::Mixup}, it.tgt_ids);
            mix_terms.push_back(mx.ce);
            kl_ms_terms.push_back(
                kl_divergence(st.log_probs, mx.log_probs, KlMode::Sym));
            kl_mx_terms.push_back(
                kl_divergence(mt.log_probs, mx.log_probs, KlMode::Sym));
        }
    }
    LossBreakdown out;
    Tensor st = batch_mean(st_terms);
    Tensor mt = batch_mean(mt_terms);
    out.st = st->value[0];
    out.mt = mt->value[0];
    Tensor total = add(st, mt);
    if (cfg.lambda_ctr > 0.0) {
        Tensor ctr = contrastive_loss(all_pairs, cfg.tau);
        out.ctr = ctr->value[0];
        total = add(total, scalar_mul(ctr, cfg.lambda_ctr));
    }
    if (cfg.use_mixup) {
        Tensor mix = batch_mean(mix_terms);
        Tensor kl_ms = batch_mean(kl_ms_terms);
        Tensor kl_mx = batch_mean(kl_mx_terms);
        out.mix = mix->value[0];
        out.kl_ms = kl_ms->value[0];
        out.kl_mx = kl_mx->value[0];
        total = add(total, mix);
        total = add(total, scalar_mul(add(kl_ms, kl_mx), cfg.lambda_kl * 0.5));
    }
    out.total = total;
    return out;
}

LossBreakdown cmrt_fn_loss(const Model& model, const Vocab& vocab,
                           const std::vector<BatchItem>& batch,
                           const TrainConfig& cfg, const DrawFn& draw,
                           int max_piece_len) {
    if (batch.empty()) throw Error("cmrt_fn_loss: empty batch");
    std::vector<Tensor> st_terms, mt_terms, mix_terms, kl_ms_terms, kl_mx_terms;
    for (const auto& item : batch) {
        ItemTensors it = prepare_item(model, vocab, *item.utt, max_piece_len);
        ForwardResult st = model.translate_forward(it.a, it.tgt_ids);
        ForwardResult mt = model.translate_forward(it.e, it.tgt_ids);
        st_terms.push_back(st.ce);
        mt_terms.push_back(mt.ce);

        const std::vector<std::string>& adv_words =
            item.adv_words.empty() ? item.utt->src_words : item.adv_words;
        EncoderOutput e_adv = model.embed_text(
            tokenize_words(adv_words, vocab, max_piece_len));
        auto adv_split = split_subwords(adv_words, max_piece_len);
        std::vector<WordAlignment> adv_aligns;
        for (size_t i = 0; i < adv_words.size(); ++i) {
            WordAlignment al;
            al.word = static_cast<int64_t>(i);
            al.text_lo = adv_split.spans[i].first;
            al.text_hi = adv_split.spans[i].second;
            adv_aligns.push_back(al);
        }
        MixupSequence m = build_adversarial_mixup(
            it.a.frames, it.e.frames, e_adv.frames, it.aligns, adv_aligns,
            item.adv_indices, cfg.p_star, draw);
        ForwardResult mx = model.translate_forward(
            {m.concatenated, Modality::Mixup}, it.tgt_ids);
        mix_terms.push_back(mx.ce);
        // clean-path teachers are constants; gradients flow only through the
        // adversarial mixup path
        kl_ms_terms.push_back(
            kl_divergence(st.log_probs, mx.log_probs, KlMode::Asym, true));
        kl_mx_terms.push_back(
            kl_divergence(mt.log_probs, mx.log_probs, KlMode::Asym, true));
    }
    LossBreakdown out;
    Tensor st = batch_mean(st_terms);
    Tensor mt = batch_mean(mt_terms);
    Tensor mix = batch_mean(mix_terms);
    Tensor kl_ms = batch_mean(kl_ms_terms);
    Tensor kl_mx = batch_mean(kl_mx_terms);
    out.st = st->value[0];
    out.mt = mt->value[0];
    out.mix = mix->value[0];
    out.kl_ms = kl_ms->value[0];
    out.kl_mx = kl_mx->value[0];
    Tensor total = add(add(st, mt), mix);
    total = add(total, scalar_mul(add(kl_ms, kl_mx), cfg.lambda_kl * 0.5));
    out.total = total;
    return out;
}

}  // namespace cmrt
