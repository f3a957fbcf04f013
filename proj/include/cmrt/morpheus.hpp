#pragma once

// Speech-MORPHEUS: POS-constrained greedy inflectional attack on transcripts
// with a phoneme-identity (homophone) filter. The text attack feeds
// robustness fine-tuning; resynthesized adversarial speech feeds evaluation
// and the adversarial-speech baseline.

#include <functional>
#include <string>
#include <vector>

#include "cmrt/corpus.hpp"
#include "cmrt/lexicon.hpp"
#include "cmrt/model.hpp"

namespace cmrt {

struct AdversarialText {
    std::vector<std::string> original;
    std::vector<std::string> perturbed;
    std::vector<int64_t> indices;  // positions where a replacement won
    std::vector<std::pair<std::string, std::string>> replacements;
    double score_before = 0.0;
    double score_after = 0.0;
};

// maps a transcript to a real victim score; the attack minimizes it
using VictimScorer = std::function<double(const std::vector<std::string>&)>;

std::vector<Pos> tag_pos(const std::vector<std::string>& tokens,
                         const InflectionLexicon& lex);

// same-POS inflections of the word's lemma, excluding the word itself;
// empty for OTHER-tagged words
std::vector<std::string> candidate_inflections(const std::string& word,
                                               const InflectionLexicon& lex);

std::vector<std::string> filter_homophones(const std::string& original,
                                           const std::vector<std::string>& candidates,
                                           const InflectionLexicon& lex);

AdversarialText greedy_attack(const std::vector<std::string>& tokens,
                              const VictimScorer& victim,
                              const InflectionLexicon& lex);

struct AdversarialUtterance {
    AlignedUtterance utt;  // x~, resynthesized s~, original y, fresh alignments
    AdversarialText text;
};

AdversarialUtterance speech_morpheus(const AlignedUtterance& utt,
                                     const VictimScorer& victim,
                                     const InflectionLexicon& lex,
                                     const SpeechSynthesizer& synth,
                                     uint64_t utt_seed);

// default victim objective: smoothed sentence BLEU of the MT-path
// translation against the reference (lower is worse for the victim)
VictimScorer make_bleu_victim(const Model& model, const Vocab& vocab,
                              const std::vector<std::string>& ref_words,
                              int beam, int max_len, int max_piece_len);
// alternative objective: maximize reference NLL (scorer returns the mean
// log-probability of the reference, so minimizing it maximizes the loss)
VictimScorer make_nll_victim(const Model& model, const Vocab& vocab,
                             const std::vector<std::string>& ref_words,
                             int max_piece_len);

// attack report: one JSON record per utterance with x, x~, indices, scores
void write_attack_report(const std::string& path,
                         const std::vector<std::pair<int64_t, AdversarialText>>& records);
std::vector<std::pair<int64_t, AdversarialText>> read_attack_report(
    const std::string& path);

}  // namespace cmrt
