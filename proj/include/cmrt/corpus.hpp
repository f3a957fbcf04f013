#pragma once

// Synthetic bilingual corpus with deterministic phoneme-based speech
// synthesis and exact word-level speech/text alignments.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cmrt/common.hpp"
#include "cmrt/lexicon.hpp"

namespace cmrt {

struct SynthSpec {
    int d_in = 16;
    int frames_min = 2;
    int frames_max = 4;
    double noise_amplitude = 0.1;  // fraction of base-vector norm
    int min_words = 3;
    int max_words = 10;
    int max_piece_len = 3;
};

// word index i covers frames [speech_lo, speech_hi) of s and subword pieces
// [text_lo, text_hi) of the transcript piece sequence
struct WordAlignment {
    int64_t word = 0;
    int64_t speech_lo = 0, speech_hi = 0;
    int64_t text_lo = 0, text_hi = 0;
};

struct AlignedUtterance {
    int64_t id = 0;
    std::vector<std::string> src_words;
    std::vector<std::string> tgt_words;
    std::vector<double> frames;  // T x d_in, row-major
    int64_t num_frames = 0;
    std::vector<WordAlignment> alignments;
};

struct Corpus {
    std::vector<AlignedUtterance> train, dev, test;
};

// ---- subwords ----
// Deterministic fixed-width chunking; continuation pieces carry a '+' prefix.
struct SubwordSplit {
    std::vector<std::string> pieces;
    std::vector<std::pair<int64_t, int64_t>> spans;  // piece span per word
};
SubwordSplit split_subwords(const std::vector<std::string>& words,
                            int max_piece_len);
std::vector<std::string> detokenize(const std::vector<std::string>& pieces);

// ---- vocabulary over subword pieces of all source and target forms ----
struct Vocab {
    std::unordered_map<std::string, int64_t> to_id;
    std::vector<std::string> to_str;
    int64_t bos = 0, eos = 1, unk = 2;

    int64_t id(const std::string& piece) const;
    int64_t size() const { return static_cast<int64_t>(to_str.size()); }
};
Vocab build_vocab(const InflectionLexicon& lex, int max_piece_len);
std::vector<int64_t> tokenize_words(const std::vector<std::string>& words,
                                    const Vocab& vocab, int max_piece_len);

// ---- toy language ----
InflectionLexicon make_toy_lexicon();
std::string translate_word(const std::string& src);
// word-for-word mapping plus the verb-final reordering rule
std::vector<std::string> translate_sentence(const std::vector<std::string>& words,
                                            const InflectionLexicon& lex);

// ---- speech synthesis ----
struct Synthesis {
    std::vector<double> frames;
    int64_t num_frames = 0;
    std::vector<std::pair<int64_t, int64_t>> spans;  // frame span per word
};

class SpeechSynthesizer {
  public:
    SpeechSynthesizer(const InflectionLexicon& lex, SynthSpec spec, uint64_t seed);

    // deterministic per (tokens, utterance seed); per-word sub-seeds so a
    // single replaced word perturbs only its own frame block
    Synthesis synthesize(const std::vector<std::string>& words,
                         uint64_t utt_seed) const;

    const std::vector<std::string>& phoneme_inventory() const { return inventory_; }
    const std::vector<double>& base_vector(const std::string& phoneme) const;
    const SynthSpec& spec() const { return spec_; }

  private:
    InflectionLexicon lex_;  // owned copy; the synthesizer must outlive any
                             // reference it could otherwise hold
    SynthSpec spec_;
    std::vector<std::string> inventory_;
    std::unordered_map<std::string, std::vector<double>> base_;
};

// ---- generation ----
AlignedUtterance make_utterance(int64_t id, const std::vector<std::string>& words,
                                const InflectionLexicon& lex,
                                const SpeechSynthesizer& synth, uint64_t utt_seed);
// disjoint 80/10/10 splits; n >= 30
Corpus generate_corpus(const InflectionLexicon& lex, const SynthSpec& spec,
                       int64_t n, uint64_t seed);

// the synthesizer and per-utterance seeds used by generate_corpus, exposed
// so resynthesis (adversarial speech) reproduces generation bit-exactly
SpeechSynthesizer make_corpus_synth(const InflectionLexicon& lex,
                                    const SynthSpec& spec, uint64_t corpus_seed);
uint64_t utterance_seed(uint64_t corpus_seed, int64_t id);

// span transform after the encoder's two stride-2 blocks (round outward)
std::pair<int64_t, int64_t> downsample_span(int64_t lo, int64_t hi);

// ---- persistence ----
// records: <prefix>.jsonl, frames sidecar: <prefix>.frames (versioned binary)
void write_split(const std::string& prefix, const std::vector<AlignedUtterance>& utts,
                 int d_in);
std::vector<AlignedUtterance> read_split(const std::string& prefix, int d_in);

}  // namespace cmrt
