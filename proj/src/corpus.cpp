#include "cmrt/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include <json.hpp>

namespace cmrt {

using json = nlohmann::ordered_json;

// ---- subwords ----

SubwordSplit split_subwords(const std::vector<std::string>& words,
                            int max_piece_len) {
    if (max_piece_len < 2) throw Error("split_subwords: max_piece_len must be >= 2");
    SubwordSplit out;
    for (const auto& w : words) {
        int64_t lo = static_cast<int64_t>(out.pieces.size());
        for (size_t i = 0; i < w.size(); i += max_piece_len) {
            std::string piece = w.substr(i, max_piece_len);
            if (i > 0) piece = "+" + piece;
            out.pieces.push_back(piece);
        }
        if (w.empty()) out.pieces.push_back("");
        out.spans.emplace_back(lo, static_cast<int64_t>(out.pieces.size()));
    }
    return out;
}

std::vector<std::string> detokenize(const std::vector<std::string>& pieces) {
    std::vector<std::string> words;
    for (const auto& p : pieces) {
        if (!p.empty() && p[0] == '+' && !words.empty())
            words.back() += p.substr(1);
        else
            words.push_back(p);
    }
    return words;
}

// ---- vocabulary ----

int64_t Vocab::id(const std::string& piece) const {
    auto it = to_id.find(piece);
    return it == to_id.end() ? unk : it->second;
}

Vocab build_vocab(const InflectionLexicon& lex, int max_piece_len) {
    std::set<std::string> pieces;
    for (const auto& [word, entry] : lex.entries) {
        for (const auto& w : {word, translate_word(word)}) {
            auto split = split_subwords({w}, max_piece_len);
            pieces.insert(split.pieces.begin(), split.pieces.end());
        }
    }
    Vocab v;
    v.to_str = {"<s>", "</s>", "<unk>"};
    for (const auto& p : pieces) v.to_str.push_back(p);
    for (size_t i = 0; i < v.to_str.size(); ++i)
        v.to_id[v.to_str[i]] = static_cast<int64_t>(i);
    return v;
}

std::vector<int64_t> tokenize_words(const std::vector<std::string>& words,
                                    const Vocab& vocab, int max_piece_len) {
    std::vector<int64_t> ids;
    for (const auto& p : split_subwords(words, max_piece_len).pieces)
        ids.push_back(vocab.id(p));
    return ids;
}

// ---- toy language ----

namespace {

const std::vector<std::string> kVerbs = {"walk", "jump", "call", "help", "paint",
                                         "climb", "dance", "play", "pull", "watch"};
const std::vector<std::string> kNouns = {"cat", "dog", "bird", "fish", "horse",
                                         "tree", "rock", "lake", "star", "wolf"};
const std::vector<std::string> kAdjs = {"big", "small", "fast", "slow", "dark",
                                        "tall"};
const std::vector<std::string> kOthers = {"the", "a", "near", "with"};

std::vector<std::string> verb_forms(const std::string& lemma) {
    std::string stem = lemma;
    bool final_e = !stem.empty() && stem.back() == 'e';
    std::string ing_stem = final_e ? stem.substr(0, stem.size() - 1) : stem;
    return {lemma, lemma + "s", final_e ? lemma + "d" : lemma + "ed",
            ing_stem + "ing"};
}

std::vector<std::string> noun_forms(const std::string& lemma) {
    return {lemma, lemma + "s"};
}

std::vector<std::string> adj_forms(const std::string& lemma) {
    return {lemma, lemma + "er", lemma + "est"};
}

// 24-symbol inventory; letters map onto it (c/q collapse to k, x to s)
std::vector<std::string> grapheme_to_phoneme(const std::string& word) {
    static const std::unordered_map<char, std::string> kMap = {
        {'a', "aa"}, {'b', "b"}, {'c', "k"},  {'d', "d"}, {'e', "ae"}, {'f', "f"},
        {'g', "g"},  {'h', "h"}, {'i', "iy"}, {'j', "j"}, {'k', "k"},  {'l', "l"},
        {'m', "m"},  {'n', "n"}, {'o', "ow"}, {'p', "p"}, {'q', "k"},  {'r', "r"},
        {'s', "s"},  {'t', "t"}, {'u', "uw"}, {'v', "v"}, {'w', "w"},  {'x', "s"},
        {'y', "y"},  {'z', "z"}};
    std::vector<std::string> out;
    for (char c : word) {
        auto it = kMap.find(c);
        if (it == kMap.end())
            throw Error("grapheme_to_phoneme: unmapped character in '" + word + "'");
        out.push_back(it->second);
    }
    return out;
}

void add_paradigm(InflectionLexicon& lex, const std::string& lemma, Pos pos,
                  const std::vector<std::string>& forms) {
    for (const auto& f : forms) {
        LexEntry e;
        e.lemma = lemma;
        e.pos = pos;
        e.inflections = forms;
        lex.entries[f] = e;
        lex.phonemes[f] = grapheme_to_phoneme(f);
    }
}

}  // namespace

InflectionLexicon make_toy_lexicon() {
    InflectionLexicon lex;
    for (const auto& v : kVerbs) add_paradigm(lex, v, Pos::Verb, verb_forms(v));
    for (const auto& n : kNouns) add_paradigm(lex, n, Pos::Noun, noun_forms(n));
    for (const auto& a : kAdjs) add_paradigm(lex, a, Pos::Adj, adj_forms(a));
    for (const auto& o : kOthers) add_paradigm(lex, o, Pos::Other, {o});
    // designed homophone pairs: spoken forms identical to the base word,
    // exercising the phoneme filter
    lex.phonemes["paints"] = lex.phonemes["paint"];
    lex.phonemes["taller"] = lex.phonemes["tall"];
    lex.validate();
    return lex;
}

std::string translate_word(const std::string& src) {
    return std::string(src.rbegin(), src.rend());
}

std::vector<std::string> translate_sentence(const std::vector<std::string>& words,
                                            const InflectionLexicon& lex) {
    std::vector<std::string> out, verbs;
    for (const auto& w : words) {
        if (lex.pos_of(w) == Pos::Verb)
            verbs.push_back(translate_word(w));
        else
            out.push_back(translate_word(w));
    }
    out.insert(out.end(), verbs.begin(), verbs.end());
    return out;
}

// ---- speech synthesis ----

SpeechSynthesizer::SpeechSynthesizer(const InflectionLexicon& lex, SynthSpec spec,
                                     uint64_t seed)
    : lex_(lex), spec_(spec) {
    std::set<std::string> inv;
    for (const auto& [word, ph] : lex.phonemes) inv.insert(ph.begin(), ph.end());
    inventory_.assign(inv.begin(), inv.end());
    for (size_t i = 0; i < inventory_.size(); ++i) {
        Rng rng(hash_seed(seed, 0xF0A0 + i));
        std::vector<double> v(spec_.d_in);
        double norm = 0.0;
        for (auto& x : v) {
            x = rng.normal();
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (auto& x : v) x /= norm;  // unit-norm base vectors
        base_[inventory_[i]] = v;
    }
}

const std::vector<double>& SpeechSynthesizer::base_vector(
    const std::string& phoneme) const {
    auto it = base_.find(phoneme);
    if (it == base_.end()) throw Error("unknown phoneme symbol '" + phoneme + "'");
    return it->second;
}

Synthesis SpeechSynthesizer::synthesize(const std::vector<std::string>& words,
                                        uint64_t utt_seed) const {
    Synthesis out;
    int d = spec_.d_in;
    // per-element bound keeps the noise vector norm at or below
    // noise_amplitude * ||base||, so nearest-base classification never flips
    double amp = spec_.noise_amplitude / std::sqrt(static_cast<double>(d));
    for (size_t wi = 0; wi < words.size(); ++wi) {
        Rng rng(hash_seed(utt_seed, wi));
        int64_t lo = out.num_frames;
        for (const auto& ph : lex_.phonemes_of(words[wi])) {
            const auto& bv = base_vector(ph);
            int64_t count = rng.randint(spec_.frames_min, spec_.frames_max);
            for (int64_t f = 0; f < count; ++f) {
                for (int j = 0; j < d; ++j)
                    out.frames.push_back(bv[j] + amp * (2.0 * rng.uniform() - 1.0));
                ++out.num_frames;
            }
        }
        out.spans.emplace_back(lo, out.num_frames);
    }
    return out;
}

// ---- generation ----

AlignedUtterance make_utterance(int64_t id, const std::vector<std::string>& words,
                                const InflectionLexicon& lex,
                                const SpeechSynthesizer& synth, uint64_t utt_seed) {
    AlignedUtterance u;
    u.id = id;
    u.src_words = words;
    u.tgt_words = translate_sentence(words, lex);
    Synthesis syn = synth.synthesize(words, utt_seed);
    u.frames = std::move(syn.frames);
    u.num_frames = syn.num_frames;
    auto split = split_subwords(words, synth.spec().max_piece_len);
    for (size_t i = 0; i < words.size(); ++i) {
        WordAlignment a;
        a.word = static_cast<int64_t>(i);
        a.speech_lo = syn.spans[i].first;
        a.speech_hi = syn.spans[i].second;
        a.text_lo = split.spans[i].first;
        a.text_hi = split.spans[i].second;
        u.alignments.push_back(a);
    }
    return u;
}

namespace {

std::vector<std::string> sample_sentence(Rng& rng, const InflectionLexicon& lex) {
    auto pick = [&](const std::vector<std::string>& v) {
        return v[rng.randint(0, static_cast<int64_t>(v.size()) - 1)];
    };
    auto pick_form = [&](const std::vector<std::string>& lemmas) {
        const auto& forms = lex.entries.at(pick(lemmas)).inflections;
        return pick(forms);
    };
    std::vector<std::string> s;
    auto noun_phrase = [&](bool allow_adj) {
        if (rng.uniform() < 0.8) s.push_back(rng.uniform() < 0.5 ? "the" : "a");
        if (allow_adj && rng.uniform() < 0.4) s.push_back(pick_form(kAdjs));
        s.push_back(pick_form(kNouns));
    };
    noun_phrase(true);
    s.push_back(pick_form(kVerbs));
    noun_phrase(true);
    if (rng.uniform() < 0.3) {
        s.push_back(rng.uniform() < 0.5 ? "near" : "with");
        noun_phrase(false);
    }
    return s;
}

}  // namespace

SpeechSynthesizer make_corpus_synth(const InflectionLexicon& lex,
                                    const SynthSpec& spec, uint64_t corpus_seed) {
    return SpeechSynthesizer(lex, spec, hash_seed(corpus_seed, 0x5EEC));
}

uint64_t utterance_seed(uint64_t corpus_seed, int64_t id) {
    return hash_seed(corpus_seed, static_cast<uint64_t>(id));
}

Corpus generate_corpus(const InflectionLexicon& lex, const SynthSpec& spec,
                       int64_t n, uint64_t seed) {
    if (n < 30) throw Error("generate_corpus: n must be >= 30");
    SpeechSynthesizer synth = make_corpus_synth(lex, spec, seed);
    Corpus c;
    int64_t n_train = n * 8 / 10;
    int64_t n_dev = n / 10;
    for (int64_t id = 0; id < n; ++id) {
        uint64_t utt_seed = utterance_seed(seed, id);
        Rng rng(hash_seed(utt_seed, 0x7E47));
        std::vector<std::string> words = sample_sentence(rng, lex);
        AlignedUtterance u = make_utterance(id, words, lex, synth, utt_seed);
        if (id < n_train)
            c.train.push_back(std::move(u));
        else if (id < n_train + n_dev)
            c.dev.push_back(std::move(u));
        else
            c.test.push_back(std::move(u));
    }
    return c;
}

std::pair<int64_t, int64_t> downsample_span(int64_t lo, int64_t hi) {
    return {lo / 4, (hi + 3) / 4};
}

// ---- persistence ----

namespace {
constexpr char kFramesMagic[8] = {'C', 'M', 'R', 'T', 'F', 'R', 'M', '1'};
}

void write_split(const std::string& prefix, const std::vector<AlignedUtterance>& utts,
                 int d_in) {
    std::ofstream rec(prefix + ".jsonl");
    if (!rec) throw Error("cannot open '" + prefix + ".jsonl' for writing");
    std::ofstream bin(prefix + ".frames", std::ios::binary);
    if (!bin) throw Error("cannot open '" + prefix + ".frames' for writing");
    bin.write(kFramesMagic, 8);
    for (const auto& u : utts) {
        json j;
        j["id"] = u.id;
        j["x"] = u.src_words;
        j["y"] = u.tgt_words;
        json align = json::array();
        for (const auto& a : u.alignments)
            align.push_back({a.speech_lo, a.speech_hi, a.text_lo, a.text_hi});
        j["align"] = align;
        rec << j.dump() << '\n';

        uint64_t id = static_cast<uint64_t>(u.id);
        uint64_t t = static_cast<uint64_t>(u.num_frames);
        uint64_t d = static_cast<uint64_t>(d_in);
        bin.write(reinterpret_cast<const char*>(&id), 8);
        bin.write(reinterpret_cast<const char*>(&t), 8);
        bin.write(reinterpret_cast<const char*>(&d), 8);
        bin.write(reinterpret_cast<const char*>(u.frames.data()),
                  static_cast<std::streamsize>(u.frames.size() * sizeof(double)));
    }
}

std::vector<AlignedUtterance> read_split(const std::string& prefix, int d_in) {
    std::ifstream rec(prefix + ".jsonl");
    if (!rec) throw Error("cannot open corpus file '" + prefix + ".jsonl'");
    std::ifstream bin(prefix + ".frames", std::ios::binary);
    if (!bin) throw Error("cannot open frames sidecar '" + prefix + ".frames'");
    char magic[8];
    if (!bin.read(magic, 8) || !std::equal(magic, magic + 8, kFramesMagic))
        throw Error("frames sidecar '" + prefix + ".frames' has a bad header");

    std::vector<AlignedUtterance> utts;
    std::string line;
    int lineno = 0;
    while (std::getline(rec, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const std::exception&) {
            throw Error("malformed corpus record at line " + std::to_string(lineno));
        }
        if (!j.contains("id") || !j.contains("x") || !j.contains("y") ||
            !j.contains("align"))
            throw Error("malformed corpus record at line " + std::to_string(lineno));
        AlignedUtterance u;
        u.id = j["id"].get<int64_t>();
        u.src_words = j["x"].get<std::vector<std::string>>();
        u.tgt_words = j["y"].get<std::vector<std::string>>();
        for (const auto& a : j["align"]) {
            WordAlignment w;
            w.word = static_cast<int64_t>(u.alignments.size());
            w.speech_lo = a[0].get<int64_t>();
            w.speech_hi = a[1].get<int64_t>();
            w.text_lo = a[2].get<int64_t>();
            w.text_hi = a[3].get<int64_t>();
            u.alignments.push_back(w);
        }
        uint64_t id, t, d;
        if (!bin.read(reinterpret_cast<char*>(&id), 8) ||
            !bin.read(reinterpret_cast<char*>(&t), 8) ||
            !bin.read(reinterpret_cast<char*>(&d), 8))
            throw Error("truncated frames sidecar before utterance " +
                        std::to_string(u.id));
        if (static_cast<int64_t>(id) != u.id || d != static_cast<uint64_t>(d_in))
            throw Error("frames sidecar mismatch at utterance " + std::to_string(u.id));
        u.num_frames = static_cast<int64_t>(t);
        u.frames.resize(t * d);
        if (!bin.read(reinterpret_cast<char*>(u.frames.data()),
                      static_cast<std::streamsize>(u.frames.size() * sizeof(double))))
            throw Error("truncated frames sidecar at utterance " + std::to_string(u.id));
        utts.push_back(std::move(u));
    }
    return utts;
}

}  // namespace cmrt
