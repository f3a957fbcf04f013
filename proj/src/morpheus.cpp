#include "cmrt/morpheus.hpp"

#include <fstream>

#include <json.hpp>

#include "cmrt/analysis.hpp"

namespace cmrt {

using json = nlohmann::ordered_json;

std::vector<Pos> tag_pos(const std::vector<std::string>& tokens,
                         const InflectionLexicon& lex) {
    std::vector<Pos> tags;
    tags.reserve(tokens.size());
    for (const auto& t : tokens) tags.push_back(lex.pos_of(t));
    return tags;
}

std::vector<std::string> candidate_inflections(const std::string& word,
                                               const InflectionLexicon& lex) {
    auto it = lex.entries.find(word);
    if (it == lex.entries.end() || it->second.pos == Pos::Other) return {};
    std::vector<std::string> out;
    for (const auto& inf : it->second.inflections) {
        if (inf != word) out.push_back(inf);
    }
    return out;
}

std::vector<std::string> filter_homophones(const std::string& original,
                                           const std::vector<std::string>& candidates,
                                           const InflectionLexicon& lex) {
    const auto& orig_ph = lex.phonemes_of(original);
    std::vector<std::string> out;
    for (const auto& c : candidates) {
        if (lex.phonemes_of(c) != orig_ph) out.push_back(c);
    }
    return out;
}

AdversarialText greedy_attack(const std::vector<std::string>& tokens,
                              const VictimScorer& victim,
                              const InflectionLexicon& lex) {
    AdversarialText adv;
    adv.original = tokens;
    adv.perturbed = tokens;
    adv.score_before = victim(tokens);
    double running = adv.score_before;
    for (size_t i = 0; i < tokens.size(); ++i) {
        auto candidates =
            filter_homophones(tokens[i], candidate_inflections(tokens[i], lex), lex);
        if (candidates.empty()) continue;
        // ties keep the original, then the first candidate in lexicon order
        std::string best_word;
        double best = running;
        for (const auto& c : candidates) {
            std::vector<std::string> trial = adv.perturbed;
            trial[i] = c;
            double s;
            try {
                s = victim(trial);
            } catch (const Error& e) {
                throw Error("victim scorer failed at position " + std::to_string(i) +
                            ": " + e.what());
            }
            if (s < best) {
                best = s;
                best_word = c;
            }
        }
        if (!best_word.empty()) {
            adv.perturbed[i] = best_word;
            adv.indices.push_back(static_cast<int64_t>(i));
            adv.replacements.emplace_back(tokens[i], best_word);
            running = best;
        }
    }
    adv.score_after = running;
    return adv;
}

AdversarialUtterance speech_morpheus(const AlignedUtterance& utt,
                                     const VictimScorer& victim,
                                     const InflectionLexicon& lex,
                                     const SpeechSynthesizer& synth,
                                     uint64_t utt_seed) {
    AdversarialUtterance out;
    out.text = greedy_attack(utt.src_words, victim, lex);
    out.utt = make_utterance(utt.id, out.text.perturbed, lex, synth, utt_seed);
    out.utt.tgt_words = utt.tgt_words;  // original reference preserved
    return out;
}

VictimScorer make_bleu_victim(const Model& model, const Vocab& vocab,
                              const std::vector<std::string>& ref_words,
                              int beam, int max_len, int max_piece_len) {
    const Model* m = &model;
    const Vocab* v = &vocab;
    std::vector<std::string> ref = ref_words;
    return [m, v, ref, beam, max_len, max_piece_len](
               const std::vector<std::string>& transcript) {
        EncoderOutput e = m->embed_text(tokenize_words(transcript, *v, max_piece_len));
        std::vector<int64_t> hyp_ids = m->beam_decode(e, beam, max_len);
        std::vector<std::string> pieces;
        for (int64_t id : hyp_ids) pieces.push_back(v->to_str[id]);
        return sentence_bleu(detokenize(pieces), ref);
    };
}

VictimScorer make_nll_victim(const Model& model, const Vocab& vocab,
                             const std::vector<std::string>& ref_words,
                             int max_piece_len) {
    const Model* m = &model;
    const Vocab* v = &vocab;
    std::vector<int64_t> ref_ids = tokenize_words(ref_words, vocab, max_piece_len);
    return [m, v, ref_ids, max_piece_len](const std::vector<std::string>& transcript) {
        EncoderOutput e = m->embed_text(tokenize_words(transcript, *v, max_piece_len));
        ForwardResult fr = m->translate_forward(e, ref_ids);
        return -fr.ce->value[0];  // minimize mean log-prob of the reference
    };
}

void write_attack_report(
    const std::string& path,
    const std::vector<std::pair<int64_t, AdversarialText>>& records) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open attack report '" + path + "' for writing");
    for (const auto& [id, adv] : records) {
        json j;
        j["id"] = id;
        j["x"] = adv.original;
        j["x_adv"] = adv.perturbed;
        j["indices"] = adv.indices;
        j["score_before"] = adv.score_before;
        j["score_after"] = adv.score_after;
        out << j.dump() << '\n';
    }
}

std::vector<std::pair<int64_t, AdversarialText>> read_attack_report(
    const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open attack report '" + path + "'");
    std::vector<std::pair<int64_t, AdversarialText>> records;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const std::exception&) {
            throw Error("malformed attack record at line " + std::to_string(lineno));
        }
        AdversarialText adv;
        adv.original = j.at("x").get<std::vector<std::string>>();
        adv.perturbed = j.at("x_adv").get<std::vector<std::string>>();
        adv.indices = j.at("indices").get<std::vector<int64_t>>();
        adv.score_before = j.at("score_before").get<double>();
        adv.score_after = j.at("score_after").get<double>();
        for (int64_t i : adv.indices)
            adv.replacements.emplace_back(adv.original[i], adv.perturbed[i]);
        records.emplace_back(j.at("id").get<int64_t>(), std::move(adv));
    }
    return records;
}

}  // namespace cmrt
