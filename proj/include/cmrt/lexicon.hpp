#pragma once

// Inflection lexicon: word -> (lemma, POS, same-POS inflection set) plus a
// total word -> phoneme-sequence map. Shared between corpus generation and
// the attack. TSV format, one row per word:
//   word \t lemma \t POS \t comma-joined inflections \t space-joined phonemes

#include <map>
#include <string>
#include <vector>

namespace cmrt {

enum class Pos { Verb, Noun, Adj, Other };

std::string pos_name(Pos p);
Pos pos_from_name(const std::string& s);

struct LexEntry {
    std::string lemma;
    Pos pos = Pos::Other;
    std::vector<std::string> inflections;  // all surface forms of the lemma, in order
};

struct InflectionLexicon {
    std::map<std::string, LexEntry> entries;
    std::map<std::string, std::vector<std::string>> phonemes;

    const std::vector<std::string>& phonemes_of(const std::string& word) const;
    Pos pos_of(const std::string& word) const;  // unknown -> Other
    // checks lemma closure and phoneme totality
    void validate() const;
};

void write_lexicon_tsv(const InflectionLexicon& lex, const std::string& path);
InflectionLexicon read_lexicon_tsv(const std::string& path);

}  // namespace cmrt
