#include "cmrt/lexicon.hpp"

#include <fstream>
#include <sstream>

#include "cmrt/common.hpp"

namespace cmrt {

std::string pos_name(Pos p) {
    switch (p) {
        case Pos::Verb: return "VERB";
        case Pos::Noun: return "NOUN";
        case Pos::Adj: return "ADJ";
        default: return "OTHER";
    }
}

Pos pos_from_name(const std::string& s) {
    if (s == "VERB") return Pos::Verb;
    if (s == "NOUN") return Pos::Noun;
    if (s == "ADJ") return Pos::Adj;
    if (s == "OTHER") return Pos::Other;
    throw Error("unknown POS tag '" + s + "'");
}

const std::vector<std::string>& InflectionLexicon::phonemes_of(
    const std::string& word) const {
    auto it = phonemes.find(word);
    if (it == phonemes.end())
        throw Error("missing phoneme entry for word '" + word + "'");
    return it->second;
}

Pos InflectionLexicon::pos_of(const std::string& word) const {
    auto it = entries.find(word);
    return it == entries.end() ? Pos::Other : it->second.pos;
}

void InflectionLexicon::validate() const {
    for (const auto& [word, entry] : entries) {
        if (!phonemes.count(word))
            throw Error("lexicon word '" + word + "' has no phoneme entry");
        for (const auto& inf : entries.at(word).inflections) {
            auto it = entries.find(inf);
            if (it == entries.end())
                throw Error("inflection '" + inf + "' of '" + word +
                            "' is not itself a lexicon entry");
            if (it->second.lemma != entry.lemma)
                throw Error("inflection '" + inf + "' of '" + word +
                            "' maps to a different lemma");
        }
    }
}

namespace {
std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}
}  // namespace

void write_lexicon_tsv(const InflectionLexicon& lex, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    for (const auto& [word, entry] : lex.entries) {
        out << word << '\t' << entry.lemma << '\t' << pos_name(entry.pos) << '\t';
        for (size_t i = 0; i < entry.inflections.size(); ++i) {
            if (i) out << ',';
            out << entry.inflections[i];
        }
        out << '\t';
        const auto& ph = lex.phonemes_of(word);
        for (size_t i = 0; i < ph.size(); ++i) {
            if (i) out << ' ';
            out << ph[i];
        }
        out << '\n';
    }
}

InflectionLexicon read_lexicon_tsv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open lexicon file '" + path + "'");
    InflectionLexicon lex;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = split_on(line, '\t');
        if (fields.size() != 5)
            throw Error("malformed lexicon row at line " + std::to_string(lineno));
        LexEntry entry;
        entry.lemma = fields[1];
        entry.pos = pos_from_name(fields[2]);
        entry.inflections = split_on(fields[3], ',');
        lex.entries[fields[0]] = entry;
        lex.phonemes[fields[0]] = split_on(fields[4], ' ');
    }
    lex.validate();
    return lex;
}

}  // namespace cmrt
