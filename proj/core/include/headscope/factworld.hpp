#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "headscope/errors.hpp"

namespace headscope {

// Word-level tokenizer: one id per entity/template word. Id 0 is padding
// (never generated), id 1 is the reserved corruption token.
struct Tokenizer {
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;

    std::vector<std::string> id_to_tok;
    std::unordered_map<std::string, int> tok_to_id;

    Tokenizer();

    int add(const std::string& word);          // returns existing id if present
    int id(const std::string& word) const;     // DataError if unknown
    const std::string& token(int id) const;    // DataError if out of range
    int size() const { return int(id_to_tok.size()); }

    std::vector<int> encode(const std::string& text) const; // whitespace split
    std::string decode(const std::vector<int>& ids) const;  // space joined
};

enum class Form { triple, document, dual_context };
std::string form_name(Form f);
Form form_from_name(const std::string& s);

enum class CorruptMode { mask_attribute, mask_subject };
std::string corrupt_mode_name(CorruptMode m);
CorruptMode corrupt_mode_from_name(const std::string& s);

// Input elements of a conflict prompt. The first six follow the usual
// decomposition (context subject/relation/attribute, question subject/
// relation, last token); a_support is the supporting-context attribute that
// only dual-context examples carry.
enum class Element { s_c = 0, r_c, a_c, s_q, r_q, x_n, a_support };
constexpr int kNumElements = 7;
std::string element_name(Element e);
Element element_from_name(const std::string& s);

struct TokenRange {
    int begin = 0;
    int end = 0; // half-open
    int size() const { return end - begin; }
    bool operator==(const TokenRange&) const = default;
};

struct ConflictExample {
    std::vector<int> tokens;
    // Per element, zero or more disjoint ranges (document/dual forms repeat
    // the subject and relation; a keyword-free paraphrase has no r_c at all).
    std::array<std::vector<TokenRange>, kNumElements> ranges;
    int a_m = -1; // memory attribute token id
    int a_c = -1; // context attribute token id
    Form form = Form::triple;

    const std::vector<TokenRange>& ranges_of(Element e) const {
        return ranges[size_t(e)];
    }
    bool has_element(Element e) const { return !ranges_of(e).empty(); }
    int length() const { return int(tokens.size()); }
};

// Synthetic universe of (subject, relation) -> attribute facts plus the
// counterfactual attribute used to build conflicts. Entity names embed the
// seed, so worlds from different seeds share no tokens.
struct FactWorld {
    uint64_t seed = 0;
    Tokenizer tok;
    std::vector<std::string> subjects;
    std::vector<std::string> relations;
    std::map<std::string, std::vector<std::string>> attributes;              // relation -> values
    std::map<std::string, std::map<std::string, std::string>> facts;         // relation -> subject -> a_m
    std::map<std::string, std::map<std::string, std::string>> counterfacts;  // relation -> subject -> a_c
};

// Known relations: capital, language, country, continent.
const std::vector<std::string>& known_relations();

FactWorld gen_world(int n_subjects, const std::vector<std::string>& relations,
                    int n_attributes, uint64_t seed);

// Render one conflict prompt. For document form, `salt` picks one of the four
// paraphrase variants; other forms ignore it.
ConflictExample render(const FactWorld& world, const std::string& subject,
                       const std::string& relation, Form form, uint64_t salt = 0);

// One example per subject of the world, document variants cycling by index.
std::vector<ConflictExample> make_dataset(const FactWorld& world,
                                          const std::string& relation, Form form);

// mask-attribute: every a_c token -> unk; mask-subject: every s_c and s_q
// token -> unk. Length and ranges preserved; idempotent.
ConflictExample corrupt(const ConflictExample& ex, CorruptMode mode);

void write_world(const FactWorld& world, const std::string& path);
FactWorld read_world(const std::string& path);

// JSON-lines, one example per line: {tokens, ranges, a_m, a_c, form}.
void write_dataset(const std::vector<ConflictExample>& ds, const std::string& path);
std::vector<ConflictExample> read_dataset(const std::string& path);

} // namespace headscope
