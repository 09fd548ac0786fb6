#include "headscope/factworld.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

namespace headscope {

using nlohmann::json;

Tokenizer::Tokenizer() {
    add("<pad>");
    add("<unk>");
}

int Tokenizer::add(const std::string& word) {
    auto it = tok_to_id.find(word);
    if (it != tok_to_id.end()) return it->second;
    const int id = int(id_to_tok.size());
    id_to_tok.push_back(word);
    tok_to_id.emplace(word, id);
    return id;
}

int Tokenizer::id(const std::string& word) const {
    auto it = tok_to_id.find(word);
    if (it == tok_to_id.end()) throw DataError("unknown token '" + word + "'");
    return it->second;
}

const std::string& Tokenizer::token(int id) const {
    if (id < 0 || id >= size()) throw DataError("token id out of range");
    return id_to_tok[size_t(id)];
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> out;
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) out.push_back(id(w));
    return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += token(ids[i]);
    }
    return out;
}

std::string form_name(Form f) {
    switch (f) {
        case Form::triple: return "triple";
        case Form::document: return "document";
        case Form::dual_context: return "dual-context";
    }
    throw DataError("bad form value");
}

Form form_from_name(const std::string& s) {
    if (s == "triple") return Form::triple;
    if (s == "document") return Form::document;
    if (s == "dual-context") return Form::dual_context;
    throw DataError("unknown form '" + s + "'");
}

std::string corrupt_mode_name(CorruptMode m) {
    return m == CorruptMode::mask_attribute ? "mask-attribute" : "mask-subject";
}

CorruptMode corrupt_mode_from_name(const std::string& s) {
    if (s == "mask-attribute") return CorruptMode::mask_attribute;
    if (s == "mask-subject") return CorruptMode::mask_subject;
    throw DataError("unknown corruption mode '" + s + "'");
}

static const std::array<std::string, kNumElements> kElementNames = {
    "s_c", "r_c", "a_c", "s_q", "r_q", "x_n", "a_support"};

std::string element_name(Element e) { return kElementNames[size_t(e)]; }

Element element_from_name(const std::string& s) {
    for (int i = 0; i < kNumElements; ++i)
        if (kElementNames[size_t(i)] == s) return Element(i);
    throw DataError("unknown element '" + s + "'");
}

namespace {

// Prompt template of one relation. "<S>"/"<A>" mark the subject and attribute
// slots; rc/rq are the relation spans inside ctx and q.
struct Tmpl {
    std::vector<std::string> ctx;
    int rc_begin, rc_end;
    std::vector<std::string> q;
    int rq_begin, rq_end;
};

const std::map<std::string, Tmpl>& templates() {
    static const std::map<std::string, Tmpl> t = {
        {"capital",
         {{"The", "capital", "of", "<S>", "is", "<A>", "."}, 1, 3,
          {"Q", ":", "What", "is", "the", "capital", "of", "<S>", "?", "A", ":"}, 5, 7}},
        {"language",
         {{"The", "official", "language", "of", "<S>", "is", "<A>", "."}, 1, 4,
          {"Q", ":", "What", "is", "the", "official", "language", "of", "<S>", "?", "A", ":"}, 5, 8}},
        {"country",
         {{"<S>", "is", "located", "in", "<A>", "."}, 1, 4,
          {"Q", ":", "Which", "country", "is", "<S>", "located", "in", "?", "A", ":"}, 6, 8}},
        {"continent",
         {{"<S>", "is", "in", "the", "continent", "of", "<A>", "."}, 1, 6,
          {"Q", ":", "Which", "continent", "is", "<S>", "in", "?", "A", ":"}, 3, 4}},
    };
    return t;
}

// Document paraphrase frames wrapped around the triple context clause.
// Variant 2 replaces the clause with a keyword-free phrasing (empty r_c).
const std::vector<std::string>& doc_frame_words() {
    static const std::vector<std::string> w = {
        "According", "to", "the", "report", ",", "This", "fact", "is", "well",
        "documented", "Everyone", "knows", "this", "has", "as", "its", "known",
        "value", "Many", "dispute", "it", "states", ":"};
    return w;
}

struct RangeSet {
    std::array<std::vector<TokenRange>, kNumElements> r;
    void push(Element e, int begin, int end) {
        r[size_t(e)].push_back({begin, end});
    }
};

// Append template words, resolving markers; records s_c/a_c (or the elements
// given) and the relation span at `rel_elem`.
void emit_clause(const FactWorld& world, const Tmpl& t, const std::string& subject,
                 const std::string& attr, Element subj_elem, Element attr_elem,
                 std::vector<int>& out, RangeSet& rs) {
    const int base = int(out.size());
    for (size_t i = 0; i < t.ctx.size(); ++i) {
        const std::string& w = t.ctx[i];
        if (w == "<S>") {
            rs.push(subj_elem, base + int(i), base + int(i) + 1);
            out.push_back(world.tok.id(subject));
        } else if (w == "<A>") {
            rs.push(attr_elem, base + int(i), base + int(i) + 1);
            out.push_back(world.tok.id(attr));
        } else {
            out.push_back(world.tok.id(w));
        }
    }
    if (t.rc_end > t.rc_begin)
        rs.push(Element::r_c, base + t.rc_begin, base + t.rc_end);
}

void emit_question(const FactWorld& world, const Tmpl& t, const std::string& subject,
                   std::vector<int>& out, RangeSet& rs) {
    const int base = int(out.size());
    for (size_t i = 0; i < t.q.size(); ++i) {
        const std::string& w = t.q[i];
        if (w == "<S>") {
            rs.push(Element::s_q, base + int(i), base + int(i) + 1);
            out.push_back(world.tok.id(subject));
        } else {
            out.push_back(world.tok.id(w));
        }
    }
    rs.push(Element::r_q, base + t.rq_begin, base + t.rq_end);
    rs.push(Element::x_n, int(out.size()) - 1, int(out.size()));
}

void emit_words(const FactWorld& world, const std::vector<std::string>& words,
                std::vector<int>& out) {
    for (const auto& w : words) out.push_back(world.tok.id(w));
}

} // namespace

const std::vector<std::string>& known_relations() {
    static const std::vector<std::string> r = {"capital", "language", "country", "continent"};
    return r;
}

FactWorld gen_world(int n_subjects, const std::vector<std::string>& relations,
                    int n_attributes, uint64_t seed) {
    if (n_subjects < 1) throw DataError("gen_world: need at least one subject");
    if (n_attributes < 2) throw DataError("gen_world: need at least two attributes per relation");
    if (relations.empty()) throw DataError("gen_world: empty relation set");
    for (const auto& r : relations)
        if (!templates().count(r)) throw DataError("gen_world: unknown relation '" + r + "'");

    FactWorld w;
    w.seed = seed;
    w.relations = relations;
    std::sort(w.relations.begin(), w.relations.end());
    w.relations.erase(std::unique(w.relations.begin(), w.relations.end()), w.relations.end());

    // template words first so their ids are stable across world sizes
    for (const auto& [name, t] : templates()) {
        (void)name;
        for (const auto& word : t.ctx)
            if (word != "<S>" && word != "<A>") w.tok.add(word);
        for (const auto& word : t.q)
            if (word != "<S>") w.tok.add(word);
    }
    for (const auto& word : doc_frame_words()) w.tok.add(word);
    w.tok.add("C1");
    w.tok.add("C2");

    const std::string tag = std::to_string(seed);
    for (int i = 0; i < n_subjects; ++i) {
        w.subjects.push_back("s" + tag + "_" + std::to_string(i));
        w.tok.add(w.subjects.back());
    }
    for (const auto& rel : w.relations) {
        auto& vals = w.attributes[rel];
        for (int j = 0; j < n_attributes; ++j) {
            vals.push_back(rel + "_v" + tag + "_" + std::to_string(j));
            w.tok.add(vals.back());
        }
    }

    std::mt19937_64 eng(seed);
    for (const auto& rel : w.relations) {
        const auto& vals = w.attributes[rel];
        for (const auto& s : w.subjects) {
            const size_t m = size_t(eng() % uint64_t(n_attributes));
            size_t c = size_t(eng() % uint64_t(n_attributes - 1));
            if (c >= m) ++c; // counterfactual drawn from the remaining values
            w.facts[rel][s] = vals[m];
            w.counterfacts[rel][s] = vals[c];
        }
    }
    return w;
}

ConflictExample render(const FactWorld& world, const std::string& subject,
                       const std::string& relation, Form form, uint64_t salt) {
    auto tit = templates().find(relation);
    if (tit == templates().end()) throw DataError("render: unknown relation '" + relation + "'");
    auto fit = world.facts.find(relation);
    if (fit == world.facts.end() || !fit->second.count(subject))
        throw DataError("render: no fact for (" + subject + ", " + relation + ")");
    const Tmpl& t = tit->second;
    const std::string& am = fit->second.at(subject);
    const std::string& ac = world.counterfacts.at(relation).at(subject);

    ConflictExample ex;
    ex.form = form;
    ex.a_m = world.tok.id(am);
    ex.a_c = world.tok.id(ac);
    RangeSet rs;
    auto& out = ex.tokens;

    switch (form) {
        case Form::triple:
            emit_clause(world, t, subject, ac, Element::s_c, Element::a_c, out, rs);
            break;
        case Form::document: {
            switch (salt % 4) {
                case 0:
                    emit_words(world, {"According", "to", "the", "report", ","}, out);
                    emit_clause(world, t, subject, ac, Element::s_c, Element::a_c, out, rs);
                    emit_words(world, {"This", "fact", "is", "well", "documented", "."}, out);
                    break;
                case 1:
                    emit_clause(world, t, subject, ac, Element::s_c, Element::a_c, out, rs);
                    emit_words(world, {"Everyone", "knows", "this", "."}, out);
                    break;
                case 2: // keyword-free paraphrase: no r_c range at all
                    rs.push(Element::s_c, int(out.size()), int(out.size()) + 1);
                    out.push_back(world.tok.id(subject));
                    emit_words(world, {"has"}, out);
                    rs.push(Element::a_c, int(out.size()), int(out.size()) + 1);
                    out.push_back(world.tok.id(ac));
                    emit_words(world, {"as", "its", "known", "value", "."}, out);
                    emit_words(world, {"Many", "dispute", "it", "."}, out);
                    break;
                default:
                    emit_words(world, {"The", "report", "states", ":"}, out);
                    emit_clause(world, t, subject, ac, Element::s_c, Element::a_c, out, rs);
                    emit_words(world, {"Many", "dispute", "it", "."}, out);
                    break;
            }
            break;
        }
        case Form::dual_context:
            emit_words(world, {"C1", ":"}, out);
            emit_clause(world, t, subject, am, Element::s_c, Element::a_support, out, rs);
            emit_words(world, {"C2", ":"}, out);
            emit_clause(world, t, subject, ac, Element::s_c, Element::a_c, out, rs);
            break;
    }
    emit_question(world, t, subject, out, rs);
    ex.ranges = std::move(rs.r);
    return ex;
}

std::vector<ConflictExample> make_dataset(const FactWorld& world,
                                          const std::string& relation, Form form) {
    std::vector<ConflictExample> ds;
    ds.reserve(world.subjects.size());
    for (size_t i = 0; i < world.subjects.size(); ++i)
        ds.push_back(render(world, world.subjects[i], relation, form, i));
    return ds;
}

ConflictExample corrupt(const ConflictExample& ex, CorruptMode mode) {
    ConflictExample out = ex;
    auto mask = [&out](Element e) {
        for (const auto& r : out.ranges_of(e))
            for (int i = r.begin; i < r.end; ++i) out.tokens[size_t(i)] = Tokenizer::kUnk;
    };
    if (mode == CorruptMode::mask_attribute) {
        if (ex.form == Form::dual_context)
            throw DataError("mask-attribute corruption is undefined for dual-context examples");
        mask(Element::a_c);
    } else {
        mask(Element::s_c);
        mask(Element::s_q);
    }
    return out;
}

// ---- serialization ----

static json ranges_to_json(const ConflictExample& ex) {
    json r = json::object();
    for (int e = 0; e < kNumElements; ++e) {
        json arr = json::array();
        for (const auto& range : ex.ranges[size_t(e)])
            arr.push_back(json::array({range.begin, range.end}));
        r[element_name(Element(e))] = std::move(arr);
    }
    return r;
}

void write_world(const FactWorld& world, const std::string& path) {
    json j;
    j["seed"] = world.seed;
    j["subjects"] = world.subjects;
    j["relations"] = world.relations;
    j["attributes"] = world.attributes;
    j["facts"] = world.facts;
    j["counterfacts"] = world.counterfacts;
    j["vocab"] = world.tok.id_to_tok;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    f << j.dump(2) << "\n";
}

FactWorld read_world(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open world file '" + path + "'");
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw DataError("malformed world file: " + std::string(e.what()));
    }
    FactWorld w;
    try {
        w.seed = j.at("seed").get<uint64_t>();
        w.subjects = j.at("subjects").get<std::vector<std::string>>();
        w.relations = j.at("relations").get<std::vector<std::string>>();
        w.attributes = j.at("attributes").get<std::map<std::string, std::vector<std::string>>>();
        w.facts = j.at("facts").get<std::map<std::string, std::map<std::string, std::string>>>();
        w.counterfacts =
            j.at("counterfacts").get<std::map<std::string, std::map<std::string, std::string>>>();
        const auto vocab = j.at("vocab").get<std::vector<std::string>>();
        if (vocab.size() < 2 || vocab[0] != "<pad>" || vocab[1] != "<unk>")
            throw DataError("world vocabulary must start with <pad>, <unk>");
        for (size_t i = 2; i < vocab.size(); ++i) w.tok.add(vocab[i]);
    } catch (const json::exception& e) {
        throw DataError("malformed world file: " + std::string(e.what()));
    }
    return w;
}

void write_dataset(const std::vector<ConflictExample>& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    for (const auto& ex : ds) {
        json j;
        j["tokens"] = ex.tokens;
        j["ranges"] = ranges_to_json(ex);
        j["a_m"] = ex.a_m;
        j["a_c"] = ex.a_c;
        j["form"] = form_name(ex.form);
        f << j.dump() << "\n";
    }
}

std::vector<ConflictExample> read_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open dataset file '" + path + "'");
    std::vector<ConflictExample> ds;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
            ConflictExample ex;
            ex.tokens = j.at("tokens").get<std::vector<int>>();
            ex.a_m = j.at("a_m").get<int>();
            ex.a_c = j.at("a_c").get<int>();
            ex.form = form_from_name(j.at("form").get<std::string>());
            const auto& r = j.at("ranges");
            for (int e = 0; e < kNumElements; ++e) {
                const auto key = element_name(Element(e));
                if (!r.contains(key)) continue;
                for (const auto& pair : r.at(key)) {
                    TokenRange range{pair.at(0).get<int>(), pair.at(1).get<int>()};
                    if (range.begin < 0 || range.end > int(ex.tokens.size()) ||
                        range.begin >= range.end)
                        throw DataError("range out of bounds");
                    ex.ranges[size_t(e)].push_back(range);
                }
            }
            ds.push_back(std::move(ex));
        } catch (const json::exception& e) {
            throw DataError("dataset line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return ds;
}

} // namespace headscope
