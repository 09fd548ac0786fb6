#include "headscope/intervention.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "headscope/numfmt.hpp"
#include "headscope/runtime.hpp"

namespace headscope {

std::string component_name(ComponentKind k) {
    return k == ComponentKind::mha ? "mha" : "ffn";
}

ComponentKind component_from_name(const std::string& s) {
    if (s == "mha") return ComponentKind::mha;
    if (s == "ffn") return ComponentKind::ffn;
    throw DataError("unknown component kind '" + s + "'");
}

std::vector<int> LayerWindow::expand(int num_layers) const {
    if (num_layers < 1) throw DimensionError("window: model has no layers");
    if (center < 0 || center >= num_layers)
        throw DimensionError("window center " + std::to_string(center) + " out of range");
    if (window < 0) throw DataError("window size must be >= 0");
    const int lo = std::max(0, center - window / 2);
    const int hi = std::min(num_layers - 1, center + window / 2);
    std::vector<int> out;
    for (int l = lo; l <= hi; ++l) out.push_back(l);
    return out;
}

namespace {

std::vector<int> element_positions(const ConflictExample& ex, Element element) {
    std::vector<int> pos;
    for (const auto& r : ex.ranges_of(element))
        for (int i = r.begin; i < r.end; ++i) pos.push_back(i);
    if (pos.empty())
        throw DataError("example has no '" + element_name(element) + "' range");
    return pos;
}

} // namespace

InterventionPlan knockout(ComponentKind kind, Element element, LayerWindow win,
                          const ConflictExample& ex, int num_layers) {
    KnockoutComponent ko;
    ko.kind = kind;
    ko.positions = element_positions(ex, element);
    ko.layers = win.expand(num_layers);
    InterventionPlan plan;
    plan.add(std::move(ko));
    return plan;
}

InterventionPlan block_flow(Element element, LayerWindow win, const ConflictExample& ex,
                            int num_layers) {
    BlockAttention bl;
    bl.query_pos = ex.length() - 1;
    bl.key_positions = element_positions(ex, element);
    bl.layers = win.expand(num_layers);
    InterventionPlan plan;
    plan.add(std::move(bl));
    return plan;
}

namespace {

const Tensor& recorded_head(const RunTrace& tr, int layer, int head) {
    if (!tr.recorded) throw DataError("source trace was not recorded");
    if (layer < 0 || layer >= int(tr.layers.size()))
        throw DimensionError("trace has no layer " + std::to_string(layer));
    const auto& heads = tr.layers[size_t(layer)].heads;
    if (head < 0 || head >= int(heads.size()))
        throw DimensionError("trace has no head " + std::to_string(head));
    return heads[size_t(head)].h;
}

} // namespace

InterventionPlan patch_head(int layer, int head, const RunTrace& source) {
    InterventionPlan plan;
    plan.add(PatchHead{layer, head, recorded_head(source, layer, head)});
    return plan;
}

InterventionPlan freeze_except(const RunTrace& clean, int layer, int head,
                               const RunTrace& corrupted) {
    if (clean.n != corrupted.n)
        throw DimensionError("freeze_except: traces have different lengths");
    InterventionPlan plan;
    for (int l = 0; l < int(clean.layers.size()); ++l) {
        const int m = int(clean.layers[size_t(l)].heads.size());
        for (int h = 0; h < m; ++h) {
            const RunTrace& src = (l == layer && h == head) ? corrupted : clean;
            plan.add(PatchHead{l, h, recorded_head(src, l, h)});
        }
    }
    return plan;
}

// ---- text form ----

namespace {

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    if (s.empty()) return out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto dash = item.find('-', item.starts_with("-") ? 1 : 0);
        if (dash == std::string::npos) {
            out.push_back(parse_int(item));
        } else {
            const int lo = parse_int(item.substr(0, dash));
            const int hi = parse_int(item.substr(dash + 1));
            if (hi < lo) throw DataError("bad range '" + item + "'");
            for (int i = lo; i <= hi; ++i) out.push_back(i);
        }
    }
    return out;
}

std::vector<std::pair<int, int>> parse_pair_list(const std::string& s) {
    std::vector<std::pair<int, int>> out;
    if (s.empty()) return out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw DataError("bad layer:head pair '" + item + "'");
        out.emplace_back(parse_int(item.substr(0, colon)), parse_int(item.substr(colon + 1)));
    }
    return out;
}

std::map<std::string, std::string> parse_kv(std::istringstream& ss) {
    std::map<std::string, std::string> kv;
    std::string tok;
    while (ss >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw DataError("expected key=value, got '" + tok + "'");
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    return kv;
}

const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key,
                        const std::string& what) {
    auto it = kv.find(key);
    if (it == kv.end()) throw DataError(what + " directive is missing '" + key + "'");
    return it->second;
}

} // namespace

std::string plan_to_text(const InterventionPlan& plan) {
    std::string out;
    for (const auto& dir : plan.directives) {
        if (const auto* ko = std::get_if<KnockoutComponent>(&dir)) {
            out += "knockout kind=" + component_name(ko->kind) +
                   " positions=" + join_ints(ko->positions) + " layers=" + join_ints(ko->layers) +
                   "\n";
        } else if (const auto* bl = std::get_if<BlockAttention>(&dir)) {
            out += "block query=" + std::to_string(bl->query_pos) +
                   " keys=" + join_ints(bl->key_positions) + " layers=" + join_ints(bl->layers) +
                   " heads=" + (bl->heads.empty() ? std::string("all") : join_ints(bl->heads)) +
                   " renorm=" + (bl->renormalize ? "1" : "0") + "\n";
        } else if (const auto* pa = std::get_if<PatchHead>(&dir)) {
            out += "patch layer=" + std::to_string(pa->layer) +
                   " head=" + std::to_string(pa->head) +
                   " rows=" + std::to_string(pa->replacement.rows) +
                   " cols=" + std::to_string(pa->replacement.cols) + " data=";
            for (size_t i = 0; i < pa->replacement.data.size(); ++i) {
                if (i) out += ',';
                out += fmt(pa->replacement.data[i]);
            }
            out += "\n";
        } else if (const auto* pr = std::get_if<PruneHeads>(&dir)) {
            out += "prune heads=";
            for (size_t i = 0; i < pr->heads.size(); ++i) {
                if (i) out += ',';
                out += std::to_string(pr->heads[i].first) + ":" +
                       std::to_string(pr->heads[i].second);
            }
            out += "\n";
        } else if (const auto* sc = std::get_if<ScaleHead>(&dir)) {
            out += "scale layer=" + std::to_string(sc->layer) +
                   " head=" + std::to_string(sc->head) + " alpha=" + fmt(sc->alpha) + "\n";
        }
    }
    return out;
}

InterventionPlan parse_plan(const std::string& text) {
    InterventionPlan plan;
    std::istringstream lines(text);
    std::string line;
    int lineno = 0;
    while (std::getline(lines, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream ss(line);
        std::string head;
        if (!(ss >> head)) continue;
        try {
            if (head == "knockout") {
                auto kv = parse_kv(ss);
                KnockoutComponent ko;
                ko.kind = component_from_name(need(kv, "kind", "knockout"));
                ko.positions = parse_int_list(need(kv, "positions", "knockout"));
                ko.layers = parse_int_list(need(kv, "layers", "knockout"));
                plan.add(std::move(ko));
            } else if (head == "block") {
                auto kv = parse_kv(ss);
                BlockAttention bl;
                bl.query_pos = parse_int(need(kv, "query", "block"));
                bl.key_positions = parse_int_list(need(kv, "keys", "block"));
                bl.layers = parse_int_list(need(kv, "layers", "block"));
                const std::string& hs = need(kv, "heads", "block");
                if (hs != "all") bl.heads = parse_int_list(hs);
                if (auto it = kv.find("renorm"); it != kv.end())
                    bl.renormalize = parse_int(it->second) != 0;
                plan.add(std::move(bl));
            } else if (head == "patch") {
                auto kv = parse_kv(ss);
                PatchHead pa;
                pa.layer = parse_int(need(kv, "layer", "patch"));
                pa.head = parse_int(need(kv, "head", "patch"));
                const int rows = parse_int(need(kv, "rows", "patch"));
                const int cols = parse_int(need(kv, "cols", "patch"));
                pa.replacement = Tensor(rows, cols);
                const std::string& data = need(kv, "data", "patch");
                size_t idx = 0, start = 0;
                while (start <= data.size() && idx < pa.replacement.data.size()) {
                    auto comma = data.find(',', start);
                    if (comma == std::string::npos) comma = data.size();
                    pa.replacement.data[idx++] = parse_float(data.substr(start, comma - start));
                    start = comma + 1;
                }
                if (idx != pa.replacement.data.size() || start <= data.size())
                    throw DataError("patch data length differs from rows*cols");
                plan.add(std::move(pa));
            } else if (head == "prune") {
                auto kv = parse_kv(ss);
                plan.add(PruneHeads{parse_pair_list(need(kv, "heads", "prune"))});
            } else if (head == "scale") {
                auto kv = parse_kv(ss);
                ScaleHead sc;
                sc.layer = parse_int(need(kv, "layer", "scale"));
                sc.head = parse_int(need(kv, "head", "scale"));
                sc.alpha = parse_double(need(kv, "alpha", "scale"));
                plan.add(sc);
            } else {
                throw DataError("unknown directive '" + head + "'");
            }
        } catch (const Error& e) {
            throw DataError("plan line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return plan;
}

InterventionPlan load_plan(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open plan file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_plan(ss.str());
}

} // namespace headscope
