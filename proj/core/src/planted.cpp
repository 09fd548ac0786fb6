#include "headscope/planted.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "headscope/errors.hpp"
#include "headscope/parallel.hpp"
#include "headscope/runtime.hpp"

namespace headscope {

namespace {

// Residual channel offsets of the construction basis (before any rotation).
// tok/pos mirror the embeddings; the rest are private wires between heads.
struct Channels {
    int tok = 0;    // one-hot token id                          [vocab]
    int pos = 0;    // one-hot position                          [n_max]
    int attr = 0;   // recalled-attribute strength               [n_attr]
    int route_pos = 0;  // position one-hot of the routed token  [n_max]
    int route_attr = 0; // attribute strength at the routed token[n_attr]
    int route_subj = 0; // 1 when the routed token is a subject  [1]
    int rel_found = 0;  // keyword position / n_max              [1]
    int gate = 0;       // attribute visible in the prefix       [1]
    int total = 0;
};

Channels layout(int vocab, int n_max, int n_attr) {
    Channels c;
    c.tok = 0;
    c.pos = vocab;
    c.attr = c.pos + n_max;
    c.route_pos = c.attr + n_attr;
    c.route_attr = c.route_pos + n_max;
    c.route_subj = c.route_attr + n_attr;
    c.rel_found = c.route_subj + 1;
    c.gate = c.rel_found + 1;
    c.total = c.gate + 1;
    return c;
}

// Fixed head placement. Extra layers/heads beyond these are inert fillers.
constexpr HeadCoord kMemory{2, 0};
constexpr HeadCoord kContext{2, 2};
constexpr HeadCoord kRouting{1, 1};
constexpr HeadCoord kRelScan{0, 2};
constexpr HeadCoord kAttrScan{0, 3};

constexpr double kLogitBudget = 8.0;    // answer logit mass, split by lambda
constexpr double kFillerQ = 25.0;       // filler self-attention sharpness
constexpr double kKeywordWeight = 100.0;// keyword indicator in the relation scan
constexpr double kScanSharp = 35.0;     // attribute-key logit in the attribute scan
constexpr double kGateGain = 0.9;       // gate channel amplitude
constexpr double kSubjWeight = 100.0;   // routing: subject indicator weight
constexpr double kRecencyWeight = 10.0; // routing: position tiebreak; keeps the
                                        // route on a *subject* near the end, so
                                        // blocking the question subject reroutes
                                        // to a non-subject and drops the signal
constexpr double kMemSharp = 14.0;      // memory position-match logit
constexpr double kCtxSharp = 35.0;      // context attribute logit (incl. floor)
constexpr double kDualBonus = 4.0;      // extra logit on the preferred attribute
constexpr double kAnchorGain = 3.0;     // pad-channel anchor read off the last colon
constexpr double kTokDrive = 2.0;       // recall unit: subject indicator weight
constexpr double kGateDrive = 0.5;      // recall unit: gate weight; half of
                                        // kTokDrive+kGateDrive, so the scan head's
                                        // influence on the answer is strictly
                                        // smaller than the memory head's
constexpr double kRecallBias = 1.55;    // recall unit threshold (position one-hots
                                        // sum to 1 everywhere and act as a bias)

bool is_role(const PlantedInfo& info, int l, int h) {
    const HeadCoord c{l, h};
    return c == info.memory_head || c == info.context_head || c == info.routing_head ||
           c == info.relation_scan_head || c == info.attribute_scan_head;
}

// Random orthonormal basis: Gram-Schmidt over seeded Gaussian rows, computed
// in double. Row-major d x d.
std::vector<double> orthonormal_basis(int d, uint64_t seed) {
    std::mt19937_64 eng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> r(size_t(d) * size_t(d));
    for (auto& v : r) v = gauss(eng);
    for (int i = 0; i < d; ++i) {
        double* ri = r.data() + size_t(i) * d;
        for (int pass = 0; pass < 2; ++pass) {
            for (int j = 0; j < i; ++j) {
                const double* rj = r.data() + size_t(j) * d;
                double dot = 0.0;
                for (int t = 0; t < d; ++t) dot += ri[t] * rj[t];
                for (int t = 0; t < d; ++t) ri[t] -= dot * rj[t];
            }
        }
        double norm = 0.0;
        for (int t = 0; t < d; ++t) norm += ri[t] * ri[t];
        norm = std::sqrt(norm);
        if (!(norm > 1e-8)) throw InvariantViolation("degenerate rotation basis");
        for (int t = 0; t < d; ++t) ri[t] /= norm;
    }
    return r;
}

// w <- R^T w for a d x c matrix whose rows live in the residual basis.
void rotate_input(Tensor& w, const std::vector<double>& r, int d) {
    if (w.rows != d) throw DimensionError("rotate_input: row count mismatch");
    Tensor out(w.rows, w.cols);
    for (int i = 0; i < d; ++i) {
        for (int s = 0; s < w.cols; ++s) {
            double acc = 0.0;
            for (int t = 0; t < d; ++t) {
                const float v = w.at(t, s);
                if (v == 0.0f) continue;
                acc += r[size_t(t) * d + i] * double(v);
            }
            out.at(i, s) = float(acc);
        }
    }
    w = std::move(out);
}

// w <- w R for a matrix whose *rows* are residual vectors (E, P, W_o, W2).
void rotate_rows(Tensor& w, const std::vector<double>& r, int d) {
    if (w.cols != d) throw DimensionError("rotate_rows: column count mismatch");
    std::vector<double> acc(size_t(d), 0.0);
    for (int i = 0; i < w.rows; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int t = 0; t < d; ++t) {
            const float v = w.at(i, t);
            if (v == 0.0f) continue;
            const double* rt = r.data() + size_t(t) * d;
            for (int j = 0; j < d; ++j) acc[j] += double(v) * rt[j];
        }
        for (int j = 0; j < d; ++j) w.at(i, j) = float(acc[j]);
    }
}

void apply_rotation(Model& model, uint64_t seed) {
    const int d = model.spec.d_model;
    const std::vector<double> r = orthonormal_basis(d, seed);
    rotate_rows(model.w.e, r, d);
    rotate_rows(model.w.p, r, d);
    for (auto& layer : model.w.layers) {
        for (auto& w : layer.w_q) rotate_input(w, r, d);
        for (auto& w : layer.w_k) rotate_input(w, r, d);
        for (auto& w : layer.w_v) rotate_input(w, r, d);
        rotate_rows(layer.w_o, r, d);
        rotate_input(layer.w1, r, d);
        rotate_rows(layer.w2, r, d);
    }
}

} // namespace

PlantedModel build_planted(const FactWorld& world, const std::string& relation,
                           const PlantedOptions& opt) {
    if (opt.layers < 3) throw DataError("planted model needs at least 3 layers");
    if (opt.heads < 4) throw DataError("planted model needs at least 4 heads per layer");
    if (!(opt.lambda_mix >= 0.0 && opt.lambda_mix <= 1.0))
        throw DataError("lambda_mix must lie in [0, 1]");
    if (world.attributes.find(relation) == world.attributes.end())
        throw DataError("world has no relation '" + relation + "'");
    if (world.subjects.empty()) throw DataError("world has no subjects");
    if (opt.n_max < 32) throw DataError("n_max below the longest prompt template");

    const auto& attr_words = world.attributes.at(relation);
    const int vocab = world.tok.size();
    const int n_attr = int(attr_words.size());
    const int n_max = opt.n_max;
    const int heads = opt.heads;

    const Channels ch = layout(vocab, n_max, n_attr);
    int d = std::max(ch.total, heads * (n_max + n_attr + 1));
    d = (d + heads - 1) / heads * heads;
    const int head_dim = d / heads;
    const double sk = std::sqrt(double(head_dim)); // undoes the attention scale

    ModelSpec spec;
    spec.layers = opt.layers;
    spec.heads = heads;
    spec.d_model = d;
    spec.d_ff = int(world.subjects.size());
    spec.vocab = vocab;
    spec.n_max = n_max;
    spec.use_layer_norm = false;
    spec.activation = Activation::relu;

    Model model = zero_model(spec);

    for (int v = 0; v < vocab; ++v) model.w.e.at(v, ch.tok + v) = 1.0f;
    for (int p = 0; p < n_max; ++p) model.w.p.at(p, ch.pos + p) = 1.0f;

    std::vector<int> attr_id(n_attr);
    std::map<std::string, int> attr_index;
    for (int j = 0; j < n_attr; ++j) {
        attr_id[j] = world.tok.id(attr_words[j]);
        attr_index[attr_words[j]] = j;
    }
    std::vector<int> subj_id(world.subjects.size());
    for (size_t i = 0; i < world.subjects.size(); ++i) subj_id[i] = world.tok.id(world.subjects[i]);
    const int keyword_id = world.tok.id(relation);
    const int colon_id = world.tok.id(":");

    PlantedInfo info;
    info.memory_head = kMemory;
    info.context_head = kContext;
    info.routing_head = kRouting;
    info.relation_scan_head = kRelScan;
    info.attribute_scan_head = kAttrScan;
    info.lambda_mix = opt.lambda_mix == 0.5 ? 0.501 : opt.lambda_mix;
    info.relation = relation;
    info.dual_preference = opt.prefer_memory_in_dual;
    info.rotated = opt.rotate;

    // Fillers: sharp self-attention, exactly zero value and output weights, so
    // the head runs but writes nothing.
    for (int l = 0; l < spec.layers; ++l) {
        for (int h = 0; h < heads; ++h) {
            if (is_role(info, l, h)) continue;
            auto& wq = model.w.layers[l].w_q[h];
            auto& wk = model.w.layers[l].w_k[h];
            for (int p = 0; p < n_max; ++p) {
                wq.at(ch.pos + p, p % head_dim) = float(kFillerQ * sk);
                wk.at(ch.pos + p, p % head_dim) = 1.0f;
            }
        }
    }

    // Relation scan (layer 0): every query attends the latest keyword position
    // and writes keyword_position/n_max into rel_found. With no keyword in the
    // prefix the read collapses toward zero-position mass, keeping rel_found low.
    {
        auto& lw = model.w.layers[kRelScan.layer];
        auto& wq = lw.w_q[kRelScan.head];
        auto& wk = lw.w_k[kRelScan.head];
        auto& wv = lw.w_v[kRelScan.head];
        wk.at(ch.tok + keyword_id, 0) = 1.0f;
        for (int p = 0; p < n_max; ++p) {
            wk.at(ch.pos + p, 1) = float(p);
            wq.at(ch.pos + p, 0) = float(kKeywordWeight * sk);
            wq.at(ch.pos + p, 1) = float(sk);
            wv.at(ch.pos + p, 0) = float(double(p) / n_max);
        }
        lw.w_o.at(kRelScan.head * head_dim + 0, ch.rel_found) = 1.0f;
    }

    // Attribute scan (layer 0): raises `gate` wherever an attribute value of
    // this relation is visible in the prefix.
    {
        auto& lw = model.w.layers[kAttrScan.layer];
        auto& wq = lw.w_q[kAttrScan.head];
        auto& wk = lw.w_k[kAttrScan.head];
        auto& wv = lw.w_v[kAttrScan.head];
        for (int j = 0; j < n_attr; ++j) {
            wk.at(ch.tok + attr_id[j], 0) = 1.0f;
            wv.at(ch.tok + attr_id[j], 0) = 1.0f;
        }
        for (int p = 0; p < n_max; ++p) wq.at(ch.pos + p, 0) = float(kScanSharp * sk);
        lw.w_o.at(kAttrScan.head * head_dim + 0, ch.gate) = float(kGateGain);
    }

    // Recall units (layer-0 feed-forward): one unit per subject fires on that
    // subject's token, boosted by the gate, and writes the stored attribute.
    {
        auto& lw = model.w.layers[0];
        for (size_t si = 0; si < world.subjects.size(); ++si) {
            lw.w1.at(ch.tok + subj_id[si], int(si)) = float(kTokDrive);
            lw.w1.at(ch.gate, int(si)) = float(kGateDrive);
            for (int p = 0; p < n_max; ++p) lw.w1.at(ch.pos + p, int(si)) = float(-kRecallBias);
            const std::string& am = world.facts.at(relation).at(world.subjects[si]);
            lw.w2.at(int(si), ch.attr + attr_index.at(am)) = 1.0f;
        }
    }

    // Routing (layer 1): queries scale with rel_found and attend the latest
    // *subject*; copies its position, attribute strength, and a subject flag.
    {
        auto& lw = model.w.layers[kRouting.layer];
        auto& wq = lw.w_q[kRouting.head];
        auto& wk = lw.w_k[kRouting.head];
        auto& wv = lw.w_v[kRouting.head];
        wq.at(ch.rel_found, 0) = float(kSubjWeight * sk);
        wq.at(ch.rel_found, 1) = float(kRecencyWeight * sk);
        for (int id : subj_id) {
            wk.at(ch.tok + id, 0) = 1.0f;
            wv.at(ch.tok + id, n_max + n_attr) = 1.0f;
        }
        for (int p = 0; p < n_max; ++p) {
            wk.at(ch.pos + p, 1) = float(p);
            wv.at(ch.pos + p, p) = 1.0f;
        }
        for (int j = 0; j < n_attr; ++j) wv.at(ch.attr + j, n_max + j) = 1.0f;
        const int base = kRouting.head * head_dim;
        for (int p = 0; p < n_max; ++p) lw.w_o.at(base + p, ch.route_pos + p) = 1.0f;
        for (int j = 0; j < n_attr; ++j) lw.w_o.at(base + n_max + j, ch.route_attr + j) = 1.0f;
        lw.w_o.at(base + n_max + n_attr, ch.route_subj) = 1.0f;
    }

    // Memory head (layer 2): matches the routed position one-hot against key
    // positions, reading the recalled attribute written there. A colon-keyed
    // side channel leaves a faint pad-logit fingerprint of the final position.
    {
        auto& lw = model.w.layers[kMemory.layer];
        auto& wq = lw.w_q[kMemory.head];
        auto& wk = lw.w_k[kMemory.head];
        auto& wv = lw.w_v[kMemory.head];
        for (int p = 0; p < n_max; ++p) {
            wq.at(ch.route_pos + p, p) = float(kMemSharp * sk);
            wk.at(ch.pos + p, p) = 1.0f;
        }
        for (int j = 0; j < n_attr; ++j) wv.at(ch.attr + j, j) = 1.0f;
        wv.at(ch.tok + colon_id, n_attr) = 1.0f;
        const int base = kMemory.head * head_dim;
        lw.w_o.at(base + n_attr, ch.tok + Tokenizer::kPad) = float(kAnchorGain);
        for (int j = 0; j < n_attr; ++j) lw.w_o.at(base + j, ch.tok + attr_id[j]) = 1.0f;
    }

    // Context head (layer 2): attends attribute *tokens*. The constant floor
    // keeps roughly half the attention there even when the routed-subject
    // signal is removed; the optional per-attribute bonus prefers the stored
    // attribute when both appear in context.
    {
        const double floor_logit = std::log(17.0);
        auto& lw = model.w.layers[kContext.layer];
        auto& wq = lw.w_q[kContext.head];
        auto& wk = lw.w_k[kContext.head];
        auto& wv = lw.w_v[kContext.head];
        wq.at(ch.route_subj, 0) = float((kCtxSharp - floor_logit) * sk);
        for (int p = 0; p < n_max; ++p) wq.at(ch.pos + p, 0) = float(floor_logit * sk);
        for (int j = 0; j < n_attr; ++j) {
            wk.at(ch.tok + attr_id[j], 0) = 1.0f;
            wv.at(ch.tok + attr_id[j], j) = 1.0f;
            if (opt.prefer_memory_in_dual) {
                wq.at(ch.route_attr + j, 1 + j) = float(kDualBonus * sk);
                wk.at(ch.tok + attr_id[j], 1 + j) = 1.0f;
            }
        }
        const int base = kContext.head * head_dim;
        for (int j = 0; j < n_attr; ++j) lw.w_o.at(base + j, ch.tok + attr_id[j]) = 1.0f;
    }

    // Calibrate the two output gains so the answer logits land exactly on the
    // lambda split of the logit budget, measured on a probe forward pass.
    {
        const std::string& subject = world.subjects.front();
        const ConflictExample probe = render(world, subject, relation, Form::triple);
        const RunTrace tr = forward(model, probe.tokens, {}, true);
        const int last = probe.length() - 1;
        const int j_am = attr_index.at(world.facts.at(relation).at(subject));
        const int j_ac = attr_index.at(world.counterfacts.at(relation).at(subject));
        const double cm =
            double(tr.layers[size_t(kMemory.layer)].heads[size_t(kMemory.head)].h.at(last, j_am));
        const double cc =
            double(tr.layers[size_t(kContext.layer)].heads[size_t(kContext.head)].h.at(last, j_ac));
        if (!(cm > 1e-3) || !(cc > 1e-3))
            throw InvariantViolation("planted construction: dead recall or copy route at build time");
        const double gm = info.lambda_mix * kLogitBudget / cm;
        const double gc = (1.0 - info.lambda_mix) * kLogitBudget / cc;
        auto& mem_wo = model.w.layers[kMemory.layer].w_o;
        auto& ctx_wo = model.w.layers[kContext.layer].w_o;
        for (int j = 0; j < n_attr; ++j) {
            mem_wo.at(kMemory.head * head_dim + j, ch.tok + attr_id[j]) = float(gm);
            ctx_wo.at(kContext.head * head_dim + j, ch.tok + attr_id[j]) = float(gc);
        }
    }

    if (opt.rotate) apply_rotation(model, opt.rotate_seed);

    model.validate();
    PlantedModel pm{std::move(model), info};
    const VerifyReport rep = verify_planted(pm, world, 1);
    if (!rep.ok())
        throw InvariantViolation("planted model failed its build-time sweep: " + rep.violations.front());
    return pm;
}

VerifyReport verify_planted(const PlantedModel& pm, const FactWorld& world, int threads) {
    VerifyReport rep;
    const ModelSpec& spec = pm.model.spec;
    const int head_dim = spec.head_dim();

    if (world.facts.find(pm.info.relation) == world.facts.end()) {
        rep.violations.push_back("world has no relation '" + pm.info.relation + "'");
        return rep;
    }

    // Circuit isolation: every filler head must be incapable of writing.
    for (int l = 0; l < spec.layers; ++l) {
        for (int h = 0; h < spec.heads; ++h) {
            if (is_role(pm.info, l, h)) continue;
            const auto& lw = pm.model.w.layers[l];
            bool clean = true;
            for (float v : lw.w_v[h].data)
                if (v != 0.0f) clean = false;
            for (int r = h * head_dim; r < (h + 1) * head_dim && clean; ++r)
                for (int c = 0; c < spec.d_model; ++c)
                    if (lw.w_o.at(r, c) != 0.0f) { clean = false; break; }
            if (!clean) {
                std::ostringstream os;
                os << "filler head (" << l << "," << h << ") can write into the residual stream";
                rep.violations.push_back(os.str());
            }
        }
    }

    // Behavior sweep: the answer must follow the mix on every subject and form.
    struct Case {
        std::string subject;
        Form form = Form::triple;
        uint64_t salt = 0;
    };
    std::vector<Case> cases;
    for (size_t si = 0; si < world.subjects.size(); ++si) {
        cases.push_back({world.subjects[si], Form::triple, si});
        cases.push_back({world.subjects[si], Form::document, si});
        if (pm.info.dual_preference) cases.push_back({world.subjects[si], Form::dual_context, si});
    }

    std::vector<std::string> results(cases.size());
    parallel_for(int(cases.size()), threads, [&](int i) {
        const Case& c = cases[size_t(i)];
        const ConflictExample ex = render(world, c.subject, pm.info.relation, c.form, c.salt);
        const int expected = (c.form == Form::dual_context || pm.info.lambda_mix > 0.5) ? ex.a_m : ex.a_c;
        const RunTrace tr = forward(pm.model, ex.tokens);
        const int got = top_token(tr.logits);
        if (got != expected) {
            std::ostringstream os;
            os << "subject " << c.subject << " form " << form_name(c.form) << ": predicted '"
               << world.tok.token(got) << "' expected '" << world.tok.token(expected) << "'";
            results[size_t(i)] = os.str();
        }
    });
    for (const auto& r : results)
        if (!r.empty()) rep.violations.push_back(r);
    return rep;
}

} // namespace headscope
