#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "headscope/errors.hpp"
#include "headscope/eval.hpp"
#include "headscope/factworld.hpp"
#include "headscope/planted.hpp"
#include "headscope/runtime.hpp"
#include "headscope/scoring.hpp"

using namespace headscope;

namespace {

FactWorld small_world(uint64_t seed = 7) { return gen_world(6, {"capital"}, 4, seed); }

PlantedModel planted(const FactWorld& w, double lambda) {
    PlantedOptions opt;
    opt.lambda_mix = lambda;
    return build_planted(w, "capital", opt);
}

const SweepCell& cell_at(const SweepGrid& g, Element e, int layer) {
    for (const auto& c : g.cells)
        if (c.element == e && c.layer == layer) return c;
    throw DataError("no such sweep cell");
}

} // namespace

TEST_CASE("constructed models follow their mixing weight across the grid") {
    const FactWorld w = small_world();
    for (double lambda : {0.0, 0.2, 0.5, 0.8, 1.0}) {
        const PlantedModel pm = planted(w, lambda);
        const VerifyReport rep = verify_planted(pm, w, 2);
        CHECK(rep.ok());
        const UsageReport usage = evaluate(pm.model, make_dataset(w, "capital", Form::triple));
        if (lambda > 0.5 || lambda == 0.5) { // exact ties are nudged toward memory
            CHECK(usage.rm == 1.0);
            CHECK(pm.info.lambda_mix > 0.5);
        } else {
            CHECK(usage.rc == 1.0);
        }
        // dual prompts always resolve to the preferred (memory) attribute
        const UsageReport dual = evaluate(pm.model, make_dataset(w, "capital", Form::dual_context));
        CHECK(dual.rm == 1.0);
    }
}

TEST_CASE("verification catches a broken answer pathway") {
    const FactWorld w = small_world();
    PlantedModel pm = planted(w, 0.8);
    const int l = pm.info.memory_head.layer;
    const int h = pm.info.memory_head.head;
    const int k = pm.model.spec.head_dim();
    for (int s = 0; s < k; ++s)
        for (int j = 0; j < pm.model.spec.d_model; ++j)
            pm.model.w.layers[size_t(l)].w_o.at(h * k + s, j) = 0.0f;
    const VerifyReport rep = verify_planted(pm, w);
    CHECK_FALSE(rep.ok());
}

TEST_CASE("verification catches a leaking bystander head") {
    const FactWorld w = small_world();
    PlantedModel pm = planted(w, 0.8);
    // pick a head with no assigned role and give it a value path
    int fl = -1, fh = -1;
    for (int l = 0; l < pm.model.spec.layers && fl < 0; ++l)
        for (int h = 0; h < pm.model.spec.heads && fh < 0; ++h) {
            const HeadCoord c{l, h};
            if (c == pm.info.memory_head || c == pm.info.context_head ||
                c == pm.info.routing_head || c == pm.info.relation_scan_head ||
                c == pm.info.attribute_scan_head)
                continue;
            fl = l;
            fh = h;
        }
    REQUIRE(fl >= 0);
    pm.model.w.layers[size_t(fl)].w_v[size_t(fh)].at(0, 0) = 1e-4f;
    const VerifyReport rep = verify_planted(pm, w);
    CHECK_FALSE(rep.ok());
}

TEST_CASE("a random basis change preserves behavior and bystander silence") {
    const FactWorld w = small_world();
    PlantedOptions opt;
    opt.lambda_mix = 0.3;
    opt.rotate = true;
    opt.rotate_seed = 9;
    const PlantedModel pm = build_planted(w, "capital", opt);
    CHECK(pm.info.rotated);
    CHECK(verify_planted(pm, w, 2).ok());
    CHECK(evaluate(pm.model, make_dataset(w, "capital", Form::triple)).rc == 1.0);

    // rotation multiplies zero value/output blocks by an orthonormal basis,
    // so bystander heads stay exactly zero
    const int k = pm.model.spec.head_dim();
    for (int l = 0; l < pm.model.spec.layers; ++l)
        for (int h = 0; h < pm.model.spec.heads; ++h) {
            const HeadCoord c{l, h};
            if (c == pm.info.memory_head || c == pm.info.context_head ||
                c == pm.info.routing_head || c == pm.info.relation_scan_head ||
                c == pm.info.attribute_scan_head)
                continue;
            for (const float v : pm.model.w.layers[size_t(l)].w_v[size_t(h)].data)
                REQUIRE(v == 0.0f);
            for (int s = 0; s < k; ++s)
                for (int j = 0; j < pm.model.spec.d_model; ++j)
                    REQUIRE(pm.model.w.layers[size_t(l)].w_o.at(h * k + s, j) == 0.0f);
        }

    // same seed, same rotation; different seed, different weights
    const PlantedModel again = build_planted(w, "capital", opt);
    CHECK(again.model.w.e.data == pm.model.w.e.data);
    PlantedOptions other = opt;
    other.rotate_seed = 10;
    const PlantedModel shifted = build_planted(w, "capital", other);
    CHECK(shifted.model.w.e.data != pm.model.w.e.data);
}

TEST_CASE("builder rejects malformed requests") {
    const FactWorld w = small_world();
    PlantedOptions opt;
    opt.layers = 2;
    CHECK_THROWS_AS(build_planted(w, "capital", opt), DataError);
    opt = PlantedOptions{};
    opt.heads = 3;
    CHECK_THROWS_AS(build_planted(w, "capital", opt), DataError);
    opt = PlantedOptions{};
    opt.lambda_mix = 1.5;
    CHECK_THROWS_AS(build_planted(w, "capital", opt), DataError);
    opt = PlantedOptions{};
    opt.n_max = 8;
    CHECK_THROWS_AS(build_planted(w, "capital", opt), DataError);
    CHECK_THROWS_AS(build_planted(w, "country", PlantedOptions{}), DataError);
}

TEST_CASE("usage rates are exact decimal fractions of the counts") {
    const UsageReport r = finalize_counts(37, 62, 1);
    CHECK(r.n == 100);
    CHECK(r.rm == 0.37);
    CHECK(r.rc == 0.62);
    CHECK(r.ro == 0.01);
    CHECK_THROWS_AS(finalize_counts(0, 0, 0), DataError);
    CHECK_THROWS_AS(finalize_counts(-1, 2, 0), DataError);
}

TEST_CASE("pooled reports match a single pass over the union") {
    std::mt19937_64 eng(5);
    std::vector<UsageReport> parts;
    long fm = 0, fc = 0, fo = 0;
    for (int i = 0; i < 1000; ++i) {
        const long a = long(eng() % 7), b = long(eng() % 5), c = long(eng() % 3);
        if (a + b + c == 0) continue;
        parts.push_back(finalize_counts(a, b, c));
        fm += a;
        fc += b;
        fo += c;
    }
    const UsageReport whole = combine(parts);
    const UsageReport direct = finalize_counts(fm, fc, fo);
    CHECK(whole.n == direct.n);
    CHECK(whole.f_m == direct.f_m);
    CHECK(std::fabs(whole.rm - direct.rm) <= 1e-9);
    CHECK(std::fabs(whole.rc - direct.rc) <= 1e-9);
    CHECK(std::fabs(whole.ro - direct.ro) <= 1e-9);
}

TEST_CASE("evaluation classifies answers against both attributes") {
    const FactWorld w = small_world();
    const PlantedModel pm = planted(w, 1.0);
    const auto ds = make_dataset(w, "capital", Form::triple);
    const UsageReport r = evaluate(pm.model, ds, {}, 2);
    CHECK(r.n == long(ds.size()));
    CHECK(r.f_m == r.n);
    CHECK(r.rm == 1.0);
    CHECK(r.f_c == 0);
    CHECK(r.f_o == 0);
    CHECK_THROWS_AS(evaluate(pm.model, {}, {}, 1), DataError);
}

TEST_CASE("ablation sweeps skip examples that lack the element") {
    const FactWorld w = small_world();
    const PlantedModel pm = planted(w, 0.0);
    const auto docs = make_dataset(w, "capital", Form::document);
    // variants cycle by subject index; every fourth document drops the keyword
    int missing = 0;
    for (const auto& ex : docs) missing += ex.has_element(Element::r_c) ? 0 : 1;
    REQUIRE(missing > 0);

    const SweepGrid g = sweep_knockout(pm.model, docs, ComponentKind::mha, 0, 2);
    CHECK(g.layers == pm.model.spec.layers);
    REQUIRE(int(g.cells.size()) == kNumElements * g.layers);
    for (int l = 0; l < g.layers; ++l) {
        const SweepCell& rc = cell_at(g, Element::r_c, l);
        CHECK(rc.skipped == missing);
        CHECK(rc.used == int(docs.size()) - missing);
        const SweepCell& sup = cell_at(g, Element::a_support, l);
        CHECK(sup.used == 0); // documents never carry a supporting attribute
        CHECK(sup.skipped == int(docs.size()));
        CHECK(sup.mean_delta == 0.0);
    }
}

TEST_CASE("context-answering models depend on the context path, not memory") {
    const FactWorld w = small_world();
    const PlantedModel pm = planted(w, 0.0);
    const auto ds = make_dataset(w, "capital", Form::triple);

    const SweepGrid flow = sweep_flow_block(pm.model, ds, 0, 2);
    // blocking last-token attention onto the stated attribute kills the answer
    CHECK(cell_at(flow, Element::a_c, pm.info.context_head.layer).mean_delta > 0.5);
    // blocking it onto the question subject starves routing of its target
    CHECK(cell_at(flow, Element::s_q, pm.info.routing_head.layer).mean_delta > 0.0);

    const SweepGrid ko = sweep_knockout(pm.model, ds, ComponentKind::mha, 0, 2);
    // the only consumed attention writes land on the last token: zeroing them
    // at the output layer removes the answer entirely, and at the routing
    // layer degrades it
    CHECK(cell_at(ko, Element::x_n, pm.info.context_head.layer).mean_delta > 0.5);
    CHECK(cell_at(ko, Element::x_n, pm.info.routing_head.layer).mean_delta > 0.0);
    // nothing reads attention updates written into the subject or keyword
    // positions themselves, so those cells are exactly silent
    CHECK(cell_at(ko, Element::s_q, pm.info.routing_head.layer).mean_delta == 0.0);
    CHECK(cell_at(ko, Element::r_q, pm.info.context_head.layer).mean_delta == 0.0);
}

TEST_CASE("prune-rate selection prefers the smallest sufficient rate") {
    const FactWorld w = small_world();
    const PlantedModel pm = planted(w, 0.2); // answers from context
    const auto ds = make_dataset(w, "capital", Form::triple);

    PathPatchOptions opt;
    opt.target = Target::memory;
    const HeadScores scores = path_patch_scores(pm.model, ds, opt, 2);

    const PruneChoice choice = select_prune_rate(pm.model, scores, ds, Target::memory, {1, 3, 5}, 2);
    // pruning the single most harmful head (the context head) already flips
    // every answer to memory, so larger rates cannot beat it
    CHECK(choice.k_percent == 1.0);
    REQUIRE(choice.heads.size() == 1);
    CHECK(choice.heads[0] == pm.info.context_head);
    CHECK(choice.report.rm == 1.0);

    // and the flip is real: applying the plan changes the usage report
    InterventionPlan plan;
    plan.add(PruneHeads{{{pm.info.context_head.layer, pm.info.context_head.head}}});
    CHECK(evaluate(pm.model, ds, plan).rm == 1.0);
    CHECK(evaluate(pm.model, ds).rc == 1.0);

    CHECK_THROWS_AS(select_prune_rate(pm.model, scores, ds, Target::memory, {}), DataError);
}

TEST_CASE("mitigation flips both directions of the conflict") {
    const FactWorld w = small_world();

    // context-answering model, push it to memory
    {
        const PlantedModel pm = planted(w, 0.2);
        const auto ds = make_dataset(w, "capital", Form::triple);
        PathPatchOptions opt;
        opt.target = Target::memory;
        const HeadScores s = path_patch_scores(pm.model, ds, opt, 2);
        const PruneChoice c = select_prune_rate(pm.model, s, ds, Target::memory, {1, 3, 5, 7, 9, 15}, 2);
        CHECK(c.report.rm == 1.0);
    }
    // memory-answering model, push it to context
    {
        const PlantedModel pm = planted(w, 0.8);
        const auto ds = make_dataset(w, "capital", Form::triple);
        PathPatchOptions opt;
        opt.target = Target::context;
        const HeadScores s = path_patch_scores(pm.model, ds, opt, 2);
        const PruneChoice c = select_prune_rate(pm.model, s, ds, Target::context, {1, 3, 5, 7, 9, 15}, 2);
        CHECK(c.report.rc == 1.0);
        REQUIRE(c.heads.size() >= 1);
        CHECK(c.heads[0] == pm.info.memory_head);
    }
}
