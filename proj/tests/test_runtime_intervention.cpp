#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "headscope/errors.hpp"
#include "headscope/factworld.hpp"
#include "headscope/intervention.hpp"
#include "headscope/model.hpp"
#include "headscope/runtime.hpp"

using namespace headscope;

namespace {

ModelSpec spec_of(int layers, int heads, int d, int d_ff, int vocab, int n_max, bool norm) {
    ModelSpec s;
    s.layers = layers;
    s.heads = heads;
    s.d_model = d;
    s.d_ff = d_ff;
    s.vocab = vocab;
    s.n_max = n_max;
    s.use_layer_norm = norm;
    s.activation = Activation::gelu;
    return s;
}

std::vector<int> random_tokens(const ModelSpec& s, int n, uint64_t seed) {
    std::mt19937_64 eng(seed);
    std::vector<int> t(static_cast<size_t>(n));
    for (auto& v : t) v = int(eng() % uint64_t(s.vocab));
    return t;
}

} // namespace

TEST_CASE("each layer output is exactly its input plus both updates") {
    for (bool norm : {false, true}) {
        const ModelSpec s = spec_of(3, 2, 8, 12, 17, 16, norm);
        const Model m = random_model(s, norm ? 31 : 30);
        const auto toks = random_tokens(s, 11, 5);
        const RunTrace tr = forward(m, toks, {}, true);
        REQUIRE(tr.recorded);
        REQUIRE(int(tr.layers.size()) == s.layers);
        const Tensor* prev = &tr.x0;
        for (int l = 0; l < s.layers; ++l) {
            const LayerTrace& lt = tr.layers[size_t(l)];
            for (size_t i = 0; i < lt.x.size(); ++i) {
                const float want = (prev->data[i] + lt.a.data[i]) + lt.m.data[i];
                REQUIRE(lt.x.data[i] == want);
            }
            prev = &lt.x;
        }
    }
}

TEST_CASE("pruning every head reduces the model to its feed-forward lane") {
    const ModelSpec s = spec_of(2, 2, 6, 9, 13, 8, false);
    const Model m = random_model(s, 77);
    const auto toks = random_tokens(s, 7, 9);

    InterventionPlan plan;
    PruneHeads pr;
    for (int l = 0; l < s.layers; ++l)
        for (int h = 0; h < s.heads; ++h) pr.heads.emplace_back(l, h);
    plan.add(pr);
    const RunTrace got = forward(m, toks, plan, false);

    // independent attention-free evaluation
    Tensor x(int(toks.size()), s.d_model);
    for (int i = 0; i < int(toks.size()); ++i)
        for (int j = 0; j < s.d_model; ++j)
            x.at(i, j) = m.w.e.at(toks[size_t(i)], j) + m.w.p.at(i, j);
    for (int l = 0; l < s.layers; ++l) {
        const Tensor mt = matmul(gelu(matmul(x, m.w.layers[size_t(l)].w1)),
                                 m.w.layers[size_t(l)].w2);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] = x.data[i] + mt.data[i];
    }
    std::vector<float> want(size_t(s.vocab), 0.0f);
    for (int v = 0; v < s.vocab; ++v) {
        float acc = 0.0f;
        for (int j = 0; j < s.d_model; ++j)
            acc += m.w.e.at(v, j) * x.at(int(toks.size()) - 1, j);
        want[size_t(v)] = acc;
    }
    REQUIRE(got.logits.size() == want.size());
    for (size_t v = 0; v < want.size(); ++v) CHECK(got.logits[v] == want[v]);
}

TEST_CASE("hand-worked single-layer forward") {
    ModelSpec s = spec_of(1, 1, 2, 1, 3, 2, false);
    s.activation = Activation::relu;
    Model m = zero_model(s);
    m.w.e.at(0, 0) = 1.0f;
    m.w.e.at(1, 1) = 1.0f;
    m.w.e.at(2, 0) = 1.0f;
    m.w.e.at(2, 1) = 1.0f;
    m.w.layers[0].w_v[0].at(0, 0) = 1.0f; // identity value/output path
    m.w.layers[0].w_v[0].at(1, 1) = 1.0f;
    m.w.layers[0].w_o.at(0, 0) = 1.0f;
    m.w.layers[0].w_o.at(1, 1) = 1.0f;

    const std::vector<int> toks = {0, 1};
    const RunTrace tr = forward(m, toks, {}, true);

    // zero query/key weights: uniform causal attention
    const Tensor& sm = tr.layers[0].heads[0].s;
    CHECK(sm.at(0, 0) == 1.0f);
    CHECK(sm.at(0, 1) == 0.0f);
    CHECK(sm.at(1, 0) == 0.5f);
    CHECK(sm.at(1, 1) == 0.5f);

    const Tensor& h = tr.layers[0].heads[0].h;
    CHECK(h.at(1, 0) == 0.5f);
    CHECK(h.at(1, 1) == 0.5f);

    CHECK(tr.layers[0].x.at(1, 0) == 0.5f);
    CHECK(tr.layers[0].x.at(1, 1) == 1.5f);

    REQUIRE(tr.logits.size() == 3);
    CHECK(tr.logits[0] == 0.5f);
    CHECK(tr.logits[1] == 1.5f);
    CHECK(tr.logits[2] == 2.0f);
    CHECK(top_token(tr.logits) == 2);
    const double psum = std::accumulate(tr.probs.begin(), tr.probs.end(), 0.0);
    CHECK(psum == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("forward validates sequence length and token ids") {
    const ModelSpec s = spec_of(1, 1, 2, 1, 3, 2, false);
    const Model m = zero_model(s);
    CHECK_THROWS_AS(forward(m, std::vector<int>{0, 1, 2}), DimensionError);
    CHECK_THROWS_AS(forward(m, std::vector<int>{0, 3}), DataError);
    CHECK_THROWS_AS(forward(m, std::vector<int>{0, -1}), DataError);
}

TEST_CASE("component knockouts zero exactly the chosen update rows") {
    const ModelSpec s = spec_of(3, 2, 8, 12, 17, 16, false);
    const Model m = random_model(s, 40);
    const auto toks = random_tokens(s, 9, 2);

    InterventionPlan plan;
    plan.add(KnockoutComponent{ComponentKind::mha, {2, 5}, {1}});
    plan.add(KnockoutComponent{ComponentKind::ffn, {0}, {0, 2}});
    const RunTrace tr = forward(m, toks, plan, true);

    for (int j = 0; j < s.d_model; ++j) {
        CHECK(tr.layers[1].a.at(2, j) == 0.0f);
        CHECK(tr.layers[1].a.at(5, j) == 0.0f);
        CHECK(tr.layers[0].m.at(0, j) == 0.0f);
        CHECK(tr.layers[2].m.at(0, j) == 0.0f);
    }
    // untouched sites stay live
    float live = 0.0f;
    for (int j = 0; j < s.d_model; ++j) {
        live += std::fabs(tr.layers[1].a.at(3, j));
        live += std::fabs(tr.layers[1].m.at(2, j));
        live += std::fabs(tr.layers[0].a.at(0, j));
    }
    CHECK(live > 0.0f);
    // the residual identity holds with the zeroed updates
    for (size_t i = 0; i < tr.layers[1].x.size(); ++i)
        REQUIRE(tr.layers[1].x.data[i] ==
                (tr.layers[0].x.data[i] + tr.layers[1].a.data[i]) + tr.layers[1].m.data[i]);
}

TEST_CASE("attention blocks zero the chosen columns") {
    const ModelSpec s = spec_of(2, 2, 8, 12, 17, 16, false);
    const Model m = random_model(s, 41);
    const auto toks = random_tokens(s, 8, 3);
    const int last = int(toks.size()) - 1;

    SUBCASE("plain zeroing leaves the rest of the row untouched") {
        const RunTrace clean = forward(m, toks, {}, true);
        InterventionPlan plan;
        plan.add(BlockAttention{last, {3, 4}, {0}, {}, false});
        const RunTrace tr = forward(m, toks, plan, true);
        for (int h = 0; h < s.heads; ++h) {
            const Tensor& sm = tr.layers[0].heads[size_t(h)].s;
            CHECK(sm.at(last, 3) == 0.0f);
            CHECK(sm.at(last, 4) == 0.0f);
            for (int j = 0; j <= last; ++j)
                if (j != 3 && j != 4)
                    CHECK(sm.at(last, j) == clean.layers[0].heads[size_t(h)].s.at(last, j));
        }
    }

    SUBCASE("renormalized rows sum to one") {
        InterventionPlan plan;
        plan.add(BlockAttention{last, {3, 4}, {0}, {}, true});
        const RunTrace tr = forward(m, toks, plan, true);
        for (int h = 0; h < s.heads; ++h) {
            const Tensor& sm = tr.layers[0].heads[size_t(h)].s;
            double sum = 0.0;
            for (int j = 0; j <= last; ++j) sum += double(sm.at(last, j));
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
            CHECK(sm.at(last, 3) == 0.0f);
        }
    }

    SUBCASE("a fully blocked row stays zero instead of dividing by zero") {
        InterventionPlan plan;
        plan.add(BlockAttention{0, {0}, {0}, {}, true});
        const RunTrace tr = forward(m, toks, plan, true);
        for (int h = 0; h < s.heads; ++h)
            CHECK(tr.layers[0].heads[size_t(h)].s.at(0, 0) == 0.0f);
        check_finite(std::span<const float>(tr.logits), "blocked logits");
    }

    SUBCASE("head-restricted blocks leave other heads alone") {
        const RunTrace clean = forward(m, toks, {}, true);
        InterventionPlan plan;
        plan.add(BlockAttention{last, {2}, {0}, {1}, false});
        const RunTrace tr = forward(m, toks, plan, true);
        CHECK(tr.layers[0].heads[1].s.at(last, 2) == 0.0f);
        CHECK(tr.layers[0].heads[0].s.at(last, 2) ==
              clean.layers[0].heads[0].s.at(last, 2));
    }
}

TEST_CASE("head scaling multiplies in double and rounds once") {
    const ModelSpec s = spec_of(2, 2, 8, 12, 17, 16, false);
    const Model m = random_model(s, 42);
    const auto toks = random_tokens(s, 6, 4);
    const RunTrace clean = forward(m, toks, {}, true);

    const double alpha = 1.0 + 1e-3;
    InterventionPlan plan;
    plan.add(ScaleHead{1, 0, alpha});
    const RunTrace tr = forward(m, toks, plan, true);

    const Tensor& ch = clean.layers[1].heads[0].h;
    const Tensor& sh = tr.layers[1].heads[0].h;
    for (size_t i = 0; i < ch.size(); ++i)
        REQUIRE(sh.data[i] == float(double(ch.data[i]) * alpha));
    // the sibling head is untouched
    for (size_t i = 0; i < ch.size(); ++i)
        REQUIRE(tr.layers[1].heads[1].h.data[i] == clean.layers[1].heads[1].h.data[i]);
}

TEST_CASE("patching every head from a run's own trace reproduces it") {
    const ModelSpec s = spec_of(3, 2, 8, 12, 17, 16, true);
    const Model m = random_model(s, 43);
    const auto toks = random_tokens(s, 10, 6);
    const RunTrace clean = forward(m, toks, {}, true);

    const InterventionPlan plan = freeze_except(clean, 1, 1, clean);
    CHECK(int(plan.directives.size()) == s.layers * s.heads);
    for (bool record : {false, true}) {
        const RunTrace again = forward(m, toks, plan, record);
        REQUIRE(again.logits.size() == clean.logits.size());
        for (size_t v = 0; v < clean.logits.size(); ++v)
            REQUIRE(again.logits[v] == clean.logits[v]);
    }
}

TEST_CASE("freeze_except swaps in exactly one corrupted head") {
    const ModelSpec s = spec_of(2, 2, 8, 12, 17, 16, false);
    const Model m = random_model(s, 44);
    const auto toks = random_tokens(s, 6, 7);
    auto corrupted_toks = toks;
    corrupted_toks[2] = (toks[2] + 1) % s.vocab;

    const RunTrace clean = forward(m, toks, {}, true);
    const RunTrace corr = forward(m, corrupted_toks, {}, true);
    const InterventionPlan plan = freeze_except(clean, 1, 0, corr);

    int swapped = 0;
    for (const auto& dir : plan.directives) {
        const auto* pa = std::get_if<PatchHead>(&dir);
        REQUIRE(pa != nullptr);
        const Tensor& want = (pa->layer == 1 && pa->head == 0)
                                 ? corr.layers[1].heads[0].h
                                 : clean.layers[size_t(pa->layer)].heads[size_t(pa->head)].h;
        REQUIRE(pa->replacement.same_shape(want));
        bool equal = true;
        for (size_t i = 0; i < want.size(); ++i) equal &= pa->replacement.data[i] == want.data[i];
        CHECK(equal);
        swapped += (pa->layer == 1 && pa->head == 0);
    }
    CHECK(swapped == 1);
    CHECK_THROWS_AS(freeze_except(clean, 0, 0, forward(m, std::vector<int>{0, 1}, {}, true)),
                    DimensionError);
    CHECK_THROWS_AS(patch_head(0, 0, forward(m, toks, {}, false)), DataError);
}

TEST_CASE("element-targeted plans read ranges off the example") {
    const FactWorld w = gen_world(4, {"capital"}, 3, 13);
    const ConflictExample ex = render(w, w.subjects[0], "capital", Form::triple);

    const InterventionPlan ko = knockout(ComponentKind::mha, Element::a_c, {1, 2}, ex, 3);
    const auto* kod = std::get_if<KnockoutComponent>(&ko.directives.at(0));
    REQUIRE(kod != nullptr);
    CHECK(kod->positions == std::vector<int>{5});
    const std::vector<int> window_layers = LayerWindow{1, 2}.expand(3);
    CHECK(kod->layers == window_layers);

    const InterventionPlan bl = block_flow(Element::s_c, {0, 0}, ex, 3);
    const auto* bld = std::get_if<BlockAttention>(&bl.directives.at(0));
    REQUIRE(bld != nullptr);
    CHECK(bld->query_pos == ex.length() - 1);
    CHECK(bld->key_positions == std::vector<int>{3});
    CHECK(bld->heads.empty());
    CHECK_FALSE(bld->renormalize);

    // keyword-free paraphrase has no context-relation tokens to target
    const ConflictExample doc2 = render(w, w.subjects[0], "capital", Form::document, 2);
    CHECK_THROWS_AS(knockout(ComponentKind::mha, Element::r_c, {1, 0}, doc2, 3), DataError);
}

TEST_CASE("layer windows expand with clipping") {
    auto expand = [](int center, int window, int layers) {
        return LayerWindow{center, window}.expand(layers);
    };
    CHECK(expand(2, 0, 5) == std::vector<int>{2});
    CHECK(expand(2, 1, 5) == std::vector<int>{2});
    CHECK(expand(2, 2, 5) == std::vector<int>{1, 2, 3});
    CHECK(expand(0, 4, 5) == std::vector<int>{0, 1, 2});
    CHECK(expand(4, 4, 5) == std::vector<int>{2, 3, 4});
    CHECK(expand(0, 100, 3) == std::vector<int>{0, 1, 2});
    CHECK_THROWS_AS(expand(5, 0, 5), DimensionError);
    CHECK_THROWS_AS(expand(-1, 0, 5), DimensionError);
    CHECK_THROWS_AS(expand(0, -1, 5), DataError);
}

TEST_CASE("plan compilation validates every index") {
    const ModelSpec s = spec_of(2, 2, 8, 12, 17, 16, false);
    auto compile = [&](Directive d) {
        InterventionPlan p;
        p.add(std::move(d));
        return compile_plan(s, p, 6);
    };
    CHECK_THROWS_AS(compile(KnockoutComponent{ComponentKind::mha, {0}, {2}}), DimensionError);
    CHECK_THROWS_AS(compile(KnockoutComponent{ComponentKind::mha, {6}, {0}}), DimensionError);
    CHECK_THROWS_AS(compile(BlockAttention{0, {0}, {0}, {2}, false}), DimensionError);
    CHECK_THROWS_AS(compile(PruneHeads{{{0, 5}}}), DimensionError);
    CHECK_THROWS_AS(compile(ScaleHead{-1, 0, 1.0}), DimensionError);
    CHECK_THROWS_AS(compile(PatchHead{0, 0, Tensor(5, 4)}), DimensionError);
    CHECK_NOTHROW(compile(PatchHead{0, 0, Tensor(6, 4)}));
}

TEST_CASE("overlapping directives resolve with notes, contradictions throw") {
    const ModelSpec s = spec_of(2, 2, 8, 12, 17, 16, false);
    const int n = 6;

    Tensor t_a(n, s.head_dim()), t_b(n, s.head_dim());
    t_a.fill(1.0f);
    t_b.fill(2.0f);

    {
        InterventionPlan p;
        p.add(PatchHead{0, 0, t_a});
        p.add(PatchHead{0, 0, t_b});
        CHECK_THROWS_AS(compile_plan(s, p, n), DataError);
    }
    {
        InterventionPlan p; // identical duplicates collapse silently
        p.add(PatchHead{0, 0, t_a});
        p.add(PatchHead{0, 0, t_a});
        const CompiledPlan cp = compile_plan(s, p, n);
        CHECK(cp.notes.empty());
    }
    {
        InterventionPlan p;
        p.add(ScaleHead{0, 0, 2.0});
        p.add(ScaleHead{0, 0, 3.0});
        CHECK_THROWS_AS(compile_plan(s, p, n), DataError);
    }
    {
        InterventionPlan p;
        p.add(PatchHead{0, 0, t_a});
        p.add(PruneHeads{{{0, 0}}});
        p.add(ScaleHead{0, 0, 2.0});
        p.add(KnockoutComponent{ComponentKind::mha, {1}, {0}});
        const CompiledPlan cp = compile_plan(s, p, n);
        REQUIRE(cp.notes.size() == 3);
        CHECK(cp.notes[0].find("patch overrides prune") != std::string::npos);
        CHECK(cp.notes[1].find("patch overrides scale") != std::string::npos);
        CHECK(cp.notes[2].find("MHA knockout dropped") != std::string::npos);
        CHECK(cp.layers[0].prune[0] == 0);
        CHECK(cp.layers[0].scaled[0] == 0);
        CHECK(cp.layers[0].mha_knockout.empty());
    }
    {
        InterventionPlan p;
        p.add(PruneHeads{{{1, 1}}});
        p.add(ScaleHead{1, 1, 0.5});
        const CompiledPlan cp = compile_plan(s, p, n);
        REQUIRE(cp.notes.size() == 1);
        CHECK(cp.notes[0].find("prune overrides scale") != std::string::npos);
    }

    // behavioral: the patched head wins over its own prune
    const Model m = random_model(s, 50);
    const auto toks = random_tokens(s, n, 8);
    const RunTrace clean = forward(m, toks, {}, true);
    InterventionPlan p = freeze_except(clean, 0, 0, clean);
    p.add(PruneHeads{{{0, 0}}});
    const RunTrace tr = forward(m, toks, p, false);
    for (size_t v = 0; v < clean.logits.size(); ++v) REQUIRE(tr.logits[v] == clean.logits[v]);
}

TEST_CASE("plan text round trips") {
    const int n = 4, k = 2;
    Tensor rep(n, k);
    for (size_t i = 0; i < rep.size(); ++i) rep.data[i] = float(i) * 0.37f - 1.0f;

    InterventionPlan plan;
    plan.add(KnockoutComponent{ComponentKind::ffn, {0, 3}, {1}});
    plan.add(BlockAttention{3, {0, 1}, {0, 1}, {1}, true});
    plan.add(PatchHead{1, 0, rep});
    plan.add(PruneHeads{{{0, 1}, {1, 1}}});
    plan.add(ScaleHead{0, 0, 1.0 + 1e-3});

    const std::string text = plan_to_text(plan);
    const InterventionPlan back = parse_plan(text);
    CHECK(plan_to_text(back) == text);

    const auto* sc = std::get_if<ScaleHead>(&back.directives.at(4));
    REQUIRE(sc != nullptr);
    CHECK(sc->alpha == 1.0 + 1e-3); // shortest round-trip formatting is lossless

    const auto* pa = std::get_if<PatchHead>(&back.directives.at(2));
    REQUIRE(pa != nullptr);
    REQUIRE(pa->replacement.same_shape(rep));
    for (size_t i = 0; i < rep.size(); ++i) CHECK(pa->replacement.data[i] == rep.data[i]);
}

TEST_CASE("plan parsing reports malformed lines") {
    CHECK_NOTHROW(parse_plan("# comment only\n\n"));
    CHECK_NOTHROW(parse_plan("prune heads=0:1 # trailing comment\n"));
    CHECK_THROWS_AS(parse_plan("frobnicate x=1\n"), DataError);
    CHECK_THROWS_AS(parse_plan("knockout kind=mha positions=1\n"), DataError);
    CHECK_THROWS_AS(parse_plan("knockout kind=banana positions=1 layers=0\n"), DataError);
    CHECK_THROWS_AS(parse_plan("scale layer=0 head=0 alpha=x\n"), DataError);
    CHECK_THROWS_AS(parse_plan("prune heads=0-1\n"), DataError);
    CHECK_THROWS_AS(parse_plan("block query=0 keys=3-1 layers=0 heads=all\n"), DataError);
}

TEST_CASE("argmax breaks ties toward the lowest index") {
    const std::vector<float> v = {1.0f, 3.0f, 3.0f, 2.0f};
    CHECK(top_token(v) == 1);
    const std::vector<float> flat = {7.0f, 7.0f};
    CHECK(top_token(flat) == 0);
    CHECK_THROWS_AS(top_token(std::vector<float>{}), DataError);
}
