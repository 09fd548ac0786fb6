#include "headscope/eval.hpp"

#include <algorithm>
#include <array>

#include "headscope/detsum.hpp"
#include "headscope/errors.hpp"
#include "headscope/parallel.hpp"
#include "headscope/runtime.hpp"

namespace headscope {

UsageReport finalize_counts(long f_m, long f_c, long f_o) {
    if (f_m < 0 || f_c < 0 || f_o < 0) throw DataError("negative usage count");
    UsageReport r;
    r.f_m = f_m;
    r.f_c = f_c;
    r.f_o = f_o;
    r.n = f_m + f_c + f_o;
    if (r.n == 0) throw DataError("usage report over zero examples");
    r.rm = double(f_m) / double(r.n);
    r.rc = double(f_c) / double(r.n);
    r.ro = double(f_o) / double(r.n);
    return r;
}

UsageReport combine(const std::vector<UsageReport>& parts) {
    long m = 0, c = 0, o = 0;
    for (const UsageReport& p : parts) {
        m += p.f_m;
        c += p.f_c;
        o += p.f_o;
    }
    return finalize_counts(m, c, o);
}

UsageReport evaluate(const Model& model, const std::vector<ConflictExample>& ds,
                     const InterventionPlan& plan, int threads) {
    if (ds.empty()) throw DataError("evaluation over an empty dataset");
    std::vector<int> cls(ds.size(), 0);
    parallel_for(int(ds.size()), threads, [&](int i) {
        const ConflictExample& ex = ds[size_t(i)];
        const RunTrace tr = forward(model, ex.tokens, plan);
        const int top = top_token(tr.logits);
        cls[size_t(i)] = top == ex.a_m ? 0 : top == ex.a_c ? 1 : 2;
    });
    long counts[3] = {0, 0, 0};
    for (int v : cls) ++counts[v];
    return finalize_counts(counts[0], counts[1], counts[2]);
}

namespace {

constexpr std::array<Element, kNumElements> kSweepElements = {
    Element::s_c, Element::r_c, Element::a_c, Element::s_q,
    Element::r_q, Element::x_n, Element::a_support};

SweepGrid sweep_common(const Model& model, const std::vector<ConflictExample>& ds,
                       const ComponentKind* kind, int window, int threads) {
    if (ds.empty()) throw DataError("sweep over an empty dataset");
    if (window < 0) throw DataError("layer window must be non-negative");
    const int L = model.spec.layers;
    const size_t cells = kSweepElements.size() * size_t(L);

    struct CellSample {
        double delta = 0.0, rel = 0.0;
        bool used = false;
    };
    std::vector<std::vector<CellSample>> rows(ds.size(), std::vector<CellSample>(cells));
    parallel_for(int(ds.size()), threads, [&](int i) {
        const ConflictExample& ex = ds[size_t(i)];
        const RunTrace clean = forward(model, ex.tokens);
        const int ans = top_token(clean.logits);
        const double p_clean = double(clean.probs[size_t(ans)]);
        for (size_t e = 0; e < kSweepElements.size(); ++e) {
            const Element el = kSweepElements[e];
            if (!ex.has_element(el)) continue;
            for (int c = 0; c < L; ++c) {
                const LayerWindow win{c, window};
                const InterventionPlan plan = kind != nullptr
                                                  ? knockout(*kind, el, win, ex, L)
                                                  : block_flow(el, win, ex, L);
                const RunTrace tr = forward(model, ex.tokens, plan);
                CellSample& s = rows[size_t(i)][e * size_t(L) + size_t(c)];
                s.delta = p_clean - double(tr.probs[size_t(ans)]);
                s.rel = s.delta / p_clean;
                s.used = true;
            }
        }
    });

    SweepGrid grid;
    grid.kind = kind != nullptr ? *kind : ComponentKind::mha;
    grid.window = window;
    grid.layers = L;
    grid.cells.resize(cells);
    for (size_t e = 0; e < kSweepElements.size(); ++e) {
        for (int c = 0; c < L; ++c) {
            SweepCell& cell = grid.cells[e * size_t(L) + size_t(c)];
            cell.element = kSweepElements[e];
            cell.layer = c;
            DetSum d_abs, d_rel;
            int used = 0;
            for (size_t i = 0; i < ds.size(); ++i) {
                const CellSample& s = rows[i][e * size_t(L) + size_t(c)];
                if (!s.used) continue;
                d_abs.add(s.delta);
                d_rel.add(s.rel);
                ++used;
            }
            cell.used = used;
            cell.skipped = int(ds.size()) - used;
            if (used > 0) {
                cell.mean_delta = d_abs.mean(size_t(used));
                cell.mean_rel = d_rel.mean(size_t(used));
            }
        }
    }
    return grid;
}

} // namespace

SweepGrid sweep_knockout(const Model& model, const std::vector<ConflictExample>& ds,
                         ComponentKind kind, int window, int threads) {
    return sweep_common(model, ds, &kind, window, threads);
}

SweepGrid sweep_flow_block(const Model& model, const std::vector<ConflictExample>& ds, int window,
                           int threads) {
    return sweep_common(model, ds, nullptr, window, threads);
}

PruneChoice select_prune_rate(const Model& model, const HeadScores& scores,
                              const std::vector<ConflictExample>& dev, Target target,
                              const std::vector<double>& grid, int threads) {
    if (grid.empty()) throw DataError("empty prune-rate grid");
    std::vector<double> rates = grid;
    std::sort(rates.begin(), rates.end());
    PruneChoice best;
    double best_rate = -1.0;
    for (double k : rates) {
        std::vector<HeadCoord> heads = rank_select(scores, k, /*ascending=*/true);
        InterventionPlan plan;
        PruneHeads prune;
        for (const HeadCoord& hc : heads) prune.heads.emplace_back(hc.layer, hc.head);
        plan.add(std::move(prune));
        const UsageReport rep = evaluate(model, dev, plan, threads);
        const double rate = target == Target::memory ? rep.rm : rep.rc;
        if (rate > best_rate) {
            best_rate = rate;
            best = PruneChoice{k, std::move(heads), rep};
        }
    }
    return best;
}

} // namespace headscope
