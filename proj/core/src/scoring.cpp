#include "headscope/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "headscope/detsum.hpp"
#include "headscope/errors.hpp"
#include "headscope/intervention.hpp"
#include "headscope/parallel.hpp"
#include "headscope/runtime.hpp"

namespace headscope {

std::string target_name(Target t) { return t == Target::memory ? "memory" : "context"; }

Target target_from_name(const std::string& s) {
    if (s == "memory") return Target::memory;
    if (s == "context") return Target::context;
    throw DataError("unknown target '" + s + "' (expected memory or context)");
}

namespace {

// Answer-token NLL in double from float logits.
double nll(std::span<const float> logits, int answer) {
    if (answer < 0 || answer >= int(logits.size()))
        throw DimensionError("answer token id out of vocabulary range");
    double mx = -std::numeric_limits<double>::infinity();
    for (float v : logits) mx = std::max(mx, double(v));
    double sum = 0.0;
    for (float v : logits) sum += std::exp(double(v) - mx);
    return mx + std::log(sum) - double(logits[size_t(answer)]);
}

HeadScores mean_over_examples(int layers, int heads, const std::vector<std::vector<double>>& rows) {
    HeadScores out(layers, heads);
    const size_t cells = size_t(layers) * size_t(heads);
    for (size_t c = 0; c < cells; ++c) {
        DetSum acc;
        for (const auto& row : rows) acc.add(row[c]);
        out.s[c] = acc.mean(rows.size());
    }
    return out;
}

} // namespace

HeadScores grad_importance(const Model& model, const std::vector<LabeledPrompt>& data, double step,
                           int threads) {
    if (data.empty()) throw DataError("gradient importance over an empty dataset");
    if (!(step > 0.0)) throw DataError("finite-difference step must be positive");
    const int L = model.spec.layers;
    const int M = model.spec.heads;
    std::vector<std::vector<double>> rows(data.size(),
                                          std::vector<double>(size_t(L) * size_t(M), 0.0));
    parallel_for(int(data.size()), threads, [&](int i) {
        const LabeledPrompt& ex = data[size_t(i)];
        for (int l = 0; l < L; ++l) {
            for (int h = 0; h < M; ++h) {
                InterventionPlan up, down;
                up.add(ScaleHead{l, h, 1.0 + step});
                down.add(ScaleHead{l, h, 1.0 - step});
                const double lp = nll(forward(model, ex.tokens, up).logits, ex.answer);
                const double lm = nll(forward(model, ex.tokens, down).logits, ex.answer);
                rows[size_t(i)][size_t(l) * size_t(M) + size_t(h)] =
                    std::fabs((lp - lm) / (2.0 * step));
            }
        }
    });
    return mean_over_examples(L, M, rows);
}

HeadScores proxy_scores(const Model& model, const std::vector<ConflictExample>& ds, Target target,
                        double step, int threads) {
    if (ds.empty()) throw DataError("proxy scoring over an empty dataset");
    if (!(step > 0.0)) throw DataError("finite-difference step must be positive");
    const int L = model.spec.layers;
    const int M = model.spec.heads;
    // One pair of scaled forwards per head serves both loss labels: the NLLs
    // differ only in which logit is subtracted from the log-partition.
    std::vector<std::vector<double>> diff(ds.size(),
                                          std::vector<double>(size_t(L) * size_t(M), 0.0));
    parallel_for(int(ds.size()), threads, [&](int i) {
        const ConflictExample& ex = ds[size_t(i)];
        const int t = target == Target::memory ? ex.a_m : ex.a_c;
        const int o = target == Target::memory ? ex.a_c : ex.a_m;
        for (int l = 0; l < L; ++l) {
            for (int h = 0; h < M; ++h) {
                InterventionPlan up, down;
                up.add(ScaleHead{l, h, 1.0 + step});
                down.add(ScaleHead{l, h, 1.0 - step});
                const RunTrace trp = forward(model, ex.tokens, up);
                const RunTrace trm = forward(model, ex.tokens, down);
                const double fd_t =
                    std::fabs((nll(trp.logits, t) - nll(trm.logits, t)) / (2.0 * step));
                const double fd_o =
                    std::fabs((nll(trp.logits, o) - nll(trm.logits, o)) / (2.0 * step));
                diff[size_t(i)][size_t(l) * size_t(M) + size_t(h)] = fd_t - fd_o;
            }
        }
    });
    return mean_over_examples(L, M, diff);
}

HeadScores path_patch_scores(const Model& model, const std::vector<ConflictExample>& ds,
                             const PathPatchOptions& opt, int threads) {
    if (ds.empty()) throw DataError("path patching over an empty dataset");
    const int L = model.spec.layers;
    const int M = model.spec.heads;
    auto corrupt_one = [&](const ConflictExample& ex) {
        if (opt.corruptor) return opt.corruptor(ex);
        return corrupt(ex, opt.target == Target::memory ? CorruptMode::mask_subject
                                                        : CorruptMode::mask_attribute);
    };
    std::vector<std::vector<double>> diff(ds.size(),
                                          std::vector<double>(size_t(L) * size_t(M), 0.0));
    parallel_for(int(ds.size()), threads, [&](int i) {
        const ConflictExample& ex = ds[size_t(i)];
        const ConflictExample bad = corrupt_one(ex);
        if (bad.length() != ex.length())
            throw DataError("corruptor changed the example length");
        const int t = opt.target == Target::memory ? ex.a_m : ex.a_c;
        const int o = opt.target == Target::memory ? ex.a_c : ex.a_m;
        const RunTrace clean = forward(model, ex.tokens, {}, true);
        const RunTrace corr = forward(model, bad.tokens, {}, true);
        auto margin = [&](const RunTrace& tr) {
            const std::vector<float>& f = opt.use_probs ? tr.probs : tr.logits;
            return double(f[size_t(t)]) - double(f[size_t(o)]);
        };
        const double margin_clean = margin(clean);
        for (int l = 0; l < L; ++l) {
            for (int h = 0; h < M; ++h) {
                const InterventionPlan plan = freeze_except(clean, l, h, corr);
                const RunTrace patched = forward(model, ex.tokens, plan);
                diff[size_t(i)][size_t(l) * size_t(M) + size_t(h)] =
                    margin_clean - margin(patched);
            }
        }
    });
    return mean_over_examples(L, M, diff);
}

std::vector<HeadCoord> rank_select(const HeadScores& scores, double k_percent, bool ascending) {
    if (scores.layers <= 0 || scores.heads <= 0) throw DataError("empty score map");
    if (!(k_percent > 0.0)) throw DataError("selection rate must be positive");
    const int total = scores.layers * scores.heads;
    int n = int(std::ceil(k_percent * double(total) / 100.0));
    n = std::clamp(n, 1, total);
    std::vector<int> idx(static_cast<size_t>(total));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        const double sa = scores.s[size_t(a)];
        const double sb = scores.s[size_t(b)];
        if (sa != sb) return ascending ? sa < sb : sa > sb;
        return a < b; // row-major order == lexicographic (layer, head)
    });
    std::vector<HeadCoord> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i)
        out.push_back(HeadCoord{idx[size_t(i)] / scores.heads, idx[size_t(i)] % scores.heads});
    return out;
}

} // namespace headscope
