#include "headscope/probe.hpp"

#include "headscope/errors.hpp"
#include "headscope/parallel.hpp"

namespace headscope {

int early_exit_top(const Model& model, std::span<const float> residual) {
    const std::vector<float> logits = vocab_project(model, residual);
    return top_token(logits);
}

std::vector<float> head_contribution(const Model& model, const RunTrace& trace, int layer, int head) {
    if (!trace.recorded) throw DataError("head_contribution needs a recorded trace");
    if (layer < 0 || layer >= int(trace.layers.size())) throw DimensionError("layer out of range");
    if (head < 0 || head >= model.spec.heads) throw DimensionError("head out of range");
    const int k = model.spec.head_dim();
    const int d = model.spec.d_model;
    const Tensor& h = trace.layers[size_t(layer)].heads[size_t(head)].h;
    const Tensor& wo = model.w.layers[size_t(layer)].w_o;
    std::span<const float> row = h.row(trace.n - 1);
    std::vector<float> out(size_t(d), 0.0f);
    for (int s = 0; s < k; ++s) {
        const float v = row[size_t(s)];
        if (v == 0.0f) continue;
        std::span<const float> wrow = wo.row(head * k + s);
        for (int j = 0; j < d; ++j) out[size_t(j)] += v * wrow[size_t(j)];
    }
    return out;
}

namespace {

void check_dataset(const std::vector<ConflictExample>& ds) {
    if (ds.empty()) throw DataError("extraction over an empty dataset");
}

} // namespace

double extraction_rate(const Model& model, const std::vector<ConflictExample>& ds,
                       ComponentKind kind, int layer, int threads) {
    check_dataset(ds);
    if (layer < 0 || layer >= model.spec.layers) throw DimensionError("layer out of range");
    std::vector<int> hit(ds.size(), 0);
    parallel_for(int(ds.size()), threads, [&](int i) {
        const RunTrace tr = forward(model, ds[size_t(i)].tokens, {}, true);
        const int final_top = top_token(tr.logits);
        const LayerTrace& lt = tr.layers[size_t(layer)];
        const Tensor& update = kind == ComponentKind::mha ? lt.a : lt.m;
        hit[size_t(i)] = early_exit_top(model, update.row(tr.n - 1)) == final_top ? 1 : 0;
    });
    long total = 0;
    for (int v : hit) total += v;
    return double(total) / double(ds.size());
}

std::vector<HeadExtraction> head_extraction_rates(const Model& model,
                                                  const std::vector<ConflictExample>& ds,
                                                  const std::vector<HeadCoord>& heads,
                                                  int threads) {
    check_dataset(ds);
    for (const HeadCoord& c : heads)
        if (c.layer < 0 || c.layer >= model.spec.layers || c.head < 0 || c.head >= model.spec.heads)
            throw DimensionError("head coordinate out of range");
    std::vector<std::vector<int>> hits(ds.size(), std::vector<int>(heads.size(), 0));
    parallel_for(int(ds.size()), threads, [&](int i) {
        const RunTrace tr = forward(model, ds[size_t(i)].tokens, {}, true);
        const int final_top = top_token(tr.logits);
        for (size_t c = 0; c < heads.size(); ++c) {
            const std::vector<float> contrib =
                head_contribution(model, tr, heads[c].layer, heads[c].head);
            hits[size_t(i)][c] = early_exit_top(model, contrib) == final_top ? 1 : 0;
        }
    });
    std::vector<HeadExtraction> out(heads.size());
    for (size_t c = 0; c < heads.size(); ++c) {
        long total = 0;
        for (size_t i = 0; i < ds.size(); ++i) total += hits[i][c];
        out[c] = HeadExtraction{heads[c], double(total) / double(ds.size())};
    }
    return out;
}

ExtractionProfile extraction_profile(const Model& model, const std::vector<ConflictExample>& ds,
                                     int threads) {
    check_dataset(ds);
    const int L = model.spec.layers;
    const int M = model.spec.heads;
    ExtractionProfile profile;
    profile.layers = L;
    profile.heads = M;
    profile.mha.assign(size_t(L), 0.0);
    profile.ffn.assign(size_t(L), 0.0);
    profile.head_rate.assign(size_t(L) * size_t(M), 0.0);

    const size_t cells = size_t(L) * (2 + size_t(M));
    std::vector<std::vector<int>> hits(ds.size(), std::vector<int>(cells, 0));
    parallel_for(int(ds.size()), threads, [&](int i) {
        const RunTrace tr = forward(model, ds[size_t(i)].tokens, {}, true);
        const int final_top = top_token(tr.logits);
        std::vector<int>& row = hits[size_t(i)];
        for (int l = 0; l < L; ++l) {
            const LayerTrace& lt = tr.layers[size_t(l)];
            row[size_t(l)] = early_exit_top(model, lt.a.row(tr.n - 1)) == final_top ? 1 : 0;
            row[size_t(L + l)] = early_exit_top(model, lt.m.row(tr.n - 1)) == final_top ? 1 : 0;
            for (int h = 0; h < M; ++h) {
                const std::vector<float> contrib = head_contribution(model, tr, l, h);
                row[size_t(2 * L) + size_t(l) * size_t(M) + size_t(h)] =
                    early_exit_top(model, contrib) == final_top ? 1 : 0;
            }
        }
    });
    const double n = double(ds.size());
    for (int l = 0; l < L; ++l) {
        long am = 0, fm = 0;
        for (size_t i = 0; i < ds.size(); ++i) {
            am += hits[i][size_t(l)];
            fm += hits[i][size_t(L + l)];
        }
        profile.mha[size_t(l)] = double(am) / n;
        profile.ffn[size_t(l)] = double(fm) / n;
    }
    for (size_t c = 0; c < size_t(L) * size_t(M); ++c) {
        long total = 0;
        for (size_t i = 0; i < ds.size(); ++i) total += hits[i][size_t(2 * L) + c];
        profile.head_rate[c] = double(total) / n;
    }
    return profile;
}

} // namespace headscope
