#include "headscope/runtime.hpp"

#include <algorithm>
#include <cmath>

namespace headscope {

namespace {

void sort_unique(std::vector<int>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
}

bool same_tensor(const Tensor& a, const Tensor& b) {
    return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
}

} // namespace

CompiledPlan compile_plan(const ModelSpec& spec, const InterventionPlan& plan, int seq_len) {
    CompiledPlan cp;
    cp.layers.resize(size_t(spec.layers));
    for (auto& lh : cp.layers) {
        lh.patch.assign(size_t(spec.heads), nullptr);
        lh.prune.assign(size_t(spec.heads), 0);
        lh.scaled.assign(size_t(spec.heads), 0);
        lh.scale.assign(size_t(spec.heads), 1.0);
    }

    auto at = [](int l, int h) { return std::to_string(l) + ":" + std::to_string(h); };
    auto check_layer = [&](int l) {
        if (l < 0 || l >= spec.layers)
            throw DimensionError("plan references layer " + std::to_string(l) + " of " +
                                 std::to_string(spec.layers));
    };
    auto check_head = [&](int h) {
        if (h < 0 || h >= spec.heads)
            throw DimensionError("plan references head " + std::to_string(h) + " of " +
                                 std::to_string(spec.heads));
    };
    auto check_pos = [&](int p) {
        if (p < 0 || p >= seq_len)
            throw DimensionError("plan references position " + std::to_string(p) +
                                 " in a length-" + std::to_string(seq_len) + " run");
    };

    for (const auto& dir : plan.directives) {
        if (const auto* ko = std::get_if<KnockoutComponent>(&dir)) {
            for (int p : ko->positions) check_pos(p);
            for (int l : ko->layers) {
                check_layer(l);
                auto& dst = ko->kind == ComponentKind::mha ? cp.layers[size_t(l)].mha_knockout
                                                           : cp.layers[size_t(l)].ffn_knockout;
                dst.insert(dst.end(), ko->positions.begin(), ko->positions.end());
            }
        } else if (const auto* bl = std::get_if<BlockAttention>(&dir)) {
            check_pos(bl->query_pos);
            for (int p : bl->key_positions) check_pos(p);
            for (int h : bl->heads) check_head(h);
            LayerHooks::Block b;
            b.query = bl->query_pos;
            b.keys = bl->key_positions;
            sort_unique(b.keys);
            b.renormalize = bl->renormalize;
            b.heads.assign(size_t(spec.heads), bl->heads.empty() ? 1 : 0);
            for (int h : bl->heads) b.heads[size_t(h)] = 1;
            for (int l : bl->layers) {
                check_layer(l);
                cp.layers[size_t(l)].blocks.push_back(b);
            }
        } else if (const auto* pa = std::get_if<PatchHead>(&dir)) {
            check_layer(pa->layer);
            check_head(pa->head);
            if (pa->replacement.rows != seq_len || pa->replacement.cols != spec.head_dim())
                throw DimensionError("patch for head " + at(pa->layer, pa->head) +
                                     ": replacement shape differs from run (length mismatch?)");
            auto& slot = cp.layers[size_t(pa->layer)].patch[size_t(pa->head)];
            if (slot && !same_tensor(*slot, pa->replacement))
                throw DataError("contradictory patches for head " + at(pa->layer, pa->head));
            slot = &pa->replacement;
        } else if (const auto* pr = std::get_if<PruneHeads>(&dir)) {
            for (auto [l, h] : pr->heads) {
                check_layer(l);
                check_head(h);
                cp.layers[size_t(l)].prune[size_t(h)] = 1;
            }
        } else if (const auto* sc = std::get_if<ScaleHead>(&dir)) {
            check_layer(sc->layer);
            check_head(sc->head);
            auto& lh = cp.layers[size_t(sc->layer)];
            if (lh.scaled[size_t(sc->head)] && lh.scale[size_t(sc->head)] != sc->alpha)
                throw DataError("contradictory scales for head " + at(sc->layer, sc->head));
            lh.scaled[size_t(sc->head)] = 1;
            lh.scale[size_t(sc->head)] = sc->alpha;
        }
    }

    // Resolve overlapping directives; every resolution is reported.
    for (int l = 0; l < spec.layers; ++l) {
        auto& lh = cp.layers[size_t(l)];
        sort_unique(lh.mha_knockout);
        sort_unique(lh.ffn_knockout);
        bool any_patch = false;
        for (int h = 0; h < spec.heads; ++h) {
            if (!lh.patch[size_t(h)]) continue;
            any_patch = true;
            if (lh.prune[size_t(h)]) {
                lh.prune[size_t(h)] = 0;
                cp.notes.push_back("patch overrides prune at head " + at(l, h));
            }
            if (lh.scaled[size_t(h)]) {
                lh.scaled[size_t(h)] = 0;
                cp.notes.push_back("patch overrides scale at head " + at(l, h));
            }
        }
        for (int h = 0; h < spec.heads; ++h) {
            if (lh.prune[size_t(h)] && lh.scaled[size_t(h)]) {
                lh.scaled[size_t(h)] = 0;
                cp.notes.push_back("prune overrides scale at head " + at(l, h));
            }
        }
        if (any_patch && !lh.mha_knockout.empty()) {
            lh.mha_knockout.clear();
            cp.notes.push_back("MHA knockout dropped at layer " + std::to_string(l) +
                               ": patched heads take precedence");
        }
    }
    return cp;
}

int top_token(std::span<const float> logits) {
    if (logits.empty()) throw DataError("top_token: empty logits");
    int best = 0;
    for (int i = 1; i < int(logits.size()); ++i)
        if (logits[size_t(i)] > logits[size_t(best)]) best = i;
    return best;
}

std::vector<float> vocab_project(const Model& model, std::span<const float> residual) {
    const int d = model.spec.d_model, v = model.spec.vocab;
    if (int(residual.size()) != d)
        throw DimensionError("vocab_project: vector width differs from d_model");
    std::vector<float> out(size_t(v), 0.0f);
    for (int t = 0; t < v; ++t) {
        const float* er = model.w.e.data.data() + size_t(t) * d;
        float acc = 0.0f;
        for (int j = 0; j < d; ++j)
            if (er[j] != 0.0f) acc += er[j] * residual[size_t(j)];
        out[size_t(t)] = acc;
    }
    return out;
}

RunTrace forward(const Model& model, std::span<const int> tokens,
                 const InterventionPlan& plan, bool record) {
    const ModelSpec& spec = model.spec;
    const int n = int(tokens.size());
    if (n < 1) throw DataError("forward: empty token sequence");
    if (n > spec.n_max)
        throw DimensionError("forward: sequence length " + std::to_string(n) + " exceeds n_max " +
                             std::to_string(spec.n_max));
    for (int t : tokens)
        if (t < 0 || t >= spec.vocab)
            throw DataError("forward: token id " + std::to_string(t) + " out of range");

    const CompiledPlan cp = compile_plan(spec, plan, n);
    const int d = spec.d_model, k = spec.head_dim(), m = spec.heads;
    const float sk = std::sqrt(float(k));

    RunTrace tr;
    tr.n = n;
    tr.recorded = record;

    Tensor x(n, d);
    for (int i = 0; i < n; ++i) {
        auto er = model.w.e.row(tokens[size_t(i)]);
        auto pr = model.w.p.row(i);
        auto xr = x.row(i);
        for (int j = 0; j < d; ++j) xr[j] = er[size_t(j)] + pr[size_t(j)];
    }
    if (record) {
        tr.x0 = x;
        tr.layers.resize(size_t(spec.layers));
    }

    for (int l = 0; l < spec.layers; ++l) {
        const auto& lw = model.w.layers[size_t(l)];
        const auto& hooks = cp.layers[size_t(l)];
        LayerTrace* lt = record ? &tr.layers[size_t(l)] : nullptr;
        if (lt) lt->heads.resize(size_t(m));

        Tensor normed;
        const Tensor* xin = &x;
        if (spec.use_layer_norm) {
            normed = layer_norm(x, lw.ln1_gain, lw.ln1_bias, 1e-5f);
            xin = &normed;
        }

        Tensor hcat(n, d);
        for (int h = 0; h < m; ++h) {
            const Tensor* patch = hooks.patch[size_t(h)];
            Tensor s, ho;
            if (patch && !record) {
                ho = *patch; // attention is never consumed; skip computing it
            } else {
                Tensor q = matmul(*xin, lw.w_q[size_t(h)]);
                Tensor kk = matmul(*xin, lw.w_k[size_t(h)]);
                Tensor sc = matmul_nt(q, kk);
                s = Tensor(n, n);
                for (int i = 0; i < n; ++i) {
                    float mx = sc.at(i, 0) / sk;
                    for (int j = 1; j <= i; ++j) mx = std::max(mx, sc.at(i, j) / sk);
                    float sum = 0.0f;
                    for (int j = 0; j <= i; ++j) {
                        const float e = std::exp(sc.at(i, j) / sk - mx);
                        s.at(i, j) = e;
                        sum += e;
                    }
                    for (int j = 0; j <= i; ++j) s.at(i, j) /= sum;
                }
                for (const auto& b : hooks.blocks) {
                    if (!b.heads[size_t(h)]) continue;
                    for (int key : b.keys) s.at(b.query, key) = 0.0f;
                    if (b.renormalize) {
                        float sum = 0.0f;
                        for (int j = 0; j < n; ++j) sum += s.at(b.query, j);
                        if (sum > 0.0f)
                            for (int j = 0; j < n; ++j) s.at(b.query, j) /= sum;
                    }
                }
                if (patch) {
                    ho = *patch;
                } else {
                    ho = matmul(s, matmul(*xin, lw.w_v[size_t(h)]));
                }
            }
            if (hooks.prune[size_t(h)]) ho.fill(0.0f);
            if (hooks.scaled[size_t(h)]) {
                const double alpha = hooks.scale[size_t(h)];
                for (auto& v : ho.data) v = float(double(v) * alpha);
            }
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < k; ++j) hcat.at(i, h * k + j) = ho.at(i, j);
            if (lt) {
                lt->heads[size_t(h)].s = std::move(s);
                lt->heads[size_t(h)].h = std::move(ho);
            }
        }

        Tensor a = matmul(hcat, lw.w_o);
        for (int p : hooks.mha_knockout) a.zero_row(p);

        Tensor u(n, d);
        for (size_t i = 0; i < u.data.size(); ++i) u.data[i] = x.data[i] + a.data[i];

        Tensor fnormed;
        const Tensor* fin = &u;
        if (spec.use_layer_norm) {
            fnormed = layer_norm(u, lw.ln2_gain, lw.ln2_bias, 1e-5f);
            fin = &fnormed;
        }
        Tensor pre = matmul(*fin, lw.w1);
        Tensor act = spec.activation == Activation::gelu ? gelu(pre) : relu(pre);
        Tensor mt = matmul(act, lw.w2);
        for (int p : hooks.ffn_knockout) mt.zero_row(p);

        Tensor xn(n, d);
        for (size_t i = 0; i < xn.data.size(); ++i) xn.data[i] = u.data[i] + mt.data[i];

        if (lt) {
            lt->a = std::move(a);
            lt->m = std::move(mt);
            lt->x = xn;
        }
        x = std::move(xn);
    }

    tr.logits = vocab_project(model, x.row(n - 1));
    tr.probs = tr.logits;
    softmax_span(tr.probs);
    return tr;
}

} // namespace headscope
