#include <random>

#include <benchmark/benchmark.h>

#include "headscope/eval.hpp"
#include "headscope/factworld.hpp"
#include "headscope/model.hpp"
#include "headscope/planted.hpp"
#include "headscope/runtime.hpp"
#include "headscope/scoring.hpp"
#include "headscope/tensor.hpp"

using namespace headscope;

namespace {

Tensor random_square(int n, uint64_t seed) {
    std::mt19937_64 eng(seed);
    std::uniform_real_distribution<float> dist(-0.5f, 0.5f);
    Tensor t(n, n);
    for (float& v : t.data) v = dist(eng);
    return t;
}

struct PlantedFixture {
    FactWorld world = gen_world(16, {"capital"}, 8, 3);
    PlantedModel pm = build_planted(world, "capital", [] {
        PlantedOptions opt;
        opt.lambda_mix = 0.4;
        return opt;
    }());
    std::vector<ConflictExample> ds = make_dataset(world, "capital", Form::triple);
};

const PlantedFixture& fixture() {
    static const PlantedFixture f;
    return f;
}

void bm_matmul(benchmark::State& state) {
    const int n = int(state.range(0));
    const Tensor a = random_square(n, 1);
    const Tensor b = random_square(n, 2);
    for (auto _ : state) {
        Tensor c = matmul(a, b);
        benchmark::DoNotOptimize(c.data.data());
    }
    state.SetItemsProcessed(int64_t(state.iterations()) * n * n * n);
}

void bm_planted_forward(benchmark::State& state) {
    const PlantedFixture& f = fixture();
    const std::vector<int>& tokens = f.ds.front().tokens;
    for (auto _ : state) {
        RunTrace tr = forward(f.pm.model, tokens);
        benchmark::DoNotOptimize(tr.logits.data());
    }
}

void bm_forward_recorded(benchmark::State& state) {
    const PlantedFixture& f = fixture();
    const std::vector<int>& tokens = f.ds.front().tokens;
    for (auto _ : state) {
        RunTrace tr = forward(f.pm.model, tokens, {}, /*record=*/true);
        benchmark::DoNotOptimize(tr.layers.data());
    }
}

void bm_path_patch_example(benchmark::State& state) {
    const PlantedFixture& f = fixture();
    const std::vector<ConflictExample> one{f.ds.front()};
    PathPatchOptions opt;
    opt.target = Target::context;
    for (auto _ : state) {
        HeadScores s = path_patch_scores(f.pm.model, one, opt);
        benchmark::DoNotOptimize(s.s.data());
    }
}

void bm_evaluate(benchmark::State& state) {
    const PlantedFixture& f = fixture();
    const int threads = int(state.range(0));
    for (auto _ : state) {
        UsageReport r = evaluate(f.pm.model, f.ds, {}, threads);
        benchmark::DoNotOptimize(r.n);
    }
    state.SetItemsProcessed(int64_t(state.iterations()) * int64_t(f.ds.size()));
}

BENCHMARK(bm_matmul)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_planted_forward);
BENCHMARK(bm_forward_recorded);
BENCHMARK(bm_path_patch_example);
BENCHMARK(bm_evaluate)->Arg(1)->Arg(4);

} // namespace

BENCHMARK_MAIN();
