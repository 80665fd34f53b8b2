#include <benchmark/benchmark.h>

#include <random>

#include "mman/ops.hpp"

using namespace mman;

namespace {

Tensor rand_tensor(Shape shape, std::mt19937_64& rng, bool rg = false) {
    return Tensor::uniform(std::move(shape), -1.0, 1.0, rng, rg);
}

void BM_MatmulSquare(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    std::mt19937_64 rng(1);
    Tensor a = rand_tensor({n, n}, rng);
    Tensor b = rand_tensor({n, n}, rng);
    for (auto _ : state) {
        Tensor c = matmul(a, b);
        benchmark::DoNotOptimize(c.values().data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * n * n * n);
}
BENCHMARK(BM_MatmulSquare)->Arg(16)->Arg(32)->Arg(64)->Arg(128);

void BM_AttentionScores(benchmark::State& state) {
    // m x n x h query/key blocks at desk-preset sizes
    std::mt19937_64 rng(2);
    Tensor q = rand_tensor({4, 8, 8}, rng);
    Tensor k = rand_tensor({4, 8, 8}, rng);
    Mask mask(8, 1);
    for (auto _ : state) {
        Tensor att = softmax_lastdim(mask_scores(scalar_mul(matmul_nt(q, k), 0.125), mask));
        benchmark::DoNotOptimize(att.values().data());
    }
}
BENCHMARK(BM_AttentionScores);

void BM_Conv1dWindow(benchmark::State& state) {
    std::mt19937_64 rng(3);
    Tensor x = rand_tensor({7, 64}, rng);
    Tensor k = rand_tensor({8, 7, 1}, rng);
    Tensor k2 = rand_tensor({8, 8, 3}, rng);
    for (auto _ : state) {
        Tensor z = conv1d(x, k, 1);
        Tensor z2 = conv1d(z, k2, 1);
        benchmark::DoNotOptimize(z2.values().data());
    }
}
BENCHMARK(BM_Conv1dWindow);

void BM_SoftmaxRows(benchmark::State& state) {
    const auto rows = static_cast<std::size_t>(state.range(0));
    std::mt19937_64 rng(4);
    Tensor x = rand_tensor({rows, 64}, rng);
    for (auto _ : state) {
        Tensor y = softmax_lastdim(x);
        benchmark::DoNotOptimize(y.values().data());
    }
}
BENCHMARK(BM_SoftmaxRows)->Arg(8)->Arg(96);

void BM_BackwardMatmulChain(benchmark::State& state) {
    std::mt19937_64 rng(5);
    Tensor a = rand_tensor({32, 32}, rng, true);
    Tensor b = rand_tensor({32, 32}, rng, true);
    for (auto _ : state) {
        a.zero_grad();
        b.zero_grad();
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = sum_all(tanh_act(matmul(a, b)));
        tape.backward(loss);
        benchmark::DoNotOptimize(a.grad().data());
    }
}
BENCHMARK(BM_BackwardMatmulChain);

} // namespace
