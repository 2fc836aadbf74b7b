#include <benchmark/benchmark.h>

#include <random>

#include "hmseg/evalsuite.hpp"
#include "hmseg/metaengine.hpp"
#include "hmseg/synthvol.hpp"
#include "hmseg/tasks.hpp"

using namespace hmseg;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, uint64_t seed) {
    Tensor<double> t(std::move(shape));
    std::mt19937_64 eng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = n(eng);
    return t;
}

void ConvForward(benchmark::State& state) {
    const int c = static_cast<int>(state.range(0));
    Tensor<double> x = random_tensor({c, 24, 24, 24}, 1);
    Tensor<double> w = random_tensor({c, c, 3, 3, 3}, 2);
    Tensor<double> b = random_tensor({c}, 3);
    for (auto _ : state) {
        Tape<double> tape;
        auto y = tape.conv3d(tape.leaf(x), tape.leaf(w), tape.leaf(b));
        benchmark::DoNotOptimize(tape.val(y).ptr());
    }
}
BENCHMARK(ConvForward)->Arg(3)->Arg(6);

void GeneratePatient(benchmark::State& state) {
    uint64_t seed = 0;
    for (auto _ : state) {
        PatientSample s = generate_patient(++seed, {24, 24, 24}, 4);
        benchmark::DoNotOptimize(s.labels[0].data());
    }
}
BENCHMARK(GeneratePatient);

void FuseLevelAllMasks(benchmark::State& state) {
    ModelConfig cfg;
    cfg.validate();
    std::vector<double> theta = init_params(generator_layout(cfg), 5);
    std::vector<std::optional<Tensor<double>>> slots(4);
    for (int j = 0; j < 4; ++j) slots[static_cast<size_t>(j)] = random_tensor({3, 24, 24, 24}, 10 + j);
    for (auto _ : state) {
        FusionResult r = fuse_level(slots, 0, theta, cfg);
        benchmark::DoNotOptimize(r.fused.ptr());
    }
}
BENCHMARK(FuseLevelAllMasks);

void MetaUpdateTiny(benchmark::State& state) {
    ModelConfig cfg;
    cfg.modalities = 2;
    cfg.levels = 1;
    cfg.channels = {1};
    cfg.bottleneck_channels = 1;
    cfg.kernel = 1;
    cfg.disc_hidden_mult = 2;
    TrainConfig tc;
    tc.meta_batch_tasks = 2;
    ModelBundle mb = ModelBundle::make(cfg, Variant::Full, tc.weights);
    MetaParams p = init_meta_params(mb, tc);

    PatientSample s = generate_patient(1, {8, 8, 8}, 2);
    MetaBatch batch;
    MetaBatch::Task t;
    t.mask = ModalityMask::from_string("10");
    t.samples = {apply_modality_drop(s, t.mask)};
    batch.tasks.push_back(t);
    std::vector<std::vector<PatientSample>> fulls = {{generate_patient(2, {8, 8, 8}, 2)}};

    for (auto _ : state) {
        MetaGradients g = meta_gradient(mb, p, batch, fulls, tc);
        benchmark::DoNotOptimize(g.theta_g.data());
    }
}
BENCHMARK(MetaUpdateTiny);

void Hd95Spheres(benchmark::State& state) {
    PatientSample a = generate_patient(31, {24, 24, 24}, 4);
    PatientSample b = generate_patient(32, {24, 24, 24}, 4);
    for (auto _ : state) {
        double v = hd95(a.labels[kWT], b.labels[kWT], a.dims);
        benchmark::DoNotOptimize(v);
    }
}
BENCHMARK(Hd95Spheres);

}  // namespace

BENCHMARK_MAIN();
