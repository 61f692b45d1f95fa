#include <benchmark/benchmark.h>

#include "mac/calibrator.hpp"
#include "mac/detector.hpp"
#include "mac/sia.hpp"
#include "mac/ssim.hpp"

using namespace mac;

namespace {

// 128x128 images give a 16x16 latent grid per sample.
void BM_Quantize(benchmark::State& state) {
    const auto cells = state.range(0);
    torch::manual_seed(1);
    calib::Codebook codebook(64, 16);
    const auto z_e = torch::randn({cells / 256, 16, 16, 16});
    for (auto _ : state) {
        benchmark::DoNotOptimize(calib::quantize(z_e, codebook).indices);
    }
    state.SetItemsProcessed(state.iterations() * cells);
}
BENCHMARK(BM_Quantize)->Arg(256)->Arg(4096)->Unit(benchmark::kMicrosecond);

void BM_SiaMask(benchmark::State& state) {
    torch::manual_seed(2);
    const auto g = torch::randn({16, 32, 16, 16});
    for (auto _ : state) {
        benchmark::DoNotOptimize(sia::sia_mask(g, 128, 128, 0.1));
    }
}
BENCHMARK(BM_SiaMask)->Unit(benchmark::kMicrosecond);

void BM_Ssim(benchmark::State& state) {
    torch::manual_seed(3);
    const auto x = torch::rand({16, 3, 128, 128});
    const auto y = torch::rand({16, 3, 128, 128});
    for (auto _ : state) {
        benchmark::DoNotOptimize(ssim(x, y));
    }
}
BENCHMARK(BM_Ssim)->Unit(benchmark::kMillisecond);

// One forward/backward/Adam step of the source detector on a batch of 16.
void BM_DetectorStep(benchmark::State& state) {
    det::DetectorConfig cfg;
    auto detector = det::make_detector(cfg, 4);
    torch::optim::Adam opt(detector->parameters(), 1e-3);
    torch::manual_seed(4);
    const auto images = torch::rand({16, 3, 128, 128});
    std::vector<Annotations> ann(16, Annotations{{0, {10, 12, 50, 60}}, {2, {70, 64, 110, 100}}});
    const auto targets = det::encode_targets(ann, cfg);
    for (auto _ : state) {
        opt.zero_grad();
        auto loss = det::source_loss(detector->forward(images), targets, cfg).total;
        loss.backward();
        opt.step();
    }
}
BENCHMARK(BM_DetectorStep)->Unit(benchmark::kMillisecond);

} // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    benchmark::Initialize(&argc, argv);
    if (benchmark::ReportUnrecognizedArguments(argc, argv)) {
        return 1;
    }
    benchmark::RunSpecifiedBenchmarks();
    benchmark::Shutdown();
    return 0;
}
