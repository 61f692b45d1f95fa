#include <gtest/gtest.h>

#include "mac/calibrator.hpp"
#include "mac/error.hpp"
#include "mac/synthdata.hpp"
#include "mac/tensor_io.hpp"

using namespace mac;
using namespace mac::calib;

namespace {

// Exhaustive oracle: every distance in double, first minimum wins.
std::vector<std::int64_t> brute_force_nearest(const torch::Tensor& rows, const torch::Tensor& codes) {
    const auto z = rows.to(torch::kFloat64);
    const auto e = codes.to(torch::kFloat64);
    std::vector<std::int64_t> out;
    for (std::int64_t i = 0; i < z.size(0); ++i) {
        const auto d = (e - z[i]).pow(2).sum(1);
        const auto acc = d.accessor<double, 1>();
        std::int64_t best = 0;
        for (std::int64_t k = 1; k < d.size(0); ++k) {
            if (acc[k] < acc[best]) {
                best = k;
            }
        }
        out.push_back(best);
    }
    return out;
}

Codebook two_codes() {
    Codebook cb(2, 2);
    torch::NoGradGuard guard;
    cb->embeddings.copy_(torch::tensor({0.0f, 0.0f, 1.0f, 1.0f}).view({2, 2}));
    return cb;
}

std::int64_t code_of(Codebook& cb, float a, float b) {
    return quantize(torch::tensor({a, b}).view({1, 2, 1, 1}), cb).indices.item<std::int64_t>();
}

CalibratorConfig config_for(synth::SensorMode mode) {
    synth::SensorConfig s;
    s.mode = mode;
    return CalibratorConfig::for_sensor(s, 128, 128);
}

} // namespace

TEST(Quantize, NearestNeighbourExamples) {
    auto cb = two_codes();
    EXPECT_EQ(code_of(cb, 0.2f, 0.1f), 0);
    EXPECT_EQ(code_of(cb, 0.6f, 0.6f), 1);
    EXPECT_EQ(code_of(cb, 0.5f, 0.5f), 0);  // equidistant: lowest index
}

TEST(Quantize, MatchesExhaustiveSearchOnRandomBatches) {
    torch::manual_seed(7);
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = 2 + trial * 3;
        Codebook cb(p, 8);
        const auto z = torch::randn({2, 8, 5, 6});
        const auto q = quantize(z, cb);
        const auto rows = z.permute({0, 2, 3, 1}).reshape({-1, 8});
        const auto expected = brute_force_nearest(rows, cb->embeddings);
        const auto got = q.indices.flatten();
        ASSERT_EQ(got.numel(), static_cast<std::int64_t>(expected.size()));
        for (std::size_t i = 0; i < expected.size(); ++i) {
            ASSERT_EQ(got[static_cast<std::int64_t>(i)].item<std::int64_t>(), expected[i]);
        }
        EXPECT_GE(q.indices.min().item<std::int64_t>(), 0);
        EXPECT_LT(q.indices.max().item<std::int64_t>(), p);
    }
}

TEST(Quantize, QuantizedCellsAreBitEqualToCodebookRows) {
    torch::manual_seed(8);
    Codebook cb(16, 4);
    const auto q = quantize(torch::randn({3, 4, 4, 4}), cb);
    const auto cells = q.z_q.permute({0, 2, 3, 1}).reshape({-1, 4});
    const auto idx = q.indices.flatten();
    for (std::int64_t i = 0; i < cells.size(0); ++i) {
        EXPECT_TRUE(torch::equal(cells[i], cb->embeddings[idx[i].item<std::int64_t>()]));
    }
}

TEST(Quantize, StraightThroughCopiesGradientUnchanged) {
    torch::manual_seed(9);
    Codebook cb(8, 4);
    const auto z_e = torch::randn({2, 4, 3, 3}).requires_grad_(true);
    const auto q = quantize(z_e, cb);
    const auto upstream = torch::randn({2, 4, 3, 3});
    q.z_st.backward(upstream);
    EXPECT_TRUE(torch::equal(z_e.grad(), upstream));
}

TEST(Quantize, UsageCountersOnlyWhenRequested) {
    torch::manual_seed(10);
    Codebook cb(8, 4);
    const auto z = torch::randn({1, 4, 4, 4});
    quantize(z, cb, false);
    EXPECT_EQ(cb->usage.sum().item<std::int64_t>(), 0);
    quantize(z, cb, true);
    EXPECT_EQ(cb->usage.sum().item<std::int64_t>(), 16);
}

TEST(Quantize, EmptyCodebookAndDimensionMismatch) {
    EXPECT_THROW(nearest_codes(torch::zeros({3, 2}), torch::zeros({0, 2})), ConfigError);
    EXPECT_THROW(nearest_codes(torch::zeros({3, 3}), torch::zeros({4, 2})), InputError);
}

TEST(VqLosses, FixedPointIsZero) {
    torch::manual_seed(11);
    Codebook cb(8, 4);
    const auto z_e = cb->embeddings.detach().index_select(0, torch::tensor({1, 5, 2, 7})).view({1, 2, 2, 4}).permute(
        {0, 3, 1, 2});
    const auto q = quantize(z_e, cb);
    const auto img = torch::rand({1, 3, 16, 16});
    const auto l = vq_losses(z_e, q.z_q, img, img, 0.25);
    EXPECT_EQ(l.reconstruction.item<double>(), 0.0);
    EXPECT_EQ(l.codebook.item<double>(), 0.0);
    EXPECT_EQ(l.commitment.item<double>(), 0.0);
    EXPECT_EQ(l.total.item<double>(), 0.0);
}

TEST(VqLosses, ZeroBetaIgnoresCommitment) {
    const auto z_e = torch::tensor({1.0, 2.0}, torch::kFloat64).view({1, 2, 1, 1});
    const auto z_q = torch::tensor({0.0, 0.0}, torch::kFloat64).view({1, 2, 1, 1});
    const auto l = vq_losses(z_e, z_q, {}, {}, 0.0);
    EXPECT_EQ(l.total.item<double>(), l.codebook.item<double>());
}

TEST(VqLosses, SingleCellHandComputation) {
    const auto z_e = torch::tensor({0.3, -1.2, 2.0}, torch::kFloat64).view({1, 3, 1, 1});
    const auto z_q = torch::tensor({0.5, -1.0, 1.5}, torch::kFloat64).view({1, 3, 1, 1});
    const auto rec = torch::tensor({0.1, 0.9}, torch::kFloat64).view({1, 2, 1, 1});
    const auto target = torch::tensor({0.4, 0.5}, torch::kFloat64).view({1, 2, 1, 1});
    const double sq_latent = (0.2 * 0.2 + 0.2 * 0.2 + 0.5 * 0.5) / 3.0;
    const double sq_rec = (0.3 * 0.3 + 0.4 * 0.4) / 2.0;
    const auto l = vq_losses(z_e, z_q, rec, target, 0.25);
    EXPECT_NEAR(l.reconstruction.item<double>(), sq_rec, 1e-9);
    EXPECT_NEAR(l.codebook.item<double>(), sq_latent, 1e-9);
    EXPECT_NEAR(l.commitment.item<double>(), sq_latent, 1e-9);
    EXPECT_NEAR(l.total.item<double>(), sq_rec + 1.25 * sq_latent, 1e-9);
}

TEST(VqLosses, StopGradientsSplitTheTerms) {
    const auto z_e = torch::tensor({0.3, -1.2}, torch::kFloat64).view({1, 2, 1, 1}).requires_grad_(true);
    const auto z_q = torch::tensor({0.5, -1.0}, torch::kFloat64).view({1, 2, 1, 1}).requires_grad_(true);
    auto l = vq_losses(z_e, z_q, {}, {}, 0.25);
    l.codebook.backward();
    EXPECT_FALSE(z_e.grad().defined() && z_e.grad().abs().sum().item<double>() != 0.0);
    EXPECT_GT(z_q.grad().abs().sum().item<double>(), 0.0);
    z_q.grad().zero_();
    l = vq_losses(z_e, z_q, {}, {}, 0.25);
    l.commitment.backward();
    EXPECT_EQ(z_q.grad().abs().sum().item<double>(), 0.0);
    EXPECT_GT(z_e.grad().abs().sum().item<double>(), 0.0);
}

TEST(Adapter, SpatialKeepsDimensionsFlatUsesGrid) {
    Calibrator spatial(config_for(synth::SensorMode::SpatialDegraded));
    spatial.initialize(1);
    const auto a = spatial.adapt_modality(torch::rand({2, 2, 64, 64}));
    EXPECT_EQ(a.size(2), 64);
    EXPECT_EQ(a.size(3), 64);

    const auto flat_cfg = config_for(synth::SensorMode::ScrambledProjection);
    Calibrator flat(flat_cfg);
    flat.initialize(1);
    const auto b = flat.adapt_modality(torch::rand({2, flat_cfg.input_shape[0], 1, 1}));
    EXPECT_EQ(b.size(2), flat_cfg.adapter_grid);
    EXPECT_EQ(b.size(3), flat_cfg.adapter_grid);
    EXPECT_TRUE(torch::isfinite(b).all().item<bool>());
}

TEST(Adapter, GradientIsLiveThroughStraightThrough) {
    Calibrator c(config_for(synth::SensorMode::SpatialDegraded));
    c.initialize(2);
    torch::manual_seed(3);
    const auto x = torch::rand({1, 2, 64, 64});
    const auto target = torch::rand({1, 3, 128, 128});
    const auto out = c.calibrate(x);
    torch::mse_loss(out.image, target).backward();
    const auto params = c.parameters(ParamGroup::Adapter);
    double total = 0;
    for (const auto& p : params) {
        total += p.grad().abs().sum().item<double>();
    }
    EXPECT_GT(total, 0.0);

    // a finite perturbation of one adapter weight moves J
    c.eval();
    const auto before = c.calibrate(x).image.detach().clone();
    {
        torch::NoGradGuard guard;
        params[0].view(-1)[0] += 0.5;
    }
    const auto after = c.calibrate(x).image.detach();
    EXPECT_GT((after - before).abs().max().item<double>(), 0.0);
}

TEST(Calibrate, ShapeDeterminismAndState) {
    const auto cfg = config_for(synth::SensorMode::SpatialDegraded);
    Calibrator c(cfg);
    EXPECT_THROW(c.calibrate(torch::rand({1, 2, 64, 64})), StateError);
    c.initialize(4);
    c.eval();
    const auto x = torch::rand({3, 2, 64, 64});
    const auto a = c.calibrate(x).image;
    EXPECT_EQ(a.sizes(), (std::vector<std::int64_t>{3, 3, 128, 128}));
    EXPECT_TRUE(torch::isfinite(a).all().item<bool>());
    EXPECT_TRUE(torch::equal(a, c.calibrate(x).image));
    EXPECT_EQ(c.calibrate(x[0]).image.sizes(), (std::vector<std::int64_t>{1, 3, 128, 128}));
    EXPECT_THROW(c.calibrate(torch::rand({1, 3, 64, 64})), InputError);
    EXPECT_THROW(c.calibrate(torch::rand({1, 2, 32, 32})), InputError);
}

TEST(Calibrate, FlatSensorProducesImage) {
    const auto cfg = config_for(synth::SensorMode::ScrambledProjection);
    Calibrator c(cfg);
    c.initialize(5);
    const auto j = c.calibrate(torch::rand({2, cfg.input_shape[0], 1, 1})).image;
    EXPECT_EQ(j.sizes(), (std::vector<std::int64_t>{2, 3, 128, 128}));
}

TEST(Calibrate, LatentGridIsImageOverEight) {
    Calibrator c(config_for(synth::SensorMode::SpatialDegraded));
    c.initialize(6);
    const auto out = c.calibrate(torch::rand({1, 2, 64, 64}));
    EXPECT_EQ(out.z_e.sizes(), (std::vector<std::int64_t>{1, 16, 16, 16}));
    EXPECT_EQ(out.latent.indices.sizes(), (std::vector<std::int64_t>{1, 16, 16}));
}

TEST(Calibrator, ParameterGroupsPartitionTheNetwork) {
    Calibrator c(config_for(synth::SensorMode::SpatialDegraded));
    c.initialize(7);
    std::size_t grouped = 0;
    for (const auto g : {ParamGroup::Adapter, ParamGroup::Encoder, ParamGroup::Codebook, ParamGroup::Decoder}) {
        grouped += c.parameters(g).size();
        EXPECT_FALSE(c.parameters(g).empty()) << to_string(g);
    }
    EXPECT_EQ(grouped, c.parameters().size());
    EXPECT_TRUE(c.parameters(ParamGroup::Source).empty());
}

TEST(Calibrator, SeededInitAndCheckpointRoundTrip) {
    const auto cfg = config_for(synth::SensorMode::SpatialDegraded);
    Calibrator a(cfg), b(cfg);
    a.initialize(8);
    b.initialize(8);
    EXPECT_EQ(parameter_checksum(*a.net()), parameter_checksum(*b.net()));
    auto back = Calibrator::from_checkpoint(a.checkpoint());
    EXPECT_EQ(back.config(), cfg);
    EXPECT_EQ(parameter_checksum(*back.net()), parameter_checksum(*a.net()));
}

TEST(CalibratorConfig, Validation) {
    auto c = config_for(synth::SensorMode::SpatialDegraded);
    c.codebook_size = 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = config_for(synth::SensorMode::SpatialDegraded);
    c.image_width = 100;
    EXPECT_THROW(c.validate(), ConfigError);
    c = config_for(synth::SensorMode::SpatialDegraded);
    EXPECT_EQ(CalibratorConfig::from_kv(c.to_kv()), c);
}
