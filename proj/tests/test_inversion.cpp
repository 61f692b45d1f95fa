#include <gtest/gtest.h>

#include "mac/error.hpp"
#include "mac/inversion.hpp"
#include "mac/tensor_io.hpp"
#include "shared_run.hpp"

using namespace mac;
using namespace mac::inv;

namespace {

det::SourceDetector small_detector(std::uint64_t seed = 1) {
    det::DetectorConfig c;
    c.width = c.height = 64;
    return det::make_detector(c, seed);
}

LayoutConfig small_layout() {
    LayoutConfig l;
    l.width = l.height = 64;
    l.min_size = 12;
    l.max_size = 24;
    return l;
}

InversionConfig short_inversion(int steps) {
    InversionConfig c;
    c.steps = steps;
    c.seed = 77;
    return c;
}

} // namespace

TEST(InvertSource, ZeroStepsReturnsSeededInitialisation) {
    auto s = small_detector();
    const Annotations layout{{0, {4, 4, 30, 30}}};
    const auto cfg = short_inversion(0);
    const auto r = invert_source(s, layout, cfg);
    EXPECT_TRUE(torch::equal(r.image, initial_image(cfg.seed, cfg.init_sigma, 3, 64, 64)));
    EXPECT_EQ(r.loss_trace.size(), 1u);
    EXPECT_EQ(r.initial_loss, r.final_loss);
    EXPECT_EQ(r.layout, layout);
    EXPECT_EQ(r.seed, cfg.seed);
}

TEST(InvertSource, InitialisationIsSeededGaussian) {
    const auto a = initial_image(5, 0.02, 3, 64, 64);
    EXPECT_TRUE(torch::equal(a, initial_image(5, 0.02, 3, 64, 64)));
    EXPECT_FALSE(torch::equal(a, initial_image(6, 0.02, 3, 64, 64)));
    EXPECT_NEAR(a.std().item<double>(), 0.02, 0.002);
    EXPECT_NEAR(a.mean().item<double>(), 0.0, 0.002);
}

TEST(InvertSource, DetectorStaysBitUnchangedAndModeIsRestored) {
    auto s = small_detector();
    s->train();
    const auto before = parameter_checksum(*s);
    invert_source(s, {{1, {10, 10, 40, 34}}}, short_inversion(5));
    EXPECT_EQ(parameter_checksum(*s), before);
    EXPECT_TRUE(s->is_training());
    for (const auto& p : s->parameters()) {
        EXPECT_TRUE(p.requires_grad());
    }
}

TEST(InvertSource, LossDecreasesFromStartOnRandomDetector) {
    auto s = small_detector();
    const auto r = invert_source(s, {{1, {10, 10, 40, 34}}}, short_inversion(20));
    EXPECT_EQ(r.loss_trace.size(), 21u);
    EXPECT_LT(r.final_loss, r.initial_loss);
    EXPECT_TRUE(torch::isfinite(r.image).all().item<bool>());
    EXPECT_EQ(r.image.sizes(), (std::vector<std::int64_t>{3, 64, 64}));
}

TEST(InvertSource, EmptyLayoutRejectedAndBadConfig) {
    auto s = small_detector();
    EXPECT_THROW(invert_source(s, {}, short_inversion(1)), InputError);
    auto c = short_inversion(1);
    c.step_size = 0;
    EXPECT_THROW(invert_source(s, {{0, {1, 1, 20, 20}}}, c), ConfigError);
    c = short_inversion(-1);
    EXPECT_THROW(invert_source(s, {{0, {1, 1, 20, 20}}}, c), ConfigError);
}

TEST(InvertSource, DivergenceReportsStepIndex) {
    auto s = small_detector();
    {
        torch::NoGradGuard guard;
        s->named_parameters()["box.bias"].fill_(std::nanf(""));
    }
    try {
        invert_source(s, {{0, {1, 1, 20, 20}}}, short_inversion(5));
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("inversion step 0"), std::string::npos) << e.what();
    }
}

TEST(InvertBatch, ItemsFollowIndependentTrajectories) {
    auto s = small_detector();
    const std::vector<Annotations> layouts{{{0, {4, 4, 30, 30}}}, {{2, {20, 30, 50, 60}}}};
    const std::vector<std::uint64_t> seeds{3, 4};
    const auto cfg = short_inversion(4);
    const auto batch = invert_batch(s, layouts, seeds, cfg);
    for (std::size_t i = 0; i < 2; ++i) {
        auto single_cfg = cfg;
        single_cfg.seed = seeds[i];
        const auto single = invert_source(s, layouts[i], single_cfg);
        EXPECT_LE((single.image - batch[i].image).abs().max().item<double>(), 1e-5);
        EXPECT_NEAR(single.final_loss, batch[i].final_loss, 1e-5);
    }
}

TEST(RandomLayout, BoundsAndDeterminism) {
    const auto cfg = small_layout();
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
        const auto l = generate_random_layout(seed, cfg);
        EXPECT_GE(l.size(), static_cast<std::size_t>(cfg.min_count));
        EXPECT_LE(l.size(), static_cast<std::size_t>(cfg.max_count));
        for (const auto& a : l) {
            EXPECT_LT(a.box.x_min, a.box.x_max);
            EXPECT_LT(a.box.y_min, a.box.y_max);
            EXPECT_TRUE(a.box.inside(64, 64));
            EXPECT_GE(a.box.width(), cfg.min_size);
            EXPECT_LE(a.box.width(), cfg.max_size);
            EXPECT_GE(a.box.height(), cfg.min_size);
            EXPECT_LE(a.box.height(), cfg.max_size);
        }
        EXPECT_EQ(l, generate_random_layout(seed, cfg));
    }
}

TEST(RandomLayout, ClassHistogramWithinThreeSigma) {
    const LayoutConfig cfg;
    std::vector<std::int64_t> counts(static_cast<std::size_t>(cfg.num_classes), 0);
    std::int64_t total = 0;
    for (std::uint64_t seed = 0; seed < 10000; ++seed) {
        for (const auto& a : generate_random_layout(mix_seed(123, seed), cfg)) {
            ++counts[static_cast<std::size_t>(a.class_id)];
            ++total;
        }
    }
    const double p = 1.0 / cfg.num_classes;
    const double sigma = std::sqrt(static_cast<double>(total) * p * (1 - p));
    for (const auto c : counts) {
        EXPECT_LE(std::abs(static_cast<double>(c) - total * p), 3 * sigma);
    }
}

TEST(RandomLayout, InfeasibleBoundsRejected) {
    auto cfg = small_layout();
    cfg.max_size = 80;
    EXPECT_THROW(generate_random_layout(1, cfg), ConfigError);
    cfg = small_layout();
    cfg.min_count = 3;
    cfg.max_count = 2;
    EXPECT_THROW(generate_random_layout(1, cfg), ConfigError);
    cfg = small_layout();
    cfg.min_size = 0;
    EXPECT_THROW(generate_random_layout(1, cfg), ConfigError);
}

TEST(Corpus, SingletonEqualsDirectInversion) {
    auto s = small_detector();
    const auto layout_cfg = small_layout();
    CorpusOptions opts;
    opts.count = 1;
    const auto cfg = short_inversion(6);
    const auto corpus = build_inversion_corpus(s, layout_cfg, cfg, opts);
    ASSERT_EQ(corpus.size(), 1u);
    auto direct_cfg = cfg;
    direct_cfg.seed = mix_seed(opts.init_seed, 0);
    const auto direct = invert_source(s, generate_random_layout(mix_seed(opts.layout_seed, 0), layout_cfg), direct_cfg);
    EXPECT_TRUE(torch::equal(corpus[0].image, direct.image));
    EXPECT_EQ(corpus[0].layout, direct.layout);
    EXPECT_EQ(corpus[0].final_loss, direct.final_loss);
}

TEST(Corpus, DifferentSeedsSameLayoutGiveDifferentSemantics) {
    auto s = small_detector();
    const Annotations layout{{1, {8, 8, 40, 40}}};
    auto a = short_inversion(5);
    auto b = a;
    b.seed = a.seed + 1;
    const auto ja = invert_source(s, layout, a).image;
    const auto jb = invert_source(s, layout, b).image;
    EXPECT_GT((ja - jb).abs().max().item<double>(), 0.0);
}

TEST(Corpus, ProvenanceRecordedPerItem) {
    auto s = small_detector();
    CorpusOptions opts;
    opts.count = 3;
    opts.chunk = 2;
    const auto corpus = build_inversion_corpus(s, small_layout(), short_inversion(2), opts);
    ASSERT_EQ(corpus.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(corpus[i].seed, mix_seed(opts.init_seed, i));
        EXPECT_EQ(corpus[i].layout, generate_random_layout(mix_seed(opts.layout_seed, i), small_layout()));
        EXPECT_EQ(corpus[i].loss_trace.size(), 3u);
    }
    opts.count = 0;
    EXPECT_THROW(build_inversion_corpus(s, small_layout(), short_inversion(2), opts), ConfigError);
}

TEST(Concentration, HandImage) {
    auto img = torch::ones({3, 10, 10});
    img.index_put_({torch::indexing::Slice(), torch::indexing::Slice(2, 4), torch::indexing::Slice(2, 6)}, 3.0);
    EXPECT_NEAR(foreground_concentration(img, {{0, {2, 2, 6, 4}}}), 3.0, 1e-9);
    EXPECT_NEAR(foreground_concentration(-img, {{0, {2, 2, 6, 4}}}), 3.0, 1e-9);
}

TEST(BoxRecovery, CountsClassAndIouMatches) {
    const Annotations layout{{0, {0, 0, 10, 10}}, {1, {20, 20, 30, 30}}, {2, {40, 40, 50, 50}}};
    const Detections d{{0, {0, 0, 10, 11}, 0.9f}, {2, {20, 20, 30, 30}, 0.9f}, {2, {45, 45, 55, 55}, 0.9f}};
    EXPECT_NEAR(box_recovery(d, layout, 0.5), 1.0 / 3.0, 1e-12);
    EXPECT_EQ(box_recovery({}, layout, 0.5), 0.0);
}

TEST(SemanticsCache, RoundTripAndChecksumGuard) {
    auto s = small_detector();
    const auto item = invert_source(s, {{0, {2, 2, 30, 30}}}, short_inversion(2));
    const auto dir = testkit::fresh_dir("semantics_cache");
    write_semantics(dir, "x", item, 42);
    const auto back = read_semantics(dir, "x", 42);
    ASSERT_TRUE(back.has_value());
    EXPECT_TRUE(torch::equal(back->image, item.image));
    EXPECT_EQ(back->layout, item.layout);
    EXPECT_EQ(back->seed, item.seed);
    EXPECT_EQ(back->final_loss, item.final_loss);
    EXPECT_FALSE(read_semantics(dir, "x", 43).has_value());
    EXPECT_FALSE(read_semantics(dir, "missing", 42).has_value());
}
