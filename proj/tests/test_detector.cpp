#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "mac/detector.hpp"
#include "mac/error.hpp"
#include "mac/metrics.hpp"
#include "mac/rng.hpp"
#include "mac/synthdata.hpp"
#include "mac/tensor_io.hpp"
#include "shared_run.hpp"

using namespace mac;
using namespace mac::det;

namespace {

DetectorConfig small_config(int size) {
    DetectorConfig c;
    c.width = size;
    c.height = size;
    return c;
}

// Head that encodes the targets exactly with saturated logits.
RawHead perfect_head(const HeadTargets& t, int num_classes) {
    const auto pos = t.positive.unsqueeze(1);
    RawHead h;
    h.objectness = pos * 40 - 20;
    h.class_logits = torch::one_hot(t.class_index, num_classes).permute({0, 3, 1, 2}).to(torch::kFloat32) * 40 - 20;
    h.box = t.box.clone();
    return h;
}

struct Scored {
    std::int64_t image;
    Detection det;
};

// Exhaustive oracle: rank by score, greedy matching, cumulative precision and
// recall at every cut-off, then 101-point interpolated precision.
double oracle_ap(const std::map<std::int64_t, Detections>& preds, const std::map<std::int64_t, Annotations>& gt,
                 int cls, double thr) {
    std::vector<Scored> all;
    for (const auto& [id, ds] : preds) {
        for (const auto& d : ds) {
            if (d.class_id == cls) {
                all.push_back({id, d});
            }
        }
    }
    std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.det.score > b.det.score; });
    std::map<std::int64_t, std::vector<bool>> taken;
    int n_gt = 0;
    for (const auto& [id, as] : gt) {
        taken[id].assign(as.size(), false);
        for (const auto& a : as) {
            n_gt += a.class_id == cls;
        }
    }
    if (n_gt == 0) {
        return -1;
    }
    std::vector<double> precision, recall;
    int tp = 0;
    for (std::size_t k = 0; k < all.size(); ++k) {
        const auto& as = gt.at(all[k].image);
        int best = -1;
        double best_iou = thr;
        for (std::size_t g = 0; g < as.size(); ++g) {
            if (as[g].class_id != cls || taken[all[k].image][g]) {
                continue;
            }
            const double v = iou(all[k].det.box, as[g].box);
            if (v >= best_iou) {
                best_iou = v;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            taken[all[k].image][static_cast<std::size_t>(best)] = true;
            ++tp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
        recall.push_back(static_cast<double>(tp) / n_gt);
    }
    double sum = 0;
    for (int i = 0; i <= 100; ++i) {
        const double r = i / 100.0;
        double p = 0;
        for (std::size_t k = 0; k < precision.size(); ++k) {
            if (recall[k] >= r - 1e-12) {
                p = std::max(p, precision[k]);
            }
        }
        sum += p;
    }
    return sum / 101.0;
}

Box random_box(Rng& rng, float canvas) {
    const float w = static_cast<float>(rng.uniform(4, 20));
    const float h = static_cast<float>(rng.uniform(4, 20));
    const float x = static_cast<float>(rng.uniform(0, canvas - w));
    const float y = static_cast<float>(rng.uniform(0, canvas - h));
    return {x, y, x + w, y + h};
}

} // namespace

TEST(SourceLoss, PerfectPredictionLimit) {
    const auto cfg = small_config(64);
    const std::vector<Annotations> ann{{{0, {4, 4, 20, 30}}, {2, {30, 10, 60, 40}}}, {{1, {10, 40, 34, 60}}}};
    const auto t = encode_targets(ann, cfg);
    const auto loss = source_loss(perfect_head(t, cfg.num_classes), t, cfg);
    EXPECT_EQ(loss.bbox.item<double>(), 0.0);
    EXPECT_LT(loss.cls.item<double>(), 1e-3);
}

TEST(SourceLoss, ZeroWeightsGiveZero) {
    auto cfg = small_config(64);
    cfg.weights = {0.0, 0.0, 0.0};
    const std::vector<Annotations> ann{{{1, {8, 8, 30, 30}}}};
    const auto t = encode_targets(ann, cfg);
    RawHead h{torch::randn({1, 1, 8, 8}), torch::randn({1, 3, 8, 8}), torch::randn({1, 4, 8, 8}), {}};
    EXPECT_EQ(source_loss(h, t, cfg).total.item<double>(), 0.0);
}

TEST(SourceLoss, SingleCellHandComputation) {
    DetectorConfig cfg = small_config(8);
    cfg.weights = {0.7, 1.3, 0.0};
    HeadTargets t;
    t.positive = torch::ones({1, 1, 1});
    t.class_index = torch::full({1, 1, 1}, 2, torch::kInt64);
    t.box = torch::tensor({0.25f, 0.5f, 0.1f, -0.2f}).view({1, 4, 1, 1});
    RawHead h;
    const double z = 0.3;
    const std::array<double, 3> logits{0.2, -0.4, 1.1};
    const std::array<double, 4> box{0.1, 0.9, 0.0, -0.5};
    h.objectness = torch::full({1, 1, 1, 1}, z, torch::kFloat64);
    h.class_logits = torch::tensor({logits[0], logits[1], logits[2]}, torch::kFloat64).view({1, 3, 1, 1});
    h.box = torch::tensor({box[0], box[1], box[2], box[3]}, torch::kFloat64).view({1, 4, 1, 1});

    // focal objectness (positive cell) + softmax cross entropy + L1, one positive
    const double p = 1.0 / (1.0 + std::exp(-z));
    const double focal = cfg.focal_alpha * std::pow(1 - p, cfg.focal_gamma) * -std::log(p);
    const double lse = std::log(std::exp(logits[0]) + std::exp(logits[1]) + std::exp(logits[2]));
    const double ce = lse - logits[2];
    const std::array<double, 4> target{0.25, 0.5, 0.1, -0.2};
    double l1 = 0;
    for (int i = 0; i < 4; ++i) {
        l1 += std::abs(box[i] - static_cast<double>(static_cast<float>(target[i])));
    }
    const auto loss = source_loss(h, t, cfg);
    EXPECT_NEAR(loss.cls.item<double>(), focal + ce, 1e-6);
    EXPECT_NEAR(loss.bbox.item<double>(), l1, 1e-6);
    EXPECT_NEAR(loss.total.item<double>(), 0.7 * l1 + 1.3 * (focal + ce), 1e-6);
}

TEST(SourceLoss, NegativeCellUsesBackgroundFocalTerm) {
    DetectorConfig cfg = small_config(8);
    HeadTargets t;
    t.positive = torch::zeros({1, 1, 1});
    t.class_index = torch::zeros({1, 1, 1}, torch::kInt64);
    t.box = torch::zeros({1, 4, 1, 1});
    const double z = -1.7;
    RawHead h{torch::full({1, 1, 1, 1}, z, torch::kFloat64), torch::zeros({1, 3, 1, 1}, torch::kFloat64),
              torch::ones({1, 4, 1, 1}, torch::kFloat64), {}};
    const double p = 1.0 / (1.0 + std::exp(-z));
    const double expected = (1 - cfg.focal_alpha) * std::pow(p, cfg.focal_gamma) * -std::log(1 - p);
    const auto loss = source_loss(h, t, cfg);
    EXPECT_NEAR(loss.cls.item<double>(), expected, 1e-9);
    EXPECT_EQ(loss.bbox.item<double>(), 0.0);
}

TEST(SourceLoss, TotalDecomposesIntoWeightedTerms) {
    auto cfg = small_config(64);
    cfg.weights = {0.35, 2.5, 0.0};
    const std::vector<Annotations> ann{{{0, {4, 4, 20, 30}}}, {{1, {10, 40, 34, 60}}, {2, {40, 2, 60, 22}}}};
    const auto t = encode_targets(ann, cfg);
    torch::manual_seed(3);
    RawHead h{torch::randn({2, 1, 8, 8}, torch::kFloat64), torch::randn({2, 3, 8, 8}, torch::kFloat64),
              torch::randn({2, 4, 8, 8}, torch::kFloat64), {}};
    for (const auto r : {Reduction::Mean, Reduction::Sum, Reduction::None}) {
        const auto l = source_loss(h, t, cfg, r);
        const auto recomposed = 0.35 * l.bbox + 2.5 * l.cls;
        EXPECT_LE((l.total - recomposed).abs().max().item<double>(), 1e-9);
    }
}

TEST(SourceLoss, EmptyAnnotationsGivePureBackgroundLoss) {
    const auto cfg = small_config(64);
    const std::vector<Annotations> ann{{}};
    const auto t = encode_targets(ann, cfg);
    EXPECT_EQ(t.positive.sum().item<float>(), 0.0f);
    RawHead h{torch::randn({1, 1, 8, 8}), torch::randn({1, 3, 8, 8}), torch::randn({1, 4, 8, 8}), {}};
    const auto l = source_loss(h, t, cfg);
    EXPECT_EQ(l.bbox.item<double>(), 0.0);
    EXPECT_GT(l.cls.item<double>(), 0.0);
}

TEST(SourceLoss, NanHeadIsNumericError) {
    const auto cfg = small_config(64);
    const std::vector<Annotations> ann{{{0, {4, 4, 20, 30}}}};
    const auto t = encode_targets(ann, cfg);
    RawHead h{torch::zeros({1, 1, 8, 8}), torch::zeros({1, 3, 8, 8}), torch::zeros({1, 4, 8, 8}), {}};
    h.objectness[0][0][3][3] = std::nanf("");
    EXPECT_THROW(source_loss(h, t, cfg), NumericError);
}

TEST(SourceLoss, InputGradientMatchesFiniteDifferences) {
    const auto cfg = small_config(16);
    auto detector = make_detector(cfg, 21);
    detector->to(torch::kFloat64);
    detector->eval();
    const std::vector<Annotations> ann{{{1, {2, 3, 12, 14}}}};
    const auto targets = encode_targets(ann, cfg);
    torch::manual_seed(5);
    const auto x = torch::rand({1, 3, 16, 16}, torch::kFloat64).requires_grad_(true);
    const auto loss_at = [&](const torch::Tensor& input) {
        return source_loss(detector->forward(input), targets, cfg).total;
    };
    const auto grad = torch::autograd::grad({loss_at(x)}, {x})[0];
    Rng rng(99);
    const double eps = 1e-6;
    torch::NoGradGuard guard;
    for (int k = 0; k < 20; ++k) {
        const auto c = rng.integer(0, 2), i = rng.integer(0, 15), j = rng.integer(0, 15);
        auto plus = x.detach().clone();
        auto minus = x.detach().clone();
        plus[0][c][i][j] += eps;
        minus[0][c][i][j] -= eps;
        const double fd = (loss_at(plus).item<double>() - loss_at(minus).item<double>()) / (2 * eps);
        const double ad = grad[0][c][i][j].item<double>();
        const double denom = std::max({std::abs(fd), std::abs(ad), 1e-12});
        EXPECT_LE(std::abs(fd - ad) / denom, 1e-3) << "coordinate " << c << "," << i << "," << j << " fd " << fd
                                                  << " autograd " << ad;
    }
}

TEST(Infer, UntrainedOnZerosIsValidAndDeterministic) {
    auto detector = make_detector(DetectorConfig{}, 1);
    const auto a = infer(detector, torch::zeros({3, 128, 128}));
    const auto b = infer(detector, torch::zeros({3, 128, 128}));
    ASSERT_EQ(a.size(), 1u);
    ASSERT_EQ(a[0].size(), b[0].size());
    for (std::size_t i = 0; i < a[0].size(); ++i) {
        EXPECT_EQ(a[0][i].box, b[0][i].box);
        EXPECT_EQ(a[0][i].score, b[0][i].score);
        EXPECT_TRUE(a[0][i].box.inside(128, 128));
        EXPECT_TRUE(std::isfinite(a[0][i].score));
    }
}

TEST(Infer, ShapeMismatchIsInputError) {
    auto detector = make_detector(DetectorConfig{}, 1);
    EXPECT_THROW(infer(detector, torch::zeros({3, 64, 64})), InputError);
    EXPECT_THROW(infer(detector, torch::zeros({1, 1, 128, 128})), InputError);
}

TEST(Infer, NmsKeepsHighestScorePerCluster) {
    Detections d{{0, {0, 0, 10, 10}, 0.6f}, {0, {1, 1, 11, 11}, 0.9f}, {1, {1, 1, 11, 11}, 0.5f},
                 {0, {30, 30, 40, 40}, 0.4f}};
    const auto kept = non_max_suppression(d, 0.5f);
    ASSERT_EQ(kept.size(), 3u);
    EXPECT_FLOAT_EQ(kept[0].score, 0.9f);
}

TEST(TrainSource, SeededRunsAreIdenticalAndCheckpointRoundTrips) {
    synth::GenConfig gen;
    gen.width = gen.height = 64;
    gen.max_size = 24;
    const auto ds = synth::generate_dataset(3, synth::kTrainStream, 16, gen, synth::SensorConfig{});
    auto cfg = small_config(64);
    SourceSchedule sched;
    sched.iterations = 6;
    sched.batch_size = 4;
    auto a = train_source(ds, cfg, sched, 42);
    auto b = train_source(ds, cfg, sched, 42);
    EXPECT_EQ(parameter_checksum(*a), parameter_checksum(*b));

    const auto path = testkit::fresh_dir("detector_ckpt") / "s.ckpt";
    save_detector(a, path);
    auto back = load_detector(path);
    EXPECT_EQ(back->config(), a->config());
    const auto images = ds.sources({0, 1, 2});
    const auto da = infer(a, images, 0.0f);
    const auto db = infer(back, images, 0.0f);
    ASSERT_EQ(da.size(), db.size());
    for (std::size_t i = 0; i < da.size(); ++i) {
        ASSERT_EQ(da[i].size(), db[i].size());
        for (std::size_t k = 0; k < da[i].size(); ++k) {
            EXPECT_EQ(da[i][k].box, db[i][k].box);
            EXPECT_EQ(da[i][k].score, db[i][k].score);
        }
    }
}

TEST(EvaluateMap, PerfectPredictorScoresOne) {
    std::map<std::int64_t, Annotations> gt{{0, {{0, {1, 1, 20, 20}}, {1, {30, 30, 60, 50}}}}, {1, {{2, {5, 5, 9, 40}}}}};
    std::map<std::int64_t, Detections> pred;
    for (const auto& [id, as] : gt) {
        for (const auto& a : as) {
            pred[id].push_back({a.class_id, a.box, 1.0f});
        }
    }
    const auto m = evaluate_map(pred, gt, 3);
    EXPECT_DOUBLE_EQ(m.ap50, 1.0);
    EXPECT_DOUBLE_EQ(m.ap50_95, 1.0);
    EXPECT_EQ(m.per_threshold.size(), 10u);
}

TEST(EvaluateMap, EmptyPredictionsScoreZero) {
    std::map<std::int64_t, Annotations> gt{{0, {{0, {1, 1, 20, 20}}}}};
    std::map<std::int64_t, Detections> pred{{0, {}}};
    const auto m = evaluate_map(pred, gt, 1);
    EXPECT_EQ(m.ap50, 0.0);
    EXPECT_EQ(m.ap50_95, 0.0);
}

TEST(EvaluateMap, OneTruePositiveOneFalsePositiveMatchesOracle) {
    const Box g{10, 10, 30, 30};
    // x extent 20, y extent 20 vs 20 + e: IoU = 400 / (400 + 20e) = 0.6 -> e = 40 / 3
    const Box pred_tp{10, 10, 30, 30 + 40.0f / 3.0f};
    ASSERT_NEAR(iou(pred_tp, g), 0.6f, 1e-5f);
    std::map<std::int64_t, Annotations> gt{{0, {{0, g}}}};
    std::map<std::int64_t, Detections> pred{{0, {{0, pred_tp, 0.9f}, {0, {60, 60, 80, 80}, 0.8f}}}};
    const double ap = average_precision(pred, gt, 0, 0.5);
    EXPECT_NEAR(ap, oracle_ap(pred, gt, 0, 0.5), 1e-12);
    EXPECT_NEAR(ap, 1.0, 1e-12);
    // ranking the false positive first halves the precision at full recall
    std::map<std::int64_t, Detections> swapped{{0, {{0, pred_tp, 0.8f}, {0, {60, 60, 80, 80}, 0.9f}}}};
    EXPECT_NEAR(average_precision(swapped, gt, 0, 0.5), oracle_ap(swapped, gt, 0, 0.5), 1e-12);
    EXPECT_NEAR(average_precision(swapped, gt, 0, 0.5), 0.5, 1e-12);
}

TEST(EvaluateMap, RandomCasesMatchOracleAndFalsePositiveRemovalNeverHurts) {
    Rng rng(2024);
    for (int trial = 0; trial < 300; ++trial) {
        std::map<std::int64_t, Annotations> gt;
        std::map<std::int64_t, Detections> pred;
        const auto images = rng.integer(1, 3);
        for (std::int64_t id = 0; id < images; ++id) {
            auto& g = gt[id];
            auto& p = pred[id];
            const auto n_gt = rng.integer(1, 4);
            for (std::int64_t k = 0; k < n_gt; ++k) {
                g.push_back({static_cast<int>(rng.integer(0, 1)), random_box(rng, 64)});
            }
            for (const auto& a : g) {
                if (rng.uniform() < 0.7) {
                    Box b = a.box;
                    const float jitter = static_cast<float>(rng.uniform(-3, 3));
                    b.x_min += jitter;
                    b.x_max += jitter;
                    p.push_back({a.class_id, b, static_cast<float>(rng.uniform())});
                }
            }
            const auto n_fp = rng.integer(0, 3);
            for (std::int64_t k = 0; k < n_fp; ++k) {
                p.push_back({static_cast<int>(rng.integer(0, 1)), random_box(rng, 64), static_cast<float>(rng.uniform())});
            }
        }
        for (const double thr : {0.5, 0.75}) {
            const double ap = average_precision(pred, gt, 0, thr);
            const double expected = oracle_ap(pred, gt, 0, thr);
            ASSERT_NEAR(ap, expected, 1e-12) << "trial " << trial;
            // remove every prediction that matches no ground truth at all
            auto pruned = pred;
            for (auto& [id, ds] : pruned) {
                std::erase_if(ds, [&](const Detection& d) {
                    if (d.class_id != 0) {
                        return false;
                    }
                    for (const auto& a : gt.at(id)) {
                        if (a.class_id == 0 && iou(a.box, d.box) >= thr) {
                            return false;
                        }
                    }
                    return true;
                });
            }
            if (expected >= 0) {
                EXPECT_GE(average_precision(pruned, gt, 0, thr), ap - 1e-12) << "trial " << trial;
            }
        }
    }
}

TEST(EvaluateMap, MismatchedImageIdsAreInputError) {
    std::map<std::int64_t, Annotations> gt{{0, {{0, {1, 1, 20, 20}}}}};
    std::map<std::int64_t, Detections> pred{{1, {}}};
    EXPECT_THROW(evaluate_map(pred, gt, 1), InputError);
}

TEST(DetectorConfig, RejectsInvalidValues) {
    auto c = small_config(60);
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config(64);
    c.weights.bbox = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config(64);
    c.weights.mask = 0.5;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_EQ(DetectorConfig::from_kv(small_config(64).to_kv()), small_config(64));
}
