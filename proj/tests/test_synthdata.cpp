#include <fstream>

#include <gtest/gtest.h>

#include "mac/error.hpp"
#include "mac/synthdata.hpp"
#include "mac/tensor_io.hpp"
#include "shared_run.hpp"

using namespace mac;
using namespace mac::synth;

namespace {

// Pixel-scan oracle: objects never overlap and are painted in a flat color, so
// the pixels carrying exactly that color inside a margin around the object are
// its rendered footprint.
Box rendered_extent(const torch::Tensor& image, const ObjectInstance& obj) {
    const auto acc = image.accessor<float, 3>();
    const int h = static_cast<int>(image.size(1));
    const int w = static_cast<int>(image.size(2));
    const int x0 = std::max(0, static_cast<int>(obj.box.x_min) - 3);
    const int y0 = std::max(0, static_cast<int>(obj.box.y_min) - 3);
    const int x1 = std::min(w, static_cast<int>(obj.box.x_max) + 4);
    const int y1 = std::min(h, static_cast<int>(obj.box.y_max) + 4);
    Box b{1e9f, 1e9f, -1e9f, -1e9f};
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
            bool same = true;
            for (int c = 0; c < 3; ++c) {
                same &= acc[c][y][x] == obj.shape.color[c];
            }
            if (same) {
                b.x_min = std::min(b.x_min, static_cast<float>(x));
                b.y_min = std::min(b.y_min, static_cast<float>(y));
                b.x_max = std::max(b.x_max, static_cast<float>(x + 1));
                b.y_max = std::max(b.y_max, static_cast<float>(y + 1));
            }
        }
    }
    return b;
}

SensorConfig sensor_of(SensorMode mode) {
    SensorConfig s;
    s.mode = mode;
    return s;
}

} // namespace

TEST(GenerateScene, SameSeedIsByteIdentical) {
    const GenConfig cfg;
    const auto a = generate_scene(7, cfg);
    const auto b = generate_scene(7, cfg);
    EXPECT_TRUE(torch::equal(a.image, b.image));
    EXPECT_EQ(a.annotations, b.annotations);
    EXPECT_EQ(a.spec, b.spec);
}

TEST(GenerateScene, ObjectCountWithinBounds) {
    const GenConfig cfg;
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        const auto s = generate_scene(seed, cfg);
        EXPECT_GE(s.spec.objects.size(), 1u);
        EXPECT_LE(s.spec.objects.size(), static_cast<std::size_t>(cfg.max_objects));
    }
}

TEST(GenerateScene, ObjectInvariants) {
    const GenConfig cfg;
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        const auto s = generate_scene(seed, cfg);
        for (std::size_t i = 0; i < s.spec.objects.size(); ++i) {
            const auto& o = s.spec.objects[i];
            EXPECT_LT(o.box.x_min, o.box.x_max);
            EXPECT_LT(o.box.y_min, o.box.y_max);
            EXPECT_GE(o.box.area(), cfg.min_area);
            EXPECT_TRUE(o.box.inside(cfg.width, cfg.height));
            EXPECT_GE(o.class_id, 0);
            EXPECT_LT(o.class_id, cfg.num_classes);
            for (std::size_t j = i + 1; j < s.spec.objects.size(); ++j) {
                EXPECT_FALSE(o == s.spec.objects[j]);
            }
        }
        EXPECT_EQ(s.image.sizes(), (std::vector<std::int64_t>{3, cfg.height, cfg.width}));
        EXPECT_GE(s.image.min().item<float>(), 0.0f);
        EXPECT_LE(s.image.max().item<float>(), 1.0f);
    }
}

TEST(GenerateScene, AnnotationMatchesRenderedExtentSeed7) {
    const GenConfig cfg;
    const auto s = generate_scene(7, cfg);
    for (const auto& o : s.spec.objects) {
        const auto r = rendered_extent(s.image, o);
        EXPECT_NEAR(r.x_min, o.box.x_min, 1.0f);
        EXPECT_NEAR(r.y_min, o.box.y_min, 1.0f);
        EXPECT_NEAR(r.x_max, o.box.x_max, 1.0f);
        EXPECT_NEAR(r.y_max, o.box.y_max, 1.0f);
    }
}

TEST(GenerateScene, AnnotationFidelityIou) {
    const GenConfig cfg;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const auto s = generate_scene(seed, cfg);
        for (std::size_t i = 0; i < s.spec.objects.size(); ++i) {
            const auto& o = s.spec.objects[i];
            EXPECT_GE(iou(rendered_extent(s.image, o), s.annotations[i].box), 0.95f)
                << "seed " << seed << " object " << i << " class " << o.class_id;
        }
    }
}

TEST(GenerateScene, DegenerateConfigRejected) {
    GenConfig no_classes;
    no_classes.num_classes = 0;
    EXPECT_THROW(generate_scene(1, no_classes), ConfigError);
    GenConfig no_canvas;
    no_canvas.width = 0;
    EXPECT_THROW(generate_scene(1, no_canvas), ConfigError);
}

TEST(Sensor, IdentityModeCopiesImage) {
    const auto s = generate_scene(3, GenConfig{});
    const auto x = render_target_modality(s.image, sensor_of(SensorMode::Identity));
    EXPECT_TRUE(torch::equal(x, s.image));
}

TEST(Sensor, ScrambledProjectionIsNotTheImage) {
    const auto s = generate_scene(3, GenConfig{});
    const auto cfg = sensor_of(SensorMode::ScrambledProjection);
    const auto x = render_target_modality(s.image, cfg);
    EXPECT_EQ(x.sizes().vec(), cfg.output_shape(128, 128));
    EXPECT_TRUE(torch::isfinite(x).all().item<bool>());
    const auto pooled = torch::adaptive_avg_pool2d(s.image.unsqueeze(0), {cfg.projection_grid, cfg.projection_grid})
                            .flatten()
                            .slice(0, 0, x.numel());
    EXPECT_GT((x.flatten() - pooled).abs().mean().item<double>(), 0.0);
}

TEST(Sensor, DeterministicAndShaped) {
    const auto s = generate_scene(5, GenConfig{});
    for (const auto mode : {SensorMode::SpatialDegraded, SensorMode::ScrambledProjection}) {
        const auto cfg = sensor_of(mode);
        const auto a = render_target_modality(s.image, cfg);
        const auto b = render_target_modality(s.image, cfg);
        EXPECT_TRUE(torch::equal(a, b));
        EXPECT_EQ(a.sizes().vec(), cfg.output_shape(128, 128));
    }
    EXPECT_EQ(sensor_of(SensorMode::SpatialDegraded).output_shape(128, 128),
              (std::vector<std::int64_t>{2, 64, 64}));
}

TEST(Sensor, ShapeMismatchIsInputError) {
    const Sensor sensor(sensor_of(SensorMode::SpatialDegraded), 128, 128);
    EXPECT_THROW(sensor.render(torch::zeros({3, 64, 64})), InputError);
    EXPECT_THROW(sensor.render(torch::zeros({1, 128, 128})), InputError);
}

TEST(Dataset, PairingReproducesTargets) {
    const GenConfig gen;
    const auto sensor_cfg = sensor_of(SensorMode::SpatialDegraded);
    const auto ds = generate_dataset(11, kTrainStream, 6, gen, sensor_cfg);
    const Sensor sensor(sensor_cfg, gen.width, gen.height);
    for (const auto& s : ds.samples) {
        EXPECT_TRUE(torch::equal(sensor.render(s.source), s.target));
    }
}

TEST(Dataset, PureFunctionOfSeedAndConfig) {
    const GenConfig gen;
    const auto sensor = sensor_of(SensorMode::SpatialDegraded);
    EXPECT_EQ(dataset_checksum(generate_dataset(4, kTrainStream, 5, gen, sensor)),
              dataset_checksum(generate_dataset(4, kTrainStream, 5, gen, sensor)));
    EXPECT_NE(dataset_checksum(generate_dataset(4, kTrainStream, 5, gen, sensor)),
              dataset_checksum(generate_dataset(4, kTestStream, 5, gen, sensor)));
}

TEST(Dataset, RoundTripFourSamples) {
    const auto dir = testkit::fresh_dir("synth_roundtrip");
    const auto ds = generate_dataset(2, kTrainStream, 4, GenConfig{}, sensor_of(SensorMode::ScrambledProjection));
    write_dataset(ds, dir);
    const auto back = read_dataset(dir);
    ASSERT_EQ(back.size(), 4u);
    EXPECT_EQ(back.gen, ds.gen);
    EXPECT_EQ(back.sensor, ds.sensor);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(back.samples[i].id, ds.samples[i].id);
        EXPECT_EQ(back.samples[i].scene, ds.samples[i].scene);
        EXPECT_EQ(back.samples[i].annotations, ds.samples[i].annotations);
        EXPECT_TRUE(torch::equal(back.samples[i].source, ds.samples[i].source));
        EXPECT_TRUE(torch::equal(back.samples[i].target, ds.samples[i].target));
    }
    EXPECT_EQ(dataset_checksum(back), dataset_checksum(ds));
}

TEST(Dataset, MissingTensorFileNamesRecord) {
    const auto dir = testkit::fresh_dir("synth_missing");
    write_dataset(generate_dataset(2, kTrainStream, 4, GenConfig{}, SensorConfig{}), dir);
    std::filesystem::remove(dir / "tensors" / "2.bin");
    try {
        read_dataset(dir);
        FAIL() << "expected LoadError";
    } catch (const LoadError& e) {
        EXPECT_NE(std::string(e.what()).find("record 2"), std::string::npos) << e.what();
    }
}

TEST(Dataset, CorruptManifestIsLoadError) {
    const auto dir = testkit::fresh_dir("synth_corrupt");
    write_dataset(generate_dataset(2, kTrainStream, 2, GenConfig{}, SensorConfig{}), dir);
    std::ofstream(dir / "manifest.jsonl", std::ios::app) << "{not json\n";
    try {
        read_dataset(dir);
        FAIL() << "expected LoadError";
    } catch (const LoadError& e) {
        EXPECT_NE(std::string(e.what()).find("record 2"), std::string::npos) << e.what();
    }
}

TEST(Dataset, EmptyDatasetRoundTrips) {
    const auto dir = testkit::fresh_dir("synth_empty");
    write_dataset(generate_dataset(2, kTrainStream, 0, GenConfig{}, SensorConfig{}), dir);
    EXPECT_TRUE(std::filesystem::exists(dir / "manifest.jsonl"));
    EXPECT_EQ(read_dataset(dir).size(), 0u);
}

TEST(TensorIo, RoundTripAndChecksum) {
    const auto dir = testkit::fresh_dir("tensor_io");
    const auto a = torch::randn({2, 3, 4});
    const auto b = torch::arange(5, torch::kFloat32);
    save_tensor_file(dir / "t.bin", {a, b});
    const auto back = load_tensor_file(dir / "t.bin");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_TRUE(torch::equal(back[0], a));
    EXPECT_TRUE(torch::equal(back[1], b));
    EXPECT_EQ(tensor_checksum(back[0]), tensor_checksum(a));
    EXPECT_NE(tensor_checksum(a), tensor_checksum(a + 1e-3));
}
