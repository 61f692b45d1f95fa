#pragma once

// Deterministic synthetic paired-modality detection benchmark.
//
// A scene is a textured background with 1..max_objects solid shapes. Class k
// selects the shape family (0 rectangle, 1 ellipse, 2 triangle); colors are
// drawn independently of class so detection has to rely on geometry. The
// target modality is a pure function of the rendered source image.

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <torch/torch.h>

#include "mac/geometry.hpp"
#include "mac/kv_config.hpp"

namespace mac::synth {

enum class ShapeKind { Rectangle = 0, Ellipse = 1, Triangle = 2 };

struct ShapeParams {
    float center_x = 0, center_y = 0;
    float size_x = 0, size_y = 0;  // full extents before rotation
    float rotation = 0;            // radians, ignored for ellipses
    std::array<float, 3> color{};
    bool operator==(const ShapeParams&) const = default;
};

struct ObjectInstance {
    int class_id = 0;
    Box box;  // tight extent of the rendered pixels
    ShapeParams shape;
    bool operator==(const ObjectInstance&) const = default;
};

struct GenConfig {
    int width = 128;
    int height = 128;
    int num_classes = 3;
    int min_objects = 1;
    int max_objects = 5;
    float min_size = 16;
    float max_size = 40;
    float min_area = 120;
    float max_rotation = 0.35f;
    int num_backgrounds = 4;
    int placement_attempts = 60;

    void validate() const;
    KeyValues to_kv() const;
    static GenConfig from_kv(const KeyValues& kv);
    bool operator==(const GenConfig&) const = default;
};

struct SceneSpec {
    std::uint64_t seed = 0;
    int width = 0;
    int height = 0;
    int background_id = 0;
    std::vector<ObjectInstance> objects;
    bool operator==(const SceneSpec&) const = default;
};

struct Scene {
    SceneSpec spec;
    torch::Tensor image;  // [3, H, W], values in [0, 1]
    Annotations annotations;
};

ShapeKind shape_for_class(int class_id);

Scene generate_scene(std::uint64_t seed, const GenConfig& config);

/// Renders a scene spec into a [3, H, W] image.
torch::Tensor render_scene(const SceneSpec& spec, const GenConfig& config);

/// Pixel coverage of one object: [H, W] bool, pixel (x, y) covered when its
/// center (x + 0.5, y + 0.5) lies inside the shape.
torch::Tensor rasterize_object(const ObjectInstance& object, int width, int height);

/// Analytic bounding box of a shape (union of its vertices / ellipse extremes).
Box shape_bounds(ShapeKind kind, const ShapeParams& shape);

enum class SensorMode { Identity, SpatialDegraded, ScrambledProjection };

const char* to_string(SensorMode mode);
SensorMode sensor_mode_from_string(const std::string& name);

struct SensorConfig {
    SensorMode mode = SensorMode::SpatialDegraded;
    std::uint64_t seed = 1234;
    // spatial-degraded
    int downsample = 2;
    float blur_sigma = 1.0f;
    int out_channels = 2;
    float noise_std = 0.02f;
    // scrambled-projection
    int projection_grid = 32;
    int projection_dim = 1024;

    void validate() const;
    /// Shape of X as [C, H, W] for a given source canvas.
    std::vector<std::int64_t> output_shape(int width, int height) const;
    KeyValues to_kv() const;
    static SensorConfig from_kv(const KeyValues& kv);
    bool operator==(const SensorConfig&) const = default;
};

/// Fixed sensor instance: holds the seeded channel mixing, fixed-pattern
/// noise and projection matrix so they are built once per dataset.
class Sensor {
public:
    Sensor(SensorConfig config, int width, int height);

    torch::Tensor render(const torch::Tensor& source_image) const;
    const SensorConfig& config() const { return config_; }
    std::vector<std::int64_t> output_shape() const { return config_.output_shape(width_, height_); }

private:
    SensorConfig config_;
    int width_;
    int height_;
    torch::Tensor mixing_;      // [C_T, 3]
    torch::Tensor noise_;       // [C_T, H_T, W_T]
    torch::Tensor projection_;  // [D, 3 * g * g]
};

torch::Tensor render_target_modality(const torch::Tensor& source_image, const SensorConfig& config);

struct Sample {
    std::int64_t id = 0;
    SceneSpec scene;
    Annotations annotations;
    torch::Tensor source;  // I: [3, H, W]
    torch::Tensor target;  // X: sensor output shape
};

struct Dataset {
    GenConfig gen;
    SensorConfig sensor;
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }
    /// Stacked source images [N, 3, H, W] for the given indices (all when empty).
    torch::Tensor sources(const std::vector<std::int64_t>& indices = {}) const;
    torch::Tensor targets(const std::vector<std::int64_t>& indices = {}) const;
};

/// Split stream ids keep train and test scenes disjoint for one master seed.
inline constexpr std::uint64_t kTrainStream = 0;
inline constexpr std::uint64_t kTestStream = 1;

std::uint64_t scene_seed(std::uint64_t master_seed, std::uint64_t stream, std::int64_t index);

Dataset generate_dataset(std::uint64_t master_seed, std::uint64_t stream, std::int64_t count,
                         const GenConfig& gen, const SensorConfig& sensor);

/// Layout: `manifest.jsonl` (one JSON record per sample), `gen_config.cfg`,
/// `sensor.cfg`, and `tensors/<id>.bin` holding [source, target].
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

/// Checksum over every tensor and annotation of a dataset.
std::uint64_t dataset_checksum(const Dataset& dataset);

} // namespace mac::synth
