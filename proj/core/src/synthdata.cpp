#include "mac/synthdata.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <json.hpp>

#include "mac/error.hpp"
#include "mac/rng.hpp"
#include "mac/tensor_io.hpp"

namespace mac::synth {
namespace {

using Point = std::array<float, 2>;

std::vector<Point> polygon(ShapeKind kind, const ShapeParams& s) {
    const float hx = 0.5f * s.size_x;
    const float hy = 0.5f * s.size_y;
    std::vector<Point> local;
    if (kind == ShapeKind::Rectangle) {
        local = {{-hx, -hy}, {hx, -hy}, {hx, hy}, {-hx, hy}};
    } else {
        // apex up in image coordinates (y grows downward)
        local = {{0.0f, -hy}, {hx, hy}, {-hx, hy}};
    }
    const float c = std::cos(s.rotation);
    const float sn = std::sin(s.rotation);
    for (auto& p : local) {
        p = {s.center_x + c * p[0] - sn * p[1], s.center_y + sn * p[0] + c * p[1]};
    }
    return local;
}

bool inside_convex(const std::vector<Point>& poly, float x, float y) {
    bool has_pos = false;
    bool has_neg = false;
    for (std::size_t i = 0; i < poly.size(); ++i) {
        const auto& a = poly[i];
        const auto& b = poly[(i + 1) % poly.size()];
        const float cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
        has_pos |= cross > 0;
        has_neg |= cross < 0;
    }
    return !(has_pos && has_neg);
}

bool covers(const ObjectInstance& obj, const std::vector<Point>& poly, float x, float y) {
    if (shape_for_class(obj.class_id) == ShapeKind::Ellipse) {
        const float dx = (x - obj.shape.center_x) / (0.5f * obj.shape.size_x);
        const float dy = (y - obj.shape.center_y) / (0.5f * obj.shape.size_y);
        return dx * dx + dy * dy <= 1.0f;
    }
    return inside_convex(poly, x, y);
}

void paint_background(torch::Tensor& image, int background_id, Rng& rng) {
    const auto h = image.size(1);
    const auto w = image.size(2);
    auto acc = image.accessor<float, 3>();
    const float base = static_cast<float>(rng.uniform(0.08, 0.28));
    std::array<float, 3> tint{};
    for (auto& t : tint) {
        t = static_cast<float>(rng.uniform(-0.04, 0.04));
    }
    const float other = static_cast<float>(rng.uniform(0.08, 0.32));
    const float period = static_cast<float>(rng.uniform(6.0, 18.0));
    const float angle = static_cast<float>(rng.uniform(0.0, std::numbers::pi));
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            float v = base;
            switch (background_id) {
            case 1:
                v = base + (other - base) * static_cast<float>(x) / static_cast<float>(w - 1);
                break;
            case 2: {
                const float u = std::cos(angle) * static_cast<float>(x) + std::sin(angle) * static_cast<float>(y);
                v = base + 0.06f * std::sin(2.0f * std::numbers::pi_v<float> * u / period);
                break;
            }
            case 3:
                v = base + 0.04f * static_cast<float>(rng.normal());
                break;
            default:
                break;
            }
            for (int c = 0; c < 3; ++c) {
                acc[c][y][x] = std::clamp(v + tint[c], 0.0f, 1.0f);
            }
        }
    }
}

bool overlaps(const Box& a, const Box& b, float margin) {
    return a.x_min < b.x_max + margin && b.x_min < a.x_max + margin && a.y_min < b.y_max + margin &&
           b.y_min < a.y_max + margin;
}

/// Tight box around the covered pixels, each pixel spanning [x, x + 1).
Box pixel_extent(const torch::Tensor& mask) {
    const auto m = mask.accessor<bool, 2>();
    Box b{0, 0, 0, 0};
    bool any = false;
    for (int y = 0; y < mask.size(0); ++y) {
        for (int x = 0; x < mask.size(1); ++x) {
            if (!m[y][x]) {
                continue;
            }
            const auto fx = static_cast<float>(x);
            const auto fy = static_cast<float>(y);
            b = any ? Box{std::min(b.x_min, fx), std::min(b.y_min, fy), std::max(b.x_max, fx + 1),
                          std::max(b.y_max, fy + 1)}
                    : Box{fx, fy, fx + 1, fy + 1};
            any = true;
        }
    }
    return b;
}

nlohmann::json object_to_json(const ObjectInstance& o) {
    return {{"class_id", o.class_id},
            {"box", {o.box.x_min, o.box.y_min, o.box.x_max, o.box.y_max}},
            {"shape",
             {{"cx", o.shape.center_x},
              {"cy", o.shape.center_y},
              {"sx", o.shape.size_x},
              {"sy", o.shape.size_y},
              {"rotation", o.shape.rotation},
              {"color", o.shape.color}}}};
}

ObjectInstance object_from_json(const nlohmann::json& j) {
    ObjectInstance o;
    o.class_id = j.at("class_id").get<int>();
    const auto box = j.at("box").get<std::vector<float>>();
    if (box.size() != 4) {
        throw LoadError("box must have 4 coordinates");
    }
    o.box = {box[0], box[1], box[2], box[3]};
    const auto& s = j.at("shape");
    o.shape.center_x = s.at("cx").get<float>();
    o.shape.center_y = s.at("cy").get<float>();
    o.shape.size_x = s.at("sx").get<float>();
    o.shape.size_y = s.at("sy").get<float>();
    o.shape.rotation = s.at("rotation").get<float>();
    o.shape.color = s.at("color").get<std::array<float, 3>>();
    return o;
}

Annotations annotations_of(const SceneSpec& spec) {
    Annotations out;
    out.reserve(spec.objects.size());
    for (const auto& o : spec.objects) {
        out.push_back({o.class_id, o.box});
    }
    return out;
}

} // namespace

void GenConfig::validate() const {
    if (width <= 0 || height <= 0) {
        throw ConfigError(fmt::format("canvas must be positive, got {}x{}", width, height));
    }
    if (num_classes <= 0 || num_classes > 3) {
        throw ConfigError(fmt::format("num_classes must be in [1, 3], got {}", num_classes));
    }
    if (min_objects < 1 || max_objects < min_objects) {
        throw ConfigError("object count range must satisfy 1 <= min_objects <= max_objects");
    }
    if (min_size <= 2 || max_size < min_size || max_size + 2 > static_cast<float>(std::min(width, height))) {
        throw ConfigError("object size range does not fit the canvas");
    }
    if (num_backgrounds < 1 || num_backgrounds > 4) {
        throw ConfigError("num_backgrounds must be in [1, 4]");
    }
    if (placement_attempts < 1) {
        throw ConfigError("placement_attempts must be positive");
    }
}

KeyValues GenConfig::to_kv() const {
    KeyValues kv;
    kv.set("width", width);
    kv.set("height", height);
    kv.set("num_classes", num_classes);
    kv.set("min_objects", min_objects);
    kv.set("max_objects", max_objects);
    kv.set("min_size", min_size);
    kv.set("max_size", max_size);
    kv.set("min_area", min_area);
    kv.set("max_rotation", max_rotation);
    kv.set("num_backgrounds", num_backgrounds);
    kv.set("placement_attempts", placement_attempts);
    return kv;
}

GenConfig GenConfig::from_kv(const KeyValues& kv) {
    GenConfig c;
    c.width = kv.get_or("width", c.width);
    c.height = kv.get_or("height", c.height);
    c.num_classes = kv.get_or("num_classes", c.num_classes);
    c.min_objects = kv.get_or("min_objects", c.min_objects);
    c.max_objects = kv.get_or("max_objects", c.max_objects);
    c.min_size = kv.get_or("min_size", c.min_size);
    c.max_size = kv.get_or("max_size", c.max_size);
    c.min_area = kv.get_or("min_area", c.min_area);
    c.max_rotation = kv.get_or("max_rotation", c.max_rotation);
    c.num_backgrounds = kv.get_or("num_backgrounds", c.num_backgrounds);
    c.placement_attempts = kv.get_or("placement_attempts", c.placement_attempts);
    return c;
}

ShapeKind shape_for_class(int class_id) {
    return static_cast<ShapeKind>(class_id % 3);
}

Box shape_bounds(ShapeKind kind, const ShapeParams& shape) {
    if (kind == ShapeKind::Ellipse) {
        return {shape.center_x - 0.5f * shape.size_x, shape.center_y - 0.5f * shape.size_y,
                shape.center_x + 0.5f * shape.size_x, shape.center_y + 0.5f * shape.size_y};
    }
    const auto poly = polygon(kind, shape);
    Box b{poly[0][0], poly[0][1], poly[0][0], poly[0][1]};
    for (const auto& p : poly) {
        b.x_min = std::min(b.x_min, p[0]);
        b.y_min = std::min(b.y_min, p[1]);
        b.x_max = std::max(b.x_max, p[0]);
        b.y_max = std::max(b.y_max, p[1]);
    }
    return b;
}

Scene generate_scene(std::uint64_t seed, const GenConfig& config) {
    config.validate();
    Rng rng(seed);
    SceneSpec spec;
    spec.seed = seed;
    spec.width = config.width;
    spec.height = config.height;
    spec.background_id = static_cast<int>(rng.integer(0, config.num_backgrounds - 1));

    const auto wanted = rng.integer(config.min_objects, config.max_objects);
    std::vector<Box> placed;
    const float w = static_cast<float>(config.width);
    const float h = static_cast<float>(config.height);
    for (std::int64_t n = 0; n < wanted; ++n) {
        for (int attempt = 0; attempt < config.placement_attempts; ++attempt) {
            ObjectInstance obj;
            obj.class_id = static_cast<int>(rng.integer(0, config.num_classes - 1));
            const auto kind = shape_for_class(obj.class_id);
            auto& s = obj.shape;
            s.size_x = static_cast<float>(rng.uniform(config.min_size, config.max_size));
            s.size_y = kind == ShapeKind::Rectangle || kind == ShapeKind::Triangle
                           ? static_cast<float>(rng.uniform(config.min_size, config.max_size))
                           : static_cast<float>(rng.uniform(0.75 * s.size_x, std::min<double>(1.33 * s.size_x, config.max_size)));
            s.rotation = kind == ShapeKind::Ellipse
                             ? 0.0f
                             : static_cast<float>(rng.uniform(-config.max_rotation, config.max_rotation));
            for (auto& c : s.color) {
                c = static_cast<float>(rng.uniform(0.4, 1.0));
            }
            // place with the center at the origin first to learn the extents
            const Box local = shape_bounds(kind, s);
            const float lo_x = 1.0f - local.x_min;
            const float hi_x = w - 1.0f - local.x_max;
            const float lo_y = 1.0f - local.y_min;
            const float hi_y = h - 1.0f - local.y_max;
            if (hi_x <= lo_x || hi_y <= lo_y) {
                continue;
            }
            s.center_x = static_cast<float>(rng.uniform(lo_x, hi_x));
            s.center_y = static_cast<float>(rng.uniform(lo_y, hi_y));
            const Box bounds = shape_bounds(kind, s);
            if (!bounds.inside(w, h)) {
                continue;
            }
            bool clash = false;
            for (const auto& other : placed) {
                clash |= overlaps(other, bounds, 2.0f);
            }
            if (clash) {
                continue;
            }
            // the annotation is the footprint actually painted, not the analytic outline
            obj.box = pixel_extent(rasterize_object(obj, config.width, config.height));
            if (!obj.box.valid() || obj.box.area() < config.min_area) {
                continue;
            }
            placed.push_back(bounds);
            spec.objects.push_back(obj);
            break;
        }
    }
    if (spec.objects.empty()) {
        throw ConfigError("could not place any object; size range too large for the canvas");
    }

    Scene scene;
    scene.image = render_scene(spec, config);
    scene.annotations = annotations_of(spec);
    scene.spec = std::move(spec);
    return scene;
}

torch::Tensor render_scene(const SceneSpec& spec, const GenConfig& config) {
    auto image = torch::zeros({3, spec.height, spec.width}, torch::kFloat32);
    Rng bg_rng(mix_seed(spec.seed, 0xb6));
    paint_background(image, spec.background_id % std::max(1, config.num_backgrounds), bg_rng);
    auto acc = image.accessor<float, 3>();
    for (const auto& obj : spec.objects) {
        const auto mask = rasterize_object(obj, spec.width, spec.height);
        const auto m = mask.accessor<bool, 2>();
        for (int y = 0; y < spec.height; ++y) {
            for (int x = 0; x < spec.width; ++x) {
                if (m[y][x]) {
                    for (int c = 0; c < 3; ++c) {
                        acc[c][y][x] = obj.shape.color[c];
                    }
                }
            }
        }
    }
    return image;
}

torch::Tensor rasterize_object(const ObjectInstance& object, int width, int height) {
    auto mask = torch::zeros({height, width}, torch::kBool);
    auto m = mask.accessor<bool, 2>();
    const auto kind = shape_for_class(object.class_id);
    const auto poly = kind == ShapeKind::Ellipse ? std::vector<Point>{} : polygon(kind, object.shape);
    const Box b = shape_bounds(kind, object.shape).clipped(static_cast<float>(width), static_cast<float>(height));
    const int x0 = std::max(0, static_cast<int>(std::floor(b.x_min)) - 1);
    const int y0 = std::max(0, static_cast<int>(std::floor(b.y_min)) - 1);
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(b.x_max)) + 1);
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(b.y_max)) + 1);
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            m[y][x] = covers(object, poly, static_cast<float>(x) + 0.5f, static_cast<float>(y) + 0.5f);
        }
    }
    return mask;
}

// ---------------------------------------------------------------------------
// sensor

const char* to_string(SensorMode mode) {
    switch (mode) {
    case SensorMode::Identity:
        return "identity";
    case SensorMode::SpatialDegraded:
        return "spatial-degraded";
    case SensorMode::ScrambledProjection:
        return "scrambled-projection";
    }
    return "?";
}

SensorMode sensor_mode_from_string(const std::string& name) {
    if (name == "identity") {
        return SensorMode::Identity;
    }
    if (name == "spatial-degraded") {
        return SensorMode::SpatialDegraded;
    }
    if (name == "scrambled-projection") {
        return SensorMode::ScrambledProjection;
    }
    throw ConfigError("unknown sensor mode '" + name + "'");
}

void SensorConfig::validate() const {
    if (downsample < 1 || out_channels < 1 || blur_sigma < 0 || noise_std < 0) {
        throw ConfigError("invalid spatial-degraded sensor parameters");
    }
    if (projection_grid < 1 || projection_dim < 1) {
        throw ConfigError("invalid scrambled-projection sensor parameters");
    }
}

std::vector<std::int64_t> SensorConfig::output_shape(int width, int height) const {
    switch (mode) {
    case SensorMode::Identity:
        return {3, height, width};
    case SensorMode::SpatialDegraded:
        return {out_channels, height / downsample, width / downsample};
    case SensorMode::ScrambledProjection:
        return {projection_dim, 1, 1};
    }
    return {};
}

KeyValues SensorConfig::to_kv() const {
    KeyValues kv;
    kv.set("mode", to_string(mode));
    kv.set("seed", static_cast<unsigned long long>(seed));
    kv.set("downsample", downsample);
    kv.set("blur_sigma", blur_sigma);
    kv.set("out_channels", out_channels);
    kv.set("noise_std", noise_std);
    kv.set("projection_grid", projection_grid);
    kv.set("projection_dim", projection_dim);
    return kv;
}

SensorConfig SensorConfig::from_kv(const KeyValues& kv) {
    SensorConfig c;
    if (kv.contains("mode")) {
        c.mode = sensor_mode_from_string(kv.raw("mode"));
    }
    c.seed = kv.get_or<unsigned long long>("seed", c.seed);
    c.downsample = kv.get_or("downsample", c.downsample);
    c.blur_sigma = kv.get_or("blur_sigma", c.blur_sigma);
    c.out_channels = kv.get_or("out_channels", c.out_channels);
    c.noise_std = kv.get_or("noise_std", c.noise_std);
    c.projection_grid = kv.get_or("projection_grid", c.projection_grid);
    c.projection_dim = kv.get_or("projection_dim", c.projection_dim);
    return c;
}

Sensor::Sensor(SensorConfig config, int width, int height) : config_(config), width_(width), height_(height) {
    config_.validate();
    if (config_.mode == SensorMode::SpatialDegraded && (width % config_.downsample || height % config_.downsample)) {
        throw ConfigError("sensor downsample factor must divide the canvas");
    }
    Rng rng(mix_seed(config_.seed, 0x5e));
    const auto shape = output_shape();
    if (config_.mode == SensorMode::SpatialDegraded) {
        mixing_ = torch::empty({config_.out_channels, 3});
        auto m = mixing_.accessor<float, 2>();
        for (int c = 0; c < config_.out_channels; ++c) {
            double sum = 0;
            for (int k = 0; k < 3; ++k) {
                m[c][k] = static_cast<float>(rng.uniform(0.05, 1.0));
                sum += m[c][k];
            }
            for (int k = 0; k < 3; ++k) {
                m[c][k] = static_cast<float>(m[c][k] / sum);
            }
        }
        noise_ = torch::empty(shape);
        auto* p = noise_.data_ptr<float>();
        for (std::int64_t i = 0; i < noise_.numel(); ++i) {
            p[i] = static_cast<float>(config_.noise_std * rng.normal());
        }
    } else if (config_.mode == SensorMode::ScrambledProjection) {
        const std::int64_t in_dim = 3LL * config_.projection_grid * config_.projection_grid;
        projection_ = torch::empty({config_.projection_dim, in_dim});
        auto* p = projection_.data_ptr<float>();
        const double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
        for (std::int64_t i = 0; i < projection_.numel(); ++i) {
            p[i] = static_cast<float>(scale * rng.normal());
        }
    }
}

torch::Tensor Sensor::render(const torch::Tensor& source_image) const {
    if (source_image.dim() != 3 || source_image.size(0) != 3 || source_image.size(1) != height_ ||
        source_image.size(2) != width_) {
        throw InputError(fmt::format("sensor expects a [3, {}, {}] source image, got [{}]", height_, width_,
                                     fmt::join(source_image.sizes(), ", ")));
    }
    torch::NoGradGuard guard;
    const auto image = source_image.to(torch::kFloat32).contiguous();
    switch (config_.mode) {
    case SensorMode::Identity:
        return image.clone();
    case SensorMode::SpatialDegraded: {
        auto x = image.unsqueeze(0);
        if (config_.blur_sigma > 0) {
            const int radius = static_cast<int>(std::ceil(3.0f * config_.blur_sigma));
            auto k = torch::arange(-radius, radius + 1, torch::kFloat32);
            k = torch::exp(-(k * k) / (2.0f * config_.blur_sigma * config_.blur_sigma));
            k = k / k.sum();
            namespace F = torch::nn::functional;
            x = F::pad(x, F::PadFuncOptions({radius, radius, radius, radius}).mode(torch::kReplicate));
            x = F::conv2d(x, k.view({1, 1, 1, -1}).repeat({3, 1, 1, 1}), F::Conv2dFuncOptions().groups(3));
            x = F::conv2d(x, k.view({1, 1, -1, 1}).repeat({3, 1, 1, 1}), F::Conv2dFuncOptions().groups(3));
        }
        if (config_.downsample > 1) {
            x = torch::avg_pool2d(x, config_.downsample);
        }
        auto mixed = torch::einsum("ck,khw->chw", {mixing_, x.squeeze(0)});
        return (mixed + noise_).contiguous();
    }
    case SensorMode::ScrambledProjection: {
        const auto pooled = torch::adaptive_avg_pool2d(image.unsqueeze(0), {config_.projection_grid, config_.projection_grid});
        return torch::matmul(projection_, pooled.reshape({-1})).view({config_.projection_dim, 1, 1}).contiguous();
    }
    }
    return {};
}

torch::Tensor render_target_modality(const torch::Tensor& source_image, const SensorConfig& config) {
    if (source_image.dim() != 3) {
        throw InputError("source image must be [3, H, W]");
    }
    return Sensor(config, static_cast<int>(source_image.size(2)), static_cast<int>(source_image.size(1)))
        .render(source_image);
}

// ---------------------------------------------------------------------------
// dataset

torch::Tensor Dataset::sources(const std::vector<std::int64_t>& indices) const {
    std::vector<torch::Tensor> parts;
    if (indices.empty()) {
        for (const auto& s : samples) {
            parts.push_back(s.source);
        }
    } else {
        for (const auto i : indices) {
            parts.push_back(samples.at(static_cast<std::size_t>(i)).source);
        }
    }
    return torch::stack(parts);
}

torch::Tensor Dataset::targets(const std::vector<std::int64_t>& indices) const {
    std::vector<torch::Tensor> parts;
    if (indices.empty()) {
        for (const auto& s : samples) {
            parts.push_back(s.target);
        }
    } else {
        for (const auto i : indices) {
            parts.push_back(samples.at(static_cast<std::size_t>(i)).target);
        }
    }
    return torch::stack(parts);
}

std::uint64_t scene_seed(std::uint64_t master_seed, std::uint64_t stream, std::int64_t index) {
    return mix_seed(mix_seed(master_seed, stream), static_cast<std::uint64_t>(index));
}

Dataset generate_dataset(std::uint64_t master_seed, std::uint64_t stream, std::int64_t count, const GenConfig& gen,
                         const SensorConfig& sensor_config) {
    gen.validate();
    if (count < 0) {
        throw ConfigError("dataset size must be non-negative");
    }
    const Sensor sensor(sensor_config, gen.width, gen.height);
    Dataset ds;
    ds.gen = gen;
    ds.sensor = sensor_config;
    ds.samples.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
        auto scene = generate_scene(scene_seed(master_seed, stream, i), gen);
        Sample s;
        s.id = i;
        s.target = sensor.render(scene.image);
        s.source = std::move(scene.image);
        s.scene = std::move(scene.spec);
        s.annotations = std::move(scene.annotations);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "tensors");
    dataset.gen.to_kv().save(dir / "gen_config.cfg");
    dataset.sensor.to_kv().save(dir / "sensor.cfg");
    std::ofstream manifest(dir / "manifest.jsonl", std::ios::trunc);
    if (!manifest) {
        throw LoadError("cannot write manifest in " + dir.string());
    }
    for (const auto& s : dataset.samples) {
        const auto rel = fmt::format("tensors/{}.bin", s.id);
        save_tensor_file(dir / rel, {s.source, s.target});
        nlohmann::json objects = nlohmann::json::array();
        for (const auto& o : s.scene.objects) {
            objects.push_back(object_to_json(o));
        }
        const nlohmann::json record{{"id", s.id},
                                    {"seed", s.scene.seed},
                                    {"width", s.scene.width},
                                    {"height", s.scene.height},
                                    {"background_id", s.scene.background_id},
                                    {"tensor", rel},
                                    {"objects", objects}};
        manifest << record.dump() << '\n';
    }
}

Dataset read_dataset(const std::filesystem::path& dir) {
    Dataset ds;
    try {
        ds.gen = GenConfig::from_kv(KeyValues::load(dir / "gen_config.cfg"));
        ds.sensor = SensorConfig::from_kv(KeyValues::load(dir / "sensor.cfg"));
    } catch (const ConfigError& e) {
        throw LoadError(fmt::format("dataset {}: {}", dir.string(), e.what()));
    }
    std::ifstream manifest(dir / "manifest.jsonl");
    if (!manifest) {
        throw LoadError("missing manifest.jsonl in " + dir.string());
    }
    std::string line;
    std::size_t record = 0;
    while (std::getline(manifest, line)) {
        if (line.empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            Sample s;
            s.id = j.at("id").get<std::int64_t>();
            s.scene.seed = j.at("seed").get<std::uint64_t>();
            s.scene.width = j.at("width").get<int>();
            s.scene.height = j.at("height").get<int>();
            s.scene.background_id = j.at("background_id").get<int>();
            for (const auto& o : j.at("objects")) {
                s.scene.objects.push_back(object_from_json(o));
            }
            s.annotations = annotations_of(s.scene);
            auto tensors = load_tensor_file(dir / j.at("tensor").get<std::string>());
            if (tensors.size() != 2) {
                throw LoadError("tensor file must hold [source, target]");
            }
            s.source = std::move(tensors[0]);
            s.target = std::move(tensors[1]);
            ds.samples.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw LoadError(fmt::format("{}: record {}: corrupt manifest entry ({})", dir.string(), record, e.what()));
        } catch (const LoadError& e) {
            throw LoadError(fmt::format("{}: record {}: {}", dir.string(), record, e.what()));
        }
        ++record;
    }
    return ds;
}

std::uint64_t dataset_checksum(const Dataset& dataset) {
    std::uint64_t h = 14695981039346656037ull;
    for (const auto& s : dataset.samples) {
        const std::array<std::uint64_t, 2> parts{tensor_checksum(s.source), tensor_checksum(s.target)};
        h = fnv1a(parts.data(), sizeof(parts), h);
        for (const auto& a : s.annotations) {
            h = fnv1a(&a.class_id, sizeof(a.class_id), h);
            h = fnv1a(&a.box, sizeof(a.box), h);
        }
    }
    return h;
}

} // namespace mac::synth
