#include "mac/inversion.hpp"

#include <fstream>

#include <fmt/format.h>
#include <json.hpp>

#include "mac/error.hpp"
#include "mac/rng.hpp"
#include "mac/tensor_io.hpp"

namespace mac::inv {
namespace {

/// Freezes detector parameters for the lifetime of the guard and restores the
/// previous requires_grad flags and training mode afterwards.
class FrozenDetector {
public:
    explicit FrozenDetector(det::SourceDetector& detector) : detector_(detector), training_(detector->is_training()) {
        for (auto& p : detector_->parameters()) {
            flags_.push_back(p.requires_grad());
            p.set_requires_grad(false);
        }
        detector_->eval();
    }
    ~FrozenDetector() {
        auto params = detector_->parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            params[i].set_requires_grad(flags_[i]);
        }
        detector_->train(training_);
    }
    FrozenDetector(const FrozenDetector&) = delete;
    FrozenDetector& operator=(const FrozenDetector&) = delete;

private:
    det::SourceDetector& detector_;
    bool training_;
    std::vector<bool> flags_;
};

nlohmann::json layout_to_json(const Annotations& layout) {
    auto arr = nlohmann::json::array();
    for (const auto& a : layout) {
        arr.push_back({{"class_id", a.class_id}, {"box", {a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max}}});
    }
    return arr;
}

Annotations layout_from_json(const nlohmann::json& j) {
    Annotations out;
    for (const auto& a : j) {
        const auto b = a.at("box").get<std::vector<float>>();
        out.push_back({a.at("class_id").get<int>(), {b.at(0), b.at(1), b.at(2), b.at(3)}});
    }
    return out;
}

} // namespace

void InversionConfig::validate() const {
    if (steps < 0) {
        throw ConfigError("inversion steps must be >= 0");
    }
    if (!(step_size > 0)) {
        throw ConfigError("inversion step size must be > 0");
    }
    if (init_sigma < 0) {
        throw ConfigError("inversion init sigma must be >= 0");
    }
}

torch::Tensor initial_image(std::uint64_t seed, double sigma, int channels, int height, int width) {
    Rng rng(seed);
    auto t = torch::empty({channels, height, width});
    auto* p = t.data_ptr<float>();
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        p[i] = static_cast<float>(sigma * rng.normal());
    }
    return t;
}

std::vector<ForegroundSemantics> invert_batch(det::SourceDetector& detector, std::span<const Annotations> layouts,
                                              std::span<const std::uint64_t> seeds, const InversionConfig& config) {
    config.validate();
    if (layouts.size() != seeds.size()) {
        throw InputError("one seed per layout required");
    }
    if (layouts.empty()) {
        return {};
    }
    auto cfg = detector->config();
    cfg.weights = config.weights;
    const auto targets = det::encode_targets(layouts, cfg);

    std::vector<torch::Tensor> inits;
    for (const auto s : seeds) {
        inits.push_back(initial_image(s, config.init_sigma, cfg.in_channels, cfg.height, cfg.width));
    }
    auto images = torch::stack(inits);

    FrozenDetector frozen(detector);
    const auto n = layouts.size();
    std::vector<ForegroundSemantics> out(n);
    auto record = [&](const torch::Tensor& per_image) {
        const auto acc = per_image.detach().to(torch::kFloat64).contiguous();
        for (std::size_t i = 0; i < n; ++i) {
            out[i].loss_trace.push_back(acc[static_cast<std::int64_t>(i)].item<double>());
        }
    };
    for (int step = 0; step <= config.steps; ++step) {
        auto input = images.detach().requires_grad_(true);
        det::SourceLoss loss;
        try {
            loss = det::source_loss(detector->forward(input), targets, cfg, det::Reduction::None);
        } catch (const NumericError& e) {
            throw NumericError(fmt::format("inversion step {}: {}", step, e.what()));
        }
        record(loss.total);
        if (step == config.steps) {
            break;
        }
        const auto grad = torch::autograd::grad({loss.total.sum()}, {input})[0];
        if (!torch::isfinite(grad).all().item<bool>()) {
            throw NumericError(fmt::format("inversion step {}: non-finite input gradient", step));
        }
        images = (images - config.step_size * grad).detach();
    }
    for (std::size_t i = 0; i < n; ++i) {
        out[i].image = images[static_cast<std::int64_t>(i)].clone();
        out[i].layout = layouts[i];
        out[i].seed = seeds[i];
        out[i].initial_loss = out[i].loss_trace.front();
        out[i].final_loss = out[i].loss_trace.back();
    }
    return out;
}

ForegroundSemantics invert_source(det::SourceDetector& detector, const Annotations& layout,
                                  const InversionConfig& config) {
    if (layout.empty()) {
        throw InputError("inversion needs a non-empty layout");
    }
    const std::uint64_t seed = config.seed;
    auto items = invert_batch(detector, std::span<const Annotations>(&layout, 1),
                              std::span<const std::uint64_t>(&seed, 1), config);
    return std::move(items.front());
}

void LayoutConfig::validate() const {
    if (width <= 0 || height <= 0 || num_classes < 1) {
        throw ConfigError("layout canvas and class count must be positive");
    }
    if (min_count < 1 || max_count < min_count) {
        throw ConfigError("layout count range must satisfy 1 <= min_count <= max_count");
    }
    if (!(min_size > 0) || max_size < min_size || max_size > static_cast<float>(std::min(width, height))) {
        throw ConfigError(fmt::format("layout size range [{}, {}] infeasible for a {}x{} canvas", min_size, max_size,
                                      width, height));
    }
}

Annotations generate_random_layout(std::uint64_t seed, const LayoutConfig& config) {
    config.validate();
    Rng rng(seed);
    const auto count = rng.integer(config.min_count, config.max_count);
    Annotations out;
    for (std::int64_t i = 0; i < count; ++i) {
        Annotation a;
        a.class_id = static_cast<int>(rng.integer(0, config.num_classes - 1));
        const float w = static_cast<float>(rng.uniform(config.min_size, config.max_size));
        const float h = static_cast<float>(rng.uniform(config.min_size, config.max_size));
        const float x = static_cast<float>(rng.uniform(0.0, config.width - w));
        const float y = static_cast<float>(rng.uniform(0.0, config.height - h));
        a.box = {x, y, x + w, y + h};
        out.push_back(a);
    }
    return out;
}

std::vector<ForegroundSemantics> build_inversion_corpus(det::SourceDetector& detector, const LayoutConfig& layout,
                                                        const InversionConfig& config, const CorpusOptions& options) {
    if (options.count < 1) {
        throw ConfigError("inversion corpus needs at least one layout");
    }
    const int chunk = std::max(1, options.chunk);
    std::vector<ForegroundSemantics> corpus;
    corpus.reserve(static_cast<std::size_t>(options.count));
    for (int start = 0; start < options.count; start += chunk) {
        const int end = std::min(options.count, start + chunk);
        std::vector<Annotations> layouts;
        std::vector<std::uint64_t> seeds;
        for (int i = start; i < end; ++i) {
            layouts.push_back(generate_random_layout(mix_seed(options.layout_seed, static_cast<std::uint64_t>(i)), layout));
            seeds.push_back(mix_seed(options.init_seed, static_cast<std::uint64_t>(i)));
        }
        try {
            auto items = invert_batch(detector, layouts, seeds, config);
            std::move(items.begin(), items.end(), std::back_inserter(corpus));
        } catch (const Error& e) {
            throw NumericError(fmt::format("corpus items {}..{}: {}", start, end - 1, e.what()));
        }
    }
    return corpus;
}

double foreground_concentration(const torch::Tensor& image, const Annotations& boxes) {
    const auto h = image.size(-2);
    const auto w = image.size(-1);
    auto mask = torch::zeros({h, w}, torch::kBool);
    for (const auto& a : boxes) {
        const auto b = a.box.clipped(static_cast<float>(w), static_cast<float>(h));
        const auto x0 = static_cast<std::int64_t>(std::floor(b.x_min));
        const auto y0 = static_cast<std::int64_t>(std::floor(b.y_min));
        const auto x1 = static_cast<std::int64_t>(std::ceil(b.x_max));
        const auto y1 = static_cast<std::int64_t>(std::ceil(b.y_max));
        mask.slice(0, y0, y1).slice(1, x0, x1).fill_(true);
    }
    const auto energy = image.detach().abs().to(torch::kFloat64).reshape({-1, h, w}).mean(0);
    const auto inside = energy.masked_select(mask);
    const auto outside = energy.masked_select(mask.logical_not());
    if (inside.numel() == 0 || outside.numel() == 0) {
        return 0.0;
    }
    const double out_mean = outside.mean().item<double>();
    return out_mean > 0 ? inside.mean().item<double>() / out_mean : 0.0;
}

double box_recovery(const Detections& detections, const Annotations& layout, double iou_threshold) {
    if (layout.empty()) {
        return 1.0;
    }
    std::vector<bool> used(detections.size(), false);
    std::size_t found = 0;
    for (const auto& a : layout) {
        int best = -1;
        double best_iou = iou_threshold;
        for (std::size_t d = 0; d < detections.size(); ++d) {
            if (used[d] || detections[d].class_id != a.class_id) {
                continue;
            }
            const double v = iou(detections[d].box, a.box);
            if (v >= best_iou) {
                best_iou = v;
                best = static_cast<int>(d);
            }
        }
        if (best >= 0) {
            used[static_cast<std::size_t>(best)] = true;
            ++found;
        }
    }
    return static_cast<double>(found) / static_cast<double>(layout.size());
}

void write_semantics(const std::filesystem::path& dir, const std::string& name, const ForegroundSemantics& item,
                     std::uint64_t detector_checksum) {
    std::filesystem::create_directories(dir);
    save_tensor_file(dir / (name + ".bin"), {item.image});
    const nlohmann::json prov{{"layout", layout_to_json(item.layout)},
                              {"seed", item.seed},
                              {"initial_loss", item.initial_loss},
                              {"final_loss", item.final_loss},
                              {"steps", item.loss_trace.empty() ? 0 : item.loss_trace.size() - 1},
                              {"detector_checksum", detector_checksum}};
    std::ofstream out(dir / (name + ".json"), std::ios::trunc);
    out << prov.dump() << '\n';
}

std::optional<ForegroundSemantics> read_semantics(const std::filesystem::path& dir, const std::string& name,
                                                  std::uint64_t detector_checksum) {
    const auto meta = dir / (name + ".json");
    if (!std::filesystem::exists(meta) || !std::filesystem::exists(dir / (name + ".bin"))) {
        return std::nullopt;
    }
    std::ifstream in(meta);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(fmt::format("corrupt provenance {}: {}", meta.string(), e.what()));
    }
    if (j.value("detector_checksum", std::uint64_t{0}) != detector_checksum) {
        return std::nullopt;
    }
    ForegroundSemantics item;
    item.image = load_tensor_file(dir / (name + ".bin")).at(0);
    item.layout = layout_from_json(j.at("layout"));
    item.seed = j.at("seed").get<std::uint64_t>();
    item.initial_loss = j.at("initial_loss").get<double>();
    item.final_loss = j.at("final_loss").get<double>();
    return item;
}

} // namespace mac::inv
