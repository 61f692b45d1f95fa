#include "mac/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "mac/error.hpp"
#include "mac/rng.hpp"
#include "mac/synthdata.hpp"
#include "mac/tensor_io.hpp"

namespace mac::det {
namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

nn::Conv2d conv(int in, int out, int kernel, int stride = 1) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2));
}

void require_finite(const torch::Tensor& t, const char* what) {
    if (!torch::isfinite(t).all().item<bool>()) {
        throw NumericError(fmt::format("non-finite values in detector {}", what));
    }
}

torch::Tensor reduce(const torch::Tensor& per_image, Reduction reduction) {
    switch (reduction) {
    case Reduction::Mean:
        return per_image.mean();
    case Reduction::Sum:
        return per_image.sum();
    case Reduction::None:
        return per_image;
    }
    return per_image;
}

} // namespace

void DetectorConfig::validate() const {
    if (in_channels < 1 || num_classes < 1 || base_channels < 1) {
        throw ConfigError("detector channels and classes must be positive");
    }
    if (width <= 0 || height <= 0 || width % kStride || height % kStride) {
        throw ConfigError(fmt::format("detector input {}x{} must be a positive multiple of stride {}", width, height,
                                      kStride));
    }
    if (weights.bbox < 0 || weights.cls < 0 || weights.mask < 0) {
        throw ConfigError("loss weights must be non-negative");
    }
    if (weights.mask != 0) {
        throw ConfigError("this detector has no mask head; lambda_mask must be 0");
    }
}

KeyValues DetectorConfig::to_kv() const {
    KeyValues kv;
    kv.set("in_channels", in_channels);
    kv.set("width", width);
    kv.set("height", height);
    kv.set("num_classes", num_classes);
    kv.set("base_channels", base_channels);
    kv.set("lambda_bbox", weights.bbox);
    kv.set("lambda_cls", weights.cls);
    kv.set("lambda_mask", weights.mask);
    kv.set("focal_alpha", focal_alpha);
    kv.set("focal_gamma", focal_gamma);
    kv.set("nms_iou", nms_iou);
    kv.set("score_threshold", score_threshold);
    return kv;
}

DetectorConfig DetectorConfig::from_kv(const KeyValues& kv) {
    DetectorConfig c;
    c.in_channels = kv.get_or("in_channels", c.in_channels);
    c.width = kv.get_or("width", c.width);
    c.height = kv.get_or("height", c.height);
    c.num_classes = kv.get_or("num_classes", c.num_classes);
    c.base_channels = kv.get_or("base_channels", c.base_channels);
    c.weights.bbox = kv.get_or("lambda_bbox", c.weights.bbox);
    c.weights.cls = kv.get_or("lambda_cls", c.weights.cls);
    c.weights.mask = kv.get_or("lambda_mask", c.weights.mask);
    c.focal_alpha = kv.get_or("focal_alpha", c.focal_alpha);
    c.focal_gamma = kv.get_or("focal_gamma", c.focal_gamma);
    c.nms_iou = kv.get_or("nms_iou", c.nms_iou);
    c.score_threshold = kv.get_or("score_threshold", c.score_threshold);
    return c;
}

HeadTargets encode_targets(std::span<const Annotations> annotations, const DetectorConfig& config) {
    const auto b = static_cast<std::int64_t>(annotations.size());
    const int gh = config.grid_height();
    const int gw = config.grid_width();
    const float stride = DetectorConfig::kStride;
    HeadTargets t;
    t.positive = torch::zeros({b, gh, gw});
    t.class_index = torch::zeros({b, gh, gw}, torch::kInt64);
    t.box = torch::zeros({b, 4, gh, gw});
    auto pos = t.positive.accessor<float, 3>();
    auto cls = t.class_index.accessor<std::int64_t, 3>();
    auto box = t.box.accessor<float, 4>();
    for (std::int64_t i = 0; i < b; ++i) {
        // larger objects win a contested cell
        std::vector<std::size_t> order(annotations[i].size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) {
            return annotations[i][l].box.area() < annotations[i][r].box.area();
        });
        for (const auto k : order) {
            const auto& a = annotations[i][k];
            if (a.class_id < 0 || a.class_id >= config.num_classes) {
                throw InputError(fmt::format("annotation class {} outside [0, {})", a.class_id, config.num_classes));
            }
            if (!a.box.valid()) {
                throw InputError("annotation box is degenerate");
            }
            const float cx = a.box.center_x() / stride;
            const float cy = a.box.center_y() / stride;
            const int gx = std::clamp(static_cast<int>(std::floor(cx)), 0, gw - 1);
            const int gy = std::clamp(static_cast<int>(std::floor(cy)), 0, gh - 1);
            pos[i][gy][gx] = 1.0f;
            cls[i][gy][gx] = a.class_id;
            box[i][0][gy][gx] = cx - static_cast<float>(gx);
            box[i][1][gy][gx] = cy - static_cast<float>(gy);
            box[i][2][gy][gx] = std::log(a.box.width() / stride);
            box[i][3][gy][gx] = std::log(a.box.height() / stride);
        }
    }
    return t;
}

SourceLoss source_loss(const RawHead& head, const HeadTargets& targets, const DetectorConfig& config,
                       Reduction reduction) {
    require_finite(head.objectness, "objectness");
    require_finite(head.class_logits, "class logits");
    require_finite(head.box, "box regression");
    const auto opts = head.objectness.options();
    const auto positive = targets.positive.to(opts);
    const auto n_pos = positive.sum({1, 2}).clamp_min(1.0);

    const auto logits = head.objectness.squeeze(1);
    const auto p = torch::sigmoid(logits);
    const auto bce = F::binary_cross_entropy_with_logits(
        logits, positive, F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone));
    const auto p_t = p * positive + (1 - p) * (1 - positive);
    const auto alpha_t = config.focal_alpha * positive + (1 - config.focal_alpha) * (1 - positive);
    const auto focal = (alpha_t * torch::pow(1 - p_t, config.focal_gamma) * bce).sum({1, 2});

    const auto log_probs = torch::log_softmax(head.class_logits, 1);
    const auto picked = log_probs.gather(1, targets.class_index.unsqueeze(1)).squeeze(1);
    const auto ce = -(picked * positive).sum({1, 2});

    const auto l1 = ((head.box - targets.box.to(opts)).abs().sum(1) * positive).sum({1, 2});

    const auto l_cls = (focal + ce) / n_pos;
    const auto l_bbox = l1 / n_pos;
    const auto total = config.weights.bbox * l_bbox + config.weights.cls * l_cls;
    return {reduce(total, reduction), reduce(l_bbox, reduction), reduce(l_cls, reduction)};
}

SourceDetectorImpl::SourceDetectorImpl(const DetectorConfig& config) : config_(config) {
    config_.validate();
    const int c = config_.base_channels;
    stem_ = register_module("stem", nn::Sequential(conv(config_.in_channels, c, 3, 2), nn::ReLU(),
                                                   conv(c, 2 * c, 3, 2), nn::ReLU()));
    stride8_ = register_module("stride8", nn::Sequential(conv(2 * c, 3 * c, 3, 2), nn::ReLU(),
                                                         conv(3 * c, 3 * c, 3), nn::ReLU()));
    stride16_ = register_module("stride16", nn::Sequential(conv(3 * c, 4 * c, 3, 2), nn::ReLU(),
                                                           conv(4 * c, 4 * c, 3), nn::ReLU()));
    context_ = register_module("context", nn::Sequential(conv(7 * c, 3 * c, 1), nn::ReLU(),
                                                         conv(3 * c, 3 * c, 3), nn::ReLU()));
    objectness_ = register_module("objectness", conv(3 * c, 1, 1));
    classes_ = register_module("classes", conv(3 * c, config_.num_classes, 1));
    box_ = register_module("box", conv(3 * c, 4, 1));
    // focal-loss prior: start with ~1% objectness everywhere
    torch::NoGradGuard guard;
    objectness_->bias.fill_(-std::log((1.0 - 0.01) / 0.01));
}

RawHead SourceDetectorImpl::forward(const torch::Tensor& images) {
    if (images.dim() != 4 || images.size(1) != config_.in_channels || images.size(2) != config_.height ||
        images.size(3) != config_.width) {
        throw InputError(fmt::format("detector expects [B, {}, {}, {}] input, got [{}]", config_.in_channels,
                                     config_.height, config_.width, fmt::join(images.sizes(), ", ")));
    }
    const auto s8 = stride8_->forward(stem_->forward(images));
    const auto tap = stride16_->forward(s8);
    const auto up = F::interpolate(
        tap, F::InterpolateFuncOptions().size(std::vector<std::int64_t>{s8.size(2), s8.size(3)}).mode(torch::kNearest));
    const auto features = context_->forward(torch::cat({s8, up}, 1));
    return {objectness_->forward(features), classes_->forward(features), box_->forward(features), tap};
}

SourceDetector make_detector(const DetectorConfig& config, std::uint64_t seed) {
    torch::manual_seed(seed);
    return SourceDetector(config);
}

Detections non_max_suppression(Detections detections, float iou_threshold) {
    std::stable_sort(detections.begin(), detections.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    Detections kept;
    for (const auto& d : detections) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.class_id == d.class_id && iou(k.box, d.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) {
            kept.push_back(d);
        }
    }
    return kept;
}

std::vector<Detections> decode(const RawHead& head, const DetectorConfig& config, float score_threshold) {
    torch::NoGradGuard guard;
    const auto obj = torch::sigmoid(head.objectness.detach().to(torch::kFloat32)).squeeze(1).contiguous();
    const auto probs = torch::softmax(head.class_logits.detach().to(torch::kFloat32), 1).contiguous();
    const auto box = head.box.detach().to(torch::kFloat32).contiguous();
    const auto o = obj.accessor<float, 3>();
    const auto pr = probs.accessor<float, 4>();
    const auto bx = box.accessor<float, 4>();
    const float stride = DetectorConfig::kStride;
    const float w = static_cast<float>(config.width);
    const float h = static_cast<float>(config.height);
    std::vector<Detections> out(static_cast<std::size_t>(obj.size(0)));
    for (std::int64_t i = 0; i < obj.size(0); ++i) {
        Detections dets;
        for (std::int64_t gy = 0; gy < obj.size(1); ++gy) {
            for (std::int64_t gx = 0; gx < obj.size(2); ++gx) {
                int best = 0;
                for (int k = 1; k < config.num_classes; ++k) {
                    if (pr[i][k][gy][gx] > pr[i][best][gy][gx]) {
                        best = k;
                    }
                }
                const float score = o[i][gy][gx] * pr[i][best][gy][gx];
                if (!(score >= score_threshold)) {
                    continue;
                }
                const float cx = (static_cast<float>(gx) + bx[i][0][gy][gx]) * stride;
                const float cy = (static_cast<float>(gy) + bx[i][1][gy][gx]) * stride;
                const float bw = std::exp(std::clamp(bx[i][2][gy][gx], -6.0f, 6.0f)) * stride;
                const float bh = std::exp(std::clamp(bx[i][3][gy][gx], -6.0f, 6.0f)) * stride;
                const Box b = Box{cx - 0.5f * bw, cy - 0.5f * bh, cx + 0.5f * bw, cy + 0.5f * bh}.clipped(w, h);
                if (b.valid()) {
                    dets.push_back({best, b, score});
                }
            }
        }
        out[static_cast<std::size_t>(i)] = non_max_suppression(std::move(dets), config.nms_iou);
    }
    return out;
}

std::vector<Detections> infer(SourceDetector& detector, const torch::Tensor& images) {
    return infer(detector, images, detector->config().score_threshold);
}

std::vector<Detections> infer(SourceDetector& detector, const torch::Tensor& images, float score_threshold) {
    torch::NoGradGuard guard;
    const bool was_training = detector->is_training();
    detector->eval();
    const auto batch = images.dim() == 3 ? images.unsqueeze(0) : images;
    std::vector<Detections> out;
    // chunk to bound memory on large evaluation sets
    constexpr std::int64_t kChunk = 64;
    for (std::int64_t start = 0; start < batch.size(0); start += kChunk) {
        const auto part = batch.slice(0, start, std::min(batch.size(0), start + kChunk));
        auto dets = decode(detector->forward(part), detector->config(), score_threshold);
        std::move(dets.begin(), dets.end(), std::back_inserter(out));
    }
    detector->train(was_training);
    return out;
}

Annotations hflip(const Annotations& annotations, float width) {
    Annotations out = annotations;
    for (auto& a : out) {
        a.box = {width - a.box.x_max, a.box.y_min, width - a.box.x_min, a.box.y_max};
    }
    return out;
}

SourceDetector train_source(const synth::Dataset& dataset, const DetectorConfig& config,
                            const SourceSchedule& schedule, std::uint64_t seed, const TrainLogger& logger) {
    if (dataset.samples.empty()) {
        throw InputError("cannot train the source detector on an empty dataset");
    }
    if (schedule.iterations < 0 || schedule.batch_size < 1 || schedule.lr <= 0) {
        throw ConfigError("invalid source training schedule");
    }
    auto detector = make_detector(config, seed);
    detector->train();
    torch::optim::Adam optimizer(detector->parameters(), torch::optim::AdamOptions(schedule.lr));
    Rng rng(mix_seed(seed, 0xda7a));
    const auto n = static_cast<std::int64_t>(dataset.samples.size());
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::int64_t cursor = n;
    const int decay_at = static_cast<int>(0.8 * schedule.iterations);

    for (int it = 0; it < schedule.iterations; ++it) {
        if (it == decay_at) {
            for (auto& group : optimizer.param_groups()) {
                static_cast<torch::optim::AdamOptions&>(group.options()).lr(schedule.lr * 0.1);
            }
        }
        std::vector<torch::Tensor> images;
        std::vector<Annotations> labels;
        for (int b = 0; b < std::min<std::int64_t>(schedule.batch_size, n); ++b) {
            if (cursor >= n) {
                for (std::int64_t i = n - 1; i > 0; --i) {
                    std::swap(order[static_cast<std::size_t>(i)],
                              order[static_cast<std::size_t>(rng.integer(0, i))]);
                }
                cursor = 0;
            }
            const auto& sample = dataset.samples[static_cast<std::size_t>(order[static_cast<std::size_t>(cursor++)])];
            if (schedule.hflip && rng.uniform() < 0.5) {
                images.push_back(sample.source.flip({2}));
                labels.push_back(hflip(sample.annotations, static_cast<float>(config.width)));
            } else {
                images.push_back(sample.source);
                labels.push_back(sample.annotations);
            }
        }
        const auto head = detector->forward(torch::stack(images));
        SourceLoss loss;
        try {
            loss = source_loss(head, encode_targets(labels, config), config);
        } catch (const NumericError& e) {
            throw NumericError(fmt::format("source training iteration {}: {}", it, e.what()));
        }
        if (!std::isfinite(loss.total.item<double>())) {
            throw NumericError(fmt::format("source training diverged at iteration {}", it));
        }
        optimizer.zero_grad();
        loss.total.backward();
        optimizer.step();
        if (logger && (it % schedule.log_every == 0 || it + 1 == schedule.iterations)) {
            logger({it, loss.total.item<double>(), loss.bbox.item<double>(), loss.cls.item<double>()});
        }
    }
    detector->eval();
    return detector;
}

Checkpoint detector_checkpoint(const SourceDetector& detector) {
    Checkpoint ckpt;
    ckpt.kind = "detector";
    ckpt.config = detector->config().to_kv();
    append_module_state(ckpt, *detector);
    return ckpt;
}

SourceDetector detector_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != "detector") {
        throw LoadError("expected a detector checkpoint, got '" + ckpt.kind + "'");
    }
    SourceDetector detector(DetectorConfig::from_kv(ckpt.config));
    restore_module_state(*detector, ckpt);
    detector->eval();
    return detector;
}

void save_detector(const SourceDetector& detector, const std::filesystem::path& path) {
    save_checkpoint(path, detector_checkpoint(detector));
}

SourceDetector load_detector(const std::filesystem::path& path) {
    return detector_from_checkpoint(load_checkpoint(path));
}

} // namespace mac::det
