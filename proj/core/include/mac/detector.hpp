#pragma once

// Source detector S(.): a small anchor-free, single-level (stride 8) detector.
//
// Each stride-8 cell predicts an objectness logit, K class logits and a box
// (dx, dy, log w/stride, log h/stride) relative to the cell that contains the
// object's center. The stride-16 feature map is the deepest backbone level and
// is exposed as the "tap" for gradient-based attention.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "mac/checkpoint.hpp"
#include "mac/geometry.hpp"
#include "mac/kv_config.hpp"

namespace mac::synth {
struct Dataset;
}

namespace mac::det {

struct LossWeights {
    double bbox = 1.0;
    double cls = 1.0;
    double mask = 0.0;  // no mask head; kept so the weight set is complete

    bool operator==(const LossWeights&) const = default;
};

struct DetectorConfig {
    int in_channels = 3;
    int width = 128;
    int height = 128;
    int num_classes = 3;
    int base_channels = 16;
    LossWeights weights;
    float focal_alpha = 0.25f;
    float focal_gamma = 2.0f;
    float nms_iou = 0.5f;
    float score_threshold = 0.3f;

    static constexpr int kStride = 8;
    int grid_width() const { return width / kStride; }
    int grid_height() const { return height / kStride; }

    void validate() const;
    KeyValues to_kv() const;
    static DetectorConfig from_kv(const KeyValues& kv);
    bool operator==(const DetectorConfig&) const = default;
};

struct RawHead {
    torch::Tensor objectness;  // [B, 1, h, w] logits
    torch::Tensor class_logits;  // [B, K, h, w]
    torch::Tensor box;  // [B, 4, h, w]
    torch::Tensor tap;  // [B, C, h/2, w/2] deepest feature map
};

struct HeadTargets {
    torch::Tensor positive;  // [B, h, w] float {0, 1}
    torch::Tensor class_index;  // [B, h, w] int64, valid where positive
    torch::Tensor box;  // [B, 4, h, w]
};

HeadTargets encode_targets(std::span<const Annotations> annotations, const DetectorConfig& config);

enum class Reduction { Mean, Sum, None };

struct SourceLoss {
    torch::Tensor total;
    torch::Tensor bbox;
    torch::Tensor cls;
};

/// total = lambda_bbox * L_bbox + lambda_cls * L_cls.
///   L_cls  = focal objectness loss over all cells + cross entropy of the class
///            logits at positive cells,
///   L_bbox = L1 over the 4 box parameters at positive cells,
/// each normalised per image by max(1, #positives). Reduction runs over images.
/// Throws NumericError when the head contains NaN/Inf.
SourceLoss source_loss(const RawHead& head, const HeadTargets& targets, const DetectorConfig& config,
                       Reduction reduction = Reduction::Mean);

class SourceDetectorImpl : public torch::nn::Module {
public:
    explicit SourceDetectorImpl(const DetectorConfig& config);

    RawHead forward(const torch::Tensor& images);
    const DetectorConfig& config() const { return config_; }

private:
    DetectorConfig config_;
    torch::nn::Sequential stem_{nullptr};
    torch::nn::Sequential stride8_{nullptr};
    torch::nn::Sequential stride16_{nullptr};
    torch::nn::Sequential context_{nullptr};
    torch::nn::Conv2d objectness_{nullptr};
    torch::nn::Conv2d classes_{nullptr};
    torch::nn::Conv2d box_{nullptr};
};
TORCH_MODULE(SourceDetector);

/// Builds a detector with parameters drawn from `seed`.
SourceDetector make_detector(const DetectorConfig& config, std::uint64_t seed);

/// Converts raw head output to thresholded, class-wise NMS-filtered detections.
std::vector<Detections> decode(const RawHead& head, const DetectorConfig& config, float score_threshold);

/// Eval-mode inference on [B, C, H, W] (or a single [C, H, W]) input.
std::vector<Detections> infer(SourceDetector& detector, const torch::Tensor& images);
std::vector<Detections> infer(SourceDetector& detector, const torch::Tensor& images, float score_threshold);

Detections non_max_suppression(Detections detections, float iou_threshold);

struct SourceSchedule {
    int iterations = 1500;
    int batch_size = 16;
    double lr = 1e-3;
    bool hflip = true;
    int log_every = 50;
};

struct TrainRecord {
    int iteration = 0;
    double total = 0;
    double bbox = 0;
    double cls = 0;
};

using TrainLogger = std::function<void(const TrainRecord&)>;

/// Standard supervised training of S on {I, Y}. Deterministic for a fixed seed.
SourceDetector train_source(const synth::Dataset& dataset, const DetectorConfig& config,
                            const SourceSchedule& schedule, std::uint64_t seed, const TrainLogger& logger = {});

Checkpoint detector_checkpoint(const SourceDetector& detector);
SourceDetector detector_from_checkpoint(const Checkpoint& ckpt);
void save_detector(const SourceDetector& detector, const std::filesystem::path& path);
SourceDetector load_detector(const std::filesystem::path& path);

/// Horizontal flip of images [B, C, H, W] and their annotations.
Annotations hflip(const Annotations& annotations, float width);

} // namespace mac::det
