#pragma once

// Source model inversion: synthesize foreground semantics J by gradient
// descent on the input of a frozen detector against a target layout.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "mac/detector.hpp"
#include "mac/geometry.hpp"

namespace mac::inv {

struct InversionConfig {
    int steps = 400;
    double step_size = 1.0;   // sum-reduced loss gives small per-pixel gradients
    double init_sigma = 0.02; // noise left outside the boxes stays below the foreground signal
    std::uint64_t seed = 0;
    det::LossWeights weights;  // which detection loss terms drive the inversion

    void validate() const;
};

struct ForegroundSemantics {
    torch::Tensor image;  // [3, H, W]
    Annotations layout;
    std::uint64_t seed = 0;
    double initial_loss = 0;
    double final_loss = 0;
    std::vector<double> loss_trace;  // loss before each update, then the final loss
};

/// Seeded N(0, sigma^2) image, independent of torch's global generator.
torch::Tensor initial_image(std::uint64_t seed, double sigma, int channels, int height, int width);

/// Plain fixed-step gradient descent on J from initial_image(config.seed). The
/// detector's parameters are left bit-unchanged.
ForegroundSemantics invert_source(det::SourceDetector& detector, const Annotations& layout,
                                  const InversionConfig& config);

/// Inverts several layouts at once. The loss is summed over images so every
/// item follows its own trajectory; `seeds[i]` seeds item i. Empty layouts are
/// allowed here and drive J toward pure background.
std::vector<ForegroundSemantics> invert_batch(det::SourceDetector& detector, std::span<const Annotations> layouts,
                                              std::span<const std::uint64_t> seeds, const InversionConfig& config);

struct LayoutConfig {
    int width = 128;
    int height = 128;
    int num_classes = 3;
    int min_count = 1;
    int max_count = 5;
    float min_size = 16;
    float max_size = 40;

    void validate() const;
};

/// Boxes placed uniformly inside the canvas with uniform sizes and classes.
/// Overlaps are allowed.
Annotations generate_random_layout(std::uint64_t seed, const LayoutConfig& config);

struct CorpusOptions {
    int count = 64;
    std::uint64_t layout_seed = 1;
    std::uint64_t init_seed = 2;
    int chunk = 32;
};

/// Item i inverts generate_random_layout(mix_seed(layout_seed, i)) from
/// initial_image(mix_seed(init_seed, i)). Errors are rethrown with the item index.
std::vector<ForegroundSemantics> build_inversion_corpus(det::SourceDetector& detector, const LayoutConfig& layout,
                                                        const InversionConfig& config, const CorpusOptions& options);

/// Mean |J| inside the union of boxes divided by mean |J| outside.
double foreground_concentration(const torch::Tensor& image, const Annotations& boxes);

/// Fraction of layout boxes matched (same class, IoU >= threshold) by detections.
double box_recovery(const Detections& detections, const Annotations& layout, double iou_threshold = 0.5);

/// Cache layout: `<name>.bin` holds the image, `<name>.json` the provenance
/// (layout, seed, losses, detector checksum).
void write_semantics(const std::filesystem::path& dir, const std::string& name, const ForegroundSemantics& item,
                     std::uint64_t detector_checksum);
std::optional<ForegroundSemantics> read_semantics(const std::filesystem::path& dir, const std::string& name,
                                                  std::uint64_t detector_checksum);

} // namespace mac::inv
