#pragma once

// Skipped inverted attention: mask the image cells a high-level layer is most
// sensitive to and train on the masked input.

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "mac/detector.hpp"

namespace mac::sia {

struct SiaConfig {
    double fraction = 0.1;  // p: share of cells zeroed
    int cadence = 1;  // masked pass every `cadence` iterations
    bool supplement = true;  // masked loss added to (true) or replacing (false) the unmasked L_S

    void validate() const;
};

/// Name of the detector layer whose gradient drives the mask.
inline constexpr const char* kTapLayer = "stride16";

/// Number of zeros in a mask over n cells: round(p * n), halves away from zero.
std::int64_t masked_count(double fraction, std::int64_t cells);

/// Channel sum of |G| resized (nearest) to [height, width], flattened row-major
/// and in double precision. G is [C, h, w].
std::vector<double> saliency(const torch::Tensor& gradient, int height, int width);

/// Binary mask A [height, width] (float): the round(p * N) cells of largest
/// saliency are 0, ties resolved toward the lower row-major index. An all-zero
/// gradient gives an all-ones mask. G may be batched [B, C, h, w], giving [B, H, W].
torch::Tensor sia_mask(const torch::Tensor& gradient, int height, int width, double fraction);

/// source_loss(S(A * J), Y); the mask broadcasts over channels.
det::SourceLoss sia_loss(det::SourceDetector& detector, const torch::Tensor& images, const torch::Tensor& mask,
                         const det::HeadTargets& targets, det::Reduction reduction = det::Reduction::Mean);

} // namespace mac::sia
