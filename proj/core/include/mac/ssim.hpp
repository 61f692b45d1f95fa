#pragma once

#include <torch/torch.h>

namespace mac {

/// Gaussian-windowed SSIM averaged over valid windows and channels. Inputs are
/// [B, C, H, W] or [C, H, W] of the same shape; the window is 11x11 with
/// sigma 1.5, truncated to the image when the image is smaller. Differentiable;
/// computed in the inputs' dtype.
torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b, double dynamic_range = 1.0);

/// Normalized 1D Gaussian weights of length `size` centred between the middle taps.
torch::Tensor gaussian_window(int size, double sigma, torch::ScalarType dtype = torch::kFloat64);

} // namespace mac
