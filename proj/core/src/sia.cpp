#include "mac/sia.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "mac/error.hpp"

namespace mac::sia {

void SiaConfig::validate() const {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw ConfigError(fmt::format("SIA fraction {} outside [0, 1]", fraction));
    }
    if (cadence < 1) {
        throw ConfigError("SIA cadence must be >= 1");
    }
}

std::int64_t masked_count(double fraction, std::int64_t cells) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw ConfigError(fmt::format("SIA mask fraction {} outside [0, 1]", fraction));
    }
    if (cells < 0) {
        throw InputError("SIA cell count must be >= 0");
    }
    return std::llround(fraction * static_cast<double>(cells));
}

std::vector<double> saliency(const torch::Tensor& gradient, int height, int width) {
    if (gradient.dim() != 3) {
        throw InputError("saliency expects a [C, h, w] gradient");
    }
    const auto summed = gradient.detach().to(torch::kCPU, torch::kFloat64).abs().sum(0).contiguous();
    const auto h = summed.size(0);
    const auto w = summed.size(1);
    const double* s = summed.data_ptr<double>();
    std::vector<double> out(static_cast<std::size_t>(height) * static_cast<std::size_t>(width));
    for (int y = 0; y < height; ++y) {
        const auto sy = std::min<std::int64_t>(h - 1, static_cast<std::int64_t>(y) * h / height);
        for (int x = 0; x < width; ++x) {
            const auto sx = std::min<std::int64_t>(w - 1, static_cast<std::int64_t>(x) * w / width);
            out[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)] =
                s[sy * w + sx];
        }
    }
    return out;
}

torch::Tensor sia_mask(const torch::Tensor& gradient, int height, int width, double fraction) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw ConfigError(fmt::format("SIA fraction {} outside [0, 1]", fraction));
    }
    if (gradient.dim() == 4) {
        std::vector<torch::Tensor> masks;
        for (std::int64_t i = 0; i < gradient.size(0); ++i) {
            masks.push_back(sia_mask(gradient[i], height, width, fraction));
        }
        return torch::stack(masks);
    }
    if (!torch::isfinite(gradient).all().item<bool>()) {
        throw NumericError("SIA gradient contains NaN/Inf");
    }
    const auto sal = saliency(gradient, height, width);
    auto mask = torch::ones({height, width});
    if (std::all_of(sal.begin(), sal.end(), [](double v) { return v == 0.0; })) {
        return mask;
    }
    const auto n = static_cast<std::int64_t>(sal.size());
    const auto k = masked_count(fraction, n);
    std::vector<std::int64_t> order(sal.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        return sal[static_cast<std::size_t>(a)] > sal[static_cast<std::size_t>(b)];
    });
    float* m = mask.data_ptr<float>();
    for (std::int64_t i = 0; i < k; ++i) {
        m[order[static_cast<std::size_t>(i)]] = 0.0f;
    }
    return mask;
}

det::SourceLoss sia_loss(det::SourceDetector& detector, const torch::Tensor& images, const torch::Tensor& mask,
                         const det::HeadTargets& targets, det::Reduction reduction) {
    const auto batch = images.dim() == 3 ? images.unsqueeze(0) : images;
    auto m = mask.to(batch.scalar_type());
    if (m.dim() == 2) {
        m = m.unsqueeze(0);
    }
    if (m.size(-2) != batch.size(2) || m.size(-1) != batch.size(3)) {
        throw InputError("SIA mask does not match the image grid");
    }
    return det::source_loss(detector->forward(batch * m.unsqueeze(1)), targets, detector->config(), reduction);
}

} // namespace mac::sia
