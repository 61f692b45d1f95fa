#include "mac/ssim.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "mac/error.hpp"

namespace mac {
namespace F = torch::nn::functional;

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;

} // namespace

torch::Tensor gaussian_window(int size, double sigma, torch::ScalarType dtype) {
    std::vector<double> w(static_cast<std::size_t>(size));
    const double centre = (size - 1) / 2.0;
    double total = 0;
    for (int i = 0; i < size; ++i) {
        const double d = i - centre;
        w[static_cast<std::size_t>(i)] = std::exp(-d * d / (2 * sigma * sigma));
        total += w[static_cast<std::size_t>(i)];
    }
    for (auto& v : w) {
        v /= total;
    }
    return torch::tensor(w, torch::kFloat64).to(dtype);
}

torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b, double dynamic_range) {
    if (a.sizes() != b.sizes()) {
        throw InputError(fmt::format("ssim shape mismatch: [{}] vs [{}]", fmt::join(a.sizes(), ", "),
                                     fmt::join(b.sizes(), ", ")));
    }
    if (a.dim() != 3 && a.dim() != 4) {
        throw InputError("ssim expects [C, H, W] or [B, C, H, W] tensors");
    }
    const auto x = a.dim() == 3 ? a.unsqueeze(0) : a;
    const auto y = b.dim() == 3 ? b.unsqueeze(0) : b;
    const auto channels = x.size(1);
    const int wh = static_cast<int>(std::min<std::int64_t>(kWindow, x.size(2)));
    const int ww = static_cast<int>(std::min<std::int64_t>(kWindow, x.size(3)));
    const auto gy = gaussian_window(wh, kSigma, x.scalar_type()).view({wh, 1});
    const auto gx = gaussian_window(ww, kSigma, x.scalar_type()).view({1, ww});
    const auto kernel = (gy * gx).expand({channels, 1, wh, ww}).contiguous();
    const auto filter = [&](const torch::Tensor& t) {
        return F::conv2d(t, kernel, F::Conv2dFuncOptions().groups(channels));
    };

    const double c1 = std::pow(0.01 * dynamic_range, 2);
    const double c2 = std::pow(0.03 * dynamic_range, 2);
    const auto mu_x = filter(x);
    const auto mu_y = filter(y);
    const auto mu_xx = mu_x * mu_x;
    const auto mu_yy = mu_y * mu_y;
    const auto mu_xy = mu_x * mu_y;
    const auto var_x = filter(x * x) - mu_xx;
    const auto var_y = filter(y * y) - mu_yy;
    const auto cov = filter(x * y) - mu_xy;
    const auto map = ((2 * mu_xy + c1) * (2 * cov + c2)) / ((mu_xx + mu_yy + c1) * (var_x + var_y + c2));
    return map.mean();
}

} // namespace mac
