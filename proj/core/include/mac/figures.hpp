#pragma once

// Diagnostic panels for target runs: X, J, |dL/dJ| heatmap, SIA mask,
// detections overlay, J_T and a J_S corpus sample, written as PNG.

#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mac/geometry.hpp"
#include "mac/mactrain.hpp"

namespace mac::fig {

namespace fs = std::filesystem;

/// 8-bit [H, W, C] (C = 1 or 3) to a PNG file.
void write_png(const fs::path& path, const torch::Tensor& pixels);
/// PNG to uint8 [H, W, C].
torch::Tensor read_png(const fs::path& path);

/// [3, H, W] real image clipped to [0, 1] as uint8 [H, W, 3].
torch::Tensor to_rgb8(const torch::Tensor& image);
/// [H, W] non-negative map normalized by its maximum, as a color ramp.
torch::Tensor heatmap8(const torch::Tensor& map);
/// [H, W] {0, 1} mask as uint8 [H, W, 1] with values {0, 255}.
torch::Tensor mask8(const torch::Tensor& mask);
/// Target tensor visualization: spatial inputs show their channels, flat inputs
/// are folded into a near-square grid.
torch::Tensor target8(const torch::Tensor& x);
/// Draws box outlines in place on uint8 [H, W, 3].
void draw_boxes(torch::Tensor& rgb, const std::vector<Box>& boxes, std::array<std::uint8_t, 3> color);

struct FigureSample {
    std::int64_t id = 0;
    torch::Tensor x;
    torch::Tensor j;  // [3, H, W]
    torch::Tensor grad;  // [H, W] channel-summed |dL_S/dJ|
    torch::Tensor mask;  // [H, W]
    torch::Tensor jt;  // optional [3, H, W]
    Annotations truth;
    Detections detections;
};

struct FigureBundle {
    std::vector<FigureSample> samples;
    torch::Tensor js;  // optional J_S corpus item
    Annotations js_layout;
};

/// Runs the trained model on the first `count` training samples. Gradients use
/// the ground-truth labels of those samples.
FigureBundle capture_figures(train::TargetModel& model, const synth::Dataset& train, int count, double sia_fraction,
                             const train::SemanticsCache* semantics, const std::vector<train::LabelSource>& plan,
                             const inv::ForegroundSemantics* js);

void save_bundle(const fs::path& dir, const FigureBundle& bundle);

struct RenderReport {
    std::vector<fs::path> written;
    std::vector<std::string> skipped;
};

/// Panels for every captured sample of `run_dir` into `out_dir`. Missing
/// tensors are skipped and listed.
RenderReport render_figures(const fs::path& run_dir, const fs::path& out_dir);

} // namespace mac::fig
