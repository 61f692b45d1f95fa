#pragma once

// Calibrator C(.) = {E_T, D_T}: modality adapter, vector-quantized encoder and
// decoder producing an image-like tensor J of shape [3, H, W] from a target
// modality tensor X.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mac/checkpoint.hpp"
#include "mac/kv_config.hpp"
#include "mac/synthdata.hpp"

namespace mac::calib {

/// Learnable codebook {B_i}: p vectors of dimension `channels`.
class CodebookImpl : public torch::nn::Module {
public:
    CodebookImpl(int size, int channels);

    int size() const { return static_cast<int>(embeddings.size(0)); }
    int channels() const { return static_cast<int>(embeddings.size(1)); }

    torch::Tensor embeddings;  // [p, channels]
    torch::Tensor usage;  // [p] int64 assignment counts (training mode only)
};
TORCH_MODULE(Codebook);

struct Quantized {
    torch::Tensor indices;  // [B, h, w] int64
    torch::Tensor z_q;  // [B, C, h, w] codebook rows; differentiable w.r.t. the codebook
    torch::Tensor z_st;  // z_e + sg(z_q - z_e): forward value of z_q, gradient passes to z_e
};

/// Nearest codebook entry per cell by squared Euclidean distance (accumulated
/// in double), ties resolved to the lowest index. Usage counters advance only
/// when `count_usage` is set.
Quantized quantize(const torch::Tensor& z_e, Codebook& codebook, bool count_usage = false);

/// Index search alone on [N, C] rows; exposed for oracles and benchmarks.
std::vector<std::int64_t> nearest_codes(const torch::Tensor& rows, const torch::Tensor& embeddings);

struct VqLosses {
    torch::Tensor reconstruction;  // mse(reconstruction, target)
    torch::Tensor codebook;  // mse(z_q, sg(z_e))
    torch::Tensor commitment;  // mse(z_e, sg(z_q))
    torch::Tensor total;  // reconstruction + codebook + beta * commitment
};

/// Pass undefined `reconstruction`/`target` to get the latent terms only.
VqLosses vq_losses(const torch::Tensor& z_e, const torch::Tensor& z_q, const torch::Tensor& reconstruction,
                   const torch::Tensor& target, double beta);

/// Strided conv encoder down to the latent grid, ending in a 1x1 projection.
class VqEncoderImpl : public torch::nn::Module {
public:
    VqEncoderImpl(int in_channels, int downsample_steps, int latent_channels);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(VqEncoder);

/// Latent grid [C, H/8, W/8] to image [3, H, W]: two nearest-neighbour
/// upsampling stages and a final pixel shuffle.
class VqDecoderImpl : public torch::nn::Module {
public:
    explicit VqDecoderImpl(int latent_channels);
    torch::Tensor forward(const torch::Tensor& z);

private:
    torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(VqDecoder);

struct CalibratorConfig {
    synth::SensorMode sensor_mode = synth::SensorMode::SpatialDegraded;
    std::vector<std::int64_t> input_shape{2, 64, 64};  // X as [C, H, W]
    int image_width = 128;
    int image_height = 128;
    int latent_channels = 16;
    int codebook_size = 64;
    double beta = 0.25;
    int adapter_channels = 16;
    int adapter_grid = 32;  // flat inputs are lifted to [adapter_channels', grid, grid]

    int latent_width() const { return image_width / 8; }
    int latent_height() const { return image_height / 8; }
    bool flat_input() const { return sensor_mode == synth::SensorMode::ScrambledProjection; }

    void validate() const;
    KeyValues to_kv() const;
    static CalibratorConfig from_kv(const KeyValues& kv);
    static CalibratorConfig for_sensor(const synth::SensorConfig& sensor, int image_width, int image_height);
    bool operator==(const CalibratorConfig&) const = default;
};

/// Spatial inputs: 3x3 conv stem that keeps the spatial size. Flat inputs:
/// fully connected lift reshaped to [channels, grid, grid].
class ModalityAdapterImpl : public torch::nn::Module {
public:
    explicit ModalityAdapterImpl(const CalibratorConfig& config);
    torch::Tensor forward(const torch::Tensor& x);
    int out_channels() const { return out_channels_; }
    int out_size() const { return out_size_; }

private:
    bool flat_;
    int out_channels_;
    int out_size_;
    torch::nn::Conv2d conv_{nullptr};
    torch::nn::Linear linear_{nullptr};
};
TORCH_MODULE(ModalityAdapter);

enum class ParamGroup { Adapter, Encoder, Codebook, Decoder, Source };
const char* to_string(ParamGroup group);

class CalibratorNetImpl : public torch::nn::Module {
public:
    explicit CalibratorNetImpl(const CalibratorConfig& config);

    ModalityAdapter adapter{nullptr};
    VqEncoder encoder{nullptr};
    Codebook codebook{nullptr};
    VqDecoder decoder{nullptr};
};
TORCH_MODULE(CalibratorNet);

struct CalibratorOutput {
    torch::Tensor image;  // J: [B, 3, H, W]
    torch::Tensor z_e;
    Quantized latent;
};

class Calibrator {
public:
    explicit Calibrator(CalibratorConfig config);

    /// Fresh parameters drawn from `seed`.
    void initialize(std::uint64_t seed);
    bool initialized() const { return static_cast<bool>(net_); }

    /// X as [B, C, H, W] (or unbatched) to J. Throws StateError before initialize().
    CalibratorOutput calibrate(const torch::Tensor& x);
    /// Adapter output only.
    torch::Tensor adapt_modality(const torch::Tensor& x);

    void train(bool on = true);
    void eval() { train(false); }

    const CalibratorConfig& config() const { return config_; }
    CalibratorNet& net();
    const CalibratorNet& net() const;
    std::vector<torch::Tensor> parameters(ParamGroup group) const;
    std::vector<torch::Tensor> parameters() const;

    Checkpoint checkpoint() const;
    static Calibrator from_checkpoint(const Checkpoint& ckpt);

private:
    void check_input(const torch::Tensor& x) const;

    CalibratorConfig config_;
    CalibratorNet net_{nullptr};
};

} // namespace mac::calib
