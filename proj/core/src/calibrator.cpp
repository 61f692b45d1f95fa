#include "mac/calibrator.hpp"

#include <cmath>
#include <limits>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "mac/error.hpp"

namespace mac::calib {
namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

nn::Conv2d conv(int in, int out, int kernel, int stride = 1) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2));
}

int log2_exact(std::int64_t ratio) {
    int steps = 0;
    while (ratio > 1 && ratio % 2 == 0) {
        ratio /= 2;
        ++steps;
    }
    return ratio == 1 ? steps : -1;
}

} // namespace

CodebookImpl::CodebookImpl(int size, int channels) {
    if (size < 2) {
        throw ConfigError(fmt::format("codebook needs at least 2 entries, got {}", size));
    }
    if (channels < 1) {
        throw ConfigError("codebook dimension must be positive");
    }
    embeddings = register_parameter("embeddings",
                                    torch::empty({size, channels}).uniform_(-1.0 / size, 1.0 / size));
    usage = register_buffer("usage", torch::zeros({size}, torch::kInt64));
}

std::vector<std::int64_t> nearest_codes(const torch::Tensor& rows, const torch::Tensor& embeddings) {
    if (embeddings.dim() != 2 || embeddings.size(0) == 0) {
        throw ConfigError("empty codebook");
    }
    if (rows.dim() != 2 || rows.size(1) != embeddings.size(1)) {
        throw InputError(fmt::format("latent dimension {} does not match codebook dimension {}",
                                     rows.dim() == 2 ? rows.size(1) : -1, embeddings.size(1)));
    }
    const auto z = rows.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    const auto e = embeddings.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    const auto n = z.size(0);
    const auto p = e.size(0);
    const auto c = e.size(1);
    const float* zp = z.data_ptr<float>();
    const float* ep = e.data_ptr<float>();
    std::vector<std::int64_t> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const float* zi = zp + i * c;
        double best = std::numeric_limits<double>::infinity();
        std::int64_t best_k = 0;
        for (std::int64_t k = 0; k < p; ++k) {
            const float* ek = ep + k * c;
            double d = 0;
            for (std::int64_t j = 0; j < c; ++j) {
                const double diff = static_cast<double>(zi[j]) - static_cast<double>(ek[j]);
                d += diff * diff;
            }
            if (d < best) {  // strict: first minimum wins
                best = d;
                best_k = k;
            }
        }
        out[static_cast<std::size_t>(i)] = best_k;
    }
    return out;
}

Quantized quantize(const torch::Tensor& z_e, Codebook& codebook, bool count_usage) {
    if (z_e.dim() != 4) {
        throw InputError("z_e must be [B, C, h, w]");
    }
    const auto b = z_e.size(0);
    const auto c = z_e.size(1);
    const auto h = z_e.size(2);
    const auto w = z_e.size(3);
    const auto rows = z_e.permute({0, 2, 3, 1}).reshape({-1, c});
    const auto idx = nearest_codes(rows, codebook->embeddings);
    auto indices = torch::tensor(idx, torch::kInt64);
    if (count_usage) {
        torch::NoGradGuard guard;
        codebook->usage.index_add_(0, indices, torch::ones_like(indices));
    }
    Quantized q;
    q.z_q = codebook->embeddings.index_select(0, indices)
                .view({b, h, w, c})
                .permute({0, 3, 1, 2})
                .to(z_e.scalar_type())
                .contiguous();
    q.indices = indices.view({b, h, w});
    q.z_st = z_e + (q.z_q - z_e).detach();
    return q;
}

VqLosses vq_losses(const torch::Tensor& z_e, const torch::Tensor& z_q, const torch::Tensor& reconstruction,
                   const torch::Tensor& target, double beta) {
    if (z_e.sizes() != z_q.sizes()) {
        throw InputError("z_e and z_q shapes differ");
    }
    VqLosses l;
    if (reconstruction.defined() != target.defined()) {
        throw InputError("reconstruction and target must both be given or both omitted");
    }
    if (reconstruction.defined()) {
        if (reconstruction.sizes() != target.sizes()) {
            throw InputError("reconstruction and target shapes differ");
        }
        l.reconstruction = F::mse_loss(reconstruction, target.detach());
    } else {
        l.reconstruction = torch::zeros({}, z_e.options());
    }
    l.codebook = F::mse_loss(z_q, z_e.detach());
    l.commitment = F::mse_loss(z_e, z_q.detach());
    l.total = l.reconstruction + l.codebook + beta * l.commitment;
    return l;
}

VqEncoderImpl::VqEncoderImpl(int in_channels, int downsample_steps, int latent_channels) {
    if (downsample_steps < 0) {
        throw ConfigError("encoder input must be a power-of-two multiple of the latent grid");
    }
    body_ = nn::Sequential();
    static constexpr int kWidths[] = {16, 32, 48};
    int channels = in_channels;
    for (int s = 0; s < downsample_steps; ++s) {
        const int remaining = downsample_steps - s;  // 1 for the last stride-2 conv
        const int width = remaining > 3 ? kWidths[0] : kWidths[3 - remaining];
        body_->push_back(conv(channels, width, 3, 2));
        body_->push_back(nn::ReLU());
        channels = width;
    }
    body_->push_back(conv(channels, 48, 3));
    body_->push_back(nn::ReLU());
    body_->push_back(conv(48, latent_channels, 1));
    register_module("body", body_);
}

torch::Tensor VqEncoderImpl::forward(const torch::Tensor& x) {
    return body_->forward(x);
}

VqDecoderImpl::VqDecoderImpl(int latent_channels) {
    const auto up = [] {
        return nn::Upsample(nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
    };
    body_ = register_module(
        "body", nn::Sequential(conv(latent_channels, 48, 3), nn::ReLU(), conv(48, 48, 3), nn::ReLU(), up(),
                               conv(48, 24, 3), nn::ReLU(), up(), conv(24, 12, 3), nn::ReLU(), conv(12, 12, 3),
                               nn::PixelShuffle(nn::PixelShuffleOptions(2))));
}

torch::Tensor VqDecoderImpl::forward(const torch::Tensor& z) {
    return body_->forward(z);
}

// ---------------------------------------------------------------------------

void CalibratorConfig::validate() const {
    if (image_width <= 0 || image_height <= 0 || image_width % 8 || image_height % 8) {
        throw ConfigError("image dimensions must be positive multiples of 8");
    }
    if (codebook_size < 2 || latent_channels < 1 || beta < 0) {
        throw ConfigError("invalid vector-quantizer settings");
    }
    if (input_shape.size() != 3) {
        throw ConfigError("calibrator input shape must be [C, H, W]");
    }
    if (flat_input()) {
        if (adapter_grid < 1 || log2_exact(adapter_grid / latent_width()) < 0 || adapter_grid % latent_width() ||
            adapter_grid / latent_width() != adapter_grid / latent_height()) {
            throw ConfigError("adapter grid must be a power-of-two multiple of the latent grid");
        }
    } else {
        if (input_shape[1] % latent_height() || input_shape[2] % latent_width() ||
            log2_exact(input_shape[1] / latent_height()) < 0 ||
            input_shape[1] / latent_height() != input_shape[2] / latent_width()) {
            throw ConfigError(fmt::format("target input [{}] is not a power-of-two multiple of the {}x{} latent grid",
                                          fmt::join(input_shape, ", "), latent_height(), latent_width()));
        }
    }
}

KeyValues CalibratorConfig::to_kv() const {
    KeyValues kv;
    kv.set("sensor_mode", synth::to_string(sensor_mode));
    kv.set("input_channels", static_cast<long long>(input_shape.at(0)));
    kv.set("input_height", static_cast<long long>(input_shape.at(1)));
    kv.set("input_width", static_cast<long long>(input_shape.at(2)));
    kv.set("image_width", image_width);
    kv.set("image_height", image_height);
    kv.set("latent_channels", latent_channels);
    kv.set("codebook_size", codebook_size);
    kv.set("beta", beta);
    kv.set("adapter_channels", adapter_channels);
    kv.set("adapter_grid", adapter_grid);
    return kv;
}

CalibratorConfig CalibratorConfig::from_kv(const KeyValues& kv) {
    CalibratorConfig c;
    if (kv.contains("sensor_mode")) {
        c.sensor_mode = synth::sensor_mode_from_string(kv.raw("sensor_mode"));
    }
    c.input_shape = {kv.get_or<long long>("input_channels", c.input_shape[0]),
                     kv.get_or<long long>("input_height", c.input_shape[1]),
                     kv.get_or<long long>("input_width", c.input_shape[2])};
    c.image_width = kv.get_or("image_width", c.image_width);
    c.image_height = kv.get_or("image_height", c.image_height);
    c.latent_channels = kv.get_or("latent_channels", c.latent_channels);
    c.codebook_size = kv.get_or("codebook_size", c.codebook_size);
    c.beta = kv.get_or("beta", c.beta);
    c.adapter_channels = kv.get_or("adapter_channels", c.adapter_channels);
    c.adapter_grid = kv.get_or("adapter_grid", c.adapter_grid);
    return c;
}

CalibratorConfig CalibratorConfig::for_sensor(const synth::SensorConfig& sensor, int image_width, int image_height) {
    CalibratorConfig c;
    c.sensor_mode = sensor.mode;
    c.input_shape = sensor.output_shape(image_width, image_height);
    c.image_width = image_width;
    c.image_height = image_height;
    if (c.flat_input()) {
        c.adapter_channels = 4;
    }
    return c;
}

ModalityAdapterImpl::ModalityAdapterImpl(const CalibratorConfig& config) : flat_(config.flat_input()) {
    if (flat_) {
        out_channels_ = config.adapter_channels;
        out_size_ = config.adapter_grid;
        const auto in_dim = config.input_shape[0] * config.input_shape[1] * config.input_shape[2];
        linear_ = register_module("linear", nn::Linear(in_dim, static_cast<std::int64_t>(out_channels_) * out_size_ * out_size_));
    } else {
        out_channels_ = config.adapter_channels;
        out_size_ = static_cast<int>(config.input_shape[1]);
        conv_ = register_module("conv", conv(static_cast<int>(config.input_shape[0]), out_channels_, 3));
    }
}

torch::Tensor ModalityAdapterImpl::forward(const torch::Tensor& x) {
    if (flat_) {
        return torch::relu(linear_->forward(x.flatten(1))).view({x.size(0), out_channels_, out_size_, out_size_});
    }
    return torch::relu(conv_->forward(x));
}

const char* to_string(ParamGroup group) {
    switch (group) {
    case ParamGroup::Adapter:
        return "adapter";
    case ParamGroup::Encoder:
        return "encoder";
    case ParamGroup::Codebook:
        return "codebook";
    case ParamGroup::Decoder:
        return "decoder";
    case ParamGroup::Source:
        return "source";
    }
    return "?";
}

CalibratorNetImpl::CalibratorNetImpl(const CalibratorConfig& config) {
    config.validate();
    adapter = register_module("adapter", ModalityAdapter(config));
    const int steps = log2_exact(adapter->out_size() / config.latent_height());
    encoder = register_module("encoder", VqEncoder(adapter->out_channels(), steps, config.latent_channels));
    codebook = register_module("codebook", Codebook(config.codebook_size, config.latent_channels));
    decoder = register_module("decoder", VqDecoder(config.latent_channels));
}

Calibrator::Calibrator(CalibratorConfig config) : config_(std::move(config)) {
    config_.validate();
}

void Calibrator::initialize(std::uint64_t seed) {
    torch::manual_seed(seed);
    net_ = CalibratorNet(config_);
}

CalibratorNet& Calibrator::net() {
    if (!net_) {
        throw StateError("calibrator parameters are not initialized");
    }
    return net_;
}

const CalibratorNet& Calibrator::net() const {
    if (!net_) {
        throw StateError("calibrator parameters are not initialized");
    }
    return net_;
}

void Calibrator::check_input(const torch::Tensor& x) const {
    if (x.dim() != 4 || x.size(1) != config_.input_shape[0] || x.size(2) != config_.input_shape[1] ||
        x.size(3) != config_.input_shape[2]) {
        throw InputError(fmt::format("calibrator expects [B, {}] input, got [{}]", fmt::join(config_.input_shape, ", "),
                                     fmt::join(x.sizes(), ", ")));
    }
}

torch::Tensor Calibrator::adapt_modality(const torch::Tensor& x) {
    auto& n = net();
    const auto batch = x.dim() == 3 ? x.unsqueeze(0) : x;
    check_input(batch);
    return n->adapter->forward(batch);
}

CalibratorOutput Calibrator::calibrate(const torch::Tensor& x) {
    auto& n = net();
    const auto batch = x.dim() == 3 ? x.unsqueeze(0) : x;
    check_input(batch);
    CalibratorOutput out;
    out.z_e = n->encoder->forward(n->adapter->forward(batch));
    out.latent = quantize(out.z_e, n->codebook, n->is_training());
    out.image = n->decoder->forward(out.latent.z_st);
    return out;
}

void Calibrator::train(bool on) {
    net()->train(on);
}

std::vector<torch::Tensor> Calibrator::parameters(ParamGroup group) const {
    const auto& n = net();
    switch (group) {
    case ParamGroup::Adapter:
        return n->adapter->parameters();
    case ParamGroup::Encoder:
        return n->encoder->parameters();
    case ParamGroup::Codebook:
        return n->codebook->parameters();
    case ParamGroup::Decoder:
        return n->decoder->parameters();
    case ParamGroup::Source:
        break;
    }
    return {};
}

std::vector<torch::Tensor> Calibrator::parameters() const {
    return net()->parameters();
}

Checkpoint Calibrator::checkpoint() const {
    Checkpoint ckpt;
    ckpt.kind = "calibrator";
    ckpt.config = config_.to_kv();
    append_module_state(ckpt, *net());
    return ckpt;
}

Calibrator Calibrator::from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != "calibrator") {
        throw LoadError("expected a calibrator checkpoint, got '" + ckpt.kind + "'");
    }
    Calibrator c(CalibratorConfig::from_kv(ckpt.config));
    c.initialize(0);
    restore_module_state(*c.net_, ckpt);
    c.eval();
    return c;
}

} // namespace mac::calib
