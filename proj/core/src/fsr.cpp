#include "mac/fsr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "mac/error.hpp"
#include "mac/rng.hpp"
#include "mac/tensor_io.hpp"

namespace mac::fsr {
namespace F = torch::nn::functional;

namespace {

constexpr int kImageToLatentSteps = 3;  // stride 8

} // namespace

void ReconstructorConfig::validate() const {
    if (image_width <= 0 || image_height <= 0 || image_width % 8 || image_height % 8) {
        throw ConfigError("reconstructor image dimensions must be positive multiples of 8");
    }
    if (codebook_size < 2 || latent_channels < 1 || beta < 0) {
        throw ConfigError("invalid reconstructor vector-quantizer settings");
    }
}

KeyValues ReconstructorConfig::to_kv() const {
    KeyValues kv;
    kv.set("image_width", image_width);
    kv.set("image_height", image_height);
    kv.set("latent_channels", latent_channels);
    kv.set("codebook_size", codebook_size);
    kv.set("beta", beta);
    return kv;
}

ReconstructorConfig ReconstructorConfig::from_kv(const KeyValues& kv) {
    ReconstructorConfig c;
    c.image_width = kv.get_or("image_width", c.image_width);
    c.image_height = kv.get_or("image_height", c.image_height);
    c.latent_channels = kv.get_or("latent_channels", c.latent_channels);
    c.codebook_size = kv.get_or("codebook_size", c.codebook_size);
    c.beta = kv.get_or("beta", c.beta);
    return c;
}

ReconstructorConfig ReconstructorConfig::matching(const calib::CalibratorConfig& calibrator) {
    ReconstructorConfig c;
    c.image_width = calibrator.image_width;
    c.image_height = calibrator.image_height;
    c.latent_channels = calibrator.latent_channels;
    c.codebook_size = calibrator.codebook_size;
    c.beta = calibrator.beta;
    return c;
}

ReconstructorImpl::ReconstructorImpl(const ReconstructorConfig& config) {
    config.validate();
    encoder = register_module("encoder",
                              calib::VqEncoder(3, kImageToLatentSteps, config.latent_channels));
    codebook = register_module("codebook", calib::Codebook(config.codebook_size, config.latent_channels));
    decoder = register_module("decoder", calib::VqDecoder(config.latent_channels));
}

ReconstructorImpl::Output ReconstructorImpl::forward(const torch::Tensor& images) {
    Output out;
    out.z_e = encoder->forward(images);
    out.latent = calib::quantize(out.z_e, codebook, is_training());
    out.image = decoder->forward(out.latent.z_st);
    return out;
}

ReconstructorState train_reconstructor(const torch::Tensor& corpus, const ReconstructorConfig& config,
                                       const ReconstructorSchedule& schedule, std::uint64_t seed,
                                       const ReconstructorLogger& logger) {
    config.validate();
    if (!corpus.defined() || corpus.dim() != 4 || corpus.size(0) == 0) {
        throw InputError("reconstructor corpus must be a non-empty [N, 3, H, W] tensor");
    }
    if (corpus.size(1) != 3 || corpus.size(2) != config.image_height || corpus.size(3) != config.image_width) {
        throw InputError(fmt::format("reconstructor corpus has shape [{}], expected [N, 3, {}, {}]",
                                     fmt::join(corpus.sizes(), ", "), config.image_height, config.image_width));
    }
    if (schedule.steps < 0 || schedule.batch_size < 1 || !(schedule.lr > 0)) {
        throw ConfigError("invalid reconstructor schedule");
    }
    torch::manual_seed(mix_seed(seed, 0));
    ReconstructorState state{config, Reconstructor(config), {}};
    auto& net = state.net;
    net->train();
    torch::optim::Adam optimizer(net->parameters(), torch::optim::AdamOptions(schedule.lr));

    const auto n = corpus.size(0);
    Rng rng(mix_seed(seed, 1));
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();

    for (int step = 0; step < schedule.steps; ++step) {
        std::vector<std::int64_t> batch;
        while (static_cast<int>(batch.size()) < std::min<std::int64_t>(schedule.batch_size, n)) {
            if (cursor == order.size()) {
                for (std::size_t i = order.size(); i > 1; --i) {
                    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i) - 1))]);
                }
                cursor = 0;
            }
            batch.push_back(order[cursor++]);
        }
        const auto images = corpus.index_select(0, torch::tensor(batch, torch::kInt64));
        auto out = net->forward(images);
        auto losses = calib::vq_losses(out.z_e, out.latent.z_q, out.image, images, config.beta);
        if (!std::isfinite(losses.total.item<double>())) {
            throw NumericError(fmt::format("reconstructor diverged at step {}", step));
        }
        optimizer.zero_grad();
        losses.total.backward();
        optimizer.step();

        if (schedule.log_every > 0 && (step % schedule.log_every == 0 || step + 1 == schedule.steps)) {
            ReconstructorRecord r;
            r.step = step;
            r.total = losses.total.item<double>();
            r.reconstruction = losses.reconstruction.item<double>();
            r.l1 = (out.image.detach() - images).abs().mean().item<double>();
            r.codes_used = std::get<0>(at::_unique(out.latent.indices)).numel();
            state.log.push_back(r);
            if (logger) {
                logger(r);
            }
        }
    }
    net->eval();
    return state;
}

torch::Tensor reconstruct(ReconstructorState& state, const torch::Tensor& images) {
    torch::NoGradGuard guard;
    const bool training = state.net->is_training();
    state.net->eval();
    const auto batch = images.dim() == 3 ? images.unsqueeze(0) : images;
    std::vector<torch::Tensor> parts;
    for (std::int64_t start = 0; start < batch.size(0); start += 64) {
        parts.push_back(state.net->forward(batch.slice(0, start, std::min(batch.size(0), start + 64))).image);
    }
    state.net->train(training);
    return torch::cat(parts);
}

double reconstruction_l1(ReconstructorState& state, const torch::Tensor& images) {
    return (reconstruct(state, images) - images).abs().mean().item<double>();
}

std::vector<std::string> transfer_to_calibrator(const ReconstructorState& state, calib::Calibrator& calibrator) {
    auto& target = calibrator.net();
    std::vector<std::pair<std::string, std::pair<torch::Tensor, torch::Tensor>>> pairs;
    const auto collect = [&](const std::string& prefix, const torch::nn::Module& from, const torch::nn::Module& to) {
        const auto src = from.named_parameters();
        const auto dst = to.named_parameters();
        for (const auto& item : dst) {
            const auto* s = src.find(item.key());
            pairs.push_back({prefix + item.key(), {s ? *s : torch::Tensor(), item.value()}});
        }
    };
    collect("codebook.", *state.net->codebook, *target->codebook);
    collect("decoder.", *state.net->decoder, *target->decoder);

    std::vector<std::string> mismatched;
    for (const auto& [name, tensors] : pairs) {
        const auto& [src, dst] = tensors;
        if (!src.defined()) {
            mismatched.push_back(name + " (missing in reconstructor)");
        } else if (src.sizes() != dst.sizes()) {
            mismatched.push_back(fmt::format("{} ([{}] vs [{}])", name, fmt::join(src.sizes(), ","),
                                             fmt::join(dst.sizes(), ",")));
        }
    }
    if (!mismatched.empty()) {
        throw ConfigError(fmt::format("cannot transfer reconstructor weights: {}", fmt::join(mismatched, "; ")));
    }
    torch::NoGradGuard guard;
    std::vector<std::string> copied;
    for (auto& [name, tensors] : pairs) {
        tensors.second.copy_(tensors.first);
        copied.push_back(name);
    }
    return copied;
}

Checkpoint reconstructor_checkpoint(const ReconstructorState& state) {
    Checkpoint ckpt;
    ckpt.kind = "reconstructor";
    ckpt.config = state.config.to_kv();
    append_module_state(ckpt, *state.net);
    return ckpt;
}

ReconstructorState reconstructor_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != "reconstructor") {
        throw LoadError("expected a reconstructor checkpoint, got '" + ckpt.kind + "'");
    }
    ReconstructorState state;
    state.config = ReconstructorConfig::from_kv(ckpt.config);
    state.net = Reconstructor(state.config);
    restore_module_state(*state.net, ckpt);
    state.net->eval();
    return state;
}

StageSchedule StageSchedule::from_fraction(std::int64_t total, double fraction) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw ConfigError(fmt::format("stage-1 fraction {} outside [0, 1]", fraction));
    }
    StageSchedule s{static_cast<std::int64_t>(std::llround(fraction * static_cast<double>(total))), total};
    s.validate();
    return s;
}

void StageSchedule::validate() const {
    if (stage1 < 0 || total < 0 || stage1 > total) {
        throw ConfigError(fmt::format("stage schedule needs 0 <= stage1 ({}) <= total ({})", stage1, total));
    }
}

std::vector<calib::ParamGroup> trainable_set(std::int64_t iteration, const StageSchedule& schedule) {
    using calib::ParamGroup;
    std::vector<ParamGroup> groups{ParamGroup::Adapter, ParamGroup::Encoder, ParamGroup::Codebook, ParamGroup::Decoder};
    if (!schedule.in_stage1(iteration)) {
        groups.push_back(ParamGroup::Source);
    }
    return groups;
}

} // namespace mac::fsr
