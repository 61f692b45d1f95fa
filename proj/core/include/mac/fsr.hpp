#pragma once

// Foreground semantics reconstruction: an auxiliary VQ-VAE R(.) = {E_S, D_S}
// trained on inverted foreground semantics, whose codebook and decoder seed
// the calibrator, plus the two-stage trainable-set schedule.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mac/calibrator.hpp"
#include "mac/checkpoint.hpp"

namespace mac::fsr {

struct ReconstructorConfig {
    int image_width = 128;
    int image_height = 128;
    int latent_channels = 16;
    int codebook_size = 64;
    double beta = 0.25;

    void validate() const;
    KeyValues to_kv() const;
    static ReconstructorConfig from_kv(const KeyValues& kv);
    /// Latent and codebook shapes matching `calibrator`, so transfer is possible.
    static ReconstructorConfig matching(const calib::CalibratorConfig& calibrator);
};

/// Same encoder, codebook and decoder architecture as the calibrator, with an
/// image stem consuming 3-channel J_S.
class ReconstructorImpl : public torch::nn::Module {
public:
    explicit ReconstructorImpl(const ReconstructorConfig& config);

    struct Output {
        torch::Tensor image;
        torch::Tensor z_e;
        calib::Quantized latent;
    };
    Output forward(const torch::Tensor& images);

    calib::VqEncoder encoder{nullptr};
    calib::Codebook codebook{nullptr};
    calib::VqDecoder decoder{nullptr};
};
TORCH_MODULE(Reconstructor);

struct ReconstructorSchedule {
    int steps = 2000;
    int batch_size = 16;
    double lr = 1e-3;
    int log_every = 100;
};

struct ReconstructorRecord {
    int step = 0;
    double total = 0;
    double reconstruction = 0;
    double l1 = 0;
    std::int64_t codes_used = 0;
};

struct ReconstructorState {
    ReconstructorConfig config;
    Reconstructor net{nullptr};
    std::vector<ReconstructorRecord> log;
};

using ReconstructorLogger = std::function<void(const ReconstructorRecord&)>;

/// Adam on the VQ objective over a corpus [N, 3, H, W]. Deterministic per seed.
ReconstructorState train_reconstructor(const torch::Tensor& corpus, const ReconstructorConfig& config,
                                       const ReconstructorSchedule& schedule, std::uint64_t seed,
                                       const ReconstructorLogger& logger = {});

/// Eval-mode reconstruction of [N, 3, H, W].
torch::Tensor reconstruct(ReconstructorState& state, const torch::Tensor& images);

/// Mean per-pixel L1 between `images` and their reconstructions.
double reconstruction_l1(ReconstructorState& state, const torch::Tensor& images);

/// Copies R's codebook and decoder into the calibrator. Adapter and encoder are
/// untouched. Returns the copied tensor names. Throws ConfigError listing every
/// mismatched tensor.
std::vector<std::string> transfer_to_calibrator(const ReconstructorState& state, calib::Calibrator& calibrator);

Checkpoint reconstructor_checkpoint(const ReconstructorState& state);
ReconstructorState reconstructor_from_checkpoint(const Checkpoint& ckpt);

struct StageSchedule {
    std::int64_t stage1 = 0;
    std::int64_t total = 0;

    static StageSchedule from_fraction(std::int64_t total, double fraction);
    void validate() const;
    bool in_stage1(std::int64_t iteration) const { return iteration < stage1; }
};

/// Stage 1 ([0, stage1)): calibrator groups only. Stage 2: calibrator and source.
std::vector<calib::ParamGroup> trainable_set(std::int64_t iteration, const StageSchedule& schedule);

} // namespace mac::fsr
