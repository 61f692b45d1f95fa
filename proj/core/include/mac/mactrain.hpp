#pragma once

// Target-model training T = {C | S}: decayed semantic supervision, skipped
// inverted attention, pseudo ground truth and the naive baseline.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mac/calibrator.hpp"
#include "mac/detector.hpp"
#include "mac/fsr.hpp"
#include "mac/inversion.hpp"
#include "mac/sia.hpp"
#include "mac/synthdata.hpp"

namespace mac::train {

/// lambda_DSS(t) = decay^t.
double dss_lambda(std::int64_t t, double decay = 0.9999);

struct DssTerms {
    torch::Tensor ssim_term;  // 1 - ssim(J, J_T)
    torch::Tensor l1;  // mean |J - J_T|
    torch::Tensor image;  // ssim_term + l1
};

DssTerms dss_image_terms(const torch::Tensor& j, const torch::Tensor& j_target, double dynamic_range = 1.0);

struct DssLoss {
    torch::Tensor total;  // lambda * image + source.total
    DssTerms terms;
    det::SourceLoss source;
    double lambda = 1.0;
};

/// lambda_DSS(t) * ((1 - ssim(J, J_T)) + mean |J - J_T|) + L_S(S(J), Y).
DssLoss dss_loss(det::SourceDetector& detector, const torch::Tensor& j, const torch::Tensor& j_target,
                 const det::HeadTargets& targets, std::int64_t t, double decay = 0.9999);

/// Detections of S on the paired source images, keeping scores strictly above
/// `threshold`.
std::vector<Annotations> pseudo_ground_truth(det::SourceDetector& detector, const torch::Tensor& source_images,
                                             float threshold);

enum class Supervision { Naive, Supervised, Self, Semi };

struct TrainMode {
    Supervision kind = Supervision::Supervised;
    double semi_fraction = 0.1;

    /// "naive", "mac-supervised", "mac-self", "mac-semi" or "mac-semi(f)".
    static TrainMode parse(const std::string& text);
    std::string str() const;
    void validate() const;
    bool operator==(const TrainMode&) const = default;
};

struct Techniques {
    bool fsr = false;  // calibrator codebook + decoder from the reconstructor
    bool dss = false;
    bool sia = false;
    bool two_stage = false;  // S initialised from the source checkpoint, frozen during stage 1
    bool freeze_codebook = false;

    static Techniques all() { return {true, true, true, true, false}; }
    std::string str() const;
    bool operator==(const Techniques&) const = default;
};

enum class LabelSource { Manual, Pseudo };
const char* to_string(LabelSource source);

/// Training-set annotations behind an access counter: every distinct sample
/// whose manual labels are read is recorded.
class AnnotationStore {
public:
    explicit AnnotationStore(const synth::Dataset& dataset) : dataset_(&dataset) {}

    const Annotations& manual(std::size_t index);
    std::size_t distinct_reads() const { return reads_.size(); }
    const std::set<std::size_t>& read_indices() const { return reads_; }

private:
    const synth::Dataset* dataset_;
    std::set<std::size_t> reads_;
};

/// Which label source each training sample uses under `mode`. Semi picks
/// round(f * N) manual samples by a seeded permutation.
std::vector<LabelSource> label_plan(const TrainMode& mode, std::size_t count, std::uint64_t seed);

/// J_T per (sample id, label source), produced by inverting the source model.
class SemanticsCache {
public:
    void insert(std::int64_t id, LabelSource source, torch::Tensor image);
    bool contains(std::int64_t id, LabelSource source) const;
    /// Throws StateError naming the sample when absent.
    const torch::Tensor& at(std::int64_t id, LabelSource source) const;
    std::size_t size() const { return items_.size(); }

private:
    std::map<std::pair<std::int64_t, int>, torch::Tensor> items_;
};

struct TargetSemanticsOptions {
    inv::InversionConfig inversion;  // seed is the base; sample id is mixed in
    int chunk = 32;
    std::optional<std::filesystem::path> cache_dir;  // reused when the detector checksum matches
};

/// Inverts S against `labels[i]` for each listed sample and stores the result
/// under (dataset id, source).
void add_target_semantics(SemanticsCache& cache, det::SourceDetector& source, const synth::Dataset& dataset,
                          const std::vector<std::size_t>& indices, const std::vector<Annotations>& labels,
                          LabelSource label_source, const TargetSemanticsOptions& options);

struct TargetSchedule {
    int iterations = 600;
    int batch_size = 16;
    double lr = 1e-4;
    double stage1_fraction = 0.3;
    double decay = 0.9999;
    double ssim_range = 1.0;
    float pseudo_threshold = 0.5f;
    int log_every = 10;
    sia::SiaConfig sia;
};

struct TargetRecord {
    int iteration = 0;
    bool stage1 = false;
    double total = 0;
    double source = 0;
    double bbox = 0;
    double cls = 0;
    double vq = 0;
    double dss_ssim = 0;
    double dss_l1 = 0;
    double lambda = 0;
    double sia = 0;
    double grad_j = 0;  // mean |dL/dJ|
    std::uint64_t source_checksum = 0;
};

using TargetLogger = std::function<void(const TargetRecord&)>;

/// Prerequisite artifacts. `source` is required for mac modes with pseudo labels
/// or two-stage; `reconstructor` when FSR is on; `semantics` when DSS is on.
struct TargetInputs {
    const synth::Dataset* train = nullptr;
    det::SourceDetector* source = nullptr;
    const fsr::ReconstructorState* reconstructor = nullptr;
    const SemanticsCache* semantics = nullptr;
};

struct TargetModel {
    calib::Calibrator calibrator;
    det::SourceDetector detector{nullptr};

    /// J = C(X), then S(J). Eval mode.
    std::vector<Detections> infer(const torch::Tensor& x, float score_threshold);
};

struct TargetRun {
    TargetModel model;
    std::vector<TargetRecord> log;
    std::size_t manual_reads = 0;
    std::vector<LabelSource> plan;
    std::vector<std::string> transferred;  // tensor names copied by FSR
};

struct TargetSpec {
    TrainMode mode;
    Techniques techniques;
    TargetSchedule schedule;
    std::uint64_t seed = 0;
    calib::CalibratorConfig calibrator;
    det::DetectorConfig detector;

    /// Naive mode ignores technique flags.
    Techniques effective_techniques() const;
};

/// Labels used for training under `plan`. Manual entries go through `store`.
std::vector<Annotations> training_labels(const std::vector<LabelSource>& plan, AnnotationStore& store,
                                         const std::vector<Annotations>& pseudo);

/// Adam over C (and S as the stage allows). Throws StateError naming the
/// missing stage when a prerequisite artifact is absent.
TargetRun train_target(const TargetSpec& spec, const TargetInputs& inputs, const TargetLogger& logger = {});

/// Loss and mean |dL/dJ| of the first iteration without updating anything.
TargetRecord probe_first_iteration(const TargetSpec& spec, const TargetInputs& inputs);

Checkpoint target_checkpoint(const TargetModel& model, const TargetSpec& spec);
TargetModel target_from_checkpoint(const Checkpoint& ckpt);

struct TargetEvaluation {
    double ap50 = 0;
    double ap50_95 = 0;
    std::size_t images = 0;
};

/// AP of C|S on the dataset's target tensors against its annotations.
TargetEvaluation evaluate_target(TargetModel& model, const synth::Dataset& test, float score_threshold = 0.05f);

} // namespace mac::train
