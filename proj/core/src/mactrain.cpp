#include "mac/mactrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "mac/error.hpp"
#include "mac/metrics.hpp"
#include "mac/rng.hpp"
#include "mac/ssim.hpp"
#include "mac/tensor_io.hpp"

namespace mac::train {

double dss_lambda(std::int64_t t, double decay) {
    if (t < 0) {
        throw InputError("DSS iteration must be >= 0");
    }
    if (!(decay > 0.0 && decay <= 1.0)) {
        throw ConfigError(fmt::format("DSS decay {} outside (0, 1]", decay));
    }
    return std::pow(decay, static_cast<double>(t));
}

DssTerms dss_image_terms(const torch::Tensor& j, const torch::Tensor& j_target, double dynamic_range) {
    DssTerms d;
    d.ssim_term = 1.0 - ssim(j, j_target, dynamic_range);
    d.l1 = (j - j_target).abs().mean();
    d.image = d.ssim_term + d.l1;
    return d;
}

DssLoss dss_loss(det::SourceDetector& detector, const torch::Tensor& j, const torch::Tensor& j_target,
                 const det::HeadTargets& targets, std::int64_t t, double decay) {
    DssLoss out;
    out.lambda = dss_lambda(t, decay);
    out.terms = dss_image_terms(j, j_target);
    const auto batch = j.dim() == 3 ? j.unsqueeze(0) : j;
    out.source = det::source_loss(detector->forward(batch), targets, detector->config());
    out.total = out.lambda * out.terms.image + out.source.total;
    return out;
}

std::vector<Annotations> pseudo_ground_truth(det::SourceDetector& detector, const torch::Tensor& source_images,
                                             float threshold) {
    const auto dets = det::infer(detector, source_images, std::min(threshold, 1.0f));
    std::vector<Annotations> out;
    out.reserve(dets.size());
    for (const auto& image : dets) {
        Annotations labels;
        for (const auto& d : image) {
            if (d.score > threshold) {
                labels.push_back({d.class_id, d.box});
            }
        }
        out.push_back(std::move(labels));
    }
    return out;
}

// ---------------------------------------------------------------------------

TrainMode TrainMode::parse(const std::string& text) {
    TrainMode m;
    if (text == "naive") {
        m.kind = Supervision::Naive;
    } else if (text == "mac-supervised") {
        m.kind = Supervision::Supervised;
    } else if (text == "mac-self") {
        m.kind = Supervision::Self;
    } else if (text.rfind("mac-semi", 0) == 0) {
        m.kind = Supervision::Semi;
        const auto rest = text.substr(8);
        if (!rest.empty()) {
            if (rest.size() < 3 || rest.front() != '(' || rest.back() != ')') {
                throw ConfigError("semi-supervised mode must read mac-semi(<fraction>), got '" + text + "'");
            }
            try {
                std::size_t used = 0;
                const auto body = rest.substr(1, rest.size() - 2);
                m.semi_fraction = std::stod(body, &used);
                if (used != body.size()) {
                    throw std::invalid_argument(body);
                }
            } catch (const std::exception&) {
                throw ConfigError("bad semi-supervised fraction in '" + text + "'");
            }
        }
    } else {
        throw ConfigError("unknown training mode '" + text + "' (naive, mac-supervised, mac-self, mac-semi(f))");
    }
    m.validate();
    return m;
}

std::string TrainMode::str() const {
    switch (kind) {
    case Supervision::Naive:
        return "naive";
    case Supervision::Supervised:
        return "mac-supervised";
    case Supervision::Self:
        return "mac-self";
    case Supervision::Semi:
        return fmt::format("mac-semi({})", semi_fraction);
    }
    return "?";
}

void TrainMode::validate() const {
    if (kind == Supervision::Semi && !(semi_fraction > 0.0 && semi_fraction < 1.0)) {
        throw ConfigError(fmt::format("semi-supervised fraction {} outside (0, 1)", semi_fraction));
    }
}

std::string Techniques::str() const {
    std::string s;
    const auto add = [&](bool on, const char* name) {
        if (on) {
            s += s.empty() ? "" : "+";
            s += name;
        }
    };
    add(fsr, "fsr");
    add(two_stage, "two-stage");
    add(dss, "dss");
    add(sia, "sia");
    add(freeze_codebook, "frozen-codebook");
    return s.empty() ? "none" : s;
}

const char* to_string(LabelSource source) {
    return source == LabelSource::Manual ? "manual" : "pseudo";
}

const Annotations& AnnotationStore::manual(std::size_t index) {
    if (index >= dataset_->samples.size()) {
        throw InputError(fmt::format("annotation index {} out of range", index));
    }
    reads_.insert(index);
    return dataset_->samples[index].annotations;
}

std::vector<LabelSource> label_plan(const TrainMode& mode, std::size_t count, std::uint64_t seed) {
    mode.validate();
    switch (mode.kind) {
    case Supervision::Naive:
    case Supervision::Supervised:
        return std::vector<LabelSource>(count, LabelSource::Manual);
    case Supervision::Self:
        return std::vector<LabelSource>(count, LabelSource::Pseudo);
    case Supervision::Semi:
        break;
    }
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    for (std::size_t i = count; i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i) - 1))]);
    }
    const auto manual = static_cast<std::size_t>(std::llround(mode.semi_fraction * static_cast<double>(count)));
    std::vector<LabelSource> plan(count, LabelSource::Pseudo);
    for (std::size_t i = 0; i < manual; ++i) {
        plan[order[i]] = LabelSource::Manual;
    }
    return plan;
}

std::vector<Annotations> training_labels(const std::vector<LabelSource>& plan, AnnotationStore& store,
                                         const std::vector<Annotations>& pseudo) {
    std::vector<Annotations> labels(plan.size());
    for (std::size_t i = 0; i < plan.size(); ++i) {
        if (plan[i] == LabelSource::Manual) {
            labels[i] = store.manual(i);
        } else {
            if (i >= pseudo.size()) {
                throw StateError(fmt::format("no pseudo labels for training sample {}", i));
            }
            labels[i] = pseudo[i];
        }
    }
    return labels;
}

void SemanticsCache::insert(std::int64_t id, LabelSource source, torch::Tensor image) {
    items_[{id, static_cast<int>(source)}] = std::move(image);
}

bool SemanticsCache::contains(std::int64_t id, LabelSource source) const {
    return items_.count({id, static_cast<int>(source)}) > 0;
}

const torch::Tensor& SemanticsCache::at(std::int64_t id, LabelSource source) const {
    const auto it = items_.find({id, static_cast<int>(source)});
    if (it == items_.end()) {
        throw StateError(fmt::format("missing J_T cache entry for sample {} ({} labels)", id, to_string(source)));
    }
    return it->second;
}

void add_target_semantics(SemanticsCache& cache, det::SourceDetector& source, const synth::Dataset& dataset,
                          const std::vector<std::size_t>& indices, const std::vector<Annotations>& labels,
                          LabelSource label_source, const TargetSemanticsOptions& options) {
    const auto checksum = parameter_checksum(*source);
    const auto name_of = [&](std::int64_t id) { return fmt::format("jt_{}_{:06d}", to_string(label_source), id); };
    std::vector<std::size_t> pending;
    for (const auto i : indices) {
        const auto id = dataset.samples.at(i).id;
        if (options.cache_dir) {
            if (auto hit = inv::read_semantics(*options.cache_dir, name_of(id), checksum)) {
                cache.insert(id, label_source, hit->image);
                continue;
            }
        }
        pending.push_back(i);
    }
    const auto chunk = static_cast<std::size_t>(std::max(1, options.chunk));
    for (std::size_t start = 0; start < pending.size(); start += chunk) {
        std::vector<Annotations> layouts;
        std::vector<std::uint64_t> seeds;
        const auto end = std::min(pending.size(), start + chunk);
        for (std::size_t k = start; k < end; ++k) {
            const auto i = pending[k];
            layouts.push_back(labels.at(i));
            seeds.push_back(mix_seed(options.inversion.seed, static_cast<std::uint64_t>(dataset.samples[i].id)));
        }
        auto items = inv::invert_batch(source, layouts, seeds, options.inversion);
        for (std::size_t k = start; k < end; ++k) {
            const auto id = dataset.samples[pending[k]].id;
            auto& item = items[k - start];
            if (options.cache_dir) {
                inv::write_semantics(*options.cache_dir, name_of(id), item, checksum);
            }
            cache.insert(id, label_source, item.image);
        }
    }
}

// ---------------------------------------------------------------------------

Techniques TargetSpec::effective_techniques() const {
    return mode.kind == Supervision::Naive ? Techniques{} : techniques;
}

std::vector<Detections> TargetModel::infer(const torch::Tensor& x, float score_threshold) {
    torch::NoGradGuard guard;
    calibrator.eval();
    detector->eval();
    const auto batch = x.dim() == 3 ? x.unsqueeze(0) : x;
    std::vector<Detections> out;
    for (std::int64_t start = 0; start < batch.size(0); start += 64) {
        const auto j = calibrator.calibrate(batch.slice(0, start, std::min(batch.size(0), start + 64))).image;
        auto dets = det::infer(detector, j, score_threshold);
        std::move(dets.begin(), dets.end(), std::back_inserter(out));
    }
    return out;
}

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) {
        throw StateError("missing prerequisite: " + what);
    }
}

det::SourceDetector clone_detector(const det::SourceDetector& detector) {
    auto copy = det::detector_from_checkpoint(det::detector_checkpoint(detector));
    copy->train();
    return copy;
}

/// Shared state of one target-training run; `step` performs a single iteration.
class TargetTrainer {
public:
    TargetTrainer(const TargetSpec& spec, const TargetInputs& inputs)
        : spec_(spec), tech_(spec.effective_techniques()), model_{calib::Calibrator(spec.calibrator), nullptr} {
        spec_.mode.validate();
        spec_.schedule.sia.validate();
        const auto& sched = spec_.schedule;
        if (sched.iterations < 0 || sched.batch_size < 1 || !(sched.lr > 0)) {
            throw ConfigError("invalid target schedule");
        }
        require(inputs.train != nullptr && inputs.train->size() > 0, "training dataset (gen-data)");
        train_ = inputs.train;
        const bool pseudo = spec_.mode.kind == Supervision::Self || spec_.mode.kind == Supervision::Semi;
        require(inputs.source != nullptr || !(pseudo || tech_.two_stage), "source checkpoint (train-source)");
        require(inputs.reconstructor != nullptr || !tech_.fsr, "FSR reconstructor checkpoint (pretrain-fsr)");
        require(inputs.semantics != nullptr || !tech_.dss, "J_T inversion cache (invert)");
        semantics_ = inputs.semantics;

        if (spec_.detector.width != spec_.calibrator.image_width ||
            spec_.detector.height != spec_.calibrator.image_height || spec_.detector.in_channels != 3) {
            throw ConfigError("detector input must match the calibrator's [3, H, W] output");
        }

        model_.calibrator.initialize(mix_seed(spec_.seed, 1));
        if (tech_.fsr) {
            transferred_ = fsr::transfer_to_calibrator(*inputs.reconstructor, model_.calibrator);
        }
        model_.detector = tech_.two_stage ? clone_detector(*inputs.source)
                                          : det::make_detector(spec_.detector, mix_seed(spec_.seed, 2));
        if (tech_.two_stage && !(model_.detector->config() == spec_.detector)) {
            spec_.detector = model_.detector->config();
        }

        plan_ = label_plan(spec_.mode, train_->size(), mix_seed(spec_.seed, 3));
        std::vector<Annotations> pseudo_labels;
        if (std::find(plan_.begin(), plan_.end(), LabelSource::Pseudo) != plan_.end()) {
            pseudo_labels = pseudo_ground_truth(*inputs.source, train_->sources(), sched.pseudo_threshold);
        }
        AnnotationStore store(*train_);
        labels_ = training_labels(plan_, store, pseudo_labels);
        manual_reads_ = store.distinct_reads();

        stages_ = tech_.two_stage ? fsr::StageSchedule::from_fraction(sched.iterations, sched.stage1_fraction)
                                  : fsr::StageSchedule{0, sched.iterations};

        std::vector<torch::Tensor> c_params;
        for (const auto group : {calib::ParamGroup::Adapter, calib::ParamGroup::Encoder, calib::ParamGroup::Codebook,
                                 calib::ParamGroup::Decoder}) {
            if (group == calib::ParamGroup::Codebook && tech_.freeze_codebook) {
                for (auto& p : model_.calibrator.parameters(group)) {
                    p.set_requires_grad(false);
                }
                continue;
            }
            auto ps = model_.calibrator.parameters(group);
            c_params.insert(c_params.end(), ps.begin(), ps.end());
        }
        opt_c_ = std::make_unique<torch::optim::Adam>(c_params, torch::optim::AdamOptions(sched.lr));
        opt_s_ = std::make_unique<torch::optim::Adam>(model_.detector->parameters(), torch::optim::AdamOptions(sched.lr));

        order_.resize(train_->size());
        std::iota(order_.begin(), order_.end(), 0);
        cursor_ = order_.size();
        rng_ = Rng(mix_seed(spec_.seed, 4));
    }

    TargetRecord step(int t, bool apply) {
        const auto& sched = spec_.schedule;
        const bool stage1 = stages_.in_stage1(t);
        const auto groups = fsr::trainable_set(t, stages_);
        const bool source_trainable = std::find(groups.begin(), groups.end(), calib::ParamGroup::Source) != groups.end();
        for (auto& p : model_.detector->parameters()) {
            p.set_requires_grad(source_trainable);
        }

        const auto batch = next_batch();
        std::vector<Annotations> batch_labels;
        for (const auto i : batch) {
            batch_labels.push_back(labels_[static_cast<std::size_t>(i)]);
        }
        const auto targets = det::encode_targets(batch_labels, spec_.detector);
        const auto x = train_->targets(batch);

        model_.calibrator.train();
        model_.detector->train();
        auto out = model_.calibrator.calibrate(x);
        auto j = out.image;
        j.retain_grad();

        TargetRecord r;
        r.iteration = t;
        r.stage1 = stage1;
        const auto vq = calib::vq_losses(out.z_e, out.latent.z_q, {}, {}, spec_.calibrator.beta).total;
        auto head = model_.detector->forward(j);
        const auto ls = det::source_loss(head, targets, spec_.detector);
        const bool sia_now = tech_.sia && t % sched.sia.cadence == 0;
        auto loss = vq;
        if (!sia_now || sched.sia.supplement) {
            loss = loss + ls.total;
        }
        if (tech_.dss) {
            std::vector<torch::Tensor> jt;
            for (const auto i : batch) {
                const auto& s = train_->samples[static_cast<std::size_t>(i)];
                jt.push_back(semantics_->at(s.id, plan_[static_cast<std::size_t>(i)]));
            }
            r.lambda = dss_lambda(t, sched.decay);
            const auto terms = dss_image_terms(j, torch::stack(jt), sched.ssim_range);
            loss = loss + r.lambda * terms.image;
            r.dss_ssim = terms.ssim_term.item<double>();
            r.dss_l1 = terms.l1.item<double>();
        }
        if (sia_now) {
            const auto g = torch::autograd::grad({ls.total}, {head.tap}, {}, /*retain_graph=*/true)[0];
            const auto mask = sia::sia_mask(g, spec_.detector.height, spec_.detector.width, sched.sia.fraction);
            const auto masked = sia::sia_loss(model_.detector, j, mask, targets);
            loss = loss + masked.total;
            r.sia = masked.total.item<double>();
        }
        r.total = loss.item<double>();
        if (!std::isfinite(r.total)) {
            throw NumericError(fmt::format("target training diverged at iteration {}", t));
        }
        r.source = ls.total.item<double>();
        r.bbox = ls.bbox.item<double>();
        r.cls = ls.cls.item<double>();
        r.vq = vq.item<double>();

        opt_c_->zero_grad();
        opt_s_->zero_grad();
        loss.backward();
        r.grad_j = j.grad().abs().mean().item<double>();
        if (apply) {
            opt_c_->step();
            if (source_trainable) {
                opt_s_->step();
            }
        }
        r.source_checksum = parameter_checksum(*model_.detector);
        return r;
    }

    TargetRun finish(std::vector<TargetRecord> log) {
        for (auto& p : model_.detector->parameters()) {
            p.set_requires_grad(true);
        }
        model_.calibrator.eval();
        model_.detector->eval();
        return TargetRun{std::move(model_), std::move(log), manual_reads_, plan_, transferred_};
    }

private:
    std::vector<std::int64_t> next_batch() {
        std::vector<std::int64_t> batch;
        const auto n = static_cast<int>(order_.size());
        while (static_cast<int>(batch.size()) < std::min(spec_.schedule.batch_size, n)) {
            if (cursor_ == order_.size()) {
                for (std::size_t i = order_.size(); i > 1; --i) {
                    std::swap(order_[i - 1],
                              order_[static_cast<std::size_t>(rng_.integer(0, static_cast<std::int64_t>(i) - 1))]);
                }
                cursor_ = 0;
            }
            batch.push_back(order_[cursor_++]);
        }
        return batch;
    }

    TargetSpec spec_;
    Techniques tech_;
    const synth::Dataset* train_ = nullptr;
    const SemanticsCache* semantics_ = nullptr;
    TargetModel model_;
    std::vector<std::string> transferred_;
    std::vector<LabelSource> plan_;
    std::vector<Annotations> labels_;
    std::size_t manual_reads_ = 0;
    fsr::StageSchedule stages_;
    std::unique_ptr<torch::optim::Adam> opt_c_;
    std::unique_ptr<torch::optim::Adam> opt_s_;
    std::vector<std::int64_t> order_;
    std::size_t cursor_ = 0;
    Rng rng_{0};
};

} // namespace

TargetRun train_target(const TargetSpec& spec, const TargetInputs& inputs, const TargetLogger& logger) {
    TargetTrainer trainer(spec, inputs);
    std::vector<TargetRecord> log;
    const auto& sched = spec.schedule;
    for (int t = 0; t < sched.iterations; ++t) {
        auto r = trainer.step(t, true);
        if (sched.log_every > 0 && (t % sched.log_every == 0 || t + 1 == sched.iterations)) {
            log.push_back(r);
            if (logger) {
                logger(r);
            }
        }
    }
    return trainer.finish(std::move(log));
}

TargetRecord probe_first_iteration(const TargetSpec& spec, const TargetInputs& inputs) {
    TargetTrainer trainer(spec, inputs);
    return trainer.step(0, false);
}

Checkpoint target_checkpoint(const TargetModel& model, const TargetSpec& spec) {
    Checkpoint ckpt;
    ckpt.kind = "target";
    ckpt.config.set("mode", spec.mode.str());
    ckpt.config.set("techniques", spec.effective_techniques().str());
    ckpt.config.set("seed", static_cast<unsigned long long>(spec.seed));
    ckpt.config.merge(model.calibrator.config().to_kv(), "calibrator");
    ckpt.config.merge(model.detector->config().to_kv(), "detector");
    append_module_state(ckpt, *model.calibrator.net(), "calibrator.");
    append_module_state(ckpt, *model.detector, "source.");
    return ckpt;
}

TargetModel target_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != "target") {
        throw LoadError("expected a target checkpoint, got '" + ckpt.kind + "'");
    }
    TargetModel model{calib::Calibrator(calib::CalibratorConfig::from_kv(ckpt.config.subtree("calibrator"))), nullptr};
    model.calibrator.initialize(0);
    restore_module_state(*model.calibrator.net(), ckpt, "calibrator.");
    model.detector = det::make_detector(det::DetectorConfig::from_kv(ckpt.config.subtree("detector")), 0);
    restore_module_state(*model.detector, ckpt, "source.");
    model.calibrator.eval();
    model.detector->eval();
    return model;
}

TargetEvaluation evaluate_target(TargetModel& model, const synth::Dataset& test, float score_threshold) {
    const auto dets = model.infer(test.targets(), score_threshold);
    std::map<std::int64_t, Detections> predictions;
    std::map<std::int64_t, Annotations> truth;
    for (std::size_t i = 0; i < test.size(); ++i) {
        predictions[test.samples[i].id] = dets[i];
        truth[test.samples[i].id] = test.samples[i].annotations;
    }
    const auto m = det::evaluate_map(predictions, truth, model.detector->config().num_classes);
    return {m.ap50, m.ap50_95, test.size()};
}

} // namespace mac::train
