#include "mac/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <json.hpp>

#include "mac/checkpoint.hpp"
#include "mac/error.hpp"
#include "mac/figures.hpp"
#include "mac/metrics.hpp"
#include "mac/tensor_io.hpp"

namespace mac::pipe {

namespace {

void note(const Progress& progress, const std::string& line) {
    if (progress) {
        progress(line);
    }
}

void require_path(const fs::path& path, const std::string& what, const std::string& stage) {
    if (!fs::exists(path)) {
        throw StateError(fmt::format("missing {} ({}): run `{}` first", what, path.string(), stage));
    }
}

class JsonLines {
public:
    explicit JsonLines(const fs::path& path) : out_(path, std::ios::trunc) {
        if (!out_) {
            throw InputError("cannot write " + path.string());
        }
    }
    void write(const nlohmann::json& record) { out_ << record.dump() << '\n'; }

private:
    std::ofstream out_;
};

std::string hex(std::uint64_t v) {
    return fmt::format("{:016x}", v);
}

synth::Dataset load_split(const fs::path& dir) {
    require_path(dir / "manifest.jsonl", "dataset", "gen-data");
    return synth::read_dataset(dir);
}

std::string corpus_name(std::size_t i) {
    return fmt::format("js_{:06d}", i);
}

std::uint64_t checkpoint_checksum(const Checkpoint& ckpt) {
    std::uint64_t h = fnv1a(ckpt.kind.data(), ckpt.kind.size());
    for (const auto& [name, t] : ckpt.tensors) {
        h = fnv1a(name.data(), name.size(), h);
        const auto c = tensor_checksum(t);
        h = fnv1a(&c, sizeof c, h);
    }
    return h;
}

std::string metrics_table(const std::string& title, double ap50, double ap50_95, std::size_t images) {
    return fmt::format("{}\n  {:<16}{:>10}\n  {:<16}{:>10.4f}\n  {:<16}{:>10.4f}\n  {:<16}{:>10}\n", title, "metric",
                       "value", "AP@0.5", ap50, "AP@[.5:.95]", ap50_95, "images", images);
}

} // namespace

void claim_stage_dir(const fs::path& dir, const RunConfig& config) {
    const auto snapshot = dir / "config.cfg";
    if (fs::exists(snapshot)) {
        const auto previous = KeyValues::load(snapshot);
        if (!(previous == config.values())) {
            throw StateError(fmt::format("{} was produced with a different configuration; use a new run root",
                                         dir.string()));
        }
    }
    fs::create_directories(dir);
    config.save(snapshot);
}

DataSummary gen_data(const RunConfig& config, const Paths& paths, const Progress& progress) {
    const auto gen = config.gen();
    const auto sensor = config.sensor();
    claim_stage_dir(paths.data(), config);
    note(progress, fmt::format("generating {} train / {} test scenes", config.train_count(), config.test_count()));
    const auto train = synth::generate_dataset(config.seed(), synth::kTrainStream, config.train_count(), gen, sensor);
    const auto test = synth::generate_dataset(config.seed(), synth::kTestStream, config.test_count(), gen, sensor);
    synth::write_dataset(train, paths.train_data());
    synth::write_dataset(test, paths.test_data());
    DataSummary s{synth::dataset_checksum(train), synth::dataset_checksum(test)};
    KeyValues kv;
    kv.set("train_checksum", hex(s.train_checksum));
    kv.set("test_checksum", hex(s.test_checksum));
    kv.set("train_count", static_cast<long long>(train.size()));
    kv.set("test_count", static_cast<long long>(test.size()));
    kv.save(paths.data() / "checksums.cfg");
    note(progress, fmt::format("dataset checksums train {} test {}", hex(s.train_checksum), hex(s.test_checksum)));
    return s;
}

SourceSummary train_source_stage(const RunConfig& config, const Paths& paths, const Progress& progress) {
    const auto train = load_split(paths.train_data());
    const auto test = load_split(paths.test_data());
    const auto cfg = config.detector();
    const auto schedule = config.source_schedule();
    claim_stage_dir(paths.source(), config);
    JsonLines log(paths.source() / "train_log.jsonl");
    auto detector = det::train_source(train, cfg, schedule, config.source_seed(), [&](const det::TrainRecord& r) {
        log.write({{"iteration", r.iteration}, {"total", r.total}, {"bbox", r.bbox}, {"cls", r.cls}});
        note(progress, fmt::format("source it {:5d} loss {:.4f} (bbox {:.4f} cls {:.4f})", r.iteration, r.total,
                                   r.bbox, r.cls));
    });
    det::save_detector(detector, paths.source_checkpoint());

    const auto dets = det::infer(detector, test.sources(), config.eval_score_threshold());
    std::map<std::int64_t, Detections> predictions;
    std::map<std::int64_t, Annotations> truth;
    for (std::size_t i = 0; i < test.size(); ++i) {
        predictions[test.samples[i].id] = dets[i];
        truth[test.samples[i].id] = test.samples[i].annotations;
    }
    const auto m = det::evaluate_map(predictions, truth, cfg.num_classes);
    SourceSummary s{m.ap50, m.ap50_95, parameter_checksum(*detector)};
    KeyValues kv;
    kv.set("ap50", s.ap50);
    kv.set("ap50_95", s.ap50_95);
    kv.set("checksum", hex(s.checksum));
    kv.save(paths.source() / "metrics.cfg");
    std::ofstream(paths.source() / "metrics.txt", std::ios::trunc)
        << metrics_table("source detector on the test split (source modality)", s.ap50, s.ap50_95, test.size());
    note(progress, fmt::format("source AP@0.5 {:.4f} AP@[.5:.95] {:.4f}", s.ap50, s.ap50_95));
    return s;
}

InvertSummary invert_stage(const RunConfig& config, const Paths& paths, const InvertOptions& options,
                           const Progress& progress) {
    require_path(paths.source_checkpoint(), "source checkpoint", "train-source");
    auto detector = det::load_detector(paths.source_checkpoint());
    const auto checksum = parameter_checksum(*detector);
    claim_stage_dir(paths.inversion(), config);
    InvertSummary summary;

    if (options.corpus) {
        auto corpus_opts = config.corpus();
        const auto total = static_cast<std::size_t>(corpus_opts.count + config.corpus_heldout());
        corpus_opts.count = static_cast<int>(total);
        bool cached = true;
        for (std::size_t i = 0; i < total && cached; ++i) {
            cached = inv::read_semantics(paths.corpus(), corpus_name(i), checksum).has_value();
        }
        std::vector<inv::ForegroundSemantics> items;
        if (cached) {
            note(progress, fmt::format("J_S corpus of {} already present", total));
            for (std::size_t i = 0; i < total; ++i) {
                items.push_back(*inv::read_semantics(paths.corpus(), corpus_name(i), checksum));
            }
        } else {
            note(progress, fmt::format("inverting {} random layouts", total));
            items = inv::build_inversion_corpus(detector, config.layout(), config.inversion(), corpus_opts);
            for (std::size_t i = 0; i < items.size(); ++i) {
                inv::write_semantics(paths.corpus(), corpus_name(i), items[i], checksum);
            }
        }
        const auto ceiling = config.get<double>("corpus.max_final_ratio");
        JsonLines log(paths.inversion() / "corpus.jsonl");
        for (std::size_t i = 0; i < items.size(); ++i) {
            const auto& it = items[i];
            const double conc = inv::foreground_concentration(it.image, it.layout);
            log.write({{"item", i},
                       {"initial_loss", it.initial_loss},
                       {"final_loss", it.final_loss},
                       {"concentration", conc},
                       {"heldout", i >= static_cast<std::size_t>(config.corpus().count)}});
            summary.mean_final_loss += it.final_loss;
            summary.max_final_loss = std::max(summary.max_final_loss, it.final_loss);
            summary.mean_concentration += conc;
            if (it.final_loss > ceiling * it.initial_loss) {
                ++summary.over_ceiling;
            }
        }
        summary.corpus_items = items.size();
        if (!items.empty()) {
            summary.mean_final_loss /= static_cast<double>(items.size());
            summary.mean_concentration /= static_cast<double>(items.size());
        }
        note(progress, fmt::format("corpus final loss mean {:.4f} max {:.4f}, concentration {:.2f}",
                                   summary.mean_final_loss, summary.max_final_loss, summary.mean_concentration));
        if (summary.over_ceiling > 0) {
            note(progress, fmt::format("warning: {} corpus items stopped above {} x their initial loss",
                                       summary.over_ceiling, ceiling));
        }
    }

    if (options.manual || options.pseudo) {
        const auto train = load_split(paths.train_data());
        auto jt = config.target_semantics();
        jt.cache_dir = paths.target_semantics();
        std::vector<std::size_t> indices(train.size());
        std::iota(indices.begin(), indices.end(), 0);
        train::SemanticsCache cache;
        if (options.manual) {
            note(progress, fmt::format("inverting {} samples against manual labels", train.size()));
            std::vector<Annotations> labels;
            for (const auto& s : train.samples) {
                labels.push_back(s.annotations);
            }
            train::add_target_semantics(cache, detector, train, indices, labels, train::LabelSource::Manual, jt);
        }
        if (options.pseudo) {
            note(progress, fmt::format("inverting {} samples against pseudo labels", train.size()));
            const auto labels = train::pseudo_ground_truth(detector, train.sources(),
                                                           config.get<float>("target.pseudo_threshold"));
            train::add_target_semantics(cache, detector, train, indices, labels, train::LabelSource::Pseudo, jt);
        }
        summary.target_items = cache.size();
    }
    KeyValues kv;
    kv.set("corpus_items", static_cast<long long>(summary.corpus_items));
    kv.set("mean_final_loss", summary.mean_final_loss);
    kv.set("max_final_loss", summary.max_final_loss);
    kv.set("mean_concentration", summary.mean_concentration);
    kv.set("over_ceiling", static_cast<long long>(summary.over_ceiling));
    kv.set("target_items", static_cast<long long>(summary.target_items));
    kv.set("source_checksum", hex(checksum));
    kv.save(paths.inversion() / "summary.cfg");
    return summary;
}

CorpusSplit load_corpus(const RunConfig& config, const Paths& paths, std::uint64_t detector_checksum) {
    const auto count = static_cast<std::size_t>(config.corpus().count);
    const auto total = count + static_cast<std::size_t>(config.corpus_heldout());
    CorpusSplit split;
    for (std::size_t i = 0; i < total; ++i) {
        auto item = inv::read_semantics(paths.corpus(), corpus_name(i), detector_checksum);
        if (!item) {
            throw StateError(fmt::format("missing J_S corpus item {} for the current source checkpoint in {}: run "
                                         "`invert` first",
                                         i, paths.corpus().string()));
        }
        (i < count ? split.train : split.heldout).push_back(std::move(*item));
    }
    return split;
}

FsrSummary pretrain_fsr_stage(const RunConfig& config, const Paths& paths, const Progress& progress) {
    require_path(paths.source_checkpoint(), "source checkpoint", "train-source");
    const auto checksum = parameter_checksum(*det::load_detector(paths.source_checkpoint()));
    const auto corpus = load_corpus(config, paths, checksum);
    claim_stage_dir(paths.fsr(), config);
    const auto stack = [](const std::vector<inv::ForegroundSemantics>& items) {
        std::vector<torch::Tensor> images;
        for (const auto& it : items) {
            images.push_back(it.image);
        }
        return torch::stack(images);
    };
    const auto train_images = stack(corpus.train);
    JsonLines log(paths.fsr() / "train_log.jsonl");
    auto state = fsr::train_reconstructor(
        train_images, fsr::ReconstructorConfig::matching(config.calibrator()), config.fsr_schedule(),
        config.fsr_seed(), [&](const fsr::ReconstructorRecord& r) {
            log.write({{"step", r.step},
                       {"total", r.total},
                       {"reconstruction", r.reconstruction},
                       {"l1", r.l1},
                       {"codes_used", r.codes_used}});
            note(progress, fmt::format("fsr step {:5d} loss {:.5f} l1 {:.4f} codes {}", r.step, r.total, r.l1,
                                       r.codes_used));
        });
    save_checkpoint(paths.reconstructor_checkpoint(), fsr::reconstructor_checkpoint(state));
    save_tensor_file(paths.fsr() / "codebook.bin", {state.net->codebook->embeddings.detach()});
    FsrSummary s;
    s.train_l1 = fsr::reconstruction_l1(state, train_images);
    s.heldout_l1 = corpus.heldout.empty() ? s.train_l1 : fsr::reconstruction_l1(state, stack(corpus.heldout));
    s.codes_used = state.log.empty() ? 0 : state.log.back().codes_used;
    KeyValues kv;
    kv.set("train_l1", s.train_l1);
    kv.set("heldout_l1", s.heldout_l1);
    kv.set("codes_used", static_cast<long long>(s.codes_used));
    kv.save(paths.fsr() / "metrics.cfg");
    note(progress, fmt::format("fsr L1 train {:.4f} held-out {:.4f}", s.train_l1, s.heldout_l1));
    return s;
}

train::SemanticsCache load_target_semantics(const fs::path& dir, const synth::Dataset& dataset,
                                            std::uint64_t detector_checksum) {
    train::SemanticsCache cache;
    if (!fs::exists(dir)) {
        return cache;
    }
    for (const auto source : {train::LabelSource::Manual, train::LabelSource::Pseudo}) {
        for (const auto& s : dataset.samples) {
            const auto name = fmt::format("jt_{}_{:06d}", train::to_string(source), s.id);
            if (auto item = inv::read_semantics(dir, name, detector_checksum)) {
                cache.insert(s.id, source, item->image);
            }
        }
    }
    return cache;
}

TargetSummary train_target_stage(const RunConfig& config, const Paths& paths, const fs::path& out_dir,
                                 const Progress& progress) {
    const auto spec = config.target_spec();
    const auto tech = spec.effective_techniques();
    const bool pseudo = spec.mode.kind == train::Supervision::Self || spec.mode.kind == train::Supervision::Semi;
    det::SourceDetector source{nullptr};
    std::uint64_t source_checksum = 0;
    if (pseudo || tech.two_stage || tech.dss || tech.fsr) {
        require_path(paths.source_checkpoint(), "source checkpoint", "train-source");
        source = det::load_detector(paths.source_checkpoint());
        source_checksum = parameter_checksum(*source);
    }
    const auto train = load_split(paths.train_data());
    const auto test = load_split(paths.test_data());
    std::optional<fsr::ReconstructorState> reconstructor;
    if (tech.fsr) {
        require_path(paths.reconstructor_checkpoint(), "FSR reconstructor checkpoint", "pretrain-fsr");
        reconstructor = fsr::reconstructor_from_checkpoint(load_checkpoint(paths.reconstructor_checkpoint()));
    }
    train::SemanticsCache semantics;
    if (tech.dss) {
        require_path(paths.target_semantics(), "J_T inversion cache", "invert");
        semantics = load_target_semantics(paths.target_semantics(), train, source_checksum);
    }

    claim_stage_dir(out_dir, config);
    note(progress, fmt::format("training target {} [{}] for {} iterations", spec.mode.str(), tech.str(),
                               spec.schedule.iterations));
    JsonLines log(out_dir / "metrics.jsonl");
    train::TargetInputs inputs{&train, source ? &source : nullptr, reconstructor ? &*reconstructor : nullptr,
                               tech.dss ? &semantics : nullptr};
    auto run = train::train_target(spec, inputs, [&](const train::TargetRecord& r) {
        log.write({{"iteration", r.iteration},
                   {"stage1", r.stage1},
                   {"total", r.total},
                   {"source", r.source},
                   {"bbox", r.bbox},
                   {"cls", r.cls},
                   {"vq", r.vq},
                   {"dss_ssim", r.dss_ssim},
                   {"dss_l1", r.dss_l1},
                   {"lambda_dss", r.lambda},
                   {"sia", r.sia},
                   {"grad_j", r.grad_j},
                   {"source_checksum", hex(r.source_checksum)}});
        note(progress, fmt::format("target it {:4d} loss {:.4f} L_S {:.4f} dss {:.4f}/{:.4f} sia {:.4f} |dL/dJ| {:.3e}",
                                   r.iteration, r.total, r.source, r.dss_ssim, r.dss_l1, r.sia, r.grad_j));
    });

    const auto ckpt = train::target_checkpoint(run.model, spec);
    save_checkpoint(out_dir / "target.ckpt", ckpt);
    {
        std::ofstream manifest(out_dir / "transfer_manifest.txt", std::ios::trunc);
        for (const auto& name : run.transferred) {
            manifest << name << '\n';
        }
    }
    const auto eval = train::evaluate_target(run.model, test, config.eval_score_threshold());
    TargetSummary s;
    s.dir = out_dir;
    s.ap50 = eval.ap50;
    s.ap50_95 = eval.ap50_95;
    s.manual_reads = run.manual_reads;
    s.annotation_percent = 100.0 * static_cast<double>(run.manual_reads) / static_cast<double>(train.size());
    s.checksum = checkpoint_checksum(ckpt);
    KeyValues kv;
    kv.set("ap50", s.ap50);
    kv.set("ap50_95", s.ap50_95);
    kv.set("manual_reads", static_cast<long long>(s.manual_reads));
    kv.set("annotation_percent", s.annotation_percent);
    kv.set("mode", spec.mode.str());
    kv.set("techniques", tech.str());
    kv.set("checksum", hex(s.checksum));
    kv.save(out_dir / "eval.cfg");
    std::ofstream(out_dir / "eval.txt", std::ios::trunc) << metrics_table(
        fmt::format("target model {} [{}] on the test split (target modality)", spec.mode.str(), tech.str()),
        s.ap50, s.ap50_95, test.size());

    std::optional<inv::ForegroundSemantics> js;
    if (source) {
        js = inv::read_semantics(paths.corpus(), corpus_name(0), source_checksum);
    }
    const auto bundle = fig::capture_figures(run.model, train, config.get<int>("figures.samples"), spec.schedule.sia.fraction,
                                             tech.dss ? &semantics : nullptr, run.plan, js ? &*js : nullptr);
    fig::save_bundle(out_dir, bundle);
    note(progress, fmt::format("target AP@0.5 {:.4f} AP@[.5:.95] {:.4f}, manual labels {:.1f}%", s.ap50, s.ap50_95,
                               s.annotation_percent));
    return s;
}

EvalSummary eval_stage(const RunConfig& config, const Paths& paths, const fs::path& checkpoint,
                       const fs::path& report, const Progress& progress) {
    require_path(checkpoint, "checkpoint", "train-source or train-target");
    const auto test = load_split(paths.test_data());
    const auto ckpt = load_checkpoint(checkpoint);
    EvalSummary s;
    s.kind = ckpt.kind;
    s.images = test.size();
    if (ckpt.kind == "target") {
        auto model = train::target_from_checkpoint(ckpt);
        const auto e = train::evaluate_target(model, test, config.eval_score_threshold());
        s.ap50 = e.ap50;
        s.ap50_95 = e.ap50_95;
    } else {
        auto detector = det::detector_from_checkpoint(ckpt);
        const auto dets = det::infer(detector, test.sources(), config.eval_score_threshold());
        std::map<std::int64_t, Detections> predictions;
        std::map<std::int64_t, Annotations> truth;
        for (std::size_t i = 0; i < test.size(); ++i) {
            predictions[test.samples[i].id] = dets[i];
            truth[test.samples[i].id] = test.samples[i].annotations;
        }
        const auto m = det::evaluate_map(predictions, truth, detector->config().num_classes);
        s.ap50 = m.ap50;
        s.ap50_95 = m.ap50_95;
    }
    if (report.has_parent_path()) {
        fs::create_directories(report.parent_path());
    }
    KeyValues kv;
    kv.set("kind", s.kind);
    kv.set("ap50", s.ap50);
    kv.set("ap50_95", s.ap50_95);
    kv.set("images", static_cast<long long>(s.images));
    kv.save(fs::path(report.string() + ".cfg"));
    std::ofstream(report.string() + ".txt", std::ios::trunc)
        << metrics_table(fmt::format("{} checkpoint {}", s.kind, checkpoint.string()), s.ap50, s.ap50_95, s.images);
    note(progress, fmt::format("{} AP@0.5 {:.4f} AP@[.5:.95] {:.4f}", s.kind, s.ap50, s.ap50_95));
    return s;
}

std::vector<Rung> ablation_ladder(double semi_fraction) {
    const std::vector<std::pair<std::string, std::string>> off{
        {"target.fsr", "false"}, {"target.two_stage", "false"}, {"target.dss", "false"}, {"target.sia", "false"}};
    std::vector<Rung> ladder;
    ladder.push_back({"baseline", off});
    ladder.back().overrides.push_back({"target.mode", "naive"});
    auto current = off;
    current.push_back({"target.mode", "mac-supervised"});
    const auto add = [&](const std::string& name, const std::string& key, const std::string& value) {
        for (auto& kv : current) {
            if (kv.first == key) {
                kv.second = value;
            }
        }
        ladder.push_back({name, current});
    };
    add("+FSR", "target.fsr", "true");
    add("+SourceInit/two-stage", "target.two_stage", "true");
    add("+DSS", "target.dss", "true");
    add("+SIA", "target.sia", "true");
    add("self-supervised", "target.mode", "mac-self");
    add(fmt::format("semi-supervised({})", semi_fraction), "target.mode", fmt::format("mac-semi({})", semi_fraction));
    return ladder;
}

double mean(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev(const std::vector<double>& v) {
    if (v.size() < 2) {
        return 0.0;
    }
    const double m = mean(v);
    double acc = 0;
    for (const double x : v) {
        acc += (x - m) * (x - m);
    }
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

const ResultRow* ResultsTable::find(const std::string& strategy) const {
    for (const auto& r : rows) {
        if (r.strategy == strategy) {
            return &r;
        }
    }
    return nullptr;
}

std::string ResultsTable::str() const {
    std::string out = fmt::format("{:<28} {:>18} {:>18} {:>10} {:>6}\n", "strategy", "AP@0.5 (%)", "AP@[.5:.95] (%)",
                                  "annot. %", "seeds");
    for (const auto& r : rows) {
        out += fmt::format("{:<28} {:>18} {:>18} {:>10.1f} {:>6}\n", r.strategy,
                           fmt::format("{:.2f} ± {:.2f}", 100 * mean(r.ap50), 100 * stddev(r.ap50)),
                           fmt::format("{:.2f} ± {:.2f}", 100 * mean(r.ap50_95), 100 * stddev(r.ap50_95)),
                           r.annotation_percent, r.seeds());
    }
    return out;
}

std::vector<RunRequest> plan_ablation(const RunConfig& config, const Paths& paths, const std::vector<Rung>& rungs) {
    const int seeds = config.get<int>("ablate.seeds");
    if (seeds < 1) {
        throw ConfigError("ablate.seeds must be >= 1");
    }
    std::vector<RunRequest> runs;
    for (std::size_t r = 0; r < rungs.size(); ++r) {
        for (int k = 0; k < seeds; ++k) {
            RunConfig c = config;
            for (const auto& [key, value] : rungs[r].overrides) {
                c.set(key, value);
            }
            c.set("target.seed", std::to_string(k));
            runs.push_back({rungs[r].name, k, paths.ablate() / "runs" / fmt::format("r{}_seed{}", r, k), c});
        }
    }
    return runs;
}

ResultsTable collect_results(const std::vector<RunRequest>& runs, const std::vector<Rung>& rungs) {
    ResultsTable table;
    for (const auto& rung : rungs) {
        ResultRow row;
        row.strategy = rung.name;
        std::vector<double> annot;
        for (const auto& run : runs) {
            if (run.rung != rung.name) {
                continue;
            }
            const auto path = run.dir / "eval.cfg";
            if (!fs::exists(path)) {
                throw StateError(fmt::format("run {} has no evaluation report ({})", run.dir.string(), path.string()));
            }
            const auto kv = KeyValues::load(path);
            row.ap50.push_back(kv.get<double>("ap50"));
            row.ap50_95.push_back(kv.get<double>("ap50_95"));
            annot.push_back(kv.get<double>("annotation_percent"));
        }
        if (row.ap50.empty()) {
            throw StateError("no completed runs for rung " + rung.name);
        }
        row.annotation_percent = mean(annot);
        table.rows.push_back(std::move(row));
    }
    return table;
}

ResultsTable ablate(const RunConfig& config, const Paths& paths, const std::vector<Rung>& rungs,
                    const Launcher& launcher, const Progress& progress) {
    claim_stage_dir(paths.ablate(), config);
    const auto runs = plan_ablation(config, paths, rungs);
    note(progress, fmt::format("ablation: {} rungs x {} seeds", rungs.size(), config.get<int>("ablate.seeds")));
    if (launcher) {
        launcher(runs);
    } else {
        for (const auto& run : runs) {
            note(progress, fmt::format("run {} seed {}", run.rung, run.seed_index));
            train_target_stage(run.config, paths, run.dir, progress);
        }
    }
    const auto table = collect_results(runs, rungs);
    std::ofstream(paths.ablate() / "results.txt", std::ios::trunc) << table.str();
    JsonLines json(paths.ablate() / "results.jsonl");
    for (const auto& r : table.rows) {
        json.write({{"strategy", r.strategy},
                    {"ap50", r.ap50},
                    {"ap50_95", r.ap50_95},
                    {"ap50_mean", mean(r.ap50)},
                    {"ap50_std", stddev(r.ap50)},
                    {"ap50_95_mean", mean(r.ap50_95)},
                    {"ap50_95_std", stddev(r.ap50_95)},
                    {"annotation_percent", r.annotation_percent},
                    {"seeds", r.seeds()}});
    }
    note(progress, "\n" + table.str());
    return table;
}

} // namespace mac::pipe
