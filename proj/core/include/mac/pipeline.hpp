#pragma once

// Pipeline stages over a run root directory:
//
//   <root>/data/{train,test}/       gen-data
//   <root>/source/                  train-source
//   <root>/inversion/{corpus,jt}/   invert
//   <root>/fsr/                     pretrain-fsr
//   <root>/targets/<name>/          train-target
//   <root>/ablate/                  ablate
//
// Each stage directory holds a `config.cfg` snapshot. Re-running a stage with
// the same configuration reproduces its outputs; a different configuration is
// rejected.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mac/mactrain.hpp"
#include "mac/run_config.hpp"

namespace mac::pipe {

namespace fs = std::filesystem;

using Progress = std::function<void(const std::string&)>;

struct Paths {
    fs::path root;

    fs::path data() const { return root / "data"; }
    fs::path train_data() const { return data() / "train"; }
    fs::path test_data() const { return data() / "test"; }
    fs::path source() const { return root / "source"; }
    fs::path source_checkpoint() const { return source() / "source.ckpt"; }
    fs::path inversion() const { return root / "inversion"; }
    fs::path corpus() const { return inversion() / "corpus"; }
    fs::path target_semantics() const { return inversion() / "jt"; }
    fs::path fsr() const { return root / "fsr"; }
    fs::path reconstructor_checkpoint() const { return fsr() / "reconstructor.ckpt"; }
    fs::path targets() const { return root / "targets"; }
    fs::path ablate() const { return root / "ablate"; }
};

/// Claims `dir` for a stage: creates it and writes the config snapshot, or
/// verifies an existing snapshot matches.
void claim_stage_dir(const fs::path& dir, const RunConfig& config);

struct DataSummary {
    std::uint64_t train_checksum = 0;
    std::uint64_t test_checksum = 0;
};
DataSummary gen_data(const RunConfig& config, const Paths& paths, const Progress& progress = {});

struct SourceSummary {
    double ap50 = 0;
    double ap50_95 = 0;
    std::uint64_t checksum = 0;
};
SourceSummary train_source_stage(const RunConfig& config, const Paths& paths, const Progress& progress = {});

struct InvertOptions {
    bool corpus = true;
    bool manual = true;  // J_T from manual labels
    bool pseudo = true;  // J_T from pseudo labels
};

struct InvertSummary {
    std::size_t corpus_items = 0;
    double mean_final_loss = 0;
    double max_final_loss = 0;
    double mean_concentration = 0;
    std::size_t over_ceiling = 0;  // corpus items whose final loss exceeds the convergence ceiling
    std::size_t target_items = 0;
};
InvertSummary invert_stage(const RunConfig& config, const Paths& paths, const InvertOptions& options,
                           const Progress& progress = {});

struct CorpusSplit {
    std::vector<inv::ForegroundSemantics> train;
    std::vector<inv::ForegroundSemantics> heldout;
};
/// Stored J_S corpus; throws StateError when items are missing.
CorpusSplit load_corpus(const RunConfig& config, const Paths& paths, std::uint64_t detector_checksum);

struct FsrSummary {
    double train_l1 = 0;
    double heldout_l1 = 0;
    std::int64_t codes_used = 0;
};
FsrSummary pretrain_fsr_stage(const RunConfig& config, const Paths& paths, const Progress& progress = {});

struct TargetSummary {
    fs::path dir;
    double ap50 = 0;
    double ap50_95 = 0;
    std::size_t manual_reads = 0;
    double annotation_percent = 0;
    std::uint64_t checksum = 0;  // of the target checkpoint tensors
};
/// Trains C|S per config into `out_dir`, evaluates it on the test split and
/// captures figure tensors. Throws StateError naming the missing stage.
TargetSummary train_target_stage(const RunConfig& config, const Paths& paths, const fs::path& out_dir,
                                 const Progress& progress = {});

/// Every stored J_T entry matching the source checkpoint.
train::SemanticsCache load_target_semantics(const fs::path& dir, const synth::Dataset& dataset,
                                            std::uint64_t detector_checksum);

struct EvalSummary {
    std::string kind;
    double ap50 = 0;
    double ap50_95 = 0;
    std::size_t images = 0;
};
/// Evaluates a source or target checkpoint on the test split and writes
/// `<report>.cfg` and `<report>.txt`.
EvalSummary eval_stage(const RunConfig& config, const Paths& paths, const fs::path& checkpoint,
                       const fs::path& report, const Progress& progress = {});

struct Rung {
    std::string name;
    std::vector<std::pair<std::string, std::string>> overrides;
};

/// baseline, +FSR, +SourceInit/two-stage, +DSS, +SIA, self-supervised,
/// semi-supervised(f); each rung adds to the previous.
std::vector<Rung> ablation_ladder(double semi_fraction);

struct RunRequest {
    std::string rung;
    int seed_index = 0;
    fs::path dir;
    RunConfig config;
};

/// Executes run requests. The default runs them in-process, in order.
using Launcher = std::function<void(const std::vector<RunRequest>&)>;

struct ResultRow {
    std::string strategy;
    std::vector<double> ap50;
    std::vector<double> ap50_95;
    double annotation_percent = 0;
    std::size_t seeds() const { return ap50.size(); }
};

double mean(const std::vector<double>& v);
double stddev(const std::vector<double>& v);

struct ResultsTable {
    std::vector<ResultRow> rows;
    const ResultRow* find(const std::string& strategy) const;
    std::string str() const;
};

/// Plans one run per (rung, seed) under <root>/ablate/runs, launches them and
/// collects the results table (also written to results.txt / results.jsonl).
ResultsTable ablate(const RunConfig& config, const Paths& paths, const std::vector<Rung>& rungs,
                    const Launcher& launcher = {}, const Progress& progress = {});

std::vector<RunRequest> plan_ablation(const RunConfig& config, const Paths& paths, const std::vector<Rung>& rungs);

/// Rebuilds the table from the stored `eval.cfg` of each planned run.
ResultsTable collect_results(const std::vector<RunRequest>& runs, const std::vector<Rung>& rungs);

} // namespace mac::pipe
