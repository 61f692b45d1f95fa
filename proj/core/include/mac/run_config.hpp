#pragma once

// Flat run configuration covering every pipeline stage. Every key has a
// documented default; unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mac/calibrator.hpp"
#include "mac/detector.hpp"
#include "mac/fsr.hpp"
#include "mac/inversion.hpp"
#include "mac/kv_config.hpp"
#include "mac/mactrain.hpp"
#include "mac/synthdata.hpp"

namespace mac {

struct ConfigKey {
    std::string key;
    std::string default_value;
    std::string doc;
};

/// All accepted keys in documentation order.
const std::vector<ConfigKey>& config_registry();

class RunConfig {
public:
    RunConfig();

    /// Defaults overlaid with the file's entries.
    static RunConfig load(const std::filesystem::path& path);

    /// Throws ConfigError for unknown keys or values that do not parse.
    void set(const std::string& key, const std::string& value);
    void apply(const KeyValues& overrides);
    /// `key=value` assignment as given on a command line.
    void assign(const std::string& assignment);

    const KeyValues& values() const { return values_; }
    void save(const std::filesystem::path& path) const { values_.save(path); }
    bool operator==(const RunConfig&) const = default;

    template <typename T>
    T get(const std::string& key) const {
        return values_.get<T>(key);
    }

    std::uint64_t seed() const { return get<unsigned long long>("run.seed"); }

    synth::GenConfig gen() const;
    synth::SensorConfig sensor() const;
    std::int64_t train_count() const { return get<long long>("data.train_count"); }
    std::int64_t test_count() const { return get<long long>("data.test_count"); }

    det::DetectorConfig detector() const;
    det::SourceSchedule source_schedule() const;
    std::uint64_t source_seed() const;

    inv::InversionConfig inversion() const;
    inv::LayoutConfig layout() const;
    inv::CorpusOptions corpus() const;
    int corpus_heldout() const { return get<int>("corpus.heldout"); }
    /// J_T inversion: same optimizer with its own step budget.
    train::TargetSemanticsOptions target_semantics() const;

    calib::CalibratorConfig calibrator() const;
    fsr::ReconstructorSchedule fsr_schedule() const;
    std::uint64_t fsr_seed() const;

    train::TargetSpec target_spec() const;
    float eval_score_threshold() const { return get<float>("eval.score_threshold"); }

    /// One line per key: `key = default  # doc`.
    static std::string documentation();

private:
    KeyValues values_;
};

} // namespace mac
