#pragma once

// Default-configuration pipeline shared by the slow tests: data, trained
// source detector, J_S corpus, J_T caches and the FSR reconstructor under one
// run root in the build tree. Stages whose outputs exist are not rerun.

#include <filesystem>

#include "mac/pipeline.hpp"

namespace mac::testkit {

namespace fs = std::filesystem;

/// Scratch directory for tests inside the build tree.
fs::path work_dir();

/// Fresh empty directory under work_dir().
fs::path fresh_dir(const std::string& name);

const RunConfig& shared_config();
const pipe::Paths& shared_paths();

/// Runs whichever stages of the shared pipeline are missing.
void ensure_shared_run(bool verbose = false);

const synth::Dataset& shared_train();
const synth::Dataset& shared_test();
/// Fresh copy of the trained source detector.
det::SourceDetector shared_source();
std::uint64_t shared_source_checksum();

/// Path of the mac executable.
fs::path cli_path();

} // namespace mac::testkit
