#include "shared_run.hpp"

#include <iostream>
#include <optional>

#include "mac/tensor_io.hpp"

namespace mac::testkit {

fs::path work_dir() {
    const fs::path dir = MAC_TEST_WORK_DIR;
    fs::create_directories(dir);
    return dir;
}

fs::path fresh_dir(const std::string& name) {
    const auto dir = work_dir() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

const RunConfig& shared_config() {
    static const RunConfig config;
    return config;
}

const pipe::Paths& shared_paths() {
    static const pipe::Paths paths{work_dir() / "shared"};
    return paths;
}

void ensure_shared_run(bool verbose) {
    const auto& c = shared_config();
    const auto& p = shared_paths();
    const pipe::Progress progress = verbose ? pipe::Progress([](const std::string& s) { std::cout << s << std::endl; })
                                            : pipe::Progress{};
    if (!fs::exists(p.data() / "checksums.cfg")) {
        pipe::gen_data(c, p, progress);
    }
    if (!fs::exists(p.source() / "metrics.cfg")) {
        pipe::train_source_stage(c, p, progress);
    }
    if (!fs::exists(p.inversion() / "summary.cfg")) {
        pipe::invert_stage(c, p, {}, progress);
    }
    if (!fs::exists(p.fsr() / "metrics.cfg")) {
        pipe::pretrain_fsr_stage(c, p, progress);
    }
}

const synth::Dataset& shared_train() {
    static const auto d = (ensure_shared_run(), synth::read_dataset(shared_paths().train_data()));
    return d;
}

const synth::Dataset& shared_test() {
    static const auto d = (ensure_shared_run(), synth::read_dataset(shared_paths().test_data()));
    return d;
}

det::SourceDetector shared_source() {
    ensure_shared_run();
    return det::load_detector(shared_paths().source_checkpoint());
}

std::uint64_t shared_source_checksum() {
    static const auto c = parameter_checksum(*shared_source());
    return c;
}

fs::path cli_path() {
    return MAC_CLI_PATH;
}

} // namespace mac::testkit
