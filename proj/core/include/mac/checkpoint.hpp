#pragma once

// Self-describing parameter container used for every model in the pipeline.
//
//   bytes 0..3  magic "MCKP"
//   u32         format version (1)
//   u32, bytes  kind string ("detector", "calibrator", "reconstructor", "target")
//   u64, bytes  configuration as flat `key = value` text
//   u32         tensor count
//   per tensor: u32 name length, name bytes, tensor blob (see tensor_io.hpp)

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "mac/kv_config.hpp"

namespace mac {

struct Checkpoint {
    std::string kind;
    KeyValues config;
    std::vector<std::pair<std::string, torch::Tensor>> tensors;

    const torch::Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of all parameters and buffers of `module`, names prefixed with `prefix`.
void append_module_state(Checkpoint& ckpt, const torch::nn::Module& module, const std::string& prefix = {});

/// Copies tensors named `prefix + parameter name` into `module`. Every parameter
/// must be present with matching shape; otherwise a ConfigError lists all
/// offending names.
void restore_module_state(torch::nn::Module& module, const Checkpoint& ckpt, const std::string& prefix = {});

} // namespace mac
