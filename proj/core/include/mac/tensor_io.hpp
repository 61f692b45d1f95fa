#pragma once

// Binary tensor blobs shared by datasets, checkpoints and caches.
//
// Layout of one tensor (all integers little-endian):
//   bytes 0..3   magic "MTNS"
//   u32          rank
//   i64[rank]    dimensions, outermost first
//   f32[n]       row-major payload, n = product of dimensions
//
// A blob file is a u32 tensor count followed by that many tensors.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include <torch/torch.h>

namespace mac {

void write_tensor(std::ostream& out, const torch::Tensor& tensor);
torch::Tensor read_tensor(std::istream& in);

void save_tensor_file(const std::filesystem::path& path, const std::vector<torch::Tensor>& tensors);
std::vector<torch::Tensor> load_tensor_file(const std::filesystem::path& path);

/// FNV-1a over shape and float32 payload. Equal checksums imply bit-equal tensors
/// for all practical purposes.
std::uint64_t tensor_checksum(const torch::Tensor& tensor);

/// Checksum over every named parameter of a module, in registration order.
std::uint64_t parameter_checksum(const torch::nn::Module& module);

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 14695981039346656037ull);

/// splitmix64 finalizer; used to derive independent child seeds from a master seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

} // namespace mac
