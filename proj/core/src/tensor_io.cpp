#include "mac/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "mac/error.hpp"

namespace mac {
namespace {

static_assert(std::endian::native == std::endian::little, "tensor blobs assume a little-endian host");

constexpr std::array<char, 4> kMagic{'M', 'T', 'N', 'S'};
constexpr std::uint32_t kMaxRank = 8;

template <typename T>
void put(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) {
        throw LoadError("truncated tensor stream");
    }
    return value;
}

} // namespace

void write_tensor(std::ostream& out, const torch::Tensor& tensor) {
    const auto cpu = tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    out.write(kMagic.data(), kMagic.size());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(cpu.dim()));
    for (const auto d : cpu.sizes()) {
        put<std::int64_t>(out, d);
    }
    out.write(reinterpret_cast<const char*>(cpu.data_ptr<float>()),
              static_cast<std::streamsize>(cpu.numel() * sizeof(float)));
}

torch::Tensor read_tensor(std::istream& in) {
    std::array<char, 4> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) {
        throw LoadError("bad tensor magic");
    }
    const auto rank = get<std::uint32_t>(in);
    if (rank > kMaxRank) {
        throw LoadError("tensor rank " + std::to_string(rank) + " exceeds limit");
    }
    std::vector<std::int64_t> dims(rank);
    std::int64_t numel = 1;
    for (auto& d : dims) {
        d = get<std::int64_t>(in);
        if (d < 0 || d > (std::int64_t{1} << 32)) {
            throw LoadError("invalid tensor dimension");
        }
        numel *= d;
    }
    auto tensor = torch::empty(dims, torch::kFloat32);
    in.read(reinterpret_cast<char*>(tensor.data_ptr<float>()), static_cast<std::streamsize>(numel * sizeof(float)));
    if (!in) {
        throw LoadError("truncated tensor payload");
    }
    return tensor;
}

void save_tensor_file(const std::filesystem::path& path, const std::vector<torch::Tensor>& tensors) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw LoadError("cannot open " + path.string() + " for writing");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        write_tensor(out, t);
    }
    if (!out) {
        throw LoadError("write failed for " + path.string());
    }
}

std::vector<torch::Tensor> load_tensor_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError("missing tensor file " + path.string());
    }
    try {
        const auto count = get<std::uint32_t>(in);
        std::vector<torch::Tensor> tensors;
        tensors.reserve(count);
        for (std::uint32_t i = 0; i < count; ++i) {
            tensors.push_back(read_tensor(in));
        }
        return tensors;
    } catch (const LoadError& e) {
        throw LoadError(path.string() + ": " + e.what());
    }
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t tensor_checksum(const torch::Tensor& tensor) {
    const auto cpu = tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    std::uint64_t h = 14695981039346656037ull;
    for (const auto d : cpu.sizes()) {
        h = fnv1a(&d, sizeof(d), h);
    }
    return fnv1a(cpu.data_ptr<float>(), static_cast<std::size_t>(cpu.numel()) * sizeof(float), h);
}

std::uint64_t parameter_checksum(const torch::nn::Module& module) {
    std::uint64_t h = 14695981039346656037ull;
    for (const auto& item : module.named_parameters(/*recurse=*/true)) {
        h = fnv1a(item.key().data(), item.key().size(), h);
        const auto c = tensor_checksum(item.value());
        h = fnv1a(&c, sizeof(c), h);
    }
    return h;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

} // namespace mac
