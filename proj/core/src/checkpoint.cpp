#include "mac/checkpoint.hpp"

#include <array>
#include <fstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "mac/error.hpp"
#include "mac/tensor_io.hpp"

namespace mac {
namespace {

constexpr std::array<char, 4> kMagic{'M', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) {
        throw LoadError("truncated checkpoint");
    }
    return value;
}

void put_string(std::ostream& out, const std::string& s) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, std::size_t limit) {
    const auto n = get<std::uint32_t>(in);
    if (n > limit) {
        throw LoadError("checkpoint string too long");
    }
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) {
        throw LoadError("truncated checkpoint");
    }
    return s;
}

} // namespace

const torch::Tensor& Checkpoint::at(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) {
            return t;
        }
    }
    throw LoadError(fmt::format("checkpoint '{}' has no tensor '{}'", kind, name));
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& entry : tensors) {
        if (entry.first == name) {
            return true;
        }
    }
    return false;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw LoadError("cannot open " + path.string() + " for writing");
    }
    out.write(kMagic.data(), kMagic.size());
    put<std::uint32_t>(out, kVersion);
    put_string(out, ckpt.kind);
    const auto cfg = ckpt.config.str();
    put<std::uint64_t>(out, cfg.size());
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, tensor] : ckpt.tensors) {
        put_string(out, name);
        write_tensor(out, tensor);
    }
    if (!out) {
        throw LoadError("write failed for " + path.string());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError("missing checkpoint " + path.string());
    }
    try {
        std::array<char, 4> magic{};
        in.read(magic.data(), magic.size());
        if (!in || magic != kMagic) {
            throw LoadError("not a checkpoint (bad magic)");
        }
        if (const auto v = get<std::uint32_t>(in); v != kVersion) {
            throw LoadError(fmt::format("unsupported checkpoint version {}", v));
        }
        Checkpoint ckpt;
        ckpt.kind = get_string(in, 256);
        const auto cfg_len = get<std::uint64_t>(in);
        if (cfg_len > (1u << 24)) {
            throw LoadError("checkpoint config section too large");
        }
        std::string cfg(cfg_len, '\0');
        in.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
        if (!in) {
            throw LoadError("truncated checkpoint");
        }
        ckpt.config = KeyValues::parse(cfg, path.string());
        const auto count = get<std::uint32_t>(in);
        for (std::uint32_t i = 0; i < count; ++i) {
            auto name = get_string(in, 4096);
            ckpt.tensors.emplace_back(std::move(name), read_tensor(in));
        }
        return ckpt;
    } catch (const LoadError& e) {
        throw LoadError(path.string() + ": " + e.what());
    }
}

void append_module_state(Checkpoint& ckpt, const torch::nn::Module& module, const std::string& prefix) {
    for (const auto& item : module.named_parameters(true)) {
        ckpt.tensors.emplace_back(prefix + item.key(), item.value().detach().clone());
    }
    for (const auto& item : module.named_buffers(true)) {
        ckpt.tensors.emplace_back(prefix + item.key(), item.value().detach().clone());
    }
}

void restore_module_state(torch::nn::Module& module, const Checkpoint& ckpt, const std::string& prefix) {
    std::vector<std::string> problems;
    auto copy_into = [&](const std::string& key, torch::Tensor target) {
        const auto name = prefix + key;
        if (!ckpt.has(name)) {
            problems.push_back(name + " (missing)");
            return;
        }
        const auto& src = ckpt.at(name);
        if (src.sizes() != target.sizes()) {
            problems.push_back(fmt::format("{} (shape {} vs {})", name, fmt::join(src.sizes(), "x"),
                                           fmt::join(target.sizes(), "x")));
            return;
        }
        torch::NoGradGuard guard;
        target.copy_(src);
    };
    for (auto& item : module.named_parameters(true)) {
        copy_into(item.key(), item.value());
    }
    for (auto& item : module.named_buffers(true)) {
        copy_into(item.key(), item.value());
    }
    if (!problems.empty()) {
        throw ConfigError(fmt::format("checkpoint '{}' does not fit module: {}", ckpt.kind, fmt::join(problems, ", ")));
    }
}

} // namespace mac
