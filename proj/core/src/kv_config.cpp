#include "mac/kv_config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace mac {
namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T value{};
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc{} || ptr != end) {
        throw ConfigError(fmt::format("key '{}': cannot parse '{}' as a number", key, text));
    }
    return value;
}

} // namespace

KeyValues KeyValues::parse(std::string_view text, std::string_view origin) {
    KeyValues kv;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) {
            nl = text.size();
        }
        ++line_no;
        const auto line = trim(text.substr(pos, nl - pos));
        pos = nl + 1;
        if (line.empty() || line.front() == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError(fmt::format("{}:{}: expected 'key = value'", origin, line_no));
        }
        const std::string key{trim(line.substr(0, eq))};
        const std::string value{trim(line.substr(eq + 1))};
        if (key.empty()) {
            throw ConfigError(fmt::format("{}:{}: empty key", origin, line_no));
        }
        if (kv.contains(key)) {
            throw ConfigError(fmt::format("{}:{}: duplicate key '{}'", origin, line_no, key));
        }
        kv.entries_.emplace(key, value);
    }
    return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config file " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
}

void KeyValues::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw ConfigError("cannot write config file " + path.string());
    }
    out << str();
}

std::string KeyValues::str() const {
    std::string out;
    for (const auto& [k, v] : entries_) {
        out += k;
        out += " = ";
        out += v;
        out += '\n';
    }
    return out;
}

void KeyValues::set(const std::string& key, double value) {
    // shortest representation that round-trips
    entries_[key] = fmt::format("{}", value);
}

const std::string& KeyValues::raw(const std::string& key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) {
        throw ConfigError("missing key '" + key + "'");
    }
    return it->second;
}

KeyValues KeyValues::subtree(std::string_view prefix) const {
    KeyValues out;
    const std::string p = std::string(prefix) + ".";
    for (auto it = entries_.lower_bound(p); it != entries_.end() && it->first.starts_with(p); ++it) {
        out.entries_.emplace(it->first.substr(p.size()), it->second);
    }
    return out;
}

void KeyValues::merge(const KeyValues& other, std::string_view prefix) {
    for (const auto& [k, v] : other.entries_) {
        entries_[prefix.empty() ? k : std::string(prefix) + "." + k] = v;
    }
}

template <>
std::string KeyValues::get<std::string>(const std::string& key) const {
    return raw(key);
}

template <>
bool KeyValues::get<bool>(const std::string& key) const {
    const auto& v = raw(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no" || v == "off") {
        return false;
    }
    throw ConfigError(fmt::format("key '{}': '{}' is not a boolean", key, v));
}

template <>
int KeyValues::get<int>(const std::string& key) const {
    return parse_number<int>(key, raw(key));
}

template <>
long long KeyValues::get<long long>(const std::string& key) const {
    return parse_number<long long>(key, raw(key));
}

template <>
unsigned long long KeyValues::get<unsigned long long>(const std::string& key) const {
    return parse_number<unsigned long long>(key, raw(key));
}

template <>
double KeyValues::get<double>(const std::string& key) const {
    return parse_number<double>(key, raw(key));
}

template <>
float KeyValues::get<float>(const std::string& key) const {
    return static_cast<float>(get<double>(key));
}

} // namespace mac
