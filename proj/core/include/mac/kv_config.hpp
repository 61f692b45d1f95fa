#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "mac/error.hpp"

namespace mac {

/// Flat `key = value` configuration with dotted namespaces (`detector.lr`).
/// Lines starting with `#` are comments. Keys are kept sorted so the written
/// form diffs cleanly.
class KeyValues {
public:
    static KeyValues parse(std::string_view text, std::string_view origin = "<string>");
    static KeyValues load(const std::filesystem::path& path);

    void save(const std::filesystem::path& path) const;
    std::string str() const;

    void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }
    void set(const std::string& key, const char* value) { entries_[key] = value; }
    void set(const std::string& key, bool value) { entries_[key] = value ? "true" : "false"; }
    void set(const std::string& key, double value);
    void set(const std::string& key, float value) { set(key, static_cast<double>(value)); }
    void set(const std::string& key, long long value) { entries_[key] = std::to_string(value); }
    void set(const std::string& key, unsigned long long value) { entries_[key] = std::to_string(value); }
    void set(const std::string& key, long value) { set(key, static_cast<long long>(value)); }
    void set(const std::string& key, unsigned long value) { set(key, static_cast<unsigned long long>(value)); }
    void set(const std::string& key, int value) { set(key, static_cast<long long>(value)); }

    bool contains(const std::string& key) const { return entries_.count(key) != 0; }
    const std::string& raw(const std::string& key) const;

    template <typename T>
    T get(const std::string& key) const;

    template <typename T>
    T get_or(const std::string& key, T fallback) const {
        return contains(key) ? get<T>(key) : fallback;
    }

    /// Entries under `prefix.` with the prefix stripped.
    KeyValues subtree(std::string_view prefix) const;
    /// Copies `other` into this map with `prefix.` prepended to every key.
    void merge(const KeyValues& other, std::string_view prefix = {});

    const std::map<std::string, std::string>& entries() const { return entries_; }
    bool operator==(const KeyValues&) const = default;

private:
    std::map<std::string, std::string> entries_;
};

template <> std::string KeyValues::get<std::string>(const std::string& key) const;
template <> bool KeyValues::get<bool>(const std::string& key) const;
template <> int KeyValues::get<int>(const std::string& key) const;
template <> long long KeyValues::get<long long>(const std::string& key) const;
template <> unsigned long long KeyValues::get<unsigned long long>(const std::string& key) const;
template <> double KeyValues::get<double>(const std::string& key) const;
template <> float KeyValues::get<float>(const std::string& key) const;

} // namespace mac
