// SPDX-License-Identifier: Apache-2.0
//
// Plain key=value configuration text. Blank lines and lines starting with '#'
// are ignored; whitespace around keys and values is trimmed. List values are
// comma separated.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lingreg {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class KeyValues {
public:
    static KeyValues parse(std::string_view text, const std::string& origin = "<config>");
    static KeyValues load(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value) { entries_[key] = value; }
    bool has(const std::string& key) const { return entries_.contains(key); }
    const std::map<std::string, std::string>& entries() const { return entries_; }

    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const;
    std::vector<std::uint64_t> get_uints(const std::string& key, const std::vector<std::uint64_t>& fallback) const;
    std::vector<std::string> get_strings(const std::string& key, const std::vector<std::string>& fallback) const;

    /// Sorted key=value lines; parse(dump()) reproduces the same entries.
    std::string dump() const;

private:
    std::map<std::string, std::string> entries_;
};

double parse_double(std::string_view text, std::string_view what);
std::uint64_t parse_uint(std::string_view text, std::string_view what);
std::vector<std::string> split_list(std::string_view text);

}  // namespace lingreg
