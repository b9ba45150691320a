#pragma once

#include "fsr/data.hpp"
#include "fsr/training.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

namespace fsrcli {

/// Bad flag, key or value. Maps to exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Flat key=value settings. Keys are the long flag names without dashes.
using Settings = std::map<std::string, std::string>;

Settings default_settings();

/// Lines "key = value"; blank lines and lines starting with '#' are skipped.
/// Unknown keys are rejected.
void merge_config_file(Settings& settings, const std::filesystem::path& path);
void set_value(Settings& settings, const std::string& key, const std::string& value);

fsr::TrainConfig train_config(const Settings& s);
fsr::BenchmarkSizes benchmark_sizes(const Settings& s);
std::size_t target_domain(const Settings& s);
std::uint64_t data_seed(const Settings& s);

/// Hash of the canonical "key=value" listing.
std::uint64_t settings_hash(const Settings& s);
std::string to_hex(std::uint64_t v);

}  // namespace fsrcli
