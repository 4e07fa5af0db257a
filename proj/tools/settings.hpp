#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "hmar/model.hpp"
#include "hmar/service.hpp"
#include "hmar/trainer.hpp"

namespace hmar::cli {

/// Everything a config file can set. `bits` is shared by training and the model.
struct Settings {
    TrainConfig train;
    ModelConfig model;
    ServiceConfig service;
    std::set<std::string> assigned; // keys set explicitly, by file or flag
};

/// Sets one field by its key; throws DomainError for unknown keys or unparsable values.
void apply_setting(Settings& settings, const std::string& key, const std::string& value);

/// Reads `key = value` lines; `#` starts a comment. Errors carry the line number.
void apply_config_file(Settings& settings, const std::filesystem::path& path);

/// Every key apply_setting understands.
std::vector<std::string> setting_keys();

} // namespace hmar::cli
