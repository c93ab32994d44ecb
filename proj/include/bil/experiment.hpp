#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

// Configuration-driven experiments. A config is a JSON document whose keys
// are a subset of default_config(); resolve_config fills in the rest.
namespace bil {

/// Schema or range violation at a dotted field path.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message);
  [[nodiscard]] const std::string& field() const { return field_; }

 private:
  std::string field_;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

/// Every recognized key with its default value.
nlohmann::json default_config();

/// Sets a dotted key. The value is parsed as JSON when possible and kept as
/// a plain string otherwise.
void apply_override(nlohmann::json& doc, const std::string& key, const std::string& value);

/// Merges `user` over the defaults. Unknown keys, type mismatches and
/// out-of-range values raise ConfigError. The result echoes every setting,
/// with derived values (vocabulary size) filled in.
nlohmann::json resolve_config(const nlohmann::json& user);

/// Runs the experiment of a resolved config and writes its artifacts,
/// including resolved_config.json, under out_dir. Returns the flat summary
/// that is also stored in report.json.
nlohmann::json run_experiment(const nlohmann::json& resolved, const std::filesystem::path& out_dir);

/// Machine-readable description of a failure.
nlohmann::json error_document(const std::string& kind, const std::string& message, const std::string& field = "");

}  // namespace bil
