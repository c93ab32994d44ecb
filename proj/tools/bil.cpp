#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bil/errors.hpp"
#include "bil/experiment.hpp"

using nlohmann::json;

namespace {

int fail(int code, const json& doc) {
  std::cerr << doc.dump() << "\n";
  return code;
}

// "--a.b=v" and "--a.b v" arguments left over by the parser.
std::vector<std::pair<std::string, std::string>> dotted_flags(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& arg = extras[i];
    if (arg.rfind("--", 0) != 0) throw bil::ConfigError(arg, "unexpected argument");
    const std::string body = arg.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else if (i + 1 < extras.size()) {
      out.emplace_back(body, extras[++i]);
    } else {
      throw bil::ConfigError(body, "missing value");
    }
  }
  return out;
}

std::pair<std::string, std::string> split_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw bil::ConfigError(text, "expected KEY=VALUE");
  return {text.substr(0, eq), text.substr(eq + 1)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bigram and induction-head experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  auto* run = app.add_subcommand("run", "Run the experiment described by a JSON config");
  run->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  run->add_option("--set", sets, "Override KEY=VALUE (repeatable)");
  run->add_option("--out", out_dir, "Output directory (overrides output_dir)");
  run->add_option("--seed", seed, "Root seed (overrides seed)");
  run->allow_extras();

  auto* defaults = app.add_subcommand("defaults", "Print every config key with its default value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : bil::kExitConfig;
  }

  if (*defaults) {
    std::cout << bil::default_config().dump(2) << "\n";
    return bil::kExitOk;
  }

  json resolved;
  try {
    std::ifstream in(config_path);
    json user;
    try {
      user = json::parse(in);
    } catch (const json::parse_error& e) {
      throw bil::ConfigError("<file>", e.what());
    }
    for (const auto& s : sets) {
      const auto [key, value] = split_assignment(s);
      bil::apply_override(user, key, value);
    }
    for (const auto& [key, value] : dotted_flags(run->remaining())) bil::apply_override(user, key, value);
    if (seed) user["seed"] = *seed;
    if (!out_dir.empty()) user["output_dir"] = out_dir;
    resolved = bil::resolve_config(user);
  } catch (const bil::ConfigError& e) {
    return fail(bil::kExitConfig, bil::error_document("config", e.what(), e.field()));
  }

  try {
    const json summary = bil::run_experiment(resolved, resolved["output_dir"].get<std::string>());
    std::cout << summary.dump() << "\n";
  } catch (const bil::ConfigError& e) {
    return fail(bil::kExitConfig, bil::error_document("config", e.what(), e.field()));
  } catch (const bil::NumericalError& e) {
    return fail(bil::kExitNumerical, bil::error_document("numerical", e.what()));
  } catch (const std::exception& e) {
    return fail(bil::kExitFailure, bil::error_document("runtime", e.what()));
  }
  return bil::kExitOk;
}
