#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fundps/error.hpp"

namespace fundps::cli {

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

class VerificationError : public Error {
 public:
  explicit VerificationError(const std::string& what) : Error("verification-failed", what) {}
};

struct KeySpec {
  std::string name;
  std::string default_value;  // empty with required = false means "unset"
  std::string help;
  bool required = false;
};

/// Plain-text key=value settings with '#' comments. Values are layered:
/// schema defaults, then a config file, then command-line flags.
class RunConfig {
 public:
  explicit RunConfig(std::vector<KeySpec> schema);

  const std::vector<KeySpec>& schema() const { return schema_; }

  /// Errors name `source` and the 1-based line number.
  void load_text(const std::string& text, const std::string& source);
  void load_file(const std::filesystem::path& path);
  void set(const std::string& key, const std::string& value);

  bool is_set(const std::string& key) const;
  /// Throws ConfigError naming every missing required key.
  void check_required() const;

  std::string str(const std::string& key) const;
  double num(const std::string& key) const;
  long long integer(const std::string& key) const;
  std::uint64_t seed(const std::string& key = "seed") const;
  bool flag(const std::string& key) const;

  /// Every set key in schema order, one `key = value` per line.
  std::string to_text() const;

 private:
  std::vector<KeySpec> schema_;
  std::map<std::string, std::string> values_;

  const KeySpec* find(const std::string& key) const;
};

/// `--obs-fraction` for key `obs_fraction`.
std::string flag_name(const std::string& key);

/// Creates `<root>/<YYYYmmdd-HHMMSS>-seed<seed>`, adding `-2`, `-3`, ... when
/// that directory already exists.
std::filesystem::path make_run_dir(const std::filesystem::path& root, std::uint64_t seed);

/// Key schemas per subcommand.
std::vector<KeySpec> gen_data_keys();
std::vector<KeySpec> train_keys();
std::vector<KeySpec> sample_keys();
std::vector<KeySpec> eval_keys();
std::vector<KeySpec> verify_keys();
std::vector<KeySpec> export_image_keys();

/// Each command writes `config.txt` and its outputs into a fresh run
/// directory and returns that directory.
std::filesystem::path run_gen_data(const RunConfig& cfg);
std::filesystem::path run_train(const RunConfig& cfg);
std::filesystem::path run_sample(const RunConfig& cfg);
std::filesystem::path run_eval(const RunConfig& cfg);
/// `oracle` is one of tweedie, posterior, renoise, all. Throws
/// VerificationError after writing the reports when a check fails.
std::filesystem::path run_verify(const RunConfig& cfg, const std::string& oracle);
std::filesystem::path run_export_image(const RunConfig& cfg);

}  // namespace fundps::cli
