#include <charconv>
#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>

#include "cli.hpp"

namespace fundps::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig::RunConfig(std::vector<KeySpec> schema) : schema_(std::move(schema)) {
  for (const auto& k : schema_) {
    if (!k.default_value.empty()) values_[k.name] = k.default_value;
  }
}

const KeySpec* RunConfig::find(const std::string& key) const {
  for (const auto& k : schema_) {
    if (k.name == key) return &k;
  }
  return nullptr;
}

void RunConfig::load_text(const std::string& text, const std::string& source) {
  std::istringstream is(text);
  std::string line;
  std::map<std::string, int> seen;
  for (int lineno = 1; std::getline(is, line); ++lineno) {
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "missing key before '='");
    if (!find(key)) throw ConfigError(where + "unknown key '" + key + "'");
    if (auto it = seen.find(key); it != seen.end()) {
      throw ConfigError(where + "duplicate key '" + key + "' (first set on line " + std::to_string(it->second) + ")");
    }
    seen[key] = lineno;
    values_[key] = value;
  }
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  load_text(ss.str(), path.string());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!find(key)) throw ConfigError("unknown key '" + key + "'");
  values_[key] = value;
}

bool RunConfig::is_set(const std::string& key) const {
  if (!find(key)) throw ConfigError("unknown key '" + key + "'");
  auto it = values_.find(key);
  return it != values_.end() && !it->second.empty();
}

void RunConfig::check_required() const {
  std::string missing;
  for (const auto& k : schema_) {
    if (k.required && !is_set(k.name)) missing += (missing.empty() ? "" : ", ") + k.name;
  }
  if (!missing.empty()) throw ConfigError("missing required key(s): " + missing);
}

std::string RunConfig::str(const std::string& key) const {
  if (!is_set(key)) throw ConfigError("key '" + key + "' is not set");
  return values_.at(key);
}

double RunConfig::num(const std::string& key) const {
  const std::string v = str(key);
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw ConfigError("key '" + key + "': '" + v + "' is not a number");
  return x;
}

long long RunConfig::integer(const std::string& key) const {
  const std::string v = str(key);
  long long x = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("key '" + key + "': '" + v + "' is not an integer");
  return x;
}

std::uint64_t RunConfig::seed(const std::string& key) const {
  const std::string v = str(key);
  std::uint64_t x = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("key '" + key + "': '" + v + "' is not a non-negative integer");
  }
  return x;
}

bool RunConfig::flag(const std::string& key) const {
  const std::string v = str(key);
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("key '" + key + "': '" + v + "' is not a boolean");
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const auto& k : schema_) {
    if (is_set(k.name)) os << k.name << " = " << values_.at(k.name) << "\n";
  }
  return os.str();
}

std::string flag_name(const std::string& key) {
  std::string f = "--" + key;
  for (auto& ch : f) {
    if (ch == '_') ch = '-';
  }
  return f;
}

std::filesystem::path make_run_dir(const std::filesystem::path& root, std::uint64_t seed) {
  std::filesystem::create_directories(root);
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  const std::string base = std::string(stamp) + "-seed" + std::to_string(seed);
  for (int k = 1;; ++k) {
    const auto dir = root / (k == 1 ? base : base + "-" + std::to_string(k));
    if (std::filesystem::create_directory(dir)) return dir;
  }
}

// ---- schemas -------------------------------------------------------------------

std::vector<KeySpec> gen_data_keys() {
  return {
      {"pde", "poisson", "darcy, poisson or helmholtz"},
      {"helmholtz_k", "1", "wavenumber of the Helmholtz problem"},
      {"resolution", "32", "grid points per side"},
      {"n", "", "number of samples", true},
      {"seed", "", "master seed", true},
      {"prior", "matern_op(tau=3,alpha=2,scale=1)", "covariance of the parameter field"},
      {"out", "runs", "root directory for run directories"},
  };
}

std::vector<KeySpec> train_keys() {
  return {
      {"data", "", "dataset directory written by gen-data", true},
      {"seed", "", "master seed", true},
      {"curriculum", "32:1", "resolution:epochs stages, comma separated"},
      {"learning_rate", "1e-4", "Adam step size"},
      {"batch_size", "16", ""},
      {"dropout", "0.13", ""},
      {"warmup_samples", "0", "0 = 10% of all samples seen"},
      {"ema_half_life_samples", "0", "0 = 5% of all samples seen"},
      {"sigma_min", "0.002", ""},
      {"sigma_max", "80", ""},
      {"noise", "rbf(length_scale=0.05)", "diffusion noise covariance"},
      {"resample", "bicubic", "curriculum resampling: bicubic or fourier"},
      {"max_steps", "0", "stop after this many optimizer steps (0 = no limit)"},
      {"levels", "2", ""},
      {"base_channels", "32", ""},
      {"modes", "12,6", "retained modes per level"},
      {"projection_channels", "64", ""},
      {"embedding_channels", "64", ""},
      {"norm_groups", "8", ""},
      {"sigma_data", "auto", "'auto' estimates it from the normalized data"},
      {"out", "runs", "root directory for run directories"},
  };
}

std::vector<KeySpec> sample_keys() {
  return {
      {"checkpoint", "", "model.ckpt from a train run (its manifest sits alongside)", true},
      {"seed", "", "master seed", true},
      {"pde", "", "must match the training data when given"},
      {"data", "", "dataset directory to draw ground truth from; fresh samples otherwise"},
      {"index", "0", "first dataset index used as ground truth"},
      {"count", "1", "number of problems"},
      {"resolution", "", "target grid per side (default: training data grid)"},
      {"task", "forward", "forward, inverse or recover"},
      {"obs_fraction", "0.03", ""},
      {"steps", "500", ""},
      {"chains", "1", "independent chains per problem; the reconstruction is their mean"},
      {"zeta_obs", "", "default: per problem and task"},
      {"zeta_pde", "", "default: per problem and task"},
      {"obs_loss", "", "mse or l2 (default: per problem and task)"},
      {"huber_delta", "1", ""},
      {"pde_active_below_sigma", "1", ""},
      {"sigma_min", "0.002", ""},
      {"sigma_max", "80", ""},
      {"rho", "7", ""},
      {"noise", "rbf(length_scale=0.05)", "diffusion noise covariance used in training"},
      {"ema", "true", "use the EMA weights"},
      {"renoise", "false", "two-stage multi-resolution sampling"},
      {"renoise_low_resolution", "", "default: half the target"},
      {"renoise_low_fraction", "0.8", ""},
      {"renoise_sigma1_min", "0.2", ""},
      {"renoise_sigma2_max", "3", ""},
      {"out", "runs", "root directory for run directories"},
  };
}

std::vector<KeySpec> eval_keys() {
  return {
      {"run", "", "directory written by sample", true},
      {"seed", "0", "only names the run directory"},
      {"binary_channel", "-1", "channel scored by binary error (-1 = none)"},
      {"threshold", "7.5", "binarization threshold"},
      {"out", "runs", "root directory for run directories"},
  };
}

std::vector<KeySpec> verify_keys() {
  return {
      {"seed", "", "master seed", true},
      {"chains", "256", "chains for the posterior and renoise checks"},
      {"steps", "200", ""},
      {"zeta", "30", "guidance weight for the posterior and renoise checks"},
      {"out", "runs", "root directory for run directories"},
  };
}

std::vector<KeySpec> export_image_keys() {
  return {
      {"input", "", "FGRD file", true},
      {"seed", "0", "only names the run directory"},
      {"out", "runs", "root directory for run directories"},
  };
}

}  // namespace fundps::cli
