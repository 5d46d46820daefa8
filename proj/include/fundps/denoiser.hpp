#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fundps/autodiff.hpp"
#include "fundps/field.hpp"

namespace fundps {

/// EDM preconditioning coefficients.
struct Precond {
  double c_in, c_skip, c_out, c_noise;
  static Precond at(double sigma, double sigma_data);
};

/// D(y, sigma) ~ E[a_0 | a_t = y] on batches of shape [n, C, H, W].
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual int channels() const = 0;
  /// `sigma` holds one noise level per batch entry.
  virtual ad::Var denoise(ad::Tape& tape, ad::Var y, std::span<const double> sigma) const = 0;

  ad::Var denoise(ad::Tape& tape, ad::Var y, double sigma) const;
  Field denoise(const Field& y, double sigma) const;
};

/// s(y, sigma) = (D(y, sigma) - y) / sigma^2.
Field score_from_denoiser(const Denoiser& d, const Field& y, double sigma);

struct UnoConfig {
  int data_channels = 2;
  int levels = 2;
  int base_channels = 32;
  std::vector<int> modes{12, 6};  // per level: modes x modes/2 retained coefficients
  int projection_channels = 64;
  int embedding_channels = 64;
  int norm_groups = 8;
  double sigma_data = 1.0;

  int channels_at(int level) const { return base_channels << level; }
  void validate() const;
  /// Throws InvalidArgument naming the first level whose modes the grid cannot carry.
  void check_resolution(int ny, int nx) const;

  std::string to_text() const;
  static UnoConfig from_text(const std::string& text);
};

class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what) : Error("checkpoint", what) {}
};

struct Parameter {
  std::string name;
  ad::Shape shape;
  std::vector<double> values;
};

struct ForwardOptions {
  bool use_ema = false;
  /// Record parameters as differentiable variables (training).
  bool trainable = false;
  /// Dropout rate on the channel-mixing branch; needs `rng` when positive.
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
};

/// U-shaped neural operator with spectral convolutions and FiLM time conditioning.
class DenoiserModel {
 public:
  DenoiserModel() = default;
  DenoiserModel(UnoConfig config, std::uint64_t seed);

  const UnoConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return raw_; }
  const std::vector<Parameter>& parameters() const { return raw_; }
  std::vector<Parameter>& ema_parameters() { return ema_; }
  const std::vector<Parameter>& ema_parameters() const { return ema_; }
  std::size_t parameter_count() const;

  /// Zeros the final projection so that D(y, sigma) = c_skip(sigma) y.
  void zero_output_projection();
  void copy_raw_to_ema();

  struct Trace {
    ad::Var output;
    std::vector<ad::Var> params;  // aligned with parameters()
  };
  Trace trace(ad::Tape& tape, ad::Var y, std::span<const double> sigma, const ForwardOptions& opts) const;

  Field forward(const Field& y, double sigma, bool use_ema = false) const;

  void save(const std::filesystem::path& path) const;
  static DenoiserModel load(const std::filesystem::path& path);

 private:
  UnoConfig config_;
  std::vector<Parameter> raw_;
  std::vector<Parameter> ema_;
  std::map<std::string, std::size_t> index_;

  void add_parameter(const std::string& name, ad::Shape shape);
  void build_layout();
};

/// Adapts a DenoiserModel (raw or EMA weights) to the Denoiser interface.
class ModelDenoiser : public Denoiser {
 public:
  ModelDenoiser(const DenoiserModel& model, bool use_ema) : model_(model), use_ema_(use_ema) {}
  int channels() const override { return model_.config().data_channels; }
  using Denoiser::denoise;
  ad::Var denoise(ad::Tape& tape, ad::Var y, std::span<const double> sigma) const override;

 private:
  const DenoiserModel& model_;
  bool use_ema_;
};

}  // namespace fundps
