#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "fundps/denoiser.hpp"
#include "fundps/grf.hpp"
#include "fundps/pde.hpp"

namespace fundps {

struct CurriculumStage {
  int resolution = 32;
  int epochs = 1;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  /// 0 selects 10% of the total samples seen over the curriculum.
  double warmup_samples = 0.0;
  /// 0 selects 5% of the total samples seen; infinity freezes the EMA.
  double ema_half_life_samples = 0.0;
  double dropout = 0.13;
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  int batch_size = 16;
  std::vector<CurriculumStage> curriculum{{32, 1}};
  CovarianceSpec noise = CovarianceSpec::rbf(0.05);
  ResampleMethod resample = ResampleMethod::bicubic;
  std::uint64_t seed = 0;
  /// Stop after this many optimizer steps in total (0 = no limit).
  std::size_t max_steps = 0;

  void validate() const;
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& what) : Error("training", what) {}
};

/// ln(sigma) uniform on [ln sigma_min, ln sigma_max].
double sample_sigma(std::mt19937_64& rng, double sigma_min = 0.002, double sigma_max = 80.0);

/// lambda(sigma) = (sigma^2 + sigma_d^2) / (sigma sigma_d)^2.
double loss_weight(double sigma, double sigma_data);

/// Noise levels and GRF perturbations for one batch.
struct NoiseDraw {
  std::vector<double> sigma;
  std::vector<Field> noise;  // already scaled by sigma
};

/// Per entry b: sigma_b = sample_sigma(rng), then a GRF draw seeded by rng().
NoiseDraw draw_noise(const std::vector<Field>& batch, std::mt19937_64& rng, const TrainConfig& cfg);

/// Weighted denoising loss mean_b lambda(sigma_b) * mean_x |D(a_b + eta_b) - a_b|^2.
/// No gradient, no dropout; the helper behind the evaluation loss.
double denoising_loss(const DenoiserModel& model, const std::vector<Field>& clean, const NoiseDraw& noise, bool use_ema);

/// Deterministic loss at 8 log-spaced noise levels with noise fixed by `seed`.
double evaluation_loss(const DenoiserModel& model, const std::vector<Field>& samples, const TrainConfig& cfg,
                       std::uint64_t seed, bool use_ema = false);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;
};

struct StepResult {
  double loss = 0.0;
  std::vector<double> sigma;
  std::vector<double> per_sample_loss;
};

/// Progress counters used for warmup and EMA decay.
struct TrainSchedule {
  double warmup_samples = 1.0;
  double ema_half_life_samples = std::numeric_limits<double>::infinity();
  double samples_seen = 0.0;
};

/// One Adam step on a batch, then the EMA update with decay 0.5^(B / half_life).
StepResult train_step(DenoiserModel& model, const std::vector<Field>& batch, std::mt19937_64& rng,
                      const TrainConfig& cfg, AdamState& adam, TrainSchedule& schedule);

/// Pooled standard deviation over all channels of (normalized) samples.
double estimate_sigma_data(const std::vector<Field>& samples);

struct TrainReport {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  std::size_t steps = 0;
  double samples_seen = 0.0;
  /// Evaluation loss measured at the start of each stage, before any update.
  std::vector<double> stage_initial_loss;
  double final_ema_loss = 0.0;
  /// Batch loss of every optimizer step.
  std::vector<double> step_loss;
};

/// Trains over every curriculum stage, resampling the normalized dataset to the
/// stage resolution; writes `model.ckpt` and `train_log.csv` into `out_dir`.
TrainReport train_curriculum(DenoiserModel& model, const Dataset& data, const TrainConfig& cfg,
                             const std::filesystem::path& out_dir);
TrainReport train_curriculum(DenoiserModel& model, const std::filesystem::path& dataset_dir, const TrainConfig& cfg,
                             const std::filesystem::path& out_dir);

}  // namespace fundps
