#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fundps/denoiser.hpp"
#include "fundps/grf.hpp"
#include "fundps/pde.hpp"

namespace fundps {

/// Decreasing noise levels sigma_N > ... > sigma_1 > sigma_0 = 0.
struct SigmaSchedule {
  std::vector<double> sigmas;
  int n = 0;
  double sigma_min = 0.0, sigma_max = 0.0, rho = 0.0;

  /// Accepts any strictly decreasing positive list; appends the terminal 0
  /// unless `terminal_zero` is false.
  static SigmaSchedule from_list(std::vector<double> sigmas, bool terminal_zero = true);
  std::size_t steps() const { return sigmas.size() - 1; }
};

/// sigma_i = (smax^(1/rho) + i/(N-1) (smin^(1/rho) - smax^(1/rho)))^rho for i < N, then 0.
SigmaSchedule karras_schedule(int n, double sigma_min = 0.002, double sigma_max = 80.0, double rho = 7.0);

enum class ObsLoss { mse, l2 };
ObsLoss parse_obs_loss(const std::string& name);
std::string obs_loss_name(ObsLoss l);

/// Observation and PDE guidance for one posterior sampling problem. Fields are
/// in the model's (normalized) units; `channel_mean`/`channel_std` map them back
/// to physical units for the PDE residual.
struct GuidanceTask {
  Mask mask;
  ObservationVector observed;
  ObsLoss obs_loss = ObsLoss::mse;
  double obs_weight = 0.0;

  std::optional<PdeSpec> pde;
  double huber_delta = 1.0;
  double pde_weight = 0.0;
  double pde_active_below_sigma = 1.0;
  /// Residuals are divided by this before the Huber loss.
  double residual_scale = 1.0;
  std::vector<double> channel_mean;
  std::vector<double> channel_std;

  void validate() const;
};

/// zeta if sigma >= 1, sigma * zeta below.
double effective_weight(double zeta, double sigma);

/// Records zeta_obs~ * L_obs + zeta_pde~ * Huber(residual / scale) of a denoised batch-of-one.
ad::Var guidance_loss(ad::Tape& tape, const GuidanceTask& task, ad::Var denoised, double sigma);

struct GuidedEval {
  Field denoised;
  Field gradient;  // zero when no guidance term is active
  double loss = 0.0;
};

/// One denoiser call at (a, sigma) plus the gradient of the guidance loss with
/// respect to `a` through that call.
GuidedEval evaluate_guidance(const Denoiser& d, const GuidanceTask& task, const Field& a, double sigma);
Field guidance_gradient(const Denoiser& d, const GuidanceTask& task, const Field& a, double sigma);

class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t step, double sigma, const std::string& what)
      : Error("divergence", what), step_(step), sigma_(sigma) {}
  std::size_t step() const { return step_; }
  double sigma() const { return sigma_; }

 private:
  std::size_t step_;
  double sigma_;
};

inline constexpr double kDivergenceBound = 1e6;

/// Guided Heun sampler from a_N ~ N(0, sigma_N^2 C) with C the noise covariance.
Field fundps_sample(const Denoiser& d, const GuidanceTask& task, const SigmaSchedule& schedule,
                    const CovarianceSpec& noise, const Grid2D& grid, std::uint64_t seed);

/// Runs the same iteration from a given state at sigmas.front().
Field fundps_run(const Denoiser& d, const GuidanceTask& task, const SigmaSchedule& schedule, Field a);

struct ReNoiseConfig {
  Grid2D low_res;
  /// Fraction of the total step budget spent at low resolution (0 disables stage 1).
  double low_fraction = 0.8;
  double sigma1_min = 0.2;
  double sigma2_max = 3.0;
  int total_steps = 200;
  double sigma_min = 0.002, sigma_max = 80.0, rho = 7.0;
  ResampleMethod upscale = ResampleMethod::fourier;

  void validate() const;
};

/// Keeps each observation at the coarse point containing it, averaging values
/// that land on the same point.
GuidanceTask coarsen_task(const GuidanceTask& task, const Grid2D& coarse);

/// Two-stage multi-resolution sampling; the task is given at the target grid.
Field renoise_sample(const Denoiser& d, const GuidanceTask& task, const ReNoiseConfig& cfg, const CovarianceSpec& noise,
                     const Grid2D& target, std::uint64_t seed);

enum class TaskKind { forward, inverse, recover };
TaskKind parse_task_kind(const std::string& name);
std::string task_kind_name(TaskKind k);

/// Guidance defaults per problem and task kind (observation loss, zeta_obs, zeta_pde).
struct GuidanceDefaults {
  ObsLoss obs_loss;
  double obs_weight;
  double pde_weight;
};
GuidanceDefaults default_guidance(PdeSpec::Kind pde, TaskKind kind);

/// Masks for the joint (a, u) field: forward observes channel 0, inverse
/// channel 1, recover both, each with round(fraction * grid size) points.
Mask task_mask(TaskKind kind, const Grid2D& grid, double obs_fraction, std::uint64_t seed);

/// Builds a task from a normalized joint sample with defaults for the problem.
GuidanceTask solve_task(TaskKind kind, const Field& sample, double obs_fraction, std::uint64_t seed,
                        const PdeSpec& pde, const DatasetManifest& manifest);

}  // namespace fundps
