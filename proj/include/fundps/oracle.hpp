#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "fundps/denoiser.hpp"
#include "fundps/grf.hpp"
#include "fundps/sampler.hpp"

namespace fundps::oracle {

/// X ~ sum_k w_k N(m_k, v_k) (v_k = 0 is a point mass), Y = X + Z with Z ~ N(0, c).
struct GaussianMixture1D {
  std::vector<double> weights, means, variances;
  double noise_variance = 1.0;

  void validate() const;
  /// Density of Y.
  double density(double y) const;
  /// d/dy ln p_Y(y), in closed form.
  double score(double y) const;
};

/// E[X | Y = y] = sum_k r_k(y) (m_k c + y v_k) / (v_k + c), r_k the posterior responsibilities.
double tweedie_posterior_mean(const GaussianMixture1D& gm, double y);

class SingularSystemError : public Error {
 public:
  explicit SingularSystemError(const std::string& what) : Error("singular-system", what) {}
};

/// a ~ N(0, C) on a small grid, u = M a + N(0, sigma_n^2 I), diffusion noise N(0, sigma^2 C_gamma).
struct LinearGaussianProblem {
  Grid2D grid;
  CovarianceSpec prior;
  CovarianceSpec noise;
  Mask mask;
  double obs_noise = 0.0;

  Eigen::MatrixXd C;        // prior covariance (dense)
  Eigen::MatrixXd C_gamma;  // diffusion noise covariance (dense)

  static LinearGaussianProblem make(const Grid2D& grid, const CovarianceSpec& prior, const CovarianceSpec& noise,
                                    const Mask& mask, double obs_noise);
  /// Dense observation operator M (rows = observed points).
  Eigen::MatrixXd observation_matrix() const;
};

/// Largest grid on which the dense oracles run.
inline constexpr int kMaxOracleGrid = 32;

/// B(sigma) = C (C + sigma^2 C_gamma)^{-1}.
Eigen::MatrixXd denoiser_matrix(const Eigen::MatrixXd& C, const Eigen::MatrixXd& C_gamma, double sigma);

/// E[a_0 | a_t] for the problem's Gaussian prior.
Field exact_denoiser(const LinearGaussianProblem& lg, const Field& a_t, double sigma);

struct Posterior {
  Field mean;
  Eigen::MatrixXd cov;
};

/// mean = C M^T (M C M^T + sigma_n^2 I)^{-1} u and the matching covariance.
Posterior exact_posterior(const LinearGaussianProblem& lg, const ObservationVector& u);

/// x -> B x = (I - sigma^2 C_gamma K^{-1}) x and its transpose, K = C + sigma^2 C_gamma.
/// The fast form multiplies by a precomputed B. The refined form solves with K
/// per call and polishes each solve by iterative refinement with
/// extended-precision residuals (about 15x slower).
class GaussianDenoiserSolve {
 public:
  GaussianDenoiserSolve(const Eigen::MatrixXd& C, const Eigen::MatrixXd& C_gamma, double sigma, bool refined);
  double sigma() const { return sigma_; }
  Eigen::Index size() const { return K_.rows(); }
  Eigen::VectorXd apply(const Eigen::VectorXd& x) const;
  Eigen::VectorXd apply_transpose(const Eigen::VectorXd& g) const;
  /// K^{-1} b.
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const;

 private:
  double sigma_;
  bool refined_;
  Eigen::MatrixXd K_, C_gamma_, B_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

/// Exact Gaussian-prior denoiser usable at any (small) grid; single channel.
/// Factorizations are built per grid and cached per (grid, sigma).
class ExactGaussianDenoiser : public Denoiser {
 public:
  ExactGaussianDenoiser(CovarianceSpec prior, CovarianceSpec noise, bool refined = false)
      : prior_(prior), noise_(noise), refined_(refined) {}
  int channels() const override { return 1; }
  using Denoiser::denoise;
  ad::Var denoise(ad::Tape& tape, ad::Var y, std::span<const double> sigma) const override;

  std::shared_ptr<const GaussianDenoiserSolve> solver(const Grid2D& grid, double sigma) const;

 private:
  struct GridMats {
    Eigen::MatrixXd C, C_gamma;
  };
  CovarianceSpec prior_, noise_;
  bool refined_;
  mutable std::mutex mutex_;
  mutable std::map<std::pair<int, int>, GridMats> grids_;
  mutable std::map<std::tuple<int, int, double>, std::shared_ptr<const GaussianDenoiserSolve>> cache_;
};

struct SweepRow {
  int resolution = 0;
  double sigma = 0.0;
  double discrepancy = 0.0;  // max-abs between the two score evaluations
  double score_scale = 0.0;  // max-abs of the analytic score
};

/// Relative round-off level below which a discrepancy is treated as zero.
inline constexpr double kSweepRoundoffFloor = 1e-12;

/// Per resolution, the largest discrepancy over sigma must not exceed `ratio`
/// times the previous resolution's. Discrepancies are first raised to the
/// round-off floor `rel_floor * score_scale`, since growth among values at
/// round-off level carries no information.
bool sweep_is_resolution_stable(const std::vector<SweepRow>& rows, double ratio = 1.5,
                                double rel_floor = kSweepRoundoffFloor);

/// Score of the exact dense denoiser vs the per-mode analytic Gaussian score
/// -C_gamma (C + sigma^2 C_gamma)^{-1} y, on square grids of the given sizes.
std::vector<SweepRow> verify_tweedie_resolution_sweep(const CovarianceSpec& prior, const CovarianceSpec& noise,
                                                      const std::vector<int>& resolutions, const std::vector<double>& sigmas);

/// Guided sampling with the exact denoiser on a linear-Gaussian problem: random
/// truth from the prior, a random mask, noisy point observations. The chain
/// average is compared with the analytic posterior mean.
struct GuidedPosteriorCheck {
  int resolution = 16;
  double mask_fraction = 0.08;
  double obs_noise = 0.05;
  int steps = 200;
  int chains = 256;
  double zeta = 30.0;
  std::uint64_t seed = 1;
  /// Empty prior selects matern_op(3, 2) scaled to unit pointwise variance.
  std::optional<CovarianceSpec> prior;
  CovarianceSpec noise = CovarianceSpec::rbf(0.01);
  /// Run ReNoise instead of single-resolution sampling.
  std::optional<ReNoiseConfig> renoise;
};

struct GuidedPosteriorResult {
  double rel_l2 = 0.0;   // chain mean vs posterior mean
  double obs_rms = 0.0;  // chain mean vs observations at the observed points
  Field chain_mean;
  Field posterior_mean;
};

/// matern_op(3, 2) with the scale that gives unit pointwise variance on `grid`.
CovarianceSpec unit_variance_prior(const Grid2D& grid);

GuidedPosteriorResult run_guided_posterior_check(const GuidedPosteriorCheck& check);

void write_sweep_csv(const std::vector<SweepRow>& rows, double tolerance, const std::filesystem::path& path);

}  // namespace fundps::oracle
