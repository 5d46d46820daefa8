#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fundps/field.hpp"

namespace fundps {

/// Spectral description of a stationary covariance on the periodic unit square.
///
/// rbf: periodized squared-exponential kernel exp(-|d|^2 / (2 l^2)); its
/// pointwise variance is 1 by construction.
/// matern_op: the operator scale * (-Laplacian + tau^2)^(-alpha/2) applied to
/// white noise, i.e. covariance scale^2 (-Laplacian + tau^2)^(-alpha). With
/// tau = 3, alpha = 2, scale = 1 this is N(0, (-Laplacian + 9 I)^-2).
struct CovarianceSpec {
  enum class Kind { rbf, matern_op };

  Kind kind = Kind::rbf;
  double length_scale = 0.05;
  double tau = 3.0;
  double alpha = 2.0;
  double scale = 1.0;
  double jitter = 1e-12;

  static CovarianceSpec rbf(double length_scale, double jitter = 1e-12);
  static CovarianceSpec matern_op(double tau, double alpha, double scale = 1.0);

  void validate() const;

  /// Round-trips through parse(): "rbf(length_scale=0.05)" or
  /// "matern_op(tau=3,alpha=2,scale=1)", optionally with ",jitter=..".
  std::string to_string() const;
  static CovarianceSpec parse(const std::string& text);
};

class SpectrumError : public Error {
 public:
  explicit SpectrumError(const std::string& what) : Error("spectrum", what) {}
};

/// Circulant-embedding GRF sampler on a cell-centered periodic grid.
///
/// A sample is u(x) = sum_k amp_k xi_k e^{2 pi i k.x} with Hermitian white
/// noise xi, so its pointwise variance is sum_k amp_k^2 independently of the
/// grid (up to truncation of the modes the grid can carry).
class GrfSampler {
 public:
  GrfSampler(CovarianceSpec spec, Grid2D grid);

  const CovarianceSpec& spec() const { return spec_; }
  const Grid2D& grid() const { return grid_; }

  /// Per-mode amplitudes on the full ny x nx FFT layout (row = ky bin, col = kx bin).
  const std::vector<double>& sqrt_spectrum() const { return amp_; }
  double amplitude(int ky_bin, int kx_bin) const { return amp_[static_cast<std::size_t>(ky_bin) * grid_.nx + kx_bin]; }

  /// sum_k amp_k^2
  double pointwise_variance() const { return variance_; }
  /// Analytic covariance between two points separated by (dy, dx) grid steps.
  double covariance(int dy, int dx) const;

  /// sigma * C^{1/2} applied to fresh white noise on every channel.
  Field sample(std::uint64_t seed, double sigma, int channels = 1) const;
  /// C^{1/2} white; `white` is treated as unit-variance grid noise.
  Field color(const Field& white) const;
  /// C^{-1/2} f, zeroing modes whose amplitude vanishes.
  Field whiten(const Field& f) const;
  /// C f, where C is the covariance matrix of sample() at sigma = 1.
  Field apply_covariance(const Field& f) const;
  /// Dense row-major N x N covariance matrix (N = grid points).
  std::vector<double> dense_covariance() const;

 private:
  enum class Op { color, whiten, covariance };
  Field spectral_apply(const Field& f, Op op) const;

  CovarianceSpec spec_;
  Grid2D grid_;
  std::vector<double> amp_;
  std::vector<double> half_amp_;  // amplitudes on the rfft half layout
  double variance_ = 0.0;
};

}  // namespace fundps
