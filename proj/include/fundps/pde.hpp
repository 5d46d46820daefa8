#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fundps/field.hpp"
#include "fundps/grf.hpp"

namespace fundps {

/// PDE family on the node-centered unit-square grid with u = 0 on the boundary.
///   darcy:      -div(a grad u) = 1
///   poisson:    lap u = a
///   helmholtz:  lap u + k^2 u = a
struct PdeSpec {
  enum class Kind { darcy, poisson, helmholtz };
  Kind kind = Kind::poisson;
  double k = 1.0;
  Grid2D grid;

  static Kind parse_kind(const std::string& name);
  static std::string kind_name(Kind kind);
};

class SolverError : public Error {
 public:
  explicit SolverError(const std::string& what) : Error("solver", what) {}
};

class IterationLimitError : public Error {
 public:
  explicit IterationLimitError(const std::string& what) : Error("iteration-limit", what) {}
};

class ResonanceError : public Error {
 public:
  explicit ResonanceError(const std::string& what) : Error("resonance", what) {}
};

// ---- stencils ------------------------------------------------------------------
// All stencils act on one ny x nx node grid, write interior nodes only and
// leave boundary entries at zero. hx = 1/(nx-1), hy = 1/(ny-1).
namespace stencil {

/// Five-point Laplacian.
void laplacian(std::span<const double> u, const Grid2D& g, std::span<double> out);
/// Adjoint of `laplacian`: accumulates L^T g_out into g_u.
void laplacian_adjoint(std::span<const double> g_out, const Grid2D& g, std::span<double> g_u);

/// Harmonic-mean face coefficient between two nodal values.
inline double harmonic(double p, double q) { return 2.0 * p * q / (p + q); }

/// -div(a grad u) with harmonic-mean face coefficients.
void darcy_operator(std::span<const double> a, std::span<const double> u, const Grid2D& g, std::span<double> out);
/// Reverse-mode partials of `darcy_operator`; either output span may be empty.
void darcy_operator_adjoint(std::span<const double> a, std::span<const double> u, std::span<const double> g_out,
                            const Grid2D& g, std::span<double> g_a, std::span<double> g_u);

}  // namespace stencil

// ---- solvers -------------------------------------------------------------------

/// h(x) = 12 for x > 0, 3 otherwise.
Field darcy_coeff_pushforward(const Field& g);

struct DarcySolveOptions {
  enum class Method { direct, cg };
  Method method = Method::direct;
  double cg_tolerance = 1e-13;
  int cg_max_iterations = 10000;
};

/// Solves -div(a grad u) = forcing (interior nodes) with u = 0 on the boundary.
Field solve_darcy(const Field& a, std::span<const double> forcing, const DarcySolveOptions& opts = {});
/// Constant forcing 1.
Field solve_darcy(const Field& a, const DarcySolveOptions& opts = {});

/// Gradient dL/da of a loss L(u(a)) given dL/du, by one transposed solve.
/// The Darcy matrix is symmetric, so the adjoint system reuses the operator.
Field darcy_solve_adjoint(const Field& a, const Field& u, const Field& dl_du);

Field solve_poisson(const Field& a);
Field solve_helmholtz(const Field& a, double k);
Field solve_pde(const PdeSpec& spec, const Field& a);

/// Pointwise residual on interior nodes (zero on the boundary):
///   darcy: -div(a grad u) - 1, poisson: lap u - a, helmholtz: lap u + k^2 u - a.
Field residual(const PdeSpec& spec, const Field& a, const Field& u);

// ---- datasets ------------------------------------------------------------------

struct DatasetManifest {
  PdeSpec pde;
  CovarianceSpec prior;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::vector<double> mean;  // per channel
  std::vector<double> stddev;

  void write(const std::filesystem::path& path) const;
  static DatasetManifest read(const std::filesystem::path& path);
};

/// Joint 2-channel sample (a, u) for dataset index `index`.
Field generate_sample(const PdeSpec& spec, const GrfSampler& prior, std::uint64_t master_seed, std::size_t index);

/// Writes `sample_%06d.fgrd` for 0 <= i < n plus `manifest` into `dir`.
DatasetManifest gen_dataset(const PdeSpec& spec, const CovarianceSpec& prior, std::size_t n, std::uint64_t seed,
                            const std::filesystem::path& dir);

std::filesystem::path sample_path(const std::filesystem::path& dir, std::size_t index);

struct Dataset {
  DatasetManifest manifest;
  std::vector<Field> samples;  // physical units
};

Dataset load_dataset(const std::filesystem::path& dir);

/// Per-channel z-normalization with the manifest statistics, and its inverse.
Field normalize(const Field& f, const DatasetManifest& m);
Field denormalize(const Field& f, const DatasetManifest& m);

}  // namespace fundps
