#include "fundps/pde.hpp"

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "fundps/fft.hpp"
#include "fundps/parallel.hpp"
#include "fundps/rng.hpp"

namespace fundps {

PdeSpec::Kind PdeSpec::parse_kind(const std::string& name) {
  if (name == "darcy") return Kind::darcy;
  if (name == "poisson") return Kind::poisson;
  if (name == "helmholtz") return Kind::helmholtz;
  throw InvalidArgument("unknown pde '" + name + "'");
}

std::string PdeSpec::kind_name(Kind kind) {
  switch (kind) {
    case Kind::darcy: return "darcy";
    case Kind::poisson: return "poisson";
    case Kind::helmholtz: return "helmholtz";
  }
  return "?";
}

namespace {

void require_single_channel(const Field& f, const char* what) {
  if (f.channels() != 1) throw ShapeError(std::string(what) + " expects a single-channel field");
  if (f.grid().nx < 3 || f.grid().ny < 3) throw ShapeError(std::string(what) + " needs at least one interior node");
}

double inv_h2x(const Grid2D& g) { return static_cast<double>(g.nx - 1) * (g.nx - 1); }
double inv_h2y(const Grid2D& g) { return static_cast<double>(g.ny - 1) * (g.ny - 1); }

}  // namespace

// ---- stencils -------------------------------------------------------------------

namespace stencil {

void laplacian(std::span<const double> u, const Grid2D& g, std::span<double> out) {
  const int nx = g.nx, ny = g.ny;
  const double cx = inv_h2x(g), cy = inv_h2y(g);
  std::fill(out.begin(), out.end(), 0.0);
  for (int i = 1; i < ny - 1; ++i) {
    for (int j = 1; j < nx - 1; ++j) {
      const std::size_t p = static_cast<std::size_t>(i) * nx + j;
      out[p] = cx * (u[p - 1] - 2.0 * u[p] + u[p + 1]) + cy * (u[p - nx] - 2.0 * u[p] + u[p + nx]);
    }
  }
}

void laplacian_adjoint(std::span<const double> g_out, const Grid2D& g, std::span<double> g_u) {
  const int nx = g.nx, ny = g.ny;
  const double cx = inv_h2x(g), cy = inv_h2y(g);
  for (int i = 1; i < ny - 1; ++i) {
    for (int j = 1; j < nx - 1; ++j) {
      const std::size_t p = static_cast<std::size_t>(i) * nx + j;
      const double v = g_out[p];
      g_u[p - 1] += cx * v;
      g_u[p + 1] += cx * v;
      g_u[p - nx] += cy * v;
      g_u[p + nx] += cy * v;
      g_u[p] -= 2.0 * (cx + cy) * v;
    }
  }
}

namespace {

bool interior(int i, int j, const Grid2D& g) { return i > 0 && j > 0 && i < g.ny - 1 && j < g.nx - 1; }

// Visits every face between nodes p and q touching at least one interior node.
template <class Fn>
void for_each_face(const Grid2D& g, Fn&& fn) {
  const double cx = inv_h2x(g), cy = inv_h2y(g);
  for (int i = 0; i < g.ny; ++i) {
    for (int j = 0; j < g.nx; ++j) {
      const std::size_t p = static_cast<std::size_t>(i) * g.nx + j;
      if (j + 1 < g.nx && (interior(i, j, g) || interior(i, j + 1, g))) {
        fn(p, p + 1, interior(i, j, g), interior(i, j + 1, g), cx);
      }
      if (i + 1 < g.ny && (interior(i, j, g) || interior(i + 1, j, g))) {
        fn(p, p + static_cast<std::size_t>(g.nx), interior(i, j, g), interior(i + 1, j, g), cy);
      }
    }
  }
}

}  // namespace

void darcy_operator(std::span<const double> a, std::span<const double> u, const Grid2D& g, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  for_each_face(g, [&](std::size_t p, std::size_t q, bool ip, bool iq, double c) {
    const double flux = c * harmonic(a[p], a[q]) * (u[p] - u[q]);
    if (ip) out[p] += flux;
    if (iq) out[q] -= flux;
  });
}

void darcy_operator_adjoint(std::span<const double> a, std::span<const double> u, std::span<const double> g_out,
                            const Grid2D& g, std::span<double> g_a, std::span<double> g_u) {
  for_each_face(g, [&](std::size_t p, std::size_t q, bool ip, bool iq, double c) {
    const double gf = (ip ? g_out[p] : 0.0) - (iq ? g_out[q] : 0.0);
    if (gf == 0.0) return;
    const double ap = a[p], aq = a[q];
    const double af = harmonic(ap, aq);
    if (!g_u.empty()) {
      g_u[p] += gf * c * af;
      g_u[q] -= gf * c * af;
    }
    if (!g_a.empty()) {
      const double du = c * (u[p] - u[q]) * gf;
      const double s2 = (ap + aq) * (ap + aq);
      g_a[p] += du * 2.0 * aq * aq / s2;
      g_a[q] += du * 2.0 * ap * ap / s2;
    }
  });
}

}  // namespace stencil

// ---- solvers --------------------------------------------------------------------

Field darcy_coeff_pushforward(const Field& g) {
  if (g.channels() != 1) throw ShapeError("darcy_coeff_pushforward expects a single-channel field");
  Field out(g.grid(), 1);
  auto src = g.values();
  auto dst = out.values();
  for (std::size_t k = 0; k < src.size(); ++k) dst[k] = src[k] > 0.0 ? 12.0 : 3.0;
  return out;
}

namespace {

using SparseMatrix = Eigen::SparseMatrix<double>;

// Interior unknown numbering: (i, j) -> (i-1)*(nx-2) + (j-1).
SparseMatrix assemble_darcy(const Field& a) {
  const Grid2D& g = a.grid();
  const int mx = g.nx - 2, my = g.ny - 2;
  auto av = a.values();
  auto unknown = [&](std::size_t node) -> int {
    const int i = static_cast<int>(node / g.nx), j = static_cast<int>(node % g.nx);
    if (i < 1 || j < 1 || i > my || j > mx) return -1;
    return (i - 1) * mx + (j - 1);
  };
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<std::size_t>(mx) * my * 5);
  const double cx = inv_h2x(g), cy = inv_h2y(g);
  for (int i = 0; i < g.ny; ++i) {
    for (int j = 0; j < g.nx; ++j) {
      const std::size_t p = static_cast<std::size_t>(i) * g.nx + j;
      auto face = [&](std::size_t q, double c) {
        const int up = unknown(p), uq = unknown(q);
        if (up < 0 && uq < 0) return;
        const double w = c * stencil::harmonic(av[p], av[q]);
        if (up >= 0) trip.emplace_back(up, up, w);
        if (uq >= 0) trip.emplace_back(uq, uq, w);
        if (up >= 0 && uq >= 0) {
          trip.emplace_back(up, uq, -w);
          trip.emplace_back(uq, up, -w);
        }
      };
      if (j + 1 < g.nx) face(p + 1, cx);
      if (i + 1 < g.ny) face(p + static_cast<std::size_t>(g.nx), cy);
    }
  }
  SparseMatrix A(mx * my, mx * my);
  A.setFromTriplets(trip.begin(), trip.end());
  return A;
}

void check_positive(const Field& a) {
  for (double v : a.values()) {
    if (!(v > 0.0)) throw InvalidArgument("darcy coefficient must be strictly positive, found " + std::to_string(v));
  }
}

Eigen::VectorXd interior_vector(std::span<const double> full, const Grid2D& g) {
  const int mx = g.nx - 2, my = g.ny - 2;
  Eigen::VectorXd v(mx * my);
  for (int i = 1; i <= my; ++i) {
    for (int j = 1; j <= mx; ++j) v((i - 1) * mx + (j - 1)) = full[static_cast<std::size_t>(i) * g.nx + j];
  }
  return v;
}

Field scatter_interior(const Eigen::VectorXd& v, const Grid2D& g) {
  const int mx = g.nx - 2, my = g.ny - 2;
  Field out(g, 1);
  for (int i = 1; i <= my; ++i) {
    for (int j = 1; j <= mx; ++j) out.at(0, i, j) = v((i - 1) * mx + (j - 1));
  }
  return out;
}

Eigen::VectorXd solve_spd(const SparseMatrix& A, const Eigen::VectorXd& rhs, const DarcySolveOptions& opts) {
  if (opts.method == DarcySolveOptions::Method::direct) {
    Eigen::SimplicialLDLT<SparseMatrix> ldlt(A);
    if (ldlt.info() != Eigen::Success) throw SolverError("Darcy matrix factorization failed");
    Eigen::VectorXd x = ldlt.solve(rhs);
    if (ldlt.info() != Eigen::Success) throw SolverError("Darcy solve failed");
    return x;
  }
  Eigen::ConjugateGradient<SparseMatrix, Eigen::Lower | Eigen::Upper> cg;
  cg.setTolerance(opts.cg_tolerance);
  cg.setMaxIterations(opts.cg_max_iterations);
  cg.compute(A);
  Eigen::VectorXd x = cg.solve(rhs);
  if (cg.info() != Eigen::Success) {
    throw IterationLimitError("conjugate gradient did not converge in " + std::to_string(cg.iterations()) +
                              " iterations (relative residual " + std::to_string(cg.error()) + ")");
  }
  return x;
}

}  // namespace

Field solve_darcy(const Field& a, std::span<const double> forcing, const DarcySolveOptions& opts) {
  require_single_channel(a, "solve_darcy");
  check_positive(a);
  if (forcing.size() != a.grid().size()) throw ShapeError("solve_darcy: forcing length does not match the grid");
  const SparseMatrix A = assemble_darcy(a);
  return scatter_interior(solve_spd(A, interior_vector(forcing, a.grid()), opts), a.grid());
}

Field solve_darcy(const Field& a, const DarcySolveOptions& opts) {
  const std::vector<double> ones(a.grid().size(), 1.0);
  return solve_darcy(a, ones, opts);
}

Field darcy_solve_adjoint(const Field& a, const Field& u, const Field& dl_du) {
  require_single_channel(a, "darcy_solve_adjoint");
  check_positive(a);
  if (u.grid() != a.grid() || dl_du.grid() != a.grid()) throw ShapeError("darcy_solve_adjoint: grids differ");
  // A(a) u = f  =>  dL/da = -lambda^T (dA/da) u  with  A^T lambda = dL/du.
  const SparseMatrix A = assemble_darcy(a);
  const Field lambda = scatter_interior(solve_spd(A, interior_vector(dl_du.values(), a.grid()), {}), a.grid());
  Field grad(a.grid(), 1);
  std::vector<double> neg_lambda(lambda.values().begin(), lambda.values().end());
  for (auto& v : neg_lambda) v = -v;
  stencil::darcy_operator_adjoint(a.values(), u.values(), neg_lambda, a.grid(), grad.values(), {});
  return grad;
}

namespace {

// Solves (lap + shift) u = a on the interior via the type-I sine transform.
Field sine_solve(const Field& a, double shift) {
  const Grid2D& g = a.grid();
  const int mx = g.nx - 2, my = g.ny - 2;
  const Eigen::VectorXd rhs = interior_vector(a.values(), g);
  std::vector<double> buf(rhs.data(), rhs.data() + rhs.size()), coef(buf.size());
  fft::dst1_2d(buf, my, mx, coef);
  const double cx = inv_h2x(g), cy = inv_h2y(g);
  double largest = 0.0;
  std::vector<double> eig(coef.size());
  for (int p = 0; p < my; ++p) {
    const double sy = std::sin(std::numbers::pi * (p + 1) / (2.0 * (my + 1)));
    for (int q = 0; q < mx; ++q) {
      const double sx = std::sin(std::numbers::pi * (q + 1) / (2.0 * (mx + 1)));
      const double lam = -4.0 * cx * sx * sx - 4.0 * cy * sy * sy;
      eig[static_cast<std::size_t>(p) * mx + q] = lam + shift;
      largest = std::max(largest, std::abs(lam));
    }
  }
  for (std::size_t k = 0; k < coef.size(); ++k) {
    if (std::abs(eig[k]) < 1e-10 * largest) {
      throw ResonanceError("shift " + std::to_string(shift) + " coincides with a discrete Laplacian eigenvalue");
    }
    coef[k] /= eig[k];
  }
  fft::dst1_2d(coef, my, mx, buf);
  const double norm = 1.0 / (4.0 * (mx + 1) * (my + 1));
  Eigen::VectorXd sol(static_cast<Eigen::Index>(buf.size()));
  for (std::size_t k = 0; k < buf.size(); ++k) sol(static_cast<Eigen::Index>(k)) = buf[k] * norm;
  return scatter_interior(sol, g);
}

}  // namespace

Field solve_poisson(const Field& a) {
  require_single_channel(a, "solve_poisson");
  return sine_solve(a, 0.0);
}

Field solve_helmholtz(const Field& a, double k) {
  require_single_channel(a, "solve_helmholtz");
  return sine_solve(a, k * k);
}

Field solve_pde(const PdeSpec& spec, const Field& a) {
  switch (spec.kind) {
    case PdeSpec::Kind::darcy: return solve_darcy(a);
    case PdeSpec::Kind::poisson: return solve_poisson(a);
    case PdeSpec::Kind::helmholtz: return solve_helmholtz(a, spec.k);
  }
  throw InvalidArgument("unknown pde kind");
}

Field residual(const PdeSpec& spec, const Field& a, const Field& u) {
  require_single_channel(a, "residual");
  require_single_channel(u, "residual");
  if (a.grid() != u.grid()) throw ShapeError("residual: a and u grids differ");
  const Grid2D& g = a.grid();
  Field out(g, 1);
  auto r = out.values();
  auto av = a.values();
  auto uv = u.values();
  if (spec.kind == PdeSpec::Kind::darcy) {
    stencil::darcy_operator(av, uv, g, r);
  } else {
    stencil::laplacian(uv, g, r);
  }
  const double k2 = spec.kind == PdeSpec::Kind::helmholtz ? spec.k * spec.k : 0.0;
  for (int i = 1; i < g.ny - 1; ++i) {
    for (int j = 1; j < g.nx - 1; ++j) {
      const std::size_t p = static_cast<std::size_t>(i) * g.nx + j;
      if (spec.kind == PdeSpec::Kind::darcy) {
        r[p] -= 1.0;
      } else {
        r[p] += k2 * uv[p] - av[p];
      }
    }
  }
  return out;
}

// ---- datasets -------------------------------------------------------------------

std::filesystem::path sample_path(const std::filesystem::path& dir, std::size_t index) {
  char name[32];
  std::snprintf(name, sizeof(name), "sample_%06zu.fgrd", index);
  return dir / name;
}

Field generate_sample(const PdeSpec& spec, const GrfSampler& prior, std::uint64_t master_seed, std::size_t index) {
  Field a = prior.sample(derive_seed(master_seed, index), 1.0);
  if (spec.kind == PdeSpec::Kind::darcy) a = darcy_coeff_pushforward(a);
  Field u = solve_pde(spec, a);
  return Field::concat_channels(a, u);
}

DatasetManifest gen_dataset(const PdeSpec& spec, const CovarianceSpec& prior, std::size_t n, std::uint64_t seed,
                            const std::filesystem::path& dir) {
  if (n < 1) throw InvalidArgument("dataset size must be >= 1");
  std::filesystem::create_directories(dir);
  const GrfSampler sampler(prior, spec.grid);
  std::vector<Field> samples(n);
  parallel_for(n, [&](std::size_t i) {
    samples[i] = generate_sample(spec, sampler, seed, i);
    write_field(samples[i], sample_path(dir, i));
  });

  DatasetManifest m;
  m.pde = spec;
  m.prior = prior;
  m.n = n;
  m.seed = seed;
  const int channels = samples.front().channels();
  for (int c = 0; c < channels; ++c) {
    double sum = 0.0, count = 0.0;
    for (const auto& s : samples) {
      for (double v : s.channel(c)) sum += v;
      count += static_cast<double>(s.channel_size());
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (const auto& s : samples) {
      for (double v : s.channel(c)) sq += (v - mean) * (v - mean);
    }
    m.mean.push_back(mean);
    m.stddev.push_back(std::sqrt(sq / count));
  }
  m.write(dir / "manifest");
  return m;
}

void DatasetManifest::write(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FieldIoError(FieldIoError::Kind::open_failed, "cannot write " + path.string());
  os.precision(17);
  os << "# dataset manifest\n";
  os << "pde=" << PdeSpec::kind_name(pde.kind) << "\n";
  os << "helmholtz_k=" << pde.k << "\n";
  os << "nx=" << pde.grid.nx << "\n";
  os << "ny=" << pde.grid.ny << "\n";
  os << "prior=" << prior.to_string() << "\n";
  os << "n=" << n << "\n";
  os << "seed=" << seed << "\n";
  os << "channels=" << mean.size() << "\n";
  for (std::size_t c = 0; c < mean.size(); ++c) {
    os << "channel" << c << "_mean=" << mean[c] << "\n";
    os << "channel" << c << "_std=" << stddev[c] << "\n";
  }
  if (!os) throw FieldIoError(FieldIoError::Kind::write_failed, "failed writing " + path.string());
}

DatasetManifest DatasetManifest::read(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FieldIoError(FieldIoError::Kind::open_failed, "cannot open " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InvalidArgument("malformed manifest line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw InvalidArgument("manifest lacks key '" + key + "'");
    return it->second;
  };
  DatasetManifest m;
  m.pde.kind = PdeSpec::parse_kind(get("pde"));
  m.pde.k = std::stod(get("helmholtz_k"));
  m.pde.grid = Grid2D(std::stoi(get("nx")), std::stoi(get("ny")));
  m.prior = CovarianceSpec::parse(get("prior"));
  m.n = std::stoull(get("n"));
  m.seed = std::stoull(get("seed"));
  const int channels = std::stoi(get("channels"));
  for (int c = 0; c < channels; ++c) {
    m.mean.push_back(std::stod(get("channel" + std::to_string(c) + "_mean")));
    m.stddev.push_back(std::stod(get("channel" + std::to_string(c) + "_std")));
  }
  return m;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  d.manifest = DatasetManifest::read(dir / "manifest");
  d.samples.resize(d.manifest.n);
  for (std::size_t i = 0; i < d.manifest.n; ++i) d.samples[i] = read_field(sample_path(dir, i));
  return d;
}

namespace {

Field affine_channels(const Field& f, const DatasetManifest& m, bool forward) {
  if (static_cast<std::size_t>(f.channels()) != m.mean.size()) {
    throw ShapeError("field has " + std::to_string(f.channels()) + " channels, manifest " + std::to_string(m.mean.size()));
  }
  Field out = f;
  for (int c = 0; c < f.channels(); ++c) {
    const double mu = m.mean[static_cast<std::size_t>(c)];
    const double sd = m.stddev[static_cast<std::size_t>(c)] > 0.0 ? m.stddev[static_cast<std::size_t>(c)] : 1.0;
    for (auto& v : out.channel(c)) v = forward ? (v - mu) / sd : v * sd + mu;
  }
  return out;
}

}  // namespace

Field normalize(const Field& f, const DatasetManifest& m) { return affine_channels(f, m, true); }
Field denormalize(const Field& f, const DatasetManifest& m) { return affine_channels(f, m, false); }

}  // namespace fundps
