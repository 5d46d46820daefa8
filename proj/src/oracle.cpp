#include "fundps/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "fundps/fft.hpp"
#include "fundps/parallel.hpp"
#include "fundps/rng.hpp"

namespace fundps::oracle {

// ---- 1-D mixtures -------------------------------------------------------------------

void GaussianMixture1D::validate() const {
  if (weights.empty() || weights.size() != means.size() || weights.size() != variances.size()) {
    throw InvalidArgument("mixture components must have matching weights, means and variances");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (!(weights[k] > 0.0)) throw InvalidArgument("mixture weights must be positive");
    if (variances[k] < 0.0) throw InvalidArgument("mixture variances must be >= 0");
    total += weights[k];
  }
  if (std::abs(total - 1.0) > 1e-12) throw InvalidArgument("mixture weights must sum to 1");
  if (!(noise_variance > 0.0)) throw InvalidArgument("noise variance must be positive");
}

namespace {

// ln(w_k N(y; m_k, v_k + c)) for every component.
std::vector<double> log_terms(const GaussianMixture1D& gm, double y) {
  std::vector<double> lt(gm.weights.size());
  for (std::size_t k = 0; k < lt.size(); ++k) {
    const double s2 = gm.variances[k] + gm.noise_variance;
    const double d = y - gm.means[k];
    lt[k] = std::log(gm.weights[k]) - 0.5 * std::log(2.0 * std::numbers::pi * s2) - 0.5 * d * d / s2;
  }
  return lt;
}

std::vector<double> responsibilities(const GaussianMixture1D& gm, double y) {
  auto lt = log_terms(gm, y);
  const double peak = *std::max_element(lt.begin(), lt.end());
  double total = 0.0;
  for (auto& v : lt) {
    v = std::exp(v - peak);
    total += v;
  }
  for (auto& v : lt) v /= total;
  return lt;
}

}  // namespace

double GaussianMixture1D::density(double y) const {
  double p = 0.0;
  for (double v : log_terms(*this, y)) p += std::exp(v);
  return p;
}

double GaussianMixture1D::score(double y) const {
  const auto r = responsibilities(*this, y);
  double s = 0.0;
  for (std::size_t k = 0; k < r.size(); ++k) s -= r[k] * (y - means[k]) / (variances[k] + noise_variance);
  return s;
}

double tweedie_posterior_mean(const GaussianMixture1D& gm, double y) {
  gm.validate();
  const auto r = responsibilities(gm, y);
  const double c = gm.noise_variance;
  double mean = 0.0;
  for (std::size_t k = 0; k < r.size(); ++k) mean += r[k] * (gm.means[k] * c + y * gm.variances[k]) / (gm.variances[k] + c);
  return mean;
}

// ---- linear-Gaussian ------------------------------------------------------------------

namespace {

Eigen::MatrixXd dense(const CovarianceSpec& spec, const Grid2D& grid) {
  if (grid.nx > kMaxOracleGrid || grid.ny > kMaxOracleGrid) {
    throw InvalidArgument("dense oracles are limited to " + std::to_string(kMaxOracleGrid) + "^2 grids");
  }
  const auto v = GrfSampler(spec, grid).dense_covariance();
  const auto n = static_cast<Eigen::Index>(grid.size());
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(v.data(), n, n);
}

Eigen::VectorXd as_vector(const Field& f) {
  return Eigen::Map<const Eigen::VectorXd>(f.values().data(), static_cast<Eigen::Index>(f.size()));
}

}  // namespace

LinearGaussianProblem LinearGaussianProblem::make(const Grid2D& grid, const CovarianceSpec& prior,
                                                  const CovarianceSpec& noise, const Mask& mask, double obs_noise) {
  if (mask.grid() != grid || mask.channels() != 1) throw ShapeError("mask must be single-channel on the problem grid");
  if (obs_noise < 0.0) throw InvalidArgument("observation noise must be >= 0");
  LinearGaussianProblem lg;
  lg.grid = grid;
  lg.prior = prior;
  lg.noise = noise;
  lg.mask = mask;
  lg.obs_noise = obs_noise;
  lg.C = dense(prior, grid);
  lg.C_gamma = dense(noise, grid);
  return lg;
}

Eigen::MatrixXd LinearGaussianProblem::observation_matrix() const {
  const auto idx = mask.indices();
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(grid.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) M(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(idx[k])) = 1.0;
  return M;
}

Eigen::MatrixXd denoiser_matrix(const Eigen::MatrixXd& C, const Eigen::MatrixXd& C_gamma, double sigma) {
  if (sigma == 0.0) return Eigen::MatrixXd::Identity(C.rows(), C.cols());
  const Eigen::MatrixXd K = C + sigma * sigma * C_gamma;
  Eigen::LLT<Eigen::MatrixXd> llt(K);
  if (llt.info() != Eigen::Success) throw SingularSystemError("C + sigma^2 C_gamma is not positive definite");
  // B = C K^{-1} = I - sigma^2 C_gamma K^{-1}. The second form keeps the
  // score (B - I) y / sigma^2 free of the 1/sigma^2 round-off amplification.
  Eigen::MatrixXd B = -sigma * sigma * llt.solve(C_gamma).transpose();
  B.diagonal().array() += 1.0;
  return B;
}

Field exact_denoiser(const LinearGaussianProblem& lg, const Field& a_t, double sigma) {
  if (a_t.grid() != lg.grid || a_t.channels() != 1) throw ShapeError("field does not live on the problem grid");
  const Eigen::VectorXd out = denoiser_matrix(lg.C, lg.C_gamma, sigma) * as_vector(a_t);
  return Field(lg.grid, 1, std::vector<double>(out.data(), out.data() + out.size()));
}

Posterior exact_posterior(const LinearGaussianProblem& lg, const ObservationVector& u) {
  if (u.size() != lg.mask.count()) throw ShapeError("observation vector does not match the mask");
  Posterior p;
  if (u.empty()) {
    p.mean = Field(lg.grid, 1);
    p.cov = lg.C;
    return p;
  }
  const Eigen::MatrixXd M = lg.observation_matrix();
  const Eigen::MatrixXd CMt = lg.C * M.transpose();
  Eigen::MatrixXd K = M * CMt;
  K.diagonal().array() += lg.obs_noise * lg.obs_noise;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(K);
  if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-14) throw SingularSystemError("M C M^T + sigma_n^2 I is singular");
  const Eigen::VectorXd uv = Eigen::Map<const Eigen::VectorXd>(u.data(), static_cast<Eigen::Index>(u.size()));
  const Eigen::VectorXd mean = CMt * ldlt.solve(uv);
  p.mean = Field(lg.grid, 1, std::vector<double>(mean.data(), mean.data() + mean.size()));
  p.cov = lg.C - CMt * ldlt.solve(CMt.transpose());
  const Eigen::MatrixXd sym = 0.5 * (p.cov + p.cov.transpose());
  p.cov = sym;
  return p;
}

namespace {

// b - A x with long double accumulation, rounded once per entry.
Eigen::VectorXd residual(const Eigen::MatrixXd& A, const Eigen::VectorXd& x, const Eigen::VectorXd& b) {
  Eigen::VectorXd r(b.size());
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    long double acc = b[i];
    // A is symmetric here; walking a column keeps the access contiguous.
    for (Eigen::Index j = 0; j < A.cols(); ++j) acc -= static_cast<long double>(A(j, i)) * x[j];
    r[i] = static_cast<double>(acc);
  }
  return r;
}

// x - s * A y, accumulated in long double.
Eigen::VectorXd minus_scaled_product(const Eigen::VectorXd& x, double s, const Eigen::MatrixXd& A, const Eigen::VectorXd& y) {
  Eigen::VectorXd out(x.size());
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    long double acc = 0.0L;
    for (Eigen::Index j = 0; j < A.cols(); ++j) acc += static_cast<long double>(A(j, i)) * y[j];
    out[i] = static_cast<double>(static_cast<long double>(x[i]) - static_cast<long double>(s) * acc);
  }
  return out;
}

constexpr int kRefinementSweeps = 3;

}  // namespace

GaussianDenoiserSolve::GaussianDenoiserSolve(const Eigen::MatrixXd& C, const Eigen::MatrixXd& C_gamma, double sigma,
                                             bool refined)
    : sigma_(sigma), refined_(refined) {
  if (sigma == 0.0) return;  // identity map
  if (!refined) {
    B_ = denoiser_matrix(C, C_gamma, sigma);
    return;
  }
  K_ = C + sigma * sigma * C_gamma;
  C_gamma_ = C_gamma;
  llt_.compute(K_);
  if (llt_.info() != Eigen::Success) throw SingularSystemError("C + sigma^2 C_gamma is not positive definite");
}

Eigen::VectorXd GaussianDenoiserSolve::solve(const Eigen::VectorXd& b) const {
  if (!refined_) throw InvalidArgument("solve() needs the refined form");
  Eigen::VectorXd z = llt_.solve(b);
  for (int it = 0; it < kRefinementSweeps; ++it) z += llt_.solve(residual(K_, z, b));
  return z;
}

Eigen::VectorXd GaussianDenoiserSolve::apply(const Eigen::VectorXd& x) const {
  if (sigma_ == 0.0) return x;
  if (!refined_) return B_ * x;
  return minus_scaled_product(x, sigma_ * sigma_, C_gamma_, solve(x));
}

Eigen::VectorXd GaussianDenoiserSolve::apply_transpose(const Eigen::VectorXd& g) const {
  if (sigma_ == 0.0) return g;
  if (!refined_) return B_.transpose() * g;
  const Eigen::VectorXd v = minus_scaled_product(Eigen::VectorXd::Zero(g.size()), -1.0, C_gamma_, g);
  const Eigen::VectorXd z = solve(v);
  return g - sigma_ * sigma_ * z;
}

std::shared_ptr<const GaussianDenoiserSolve> ExactGaussianDenoiser::solver(const Grid2D& grid, double sigma) const {
  std::lock_guard<std::mutex> lock(mutex_);
  const auto key = std::make_tuple(grid.nx, grid.ny, sigma);
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  auto git = grids_.find({grid.nx, grid.ny});
  if (git == grids_.end()) git = grids_.emplace(std::make_pair(grid.nx, grid.ny), GridMats{dense(prior_, grid), dense(noise_, grid)}).first;
  auto m = std::make_shared<const GaussianDenoiserSolve>(git->second.C, git->second.C_gamma, sigma, refined_);
  cache_.emplace(key, m);
  return m;
}

ad::Var ExactGaussianDenoiser::denoise(ad::Tape& tape, ad::Var y, std::span<const double> sigma) const {
  const ad::Shape s = y.shape();
  if (s.c != 1) throw ShapeError("the exact Gaussian denoiser is single-channel");
  if (sigma.size() != static_cast<std::size_t>(s.n)) throw ShapeError("one sigma per batch entry is required");
  const Grid2D grid(s.w, s.h);
  const auto per = static_cast<Eigen::Index>(s.plane());

  std::vector<std::shared_ptr<const GaussianDenoiserSolve>> ops;
  for (double v : sigma) ops.push_back(solver(grid, v));

  using CMap = Eigen::Map<const Eigen::VectorXd>;
  using Map = Eigen::Map<Eigen::VectorXd>;
  ad::Node n;
  n.op = "exact_gaussian_denoiser";
  n.shape = s;
  n.value.resize(s.size());
  for (int b = 0; b < s.n; ++b) {
    Map(n.value.data() + b * per, per) = ops[static_cast<std::size_t>(b)]->apply(CMap(y.node().value.data() + b * per, per));
  }
  const int id = y.id;
  n.backward = [id, ops, per](ad::Tape& tp, const ad::Node& self) {
    auto& g = tp.grad_buffer(id);
    for (std::size_t b = 0; b < ops.size(); ++b) {
      const auto off = static_cast<Eigen::Index>(b) * per;
      Map(g.data() + off, per) += ops[b]->apply_transpose(CMap(self.grad.data() + off, per));
    }
  };
  return tape.push(std::move(n), {id});
}

// ---- resolution sweep --------------------------------------------------------------------

std::vector<SweepRow> verify_tweedie_resolution_sweep(const CovarianceSpec& prior, const CovarianceSpec& noise,
                                                      const std::vector<int>& resolutions, const std::vector<double>& sigmas) {
  std::vector<SweepRow> rows;
  for (int r : resolutions) {
    const Grid2D grid(r, r);
    const ExactGaussianDenoiser den(prior, noise, true);
    const GrfSampler gp(prior, grid), gn(noise, grid);
    const auto& ap = gp.sqrt_spectrum();
    const auto& an = gn.sqrt_spectrum();
    const double n = static_cast<double>(grid.size());

    std::mt19937_64 rng(static_cast<std::uint64_t>(r));
    std::normal_distribution<double> nd;
    Field y(grid, 1);
    for (auto& v : y.values()) v = nd(rng);

    std::vector<fft::cplx> in(grid.size()), spec(grid.size()), back(grid.size());
    for (std::size_t k = 0; k < in.size(); ++k) in[k] = y.values()[k];
    fft::fft2(in, grid.ny, grid.nx, spec, false);

    for (double sigma : sigmas) {
      const Field s_dense = score_from_denoiser(den, y, sigma);
      // Covariance eigenvalue of mode k is N * amp_k^2 for both operators.
      for (std::size_t k = 0; k < spec.size(); ++k) {
        const double lam = n * ap[k] * ap[k], gam = n * an[k] * an[k];
        back[k] = spec[k] * (-gam / (lam + sigma * sigma * gam));
      }
      std::vector<fft::cplx> s_modes(grid.size());
      fft::fft2(back, grid.ny, grid.nx, s_modes, true);
      double disc = 0.0, scale = 0.0;
      for (std::size_t k = 0; k < s_modes.size(); ++k) {
        disc = std::max(disc, std::abs(s_modes[k].real() / n - s_dense.values()[k]));
        scale = std::max(scale, std::abs(s_modes[k].real() / n));
      }
      rows.push_back(SweepRow{r, sigma, disc, scale});
    }
  }
  return rows;
}

CovarianceSpec unit_variance_prior(const Grid2D& grid) {
  const double var = GrfSampler(CovarianceSpec::matern_op(3.0, 2.0), grid).pointwise_variance();
  return CovarianceSpec::matern_op(3.0, 2.0, 1.0 / std::sqrt(var));
}

GuidedPosteriorResult run_guided_posterior_check(const GuidedPosteriorCheck& check) {
  if (check.chains < 1 || check.steps < 2) throw InvalidArgument("need at least one chain and two steps");
  const Grid2D grid(check.resolution, check.resolution);
  const CovarianceSpec prior = check.prior ? *check.prior : unit_variance_prior(grid);

  const Field truth = GrfSampler(prior, grid).sample(derive_seed(check.seed, 1), 1.0);
  Mask mask(grid, 1);
  {
    std::vector<std::size_t> order(grid.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    Rng rng(derive_seed(check.seed, 2));
    std::shuffle(order.begin(), order.end(), rng);
    const auto count = static_cast<std::size_t>(std::lround(check.mask_fraction * static_cast<double>(grid.size())));
    for (std::size_t k = 0; k < count; ++k) {
      mask.set(0, static_cast<int>(order[k]) / grid.nx, static_cast<int>(order[k]) % grid.nx, true);
    }
  }
  ObservationVector u = apply_mask(truth, mask);
  {
    Rng rng(derive_seed(check.seed, 3));
    std::normal_distribution<double> nd;
    for (auto& v : u) v += check.obs_noise * nd(rng);
  }

  const auto lg = LinearGaussianProblem::make(grid, prior, check.noise, mask, check.obs_noise);
  GuidedPosteriorResult out;
  out.posterior_mean = exact_posterior(lg, u).mean;

  const ExactGaussianDenoiser den(prior, check.noise);
  GuidanceTask task;
  task.mask = mask;
  task.observed = u;
  task.obs_weight = check.zeta;
  const auto schedule = karras_schedule(check.steps);

  std::vector<Field> chains(static_cast<std::size_t>(check.chains));
  parallel_for(chains.size(), [&](std::size_t c) {
    const auto seed = derive_seed(check.seed, 100 + c);
    if (check.renoise) {
      ReNoiseConfig rc = *check.renoise;
      rc.total_steps = check.steps;
      chains[c] = renoise_sample(den, task, rc, check.noise, grid, seed);
    } else {
      chains[c] = fundps_sample(den, task, schedule, check.noise, grid, seed);
    }
  });

  out.chain_mean = Field(grid, 1);
  auto m = out.chain_mean.values();
  for (const auto& f : chains) {
    for (std::size_t k = 0; k < m.size(); ++k) m[k] += f.values()[k];
  }
  for (auto& v : m) v /= static_cast<double>(chains.size());

  double num = 0.0, den2 = 0.0;
  const auto pm = out.posterior_mean.values();
  for (std::size_t k = 0; k < m.size(); ++k) {
    num += (m[k] - pm[k]) * (m[k] - pm[k]);
    den2 += pm[k] * pm[k];
  }
  out.rel_l2 = std::sqrt(num / den2);
  const auto at_obs = apply_mask(out.chain_mean, mask);
  double rss = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) rss += (at_obs[k] - u[k]) * (at_obs[k] - u[k]);
  out.obs_rms = u.empty() ? 0.0 : std::sqrt(rss / static_cast<double>(u.size()));
  return out;
}

bool sweep_is_resolution_stable(const std::vector<SweepRow>& rows, double ratio, double rel_floor) {
  std::map<int, double> level;
  for (const auto& r : rows) {
    const double d = std::max(r.discrepancy, rel_floor * r.score_scale);
    level[r.resolution] = std::max(level[r.resolution], d);
  }
  double prev = -1.0;
  for (const auto& [res, d] : level) {
    if (prev >= 0.0 && d > ratio * prev) return false;
    prev = d;
  }
  return true;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, double tolerance, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw InvalidArgument("cannot write " + path.string());
  os.precision(6);
  os << "resolution,sigma,max_abs_discrepancy,max_abs_score,pass\n";
  for (const auto& r : rows) {
    os << r.resolution << "," << r.sigma << "," << std::scientific << r.discrepancy << "," << r.score_scale
       << std::defaultfloat << ","
       << (r.discrepancy <= tolerance ? "pass" : "fail") << "\n";
  }
}

}  // namespace fundps::oracle
