#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include <boost/math/differentiation/finite_difference.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "doctest.h"
#include "fundps/fft.hpp"
#include "fundps/oracle.hpp"

using namespace fundps;
using namespace fundps::oracle;

namespace {

GaussianMixture1D random_mixture(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(1, 4);
  std::uniform_real_distribution<double> mean(-3.0, 3.0), var(0.0, 2.0), w(0.1, 1.0), c(0.2, 2.0);
  GaussianMixture1D gm;
  const int k = count(rng);
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    gm.weights.push_back(w(rng));
    total += gm.weights.back();
    gm.means.push_back(mean(rng));
    gm.variances.push_back(rng() % 4 == 0 ? 0.0 : var(rng));  // some point masses
  }
  for (auto& x : gm.weights) x /= total;
  gm.noise_variance = c(rng);
  return gm;
}

double normal_pdf(double x, double mean, double var) {
  return std::exp(-(x - mean) * (x - mean) / (2.0 * var)) / std::sqrt(2.0 * std::numbers::pi * var);
}

Eigen::VectorXd as_vector(const Field& f) { return Eigen::Map<const Eigen::VectorXd>(f.values().data(), static_cast<Eigen::Index>(f.size())); }

Mask random_mask(Grid2D g, double fraction, std::uint64_t seed) {
  Mask m(g, 1);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(g.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(g.size())));
  for (std::size_t k = 0; k < count; ++k) m.set(0, static_cast<int>(order[k]) / g.nx, static_cast<int>(order[k]) % g.nx, true);
  return m;
}

}  // namespace

TEST_CASE("tweedie closed forms") {
  GaussianMixture1D single{{1.0}, {0.0}, {1.0}, 1.0};
  GaussianMixture1D deltas{{0.5, 0.5}, {-1.0, 1.0}, {0.0, 0.0}, 1.0};
  for (double y = -5.0; y <= 5.0; y += 0.25) {
    CHECK(tweedie_posterior_mean(single, y) == doctest::Approx(y / 2.0).epsilon(1e-12).scale(1e-12));
    CHECK(tweedie_posterior_mean(deltas, y) == doctest::Approx(std::tanh(y)).epsilon(1e-12).scale(1e-12));
  }
}

TEST_CASE("tweedie identity holds against numerical differentiation for random mixtures") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> ys(-5.0, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    const GaussianMixture1D gm = random_mixture(rng);
    const double y = ys(rng);
    const double dlogp = boost::math::differentiation::finite_difference_derivative(
        [&](double t) { return std::log(gm.density(t)); }, y);
    const double mean = tweedie_posterior_mean(gm, y);
    CHECK(std::abs(mean - (y + gm.noise_variance * dlogp)) <= 1e-8);
    CHECK(gm.score(y) == doctest::Approx(dlogp).epsilon(1e-8).scale(1e-8));
  }
}

TEST_CASE("tweedie mean of a three-component mixture matches adaptive quadrature") {
  const GaussianMixture1D gm{{0.2, 0.5, 0.3}, {-2.0, 0.5, 3.0}, {0.3, 1.2, 0.5}, 0.8};
  const double y = 0.7;
  auto prior = [&](double x) {
    double p = 0.0;
    for (std::size_t k = 0; k < gm.weights.size(); ++k) p += gm.weights[k] * normal_pdf(x, gm.means[k], gm.variances[k]);
    return p;
  };
  auto joint = [&](double x) { return prior(x) * normal_pdf(y, x, gm.noise_variance); };
  using GK = boost::math::quadrature::gauss_kronrod<double, 61>;
  const double inf = std::numeric_limits<double>::infinity();
  const double z = GK::integrate(joint, -inf, inf, 15, 1e-12);
  const double first = GK::integrate([&](double x) { return x * joint(x); }, -inf, inf, 15, 1e-12);
  CHECK(std::abs(tweedie_posterior_mean(gm, y) - first / z) <= 1e-10);
  CHECK(gm.density(y) == doctest::Approx(z).epsilon(1e-10));
}

TEST_CASE("mixture validation") {
  CHECK_THROWS_AS((GaussianMixture1D{{0.5, 0.6}, {0, 1}, {1, 1}, 1.0}.validate()), InvalidArgument);
  CHECK_THROWS_AS((GaussianMixture1D{{1.0}, {0}, {-1}, 1.0}.validate()), InvalidArgument);
  CHECK_THROWS_AS((GaussianMixture1D{{1.0}, {0}, {1}, 0.0}.validate()), InvalidArgument);
}

TEST_CASE("exact denoiser: identity covariances, sigma zero, linearity and limits") {
  const Grid2D g(8, 8);
  auto lg = LinearGaussianProblem::make(g, CovarianceSpec::matern_op(3.0, 2.0), CovarianceSpec::rbf(0.1), Mask(g, 1), 0.0);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  Field x(g, 1), y(g, 1);
  for (auto& v : x.values()) v = nd(rng);
  for (auto& v : y.values()) v = nd(rng);

  CHECK(exact_denoiser(lg, x, 0.0) == x);
  const Field far = exact_denoiser(lg, x, 1e6);
  for (double v : far.values()) CHECK(std::abs(v) < 1e-8);
  Field comb(g, 1);
  for (std::size_t k = 0; k < comb.size(); ++k) comb.values()[k] = 2.0 * x.values()[k] - 0.5 * y.values()[k];
  const Field dx = exact_denoiser(lg, x, 0.7), dy = exact_denoiser(lg, y, 0.7), dc = exact_denoiser(lg, comb, 0.7);
  for (std::size_t k = 0; k < comb.size(); ++k) CHECK(dc.values()[k] == doctest::Approx(2.0 * dx.values()[k] - 0.5 * dy.values()[k]).epsilon(1e-12));

  lg.C = Eigen::MatrixXd::Identity(64, 64);
  lg.C_gamma = Eigen::MatrixXd::Identity(64, 64);
  for (double s : {0.1, 1.0, 5.0}) {
    const Field d = exact_denoiser(lg, x, s);
    for (std::size_t k = 0; k < x.size(); ++k) CHECK(d.values()[k] == doctest::Approx(x.values()[k] / (1.0 + s * s)).epsilon(1e-13));
  }
  lg.C.setZero();
  lg.C_gamma.setZero();
  CHECK_THROWS_AS(exact_denoiser(lg, x, 1.0), SingularSystemError);
}

TEST_CASE("exact denoiser matches per-mode shrinkage for stationary covariances") {
  const Grid2D g(16, 16);
  const auto prior = CovarianceSpec::matern_op(3.0, 2.0, 5.0), noise = CovarianceSpec::rbf(0.1);
  const auto lg = LinearGaussianProblem::make(g, prior, noise, Mask(g, 1), 0.0);
  const GrfSampler pc(prior, g), nc(noise, g);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  Field x(g, 1);
  for (auto& v : x.values()) v = nd(rng);
  for (double s : {0.05, 0.5, 3.0}) {
    const Field dense = exact_denoiser(lg, x, s);
    const int nh = fft::half_width(g.nx);
    std::vector<fft::cplx> spec(static_cast<std::size_t>(g.ny) * nh);
    fft::rfft2(x.values(), g.ny, g.nx, spec);
    for (int i = 0; i < g.ny; ++i) {
      for (int j = 0; j < nh; ++j) {
        const double lc = std::pow(pc.amplitude(i, j), 2), lgm = std::pow(nc.amplitude(i, j), 2);
        spec[static_cast<std::size_t>(i) * nh + j] *= lc / (lc + s * s * lgm);
      }
    }
    std::vector<double> ref(g.size());
    fft::irfft2(spec, g.ny, g.nx, ref);
    double worst = 0.0;
    for (std::size_t k = 0; k < ref.size(); ++k) worst = std::max(worst, std::abs(dense.values()[k] - ref[k]));
    CHECK(worst <= 1e-10);
  }
}

TEST_CASE("exact posterior limits and covariance") {
  const Grid2D g(8, 8);
  const auto prior = CovarianceSpec::matern_op(3.0, 2.0, 10.0);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  ObservationVector full(g.size());
  for (auto& v : full) v = nd(rng);

  auto all = LinearGaussianProblem::make(g, prior, prior, Mask(g, 1, true), 0.0);
  const Posterior p = exact_posterior(all, full);
  for (std::size_t k = 0; k < full.size(); ++k) CHECK(p.mean.values()[k] == doctest::Approx(full[k]).epsilon(1e-8).scale(1e-8));

  const auto none = LinearGaussianProblem::make(g, prior, prior, Mask(g, 1), 0.1);
  const Posterior q = exact_posterior(none, {});
  for (double v : q.mean.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(exact_posterior(none, {1.0}), ShapeError);

  const Mask m = random_mask(g, 0.1, 6);
  ObservationVector u(m.count());
  for (auto& v : u) v = nd(rng);
  const auto tiny = LinearGaussianProblem::make(g, prior, prior, m, 1e-6);
  const Posterior r = exact_posterior(tiny, u);
  const auto at_obs = apply_mask(r.mean, m);
  for (std::size_t k = 0; k < u.size(); ++k) CHECK(std::abs(at_obs[k] - u[k]) <= 1e-6);
  CHECK((r.cov - r.cov.transpose()).norm() == 0.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r.cov);
  CHECK(es.eigenvalues().minCoeff() >= -1e-10 * es.eigenvalues().maxCoeff());
}

TEST_CASE("posterior mean zeroes the gradient of the regularized least squares") {
  const Grid2D g(8, 8);
  const auto prior = CovarianceSpec::matern_op(3.0, 2.0, 10.0);
  const Mask m = random_mask(g, 0.2, 7);
  const double sn = 0.3;
  const auto lg = LinearGaussianProblem::make(g, prior, prior, m, sn);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd;
  ObservationVector u(m.count());
  for (auto& v : u) v = nd(rng);
  const Eigen::VectorXd a = as_vector(exact_posterior(lg, u).mean);
  const Eigen::MatrixXd M = lg.observation_matrix();
  const Eigen::VectorXd uv = Eigen::Map<const Eigen::VectorXd>(u.data(), static_cast<Eigen::Index>(u.size()));
  const Eigen::VectorXd prior_term = lg.C.ldlt().solve(a);
  const Eigen::VectorXd data_term = M.transpose() * (uv - M * a) / (sn * sn);
  const double scale = std::max(prior_term.cwiseAbs().maxCoeff(), data_term.cwiseAbs().maxCoeff());
  CHECK((prior_term - data_term).cwiseAbs().maxCoeff() <= 1e-8 * scale);
}

TEST_CASE("posterior mean agrees with a direct Monte-Carlo conditional sampler") {
  // Sampler in information form: precision P = C^-1 + M^T M / sn^2, mean P^-1 M^T u / sn^2.
  const Grid2D g(8, 8);
  const auto prior = CovarianceSpec::matern_op(3.0, 2.0, 10.0);
  const Mask m = random_mask(g, 0.1, 9);
  const double sn = 0.2;
  const auto lg = LinearGaussianProblem::make(g, prior, prior, m, sn);
  std::mt19937_64 rng(10);
  std::normal_distribution<double> nd;
  ObservationVector u(m.count());
  for (auto& v : u) v = nd(rng);
  const Eigen::MatrixXd M = lg.observation_matrix();
  const Eigen::VectorXd uv = Eigen::Map<const Eigen::VectorXd>(u.data(), static_cast<Eigen::Index>(u.size()));
  const Eigen::MatrixXd P = lg.C.inverse() + M.transpose() * M / (sn * sn);
  const Eigen::LLT<Eigen::MatrixXd> llt(P);
  const Eigen::VectorXd mu = llt.solve(M.transpose() * uv / (sn * sn));
  const Eigen::MatrixXd U = llt.matrixU();

  const int n = 1000000;
  const Eigen::Index d = mu.size();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(d), sq = Eigen::VectorXd::Zero(d), z(d);
  for (int s = 0; s < n; ++s) {
    for (Eigen::Index k = 0; k < d; ++k) z(k) = nd(rng);
    const Eigen::VectorXd dev = U.triangularView<Eigen::Upper>().solve(z);  // cov = P^-1
    sum += dev;
    sq += dev.cwiseAbs2();
  }
  const Eigen::VectorXd mc = mu + sum / n;
  const Eigen::VectorXd se = (sq / n - (sum / n).cwiseAbs2()).cwiseSqrt() / std::sqrt(static_cast<double>(n));
  const Posterior p = exact_posterior(lg, u);
  const Eigen::VectorXd mean = as_vector(p.mean);
  int outside = 0;
  for (Eigen::Index k = 0; k < d; ++k) outside += std::abs(mc(k) - mean(k)) > 3.0 * se(k);
  CHECK(outside == 0);
  // The sampled variance also matches the closed-form posterior covariance diagonal.
  for (Eigen::Index k = 0; k < d; ++k) CHECK(sq(k) / n == doctest::Approx(p.cov(k, k)).epsilon(0.01));
}

TEST_CASE("tweedie resolution sweep passes at 8, 16 and 32") {
  const auto rows = verify_tweedie_resolution_sweep(CovarianceSpec::matern_op(3.0, 2.0), CovarianceSpec::rbf(0.05), {8, 16, 32},
                                                    {0.01, 1.0, 80.0});
  REQUIRE(rows.size() == 9);
  for (const auto& r : rows) {
    INFO("resolution " << r.resolution << " sigma " << r.sigma);
    CHECK(r.discrepancy <= 1e-8);
  }
  CHECK(sweep_is_resolution_stable(rows));

  const auto path = std::filesystem::temp_directory_path() / "fundps_test_sweep.csv";
  write_sweep_csv(rows, 1e-8, path);
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  CHECK(header == "resolution,sigma,max_abs_discrepancy,max_abs_score,pass");
  std::filesystem::remove(path);
}

TEST_CASE("sweep stability rule ignores round-off and flags real growth") {
  std::vector<SweepRow> rows{{8, 1.0, 1e-6, 1.0}, {16, 1.0, 1.4e-6, 1.0}, {32, 1.0, 2.0e-6, 1.0}};
  CHECK(sweep_is_resolution_stable(rows));
  rows[2].discrepancy = 2.2e-6;
  CHECK_FALSE(sweep_is_resolution_stable(rows));
  // below the relative floor 1e-12 * score_scale growth carries no information
  std::vector<SweepRow> roundoff{{8, 0.01, 1e-10, 1e4}, {16, 0.01, 5e-9, 1e4}};
  CHECK(sweep_is_resolution_stable(roundoff));
}

TEST_CASE("guided posterior check runs end to end on a small problem") {
  GuidedPosteriorCheck check;
  check.resolution = 8;
  check.chains = 16;
  check.steps = 40;
  const GuidedPosteriorResult r = run_guided_posterior_check(check);
  CHECK(std::isfinite(r.rel_l2));
  CHECK(r.chain_mean.grid() == Grid2D(8, 8));
  CHECK(r.obs_rms < 0.5);
  const GrfSampler unit(unit_variance_prior(Grid2D(8, 8)), Grid2D(8, 8));
  CHECK(unit.pointwise_variance() == doctest::Approx(1.0).epsilon(1e-12));
}
