#include "fundps/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "fundps/rng.hpp"

namespace fundps {

// ---- schedules -----------------------------------------------------------------------

SigmaSchedule SigmaSchedule::from_list(std::vector<double> sigmas, bool terminal_zero) {
  if (sigmas.empty()) throw InvalidArgument("empty sigma schedule");
  for (std::size_t k = 0; k < sigmas.size(); ++k) {
    if (!(sigmas[k] > 0.0) || !std::isfinite(sigmas[k])) throw InvalidArgument("schedule levels must be positive and finite");
    if (k > 0 && !(sigmas[k] < sigmas[k - 1])) throw InvalidArgument("schedule must be strictly decreasing");
  }
  SigmaSchedule s;
  s.n = static_cast<int>(sigmas.size());
  s.sigma_max = sigmas.front();
  s.sigma_min = sigmas.back();
  if (terminal_zero) sigmas.push_back(0.0);
  if (sigmas.size() < 2) throw InvalidArgument("schedule needs at least one step");
  s.sigmas = std::move(sigmas);
  return s;
}

SigmaSchedule karras_schedule(int n, double sigma_min, double sigma_max, double rho) {
  if (n < 2) throw InvalidArgument("karras schedule needs N >= 2");
  if (!(sigma_min > 0.0 && sigma_min < sigma_max) || !(rho > 0.0)) throw InvalidArgument("invalid karras parameters");
  const double a = std::pow(sigma_max, 1.0 / rho), b = std::pow(sigma_min, 1.0 / rho);
  std::vector<double> s(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) s[static_cast<std::size_t>(i)] = std::pow(a + static_cast<double>(i) / (n - 1) * (b - a), rho);
  // Pin the endpoints against rounding in pow(pow(x, 1/rho), rho).
  s.front() = sigma_max;
  s.back() = sigma_min;
  SigmaSchedule out = SigmaSchedule::from_list(std::move(s));
  out.rho = rho;
  return out;
}

ObsLoss parse_obs_loss(const std::string& name) {
  if (name == "mse") return ObsLoss::mse;
  if (name == "l2") return ObsLoss::l2;
  throw InvalidArgument("unknown observation loss '" + name + "'");
}

std::string obs_loss_name(ObsLoss l) { return l == ObsLoss::mse ? "mse" : "l2"; }

// ---- guidance -------------------------------------------------------------------------

void GuidanceTask::validate() const {
  if (obs_weight < 0.0 || pde_weight < 0.0) throw InvalidArgument("guidance weights must be >= 0");
  if (observed.size() != mask.count()) {
    throw InvalidArgument("observation vector has " + std::to_string(observed.size()) + " entries, mask selects " +
                          std::to_string(mask.count()));
  }
  if (!(huber_delta > 0.0) || !(residual_scale > 0.0)) throw InvalidArgument("huber delta and residual scale must be positive");
  if (pde && pde_weight > 0.0 && mask.channels() != 2) throw InvalidArgument("PDE guidance needs the joint (a, u) field");
}

double effective_weight(double zeta, double sigma) { return sigma < 1.0 ? sigma * zeta : zeta; }

namespace {

bool obs_active(const GuidanceTask& t, double sigma) {
  return t.mask.count() > 0 && effective_weight(t.obs_weight, sigma) > 0.0;
}

bool pde_active(const GuidanceTask& t, double sigma) {
  return t.pde.has_value() && sigma < t.pde_active_below_sigma && effective_weight(t.pde_weight, sigma) > 0.0;
}

ad::Var physical_residual(ad::Tape& t, const GuidanceTask& task, ad::Var den) {
  const ad::Shape s = den.shape();
  const PdeSpec& pde = *task.pde;
  std::vector<double> mean(2, 0.0), stdev(2, 1.0);
  for (std::size_t c = 0; c < 2; ++c) {
    if (c < task.channel_mean.size()) mean[c] = task.channel_mean[c];
    if (c < task.channel_std.size()) stdev[c] = task.channel_std[c];
  }
  const ad::Var phys = ad::add(ad::mul(den, t.constant(ad::Shape{1, 2, 1, 1}, stdev)), t.constant(ad::Shape{1, 2, 1, 1}, mean));
  const ad::Var a = ad::slice_channels(phys, 0, 1);
  const ad::Var u = ad::slice_channels(phys, 1, 1);
  const Grid2D g(s.w, s.h);
  ad::Var r;
  switch (pde.kind) {
    case PdeSpec::Kind::poisson: r = ad::sub(ad::laplacian(u, g), a); break;
    case PdeSpec::Kind::helmholtz: r = ad::sub(ad::add(ad::laplacian(u, g), ad::scale(u, pde.k * pde.k)), a); break;
    case PdeSpec::Kind::darcy: r = ad::affine(ad::darcy_operator(a, u, g), 1.0, -1.0); break;
  }
  std::vector<double> interior(g.size(), 0.0);
  for (int i = 1; i < g.ny - 1; ++i) {
    for (int j = 1; j < g.nx - 1; ++j) interior[static_cast<std::size_t>(i) * g.nx + j] = 1.0 / task.residual_scale;
  }
  return ad::mul(r, t.constant(ad::Shape{1, 1, g.ny, g.nx}, std::move(interior)));
}

}  // namespace

ad::Var guidance_loss(ad::Tape& t, const GuidanceTask& task, ad::Var den, double sigma) {
  const ad::Shape s = den.shape();
  if (s.n != 1 || s.c != task.mask.channels() || s.h != task.mask.grid().ny || s.w != task.mask.grid().nx) {
    throw ShapeError("guidance: field " + ad::to_string(s) + " does not match the task mask");
  }
  ad::Var total = t.constant(ad::Shape{}, {0.0});
  if (obs_active(task, sigma)) {
    const ad::Var r = ad::sub(ad::gather(den, task.mask.indices()),
                              t.constant(ad::Shape{1, 1, 1, static_cast<int>(task.observed.size())}, task.observed));
    const ad::Var l = task.obs_loss == ObsLoss::mse ? ad::scale(ad::squared_l2(r), 1.0 / static_cast<double>(task.observed.size()))
                                                    : ad::norm_l2(r);
    total = ad::add(total, ad::scale(l, effective_weight(task.obs_weight, sigma)));
  }
  if (pde_active(task, sigma)) {
    const ad::Var r = physical_residual(t, task, den);
    const double n_interior = static_cast<double>(s.h - 2) * (s.w - 2);
    const ad::Var l = ad::scale(ad::huber(r, task.huber_delta), 1.0 / n_interior);
    total = ad::add(total, ad::scale(l, effective_weight(task.pde_weight, sigma)));
  }
  return total;
}

GuidedEval evaluate_guidance(const Denoiser& d, const GuidanceTask& task, const Field& a, double sigma) {
  if (!(sigma > 0.0)) throw InvalidArgument("guidance needs sigma > 0");
  GuidedEval ev;
  if (!obs_active(task, sigma) && !pde_active(task, sigma)) {
    ev.denoised = d.denoise(a, sigma);
    ev.gradient = Field(a.grid(), a.channels());
    return ev;
  }
  ad::Tape t;
  const ad::Var x = t.variable(a);
  const ad::Var den = d.denoise(t, x, sigma);
  const ad::Var loss = guidance_loss(t, task, den, sigma);
  ev.loss = loss.scalar();
  ev.denoised = Field(a.grid(), a.channels(), std::vector<double>(den.value().begin(), den.value().end()));
  ev.gradient = Field(a.grid(), a.channels(), ad::grad(t, loss, x));
  return ev;
}

Field guidance_gradient(const Denoiser& d, const GuidanceTask& task, const Field& a, double sigma) {
  return evaluate_guidance(d, task, a, sigma).gradient;
}

// ---- sampling -------------------------------------------------------------------------

namespace {

void check_divergence(const Field& a, std::size_t step, double sigma) {
  double peak = 0.0;
  for (double v : a.values()) {
    if (!std::isfinite(v)) {
      throw DivergenceError(step, sigma, "non-finite state at step " + std::to_string(step) + " (sigma " + std::to_string(sigma) +
                                             "); the guidance weight is likely too large");
    }
    peak = std::max(peak, std::abs(v));
  }
  if (peak > kDivergenceBound) {
    throw DivergenceError(step, sigma, "state magnitude " + std::to_string(peak) + " at step " + std::to_string(step) +
                                           " (sigma " + std::to_string(sigma) + "); the guidance weight is likely too large");
  }
}

// x + alpha * y, elementwise.
Field axpy(const Field& x, double alpha, const Field& y) {
  Field out = x;
  auto o = out.values();
  auto yv = y.values();
  for (std::size_t k = 0; k < o.size(); ++k) o[k] += alpha * yv[k];
  return out;
}

}  // namespace

Field fundps_run(const Denoiser& d, const GuidanceTask& task, const SigmaSchedule& schedule, Field a) {
  task.validate();
  if (a.channels() != task.mask.channels() || a.grid() != task.mask.grid()) throw ShapeError("state does not match the task");
  const auto& sig = schedule.sigmas;
  for (std::size_t i = 0; i + 1 < sig.size(); ++i) {
    const double s = sig[i], sn = sig[i + 1];
    Field next, grad;
    if (sn != 0.0) {
      const Field den = d.denoise(a, s);
      Field di = axpy(a, -1.0, den);
      for (auto& v : di.values()) v /= s;
      const Field euler = axpy(a, sn - s, di);
      const GuidedEval ev = evaluate_guidance(d, task, euler, sn);
      Field dp = axpy(euler, -1.0, ev.denoised);
      for (auto& v : dp.values()) v /= sn;
      next = a;
      auto nv = next.values();
      auto dv = di.values();
      auto pv = dp.values();
      for (std::size_t k = 0; k < nv.size(); ++k) nv[k] += (sn - s) * 0.5 * (dv[k] + pv[k]);
      grad = ev.gradient;
    } else {
      const GuidedEval ev = evaluate_guidance(d, task, a, s);
      Field di = axpy(a, -1.0, ev.denoised);
      for (auto& v : di.values()) v /= s;
      next = axpy(a, sn - s, di);
      grad = ev.gradient;
    }
    a = axpy(next, -1.0, grad);
    check_divergence(a, i, s);
  }
  return a;
}

Field fundps_sample(const Denoiser& d, const GuidanceTask& task, const SigmaSchedule& schedule,
                    const CovarianceSpec& noise, const Grid2D& grid, std::uint64_t seed) {
  const GrfSampler g(noise, grid);
  return fundps_run(d, task, schedule, g.sample(seed, schedule.sigmas.front(), d.channels()));
}

// ---- ReNoise ----------------------------------------------------------------------------

void ReNoiseConfig::validate() const {
  if (!(low_fraction >= 0.0 && low_fraction <= 1.0)) throw InvalidArgument("low_fraction must lie in [0, 1]");
  if (!(sigma2_max >= 1.0 && sigma2_max <= 10.0)) throw InvalidArgument("sigma2_max must lie in [1, 10]");
  if (!(sigma1_min > 0.0 && sigma1_min <= sigma2_max)) throw InvalidArgument("need 0 < sigma1_min <= sigma2_max");
  if (total_steps < 2) throw InvalidArgument("total_steps must be >= 2");
  if (!(sigma_min > 0.0 && sigma_min < sigma2_max && sigma1_min < sigma_max)) throw InvalidArgument("inconsistent sigma bounds");
}

GuidanceTask coarsen_task(const GuidanceTask& task, const Grid2D& coarse) {
  const Grid2D& fine = task.mask.grid();
  if (coarse == fine) return task;
  GuidanceTask out = task;
  out.mask = Mask(coarse, task.mask.channels());
  std::map<std::size_t, std::pair<double, int>> acc;  // coarse flat index -> (sum, count)
  const auto idx = task.mask.indices();
  const std::size_t plane = fine.size();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const int c = static_cast<int>(idx[k] / plane);
    const int i = static_cast<int>((idx[k] % plane) / static_cast<std::size_t>(fine.nx));
    const int j = static_cast<int>(idx[k] % static_cast<std::size_t>(fine.nx));
    const int ci = i * coarse.ny / fine.ny, cj = j * coarse.nx / fine.nx;
    auto& e = acc[(static_cast<std::size_t>(c) * coarse.ny + ci) * coarse.nx + cj];
    e.first += task.observed[k];
    e.second += 1;
    out.mask.set(c, ci, cj, true);
  }
  out.observed.clear();
  for (const auto& [pos, e] : acc) out.observed.push_back(e.first / e.second);  // map order = mask order
  return out;
}

Field renoise_sample(const Denoiser& d, const GuidanceTask& task, const ReNoiseConfig& cfg, const CovarianceSpec& noise,
                     const Grid2D& target, std::uint64_t seed) {
  cfg.validate();
  const int n1 = static_cast<int>(std::lround(cfg.low_fraction * cfg.total_steps));
  const int n2 = cfg.total_steps - n1;
  if (n1 == 0) {
    return fundps_sample(d, task, karras_schedule(cfg.total_steps, cfg.sigma_min, cfg.sigma_max, cfg.rho), noise, target, seed);
  }
  if (n2 < 2) throw InvalidArgument("ReNoise leaves fewer than 2 steps for the target resolution");

  // Stage 1: n1 Heun steps from sigma_max down to sigma1_min at low resolution.
  SigmaSchedule s1 = karras_schedule(n1 + 1, cfg.sigma1_min, cfg.sigma_max, cfg.rho);
  s1.sigmas.pop_back();
  const Field low = fundps_sample(d, coarsen_task(task, cfg.low_res), s1, noise, cfg.low_res, seed);

  // Upscale and top the noise up to sigma2_max with fresh GRF noise.
  Field a = resample(low, target, cfg.upscale);
  const double extra = std::sqrt(std::max(0.0, cfg.sigma2_max * cfg.sigma2_max - cfg.sigma1_min * cfg.sigma1_min));
  if (extra > 0.0) {
    const Field eta = GrfSampler(noise, target).sample(derive_seed(seed, 0x2e), extra, a.channels());
    a = axpy(a, 1.0, eta);
  }

  // Stage 2: the tail schedule at the target resolution.
  const SigmaSchedule s2 = karras_schedule(n2, cfg.sigma_min, cfg.sigma2_max, cfg.rho);
  return fundps_run(d, task, s2, std::move(a));
}

// ---- tasks ------------------------------------------------------------------------------

TaskKind parse_task_kind(const std::string& name) {
  if (name == "forward") return TaskKind::forward;
  if (name == "inverse") return TaskKind::inverse;
  if (name == "recover") return TaskKind::recover;
  throw InvalidArgument("unknown task '" + name + "'");
}

std::string task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::forward: return "forward";
    case TaskKind::inverse: return "inverse";
    case TaskKind::recover: return "recover";
  }
  return "?";
}

GuidanceDefaults default_guidance(PdeSpec::Kind pde, TaskKind kind) {
  const bool inverse = kind == TaskKind::inverse;
  switch (pde) {
    case PdeSpec::Kind::darcy: return {ObsLoss::mse, inverse ? 50000.0 : 10000.0, 0.0};
    case PdeSpec::Kind::poisson: return {ObsLoss::mse, inverse ? 20000.0 : 10000.0, 0.0};
    case PdeSpec::Kind::helmholtz: return inverse ? GuidanceDefaults{ObsLoss::l2, 5000.0, 1.0} : GuidanceDefaults{ObsLoss::mse, 10000.0, 1.0};
  }
  return {ObsLoss::mse, 0.0, 0.0};
}

Mask task_mask(TaskKind kind, const Grid2D& grid, double obs_fraction, std::uint64_t seed) {
  if (!(obs_fraction >= 0.0 && obs_fraction <= 1.0)) throw InvalidArgument("obs_fraction must lie in [0, 1]");
  Mask m(grid, 2);
  const std::size_t count = static_cast<std::size_t>(std::llround(obs_fraction * static_cast<double>(grid.size())));
  auto observe = [&](int c) {
    std::vector<std::size_t> order(grid.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < count; ++k) {
      m.set(c, static_cast<int>(order[k] / static_cast<std::size_t>(grid.nx)), static_cast<int>(order[k] % static_cast<std::size_t>(grid.nx)), true);
    }
  };
  if (kind != TaskKind::inverse) observe(0);
  if (kind != TaskKind::forward) observe(1);
  return m;
}

GuidanceTask solve_task(TaskKind kind, const Field& sample, double obs_fraction, std::uint64_t seed, const PdeSpec& pde,
                        const DatasetManifest& manifest) {
  if (sample.channels() != 2) throw ShapeError("tasks act on the joint (a, u) field");
  GuidanceTask t;
  t.mask = task_mask(kind, sample.grid(), obs_fraction, seed);
  t.observed = apply_mask(sample, t.mask);
  const GuidanceDefaults def = default_guidance(pde.kind, kind);
  t.obs_loss = def.obs_loss;
  t.obs_weight = def.obs_weight;
  t.pde_weight = def.pde_weight;
  t.pde = pde;
  t.pde->grid = sample.grid();
  t.channel_mean = manifest.mean;
  t.channel_std = manifest.stddev;
  // The Laplacian residual carries the units of a; the Darcy residual those of the unit forcing.
  t.residual_scale = pde.kind == PdeSpec::Kind::darcy ? 1.0 : (manifest.stddev.empty() ? 1.0 : manifest.stddev[0]);
  return t;
}

}  // namespace fundps
