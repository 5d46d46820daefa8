#include "fundps/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "fundps/parallel.hpp"
#include "fundps/rng.hpp"

namespace fundps {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be positive");
  if (!(sigma_min > 0.0 && sigma_min < sigma_max)) throw InvalidArgument("need 0 < sigma_min < sigma_max");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("dropout must lie in [0, 1)");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (warmup_samples < 0.0 || ema_half_life_samples < 0.0) throw InvalidArgument("warmup and EMA half-life must be >= 0");
  if (curriculum.empty()) throw InvalidArgument("curriculum must have at least one stage");
  for (std::size_t k = 0; k < curriculum.size(); ++k) {
    if (curriculum[k].resolution < 4 || curriculum[k].epochs < 0) throw InvalidArgument("invalid curriculum stage");
    if (k > 0 && curriculum[k].resolution < curriculum[k - 1].resolution) {
      throw InvalidArgument("curriculum resolutions must be nondecreasing");
    }
  }
  noise.validate();
}

double sample_sigma(std::mt19937_64& rng, double sigma_min, double sigma_max) {
  std::uniform_real_distribution<double> u(std::log(sigma_min), std::log(sigma_max));
  return std::exp(u(rng));
}

double loss_weight(double sigma, double sigma_data) {
  return (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma * sigma_data * sigma_data);
}

NoiseDraw draw_noise(const std::vector<Field>& batch, std::mt19937_64& rng, const TrainConfig& cfg) {
  NoiseDraw d;
  std::vector<std::uint64_t> seeds;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    d.sigma.push_back(sample_sigma(rng, cfg.sigma_min, cfg.sigma_max));
    seeds.push_back(rng());
  }
  d.noise.resize(batch.size());
  parallel_for(batch.size(), [&](std::size_t b) {
    const GrfSampler g(cfg.noise, batch[b].grid());
    d.noise[b] = g.sample(seeds[b], d.sigma[b], batch[b].channels());
  });
  return d;
}

namespace {

ad::Shape batch_shape(const std::vector<Field>& batch) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  const Field& f = batch.front();
  for (const auto& b : batch) {
    if (b.grid() != f.grid() || b.channels() != f.channels()) throw ShapeError("batch fields differ in grid or channels");
  }
  return ad::Shape{static_cast<int>(batch.size()), f.channels(), f.grid().ny, f.grid().nx};
}

std::vector<double> stack(const std::vector<Field>& fields) {
  std::vector<double> out;
  out.reserve(fields.size() * fields.front().size());
  for (const auto& f : fields) out.insert(out.end(), f.values().begin(), f.values().end());
  return out;
}

// Records the weighted loss; returns the scalar and per-sample contributions.
struct LossTrace {
  ad::Var loss;
  std::vector<double> per_sample;
};

LossTrace record_loss(ad::Tape& t, const DenoiserModel& model, const std::vector<Field>& clean, const NoiseDraw& noise,
                      const ForwardOptions& opts, std::vector<ad::Var>* params) {
  const ad::Shape s = batch_shape(clean);
  std::vector<double> noisy = stack(clean);
  const std::vector<double> eta = stack(noise.noise);
  for (std::size_t k = 0; k < noisy.size(); ++k) noisy[k] += eta[k];
  auto tr = model.trace(t, t.constant(s, std::move(noisy)), noise.sigma, opts);
  if (params) *params = tr.params;
  const ad::Var diff = ad::sub(tr.output, t.constant(s, stack(clean)));
  const double per = static_cast<double>(s.c) * s.h * s.w;
  std::vector<double> w(static_cast<std::size_t>(s.n));
  for (int b = 0; b < s.n; ++b) w[b] = std::sqrt(loss_weight(noise.sigma[b], model.config().sigma_data) / (per * s.n));
  LossTrace lt;
  lt.loss = ad::squared_l2(ad::mul(diff, t.constant(ad::Shape{s.n, 1, 1, 1}, w)));
  const auto dv = diff.value();
  const std::size_t n_per = static_cast<std::size_t>(per);
  for (int b = 0; b < s.n; ++b) {
    double acc = 0.0;
    for (std::size_t k = 0; k < n_per; ++k) acc += dv[b * n_per + k] * dv[b * n_per + k];
    lt.per_sample.push_back(loss_weight(noise.sigma[b], model.config().sigma_data) * acc / per);
  }
  return lt;
}

}  // namespace

double denoising_loss(const DenoiserModel& model, const std::vector<Field>& clean, const NoiseDraw& noise, bool use_ema) {
  ad::Tape t;
  ForwardOptions opts;
  opts.use_ema = use_ema;
  return record_loss(t, model, clean, noise, opts, nullptr).loss.scalar();
}

double evaluation_loss(const DenoiserModel& model, const std::vector<Field>& samples, const TrainConfig& cfg,
                       std::uint64_t seed, bool use_ema) {
  constexpr int kLevels = 8;
  double total = 0.0;
  const std::size_t chunk = 16;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<Field> batch(samples.begin() + static_cast<std::ptrdiff_t>(start),
                             samples.begin() + static_cast<std::ptrdiff_t>(std::min(samples.size(), start + chunk)));
    NoiseDraw d;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const std::size_t i = start + b;
      const double frac = static_cast<double>(i % kLevels) / (kLevels - 1);
      const double sigma = std::exp(std::log(cfg.sigma_min) + frac * (std::log(cfg.sigma_max) - std::log(cfg.sigma_min)));
      d.sigma.push_back(sigma);
      d.noise.push_back(GrfSampler(cfg.noise, batch[b].grid()).sample(derive_seed(seed, i), sigma, batch[b].channels()));
    }
    total += denoising_loss(model, batch, d, use_ema) * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(samples.size());
}

StepResult train_step(DenoiserModel& model, const std::vector<Field>& batch, std::mt19937_64& rng,
                      const TrainConfig& cfg, AdamState& adam, TrainSchedule& schedule) {
  const NoiseDraw noise = draw_noise(batch, rng, cfg);
  ad::Tape t;
  ForwardOptions opts;
  opts.trainable = true;
  opts.dropout = cfg.dropout;
  opts.rng = &rng;
  std::vector<ad::Var> params;
  const LossTrace lt = record_loss(t, model, batch, noise, opts, &params);

  StepResult r;
  r.loss = lt.loss.scalar();
  r.sigma = noise.sigma;
  r.per_sample_loss = lt.per_sample;
  if (!std::isfinite(r.loss)) {
    std::size_t bad = 0;
    while (bad < lt.per_sample.size() && std::isfinite(lt.per_sample[bad])) ++bad;
    const double s = bad < noise.sigma.size() ? noise.sigma[bad] : noise.sigma.front();
    throw TrainingError("non-finite loss at step " + std::to_string(adam.step) + ", batch entry " + std::to_string(bad) +
                        ", sigma " + std::to_string(s));
  }

  t.backward(lt.loss);
  auto& raw = model.parameters();
  if (adam.m.empty()) {
    for (const auto& p : raw) {
      adam.m.emplace_back(p.values.size(), 0.0);
      adam.v.emplace_back(p.values.size(), 0.0);
    }
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double bsz = static_cast<double>(batch.size());
  ++adam.step;
  schedule.samples_seen += bsz;
  const double warm = schedule.warmup_samples > 0.0 ? std::min(1.0, schedule.samples_seen / schedule.warmup_samples) : 1.0;
  const double lr = cfg.learning_rate * warm;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam.step));
  for (std::size_t k = 0; k < raw.size(); ++k) {
    const auto& g = t.node(params[k].id).grad;
    if (g.empty()) continue;
    auto& m = adam.m[k];
    auto& v = adam.v[k];
    auto& w = raw[k].values;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }

  const double decay = std::isinf(schedule.ema_half_life_samples) ? 1.0 : std::pow(0.5, bsz / schedule.ema_half_life_samples);
  auto& ema = model.ema_parameters();
  for (std::size_t k = 0; k < raw.size(); ++k) {
    for (std::size_t i = 0; i < raw[k].values.size(); ++i) {
      ema[k].values[i] = decay * ema[k].values[i] + (1.0 - decay) * raw[k].values[i];
    }
  }
  return r;
}

double estimate_sigma_data(const std::vector<Field>& samples) {
  double sum = 0.0, sq = 0.0, n = 0.0;
  for (const auto& f : samples) {
    for (double v : f.values()) {
      sum += v;
      sq += v * v;
      n += 1.0;
    }
  }
  if (n == 0.0) throw InvalidArgument("no samples to estimate sigma_data from");
  const double mean = sum / n;
  return std::sqrt(std::max(sq / n - mean * mean, 1e-12));
}

namespace {

const char* sigma_bucket(double s) {
  if (s < 0.05) return "lt0.05";
  if (s < 1.0) return "0.05-1";
  if (s < 10.0) return "1-10";
  return "ge10";
}

}  // namespace

TrainReport train_curriculum(DenoiserModel& model, const Dataset& data, const TrainConfig& cfg,
                             const std::filesystem::path& out_dir) {
  cfg.validate();
  if (data.samples.empty()) throw InvalidArgument("dataset is empty");
  for (const auto& st : cfg.curriculum) model.config().check_resolution(st.resolution, st.resolution);
  std::filesystem::create_directories(out_dir);

  std::vector<Field> normalized;
  normalized.reserve(data.samples.size());
  for (const auto& s : data.samples) normalized.push_back(normalize(s, data.manifest));

  double total = 0.0;
  for (const auto& st : cfg.curriculum) total += static_cast<double>(st.epochs) * static_cast<double>(normalized.size());
  if (cfg.max_steps > 0) total = std::min(total, static_cast<double>(cfg.max_steps) * cfg.batch_size);
  TrainSchedule schedule;
  schedule.warmup_samples = cfg.warmup_samples > 0.0 ? cfg.warmup_samples : std::max(1.0, 0.1 * total);
  schedule.ema_half_life_samples = cfg.ema_half_life_samples > 0.0 ? cfg.ema_half_life_samples : std::max(1.0, 0.05 * total);

  TrainReport report;
  report.checkpoint = out_dir / "model.ckpt";
  report.log = out_dir / "train_log.csv";
  std::ofstream log(report.log, std::ios::trunc);
  if (!log) throw TrainingError("cannot write " + report.log.string());
  log << "step,sigma_bucket,loss,ema_loss,seconds\n";
  log.precision(8);

  std::mt19937_64 rng(derive_seed(cfg.seed, 0x7a11));
  AdamState adam;
  double smoothed = std::numeric_limits<double>::quiet_NaN();
  const auto t0 = std::chrono::steady_clock::now();
  bool stop = false;

  for (std::size_t si = 0; si < cfg.curriculum.size() && !stop; ++si) {
    const CurriculumStage& st = cfg.curriculum[si];
    const Grid2D grid(st.resolution, st.resolution);
    std::vector<Field> stage(normalized.size());
    parallel_for(normalized.size(), [&](std::size_t i) { stage[i] = resample(normalized[i], grid, cfg.resample); });

    const std::size_t probe = std::min<std::size_t>(stage.size(), 64);
    report.stage_initial_loss.push_back(
        evaluation_loss(model, std::vector<Field>(stage.begin(), stage.begin() + static_cast<std::ptrdiff_t>(probe)), cfg,
                        derive_seed(cfg.seed, 0xe7a1)));

    std::vector<std::size_t> order(stage.size());
    for (int epoch = 0; epoch < st.epochs && !stop; ++epoch) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        std::vector<Field> batch;
        for (std::size_t k = start; k < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++k) {
          batch.push_back(stage[order[k]]);
        }
        const StepResult r = train_step(model, batch, rng, cfg, adam, schedule);
        report.step_loss.push_back(r.loss);
        smoothed = std::isnan(smoothed) ? r.loss : 0.98 * smoothed + 0.02 * r.loss;
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::map<std::string, std::pair<double, int>> buckets;
        for (std::size_t b = 0; b < r.sigma.size(); ++b) {
          auto& e = buckets[sigma_bucket(r.sigma[b])];
          e.first += r.per_sample_loss[b];
          e.second += 1;
        }
        for (const auto& [name, e] : buckets) {
          log << adam.step << "," << name << "," << e.first / e.second << "," << smoothed << "," << secs << "\n";
        }
        if (cfg.max_steps > 0 && adam.step >= cfg.max_steps) {
          stop = true;
          break;
        }
      }
    }
  }
  report.steps = adam.step;
  report.samples_seen = schedule.samples_seen;
  report.final_ema_loss = smoothed;
  model.save(report.checkpoint);
  return report;
}

TrainReport train_curriculum(DenoiserModel& model, const std::filesystem::path& dataset_dir, const TrainConfig& cfg,
                             const std::filesystem::path& out_dir) {
  return train_curriculum(model, load_dataset(dataset_dir), cfg, out_dir);
}

}  // namespace fundps
