#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "cli.hpp"
#include "fundps/metrics.hpp"
#include "fundps/oracle.hpp"
#include "fundps/parallel.hpp"
#include "fundps/rng.hpp"
#include "fundps/sampler.hpp"
#include "fundps/training.hpp"

namespace fundps::cli {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << text;
}

fs::path start_run(const RunConfig& cfg) {
  const auto dir = make_run_dir(cfg.str("out"), cfg.seed());
  write_text(dir / "config.txt", cfg.to_text());
  return dir;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);) out.push_back(item);
  return out;
}

int to_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  int x = 0;
  try {
    x = std::stoi(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError("key '" + key + "': '" + v + "' is not an integer");
  return x;
}

std::vector<CurriculumStage> parse_curriculum(const std::string& text) {
  std::vector<CurriculumStage> stages;
  for (const auto& item : split(text, ',')) {
    const auto parts = split(item, ':');
    if (parts.size() != 2) throw ConfigError("key 'curriculum': expected resolution:epochs, got '" + item + "'");
    stages.push_back({to_int("curriculum", parts[0]), to_int("curriculum", parts[1])});
  }
  if (stages.empty()) throw ConfigError("key 'curriculum' is empty");
  return stages;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// ---- verify reports --------------------------------------------------------------

struct Check {
  std::string name;
  double value;
  double tolerance;
  bool pass;
};

bool write_report(const fs::path& path, const std::vector<Check>& checks) {
  std::ostringstream os;
  os.precision(6);
  os << "check,value,tolerance,pass\n";
  bool ok = true;
  for (const auto& c : checks) {
    os << c.name << "," << std::scientific << c.value << "," << c.tolerance << std::defaultfloat << ","
       << (c.pass ? "pass" : "fail") << "\n";
    ok = ok && c.pass;
  }
  write_text(path, os.str());
  return ok;
}

std::vector<Check> tweedie_checks(std::uint64_t seed) {
  std::vector<Check> out;
  Rng rng(derive_seed(seed, 0x7eed));
  std::uniform_int_distribution<int> kdist(1, 5);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  double worst = 0.0;
  for (int m = 0; m < 100; ++m) {
    oracle::GaussianMixture1D gm;
    const int k = kdist(rng);
    double total = 0.0;
    for (int j = 0; j < k; ++j) {
      gm.weights.push_back(0.1 + u01(rng));
      gm.means.push_back(-3.0 + 6.0 * u01(rng));
      gm.variances.push_back(u01(rng) < 0.2 ? 0.0 : 2.0 * u01(rng));
      total += gm.weights.back();
    }
    for (auto& w : gm.weights) w /= total;
    gm.noise_variance = 0.1 + 2.0 * u01(rng);
    for (int i = 0; i <= 100; ++i) {
      const double y = -5.0 + 0.1 * i;
      worst = std::max(worst, std::abs(oracle::tweedie_posterior_mean(gm, y) - (y + gm.noise_variance * gm.score(y))));
    }
  }
  out.push_back({"mixture_identity_max_abs", worst, 1e-8, worst <= 1e-8});

  double gauss = 0.0, deltas = 0.0;
  const oracle::GaussianMixture1D g1{{1.0}, {0.0}, {1.0}, 1.0};
  const oracle::GaussianMixture1D g2{{0.5, 0.5}, {-1.0, 1.0}, {0.0, 0.0}, 1.0};
  for (int i = 0; i <= 100; ++i) {
    const double y = -5.0 + 0.1 * i;
    gauss = std::max(gauss, std::abs(oracle::tweedie_posterior_mean(g1, y) - y / 2.0));
    deltas = std::max(deltas, std::abs(oracle::tweedie_posterior_mean(g2, y) - std::tanh(y)));
  }
  out.push_back({"gaussian_half_y_max_abs", gauss, 1e-12, gauss <= 1e-12});
  out.push_back({"two_point_tanh_max_abs", deltas, 1e-12, deltas <= 1e-12});

  const auto rows = oracle::verify_tweedie_resolution_sweep(CovarianceSpec::matern_op(3.0, 2.0), CovarianceSpec::rbf(0.05),
                                                            {8, 16, 32}, {0.01, 1.0, 80.0});
  for (const auto& r : rows) {
    out.push_back({"sweep_n" + std::to_string(r.resolution) + "_sigma" + fmt(r.sigma), r.discrepancy, 1e-8,
                   r.discrepancy <= 1e-8});
  }
  const bool stable = oracle::sweep_is_resolution_stable(rows);
  out.push_back({"sweep_no_growth", stable ? 1.0 : 0.0, 1.5, stable});
  return out;
}

oracle::GuidedPosteriorCheck posterior_setup(const RunConfig& cfg) {
  oracle::GuidedPosteriorCheck check;
  check.seed = cfg.seed();
  check.chains = static_cast<int>(cfg.integer("chains"));
  check.steps = static_cast<int>(cfg.integer("steps"));
  check.zeta = cfg.num("zeta");
  return check;
}

}  // namespace

// ---- gen-data ------------------------------------------------------------------

fs::path run_gen_data(const RunConfig& cfg) {
  cfg.check_required();
  PdeSpec spec;
  spec.kind = PdeSpec::parse_kind(cfg.str("pde"));
  spec.k = cfg.num("helmholtz_k");
  const int res = static_cast<int>(cfg.integer("resolution"));
  spec.grid = Grid2D(res, res);
  const auto prior = CovarianceSpec::parse(cfg.str("prior"));
  const auto n = cfg.integer("n");
  if (n < 1) throw ConfigError("key 'n' must be positive");
  const auto dir = start_run(cfg);
  gen_dataset(spec, prior, static_cast<std::size_t>(n), cfg.seed(), dir);
  return dir;
}

// ---- train ---------------------------------------------------------------------

fs::path run_train(const RunConfig& cfg) {
  cfg.check_required();
  TrainConfig tc;
  tc.learning_rate = cfg.num("learning_rate");
  tc.batch_size = static_cast<int>(cfg.integer("batch_size"));
  tc.dropout = cfg.num("dropout");
  tc.warmup_samples = cfg.num("warmup_samples");
  tc.ema_half_life_samples = cfg.num("ema_half_life_samples");
  tc.sigma_min = cfg.num("sigma_min");
  tc.sigma_max = cfg.num("sigma_max");
  tc.noise = CovarianceSpec::parse(cfg.str("noise"));
  tc.resample = parse_resample_method(cfg.str("resample"));
  tc.curriculum = parse_curriculum(cfg.str("curriculum"));
  tc.max_steps = static_cast<std::size_t>(cfg.integer("max_steps"));
  tc.seed = cfg.seed();
  tc.validate();

  UnoConfig uc;
  uc.levels = static_cast<int>(cfg.integer("levels"));
  uc.base_channels = static_cast<int>(cfg.integer("base_channels"));
  uc.modes.clear();
  for (const auto& m : split(cfg.str("modes"), ',')) uc.modes.push_back(to_int("modes", m));
  uc.projection_channels = static_cast<int>(cfg.integer("projection_channels"));
  uc.embedding_channels = static_cast<int>(cfg.integer("embedding_channels"));
  uc.norm_groups = static_cast<int>(cfg.integer("norm_groups"));

  const Dataset data = load_dataset(cfg.str("data"));
  uc.data_channels = data.samples.empty() ? 2 : data.samples.front().channels();
  if (cfg.str("sigma_data") == "auto") {
    std::vector<Field> normalized;
    normalized.reserve(data.samples.size());
    for (const auto& s : data.samples) normalized.push_back(normalize(s, data.manifest));
    uc.sigma_data = estimate_sigma_data(normalized);
  } else {
    uc.sigma_data = cfg.num("sigma_data");
  }
  uc.validate();

  const auto dir = start_run(cfg);
  data.manifest.write(dir / "manifest");
  DenoiserModel model(uc, derive_seed(tc.seed, 0x1417));
  const TrainReport rep = train_curriculum(model, data, tc, dir);

  std::ostringstream os;
  os.precision(10);
  os << "steps = " << rep.steps << "\nsamples_seen = " << rep.samples_seen << "\nsigma_data = " << uc.sigma_data
     << "\nparameters = " << model.parameter_count() << "\n";
  for (std::size_t s = 0; s < rep.stage_initial_loss.size(); ++s) {
    os << "stage" << s << "_initial_loss = " << rep.stage_initial_loss[s] << "\n";
  }
  os << "final_ema_loss = " << rep.final_ema_loss << "\n";
  write_text(dir / "report.txt", os.str());
  return dir;
}

// ---- sample --------------------------------------------------------------------

fs::path run_sample(const RunConfig& cfg) {
  cfg.check_required();
  const fs::path ckpt = cfg.str("checkpoint");
  const auto manifest_path = ckpt.parent_path() / "manifest";
  if (!fs::exists(manifest_path)) throw ConfigError("no manifest next to checkpoint " + ckpt.string());
  const DatasetManifest manifest = DatasetManifest::read(manifest_path);
  if (cfg.is_set("pde") && PdeSpec::parse_kind(cfg.str("pde")) != manifest.pde.kind) {
    throw ConfigError("key 'pde': " + cfg.str("pde") + " does not match the checkpoint's " +
                      PdeSpec::kind_name(manifest.pde.kind) + " training data");
  }
  const DenoiserModel model = DenoiserModel::load(ckpt);
  const ModelDenoiser den(model, cfg.flag("ema"));

  const TaskKind kind = parse_task_kind(cfg.str("task"));
  const auto count = cfg.integer("count");
  const auto chains = cfg.integer("chains");
  const int steps = static_cast<int>(cfg.integer("steps"));
  if (count < 1 || chains < 1) throw ConfigError("keys 'count' and 'chains' must be positive");
  const double obs_fraction = cfg.num("obs_fraction");
  const auto noise = CovarianceSpec::parse(cfg.str("noise"));
  const std::uint64_t seed = cfg.seed();
  const bool renoise = cfg.flag("renoise");

  // Ground truth in physical units.
  std::vector<Field> truths;
  if (cfg.is_set("data")) {
    const Dataset data = load_dataset(cfg.str("data"));
    const auto first = cfg.integer("index");
    if (first < 0 || static_cast<std::size_t>(first + count) > data.samples.size()) {
      throw ConfigError("dataset holds " + std::to_string(data.samples.size()) + " samples; index/count out of range");
    }
    for (long long i = 0; i < count; ++i) truths.push_back(data.samples[static_cast<std::size_t>(first + i)]);
  } else {
    PdeSpec spec = manifest.pde;
    if (cfg.is_set("resolution")) {
      const int r = static_cast<int>(cfg.integer("resolution"));
      spec.grid = Grid2D(r, r);
    }
    const GrfSampler prior(manifest.prior, spec.grid);
    for (long long i = 0; i < count; ++i) {
      truths.push_back(generate_sample(spec, prior, derive_seed(seed, 0x7e57), static_cast<std::size_t>(i)));
    }
  }

  const auto dir = start_run(cfg);
  EvalResult eval;
  const std::optional<int> binary_channel =
      manifest.pde.kind == PdeSpec::Kind::darcy ? std::optional<int>(0) : std::nullopt;

  for (std::size_t i = 0; i < truths.size(); ++i) {
    const Field& truth = truths[i];
    const Grid2D grid = truth.grid();
    PdeSpec pde = manifest.pde;
    pde.grid = grid;
    const auto problem_seed = derive_seed(seed, i);
    GuidanceTask task = solve_task(kind, normalize(truth, manifest), obs_fraction, problem_seed, pde, manifest);
    if (cfg.is_set("zeta_obs")) task.obs_weight = cfg.num("zeta_obs");
    if (cfg.is_set("zeta_pde")) task.pde_weight = cfg.num("zeta_pde");
    if (cfg.is_set("obs_loss")) task.obs_loss = parse_obs_loss(cfg.str("obs_loss"));
    task.huber_delta = cfg.num("huber_delta");
    task.pde_active_below_sigma = cfg.num("pde_active_below_sigma");
    task.validate();

    std::vector<Field> runs(static_cast<std::size_t>(chains));
    parallel_for(runs.size(), [&](std::size_t c) {
      const auto chain_seed = derive_seed(problem_seed, 1000 + c);
      if (renoise) {
        ReNoiseConfig rc;
        const int low = cfg.is_set("renoise_low_resolution") ? static_cast<int>(cfg.integer("renoise_low_resolution"))
                                                             : std::max(2, grid.nx / 2);
        rc.low_res = Grid2D(low, low);
        rc.low_fraction = cfg.num("renoise_low_fraction");
        rc.sigma1_min = cfg.num("renoise_sigma1_min");
        rc.sigma2_max = cfg.num("renoise_sigma2_max");
        rc.total_steps = steps;
        rc.sigma_min = cfg.num("sigma_min");
        rc.sigma_max = cfg.num("sigma_max");
        rc.rho = cfg.num("rho");
        runs[c] = renoise_sample(den, task, rc, noise, grid, chain_seed);
      } else {
        const auto schedule = karras_schedule(steps, cfg.num("sigma_min"), cfg.num("sigma_max"), cfg.num("rho"));
        runs[c] = fundps_sample(den, task, schedule, noise, grid, chain_seed);
      }
    });
    Field mean(grid, truth.channels());
    for (const auto& r : runs) {
      for (std::size_t k = 0; k < mean.size(); ++k) mean.values()[k] += r.values()[k];
    }
    for (auto& v : mean.values()) v /= static_cast<double>(runs.size());
    Field recon = denormalize(mean, manifest);

    char name[32];
    std::snprintf(name, sizeof name, "%03zu", i);
    write_field(recon, dir / ("recon_" + std::string(name) + ".fgrd"));
    write_field(truth, dir / ("truth_" + std::string(name) + ".fgrd"));
    eval.add(evaluate_sample(name, recon, truth, binary_channel));
  }
  eval.write_csv(dir / "metrics.csv");
  return dir;
}

// ---- eval ----------------------------------------------------------------------

fs::path run_eval(const RunConfig& cfg) {
  cfg.check_required();
  const fs::path run = cfg.str("run");
  const auto bc = cfg.integer("binary_channel");
  const std::optional<int> binary_channel = bc >= 0 ? std::optional<int>(static_cast<int>(bc)) : std::nullopt;
  const double threshold = cfg.num("threshold");

  std::vector<std::string> ids;
  if (fs::is_directory(run)) {
    for (const auto& e : fs::directory_iterator(run)) {
      const auto stem = e.path().stem().string();
      if (e.path().extension() == ".fgrd" && stem.rfind("recon_", 0) == 0) ids.push_back(stem.substr(6));
    }
  }
  if (ids.empty()) throw ConfigError("no recon_*.fgrd files in " + run.string());
  std::sort(ids.begin(), ids.end());

  EvalResult eval;
  for (const auto& id : ids) {
    const auto truth_path = run / ("truth_" + id + ".fgrd");
    if (!fs::exists(truth_path)) throw ConfigError("missing " + truth_path.string());
    eval.add(evaluate_sample(id, read_field(run / ("recon_" + id + ".fgrd")), read_field(truth_path), binary_channel,
                             threshold));
  }
  const auto dir = start_run(cfg);
  eval.write_csv(dir / "eval.csv");
  return dir;
}

// ---- verify --------------------------------------------------------------------

fs::path run_verify(const RunConfig& cfg, const std::string& oracle) {
  cfg.check_required();
  if (oracle != "tweedie" && oracle != "posterior" && oracle != "renoise" && oracle != "all") {
    throw ConfigError("unknown oracle '" + oracle + "' (tweedie, posterior, renoise, all)");
  }
  const auto dir = start_run(cfg);
  std::string failed;
  const auto report = [&](const std::string& name, const std::vector<Check>& checks) {
    if (!write_report(dir / (name + ".csv"), checks)) failed += (failed.empty() ? "" : ", ") + name;
  };

  if (oracle == "tweedie" || oracle == "all") report("tweedie", tweedie_checks(cfg.seed()));

  std::optional<oracle::GuidedPosteriorResult> single;
  if (oracle == "posterior" || oracle == "renoise" || oracle == "all") single = oracle::run_guided_posterior_check(posterior_setup(cfg));
  if (oracle == "posterior" || oracle == "all") {
    report("posterior", {{"posterior_mean_rel_l2", single->rel_l2, 0.10, single->rel_l2 <= 0.10},
                         {"observed_rms", single->obs_rms, 0.15, single->obs_rms <= 0.15}});
  }
  if (oracle == "renoise" || oracle == "all") {
    auto check = posterior_setup(cfg);
    ReNoiseConfig rc;
    rc.low_res = Grid2D(check.resolution / 2, check.resolution / 2);
    check.renoise = rc;
    const auto multi = oracle::run_guided_posterior_check(check);
    const double ratio = multi.rel_l2 / single->rel_l2;
    report("renoise", {{"single_rel_l2", single->rel_l2, 0.0, true},
                       {"renoise_rel_l2", multi.rel_l2, 0.0, true},
                       {"ratio", ratio, 1.25, ratio <= 1.25}});
  }
  if (!failed.empty()) throw VerificationError("failed oracle report(s): " + failed + " in " + dir.string());
  return dir;
}

// ---- export-image --------------------------------------------------------------

fs::path run_export_image(const RunConfig& cfg) {
  cfg.check_required();
  const fs::path input = cfg.str("input");
  const Field f = read_field(input);
  const auto dir = start_run(cfg);
  export_pgm(f, dir / input.stem());
  return dir;
}

}  // namespace fundps::cli
