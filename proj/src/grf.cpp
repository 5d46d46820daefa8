#include "fundps/grf.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>

#include "fundps/fft.hpp"
#include "fundps/rng.hpp"

namespace fundps {

CovarianceSpec CovarianceSpec::rbf(double length_scale, double jitter) {
  CovarianceSpec s;
  s.kind = Kind::rbf;
  s.length_scale = length_scale;
  s.jitter = jitter;
  s.validate();
  return s;
}

CovarianceSpec CovarianceSpec::matern_op(double tau, double alpha, double scale) {
  CovarianceSpec s;
  s.kind = Kind::matern_op;
  s.tau = tau;
  s.alpha = alpha;
  s.scale = scale;
  s.validate();
  return s;
}

void CovarianceSpec::validate() const {
  if (!(jitter >= 0.0)) throw InvalidArgument("covariance jitter must be >= 0");
  if (kind == Kind::rbf) {
    if (!(length_scale > 0.0 && length_scale < 1.0)) throw InvalidArgument("rbf length_scale must lie in (0, 1)");
  } else {
    if (!(tau > 0.0)) throw InvalidArgument("matern_op tau must be > 0");
    if (!(alpha > 1.0)) throw InvalidArgument("matern_op alpha must be > 1");
    if (!(scale > 0.0)) throw InvalidArgument("matern_op scale must be > 0");
  }
}

std::string CovarianceSpec::to_string() const {
  std::ostringstream os;
  os.precision(17);
  if (kind == Kind::rbf) {
    os << "rbf(length_scale=" << length_scale;
  } else {
    os << "matern_op(tau=" << tau << ",alpha=" << alpha << ",scale=" << scale;
  }
  if (jitter != 1e-12) os << ",jitter=" << jitter;
  os << ")";
  return os.str();
}

CovarianceSpec CovarianceSpec::parse(const std::string& text) {
  const auto open = text.find('(');
  const auto close = text.rfind(')');
  if (open == std::string::npos || close == std::string::npos || close < open) {
    throw InvalidArgument("cannot parse covariance spec '" + text + "'");
  }
  const std::string name = text.substr(0, open);
  std::map<std::string, double> args;
  std::stringstream body(text.substr(open + 1, close - open - 1));
  std::string item;
  while (std::getline(body, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw InvalidArgument("covariance argument '" + item + "' lacks '='");
    try {
      args[item.substr(0, eq)] = std::stod(item.substr(eq + 1));
    } catch (const std::exception&) {
      throw InvalidArgument("covariance argument '" + item + "' is not numeric");
    }
  }
  auto take = [&](const std::string& key, double fallback) {
    auto it = args.find(key);
    if (it == args.end()) return fallback;
    const double v = it->second;
    args.erase(it);
    return v;
  };
  CovarianceSpec s;
  if (name == "rbf") {
    s.kind = Kind::rbf;
    s.length_scale = take("length_scale", 0.05);
  } else if (name == "matern_op") {
    s.kind = Kind::matern_op;
    s.tau = take("tau", 3.0);
    s.alpha = take("alpha", 2.0);
    s.scale = take("scale", 1.0);
  } else {
    throw InvalidArgument("unknown covariance kind '" + name + "'");
  }
  s.jitter = take("jitter", 1e-12);
  if (!args.empty()) throw InvalidArgument("unknown covariance argument '" + args.begin()->first + "'");
  s.validate();
  return s;
}

namespace {

int signed_freq(int bin, int n) { return bin <= n / 2 ? bin : bin - n; }

std::vector<double> rbf_spectrum(const CovarianceSpec& spec, const Grid2D& g) {
  const int ny = g.ny, nx = g.nx;
  const double inv2l2 = 1.0 / (2.0 * spec.length_scale * spec.length_scale);
  std::vector<fft::cplx> kernel(g.size()), spectrum(g.size());
  for (int i = 0; i < ny; ++i) {
    for (int j = 0; j < nx; ++j) {
      const double dy = static_cast<double>(i) / ny;
      const double dx = static_cast<double>(j) / nx;
      double acc = 0.0;
      for (int py = -2; py <= 2; ++py) {
        for (int px = -2; px <= 2; ++px) {
          const double ey = dy + py, ex = dx + px;
          acc += std::exp(-(ex * ex + ey * ey) * inv2l2);
        }
      }
      kernel[static_cast<std::size_t>(i) * nx + j] = acc;
    }
  }
  fft::fft2(kernel, ny, nx, spectrum, false);
  const double n = static_cast<double>(g.size());
  double peak = 0.0;
  for (const auto& v : spectrum) peak = std::max(peak, v.real() / n);
  std::vector<double> amp(g.size());
  for (std::size_t k = 0; k < amp.size(); ++k) {
    const double lam = spectrum[k].real() / n + spec.jitter;
    if (lam < -1e-8 * peak) {
      throw SpectrumError("rbf spectrum has eigenvalue " + std::to_string(lam) + " below jitter tolerance");
    }
    amp[k] = std::sqrt(std::max(lam, 0.0));
  }
  return amp;
}

std::vector<double> matern_spectrum(const CovarianceSpec& spec, const Grid2D& g) {
  std::vector<double> amp(g.size());
  const double four_pi2 = 4.0 * std::numbers::pi * std::numbers::pi;
  for (int i = 0; i < g.ny; ++i) {
    const double ky = signed_freq(i, g.ny);
    for (int j = 0; j < g.nx; ++j) {
      const double kx = signed_freq(j, g.nx);
      const double base = four_pi2 * (kx * kx + ky * ky) + spec.tau * spec.tau;
      amp[static_cast<std::size_t>(i) * g.nx + j] = spec.scale * std::pow(base, -0.5 * spec.alpha);
    }
  }
  return amp;
}

}  // namespace

GrfSampler::GrfSampler(CovarianceSpec spec, Grid2D grid) : spec_(spec), grid_(grid) {
  spec_.validate();
  amp_ = spec_.kind == CovarianceSpec::Kind::rbf ? rbf_spectrum(spec_, grid_) : matern_spectrum(spec_, grid_);
  variance_ = 0.0;
  for (double a : amp_) {
    if (!std::isfinite(a) || a < 0.0) throw SpectrumError("non-finite or negative spectral amplitude");
    variance_ += a * a;
  }
  const int nh = fft::half_width(grid_.nx);
  half_amp_.resize(static_cast<std::size_t>(grid_.ny) * nh);
  for (int i = 0; i < grid_.ny; ++i) {
    for (int j = 0; j < nh; ++j) half_amp_[static_cast<std::size_t>(i) * nh + j] = amplitude(i, j);
  }
}

double GrfSampler::covariance(int dy, int dx) const {
  const double two_pi = 2.0 * std::numbers::pi;
  double acc = 0.0;
  for (int i = 0; i < grid_.ny; ++i) {
    const double ky = signed_freq(i, grid_.ny);
    for (int j = 0; j < grid_.nx; ++j) {
      const double kx = signed_freq(j, grid_.nx);
      const double a = amplitude(i, j);
      acc += a * a * std::cos(two_pi * (ky * dy / grid_.ny + kx * dx / grid_.nx));
    }
  }
  return acc;
}

Field GrfSampler::spectral_apply(const Field& f, Op op) const {
  if (f.grid() != grid_) throw ShapeError("GRF sampler grid " + to_string(grid_) + " vs field " + to_string(f.grid()));
  const int ny = grid_.ny, nx = grid_.nx;
  const double n = static_cast<double>(grid_.size());
  const double amp_floor = 1e-300;
  Field out(grid_, f.channels());
  std::vector<fft::cplx> spec(half_amp_.size());
  for (int c = 0; c < f.channels(); ++c) {
    fft::rfft2(f.channel(c), ny, nx, spec);
    double post = 1.0;
    for (std::size_t k = 0; k < spec.size(); ++k) {
      const double a = half_amp_[k];
      switch (op) {
        case Op::color: spec[k] *= a; break;
        case Op::whiten: spec[k] = a > amp_floor ? spec[k] / a : fft::cplx{}; break;
        case Op::covariance: spec[k] *= a * a; break;
      }
    }
    switch (op) {
      case Op::color: post = std::sqrt(n); break;
      case Op::whiten: post = 1.0 / std::sqrt(n); break;
      case Op::covariance: post = n; break;
    }
    auto dst = out.channel(c);
    fft::irfft2(spec, ny, nx, dst);
    for (auto& v : dst) v *= post;
  }
  return out;
}

Field GrfSampler::color(const Field& white) const { return spectral_apply(white, Op::color); }
Field GrfSampler::whiten(const Field& f) const { return spectral_apply(f, Op::whiten); }
Field GrfSampler::apply_covariance(const Field& f) const { return spectral_apply(f, Op::covariance); }

Field GrfSampler::sample(std::uint64_t seed, double sigma, int channels) const {
  if (!(sigma >= 0.0)) throw InvalidArgument("GRF sample sigma must be >= 0");
  Field white(grid_, channels);
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : white.values()) v = normal(rng);
  Field out = color(white);
  for (auto& v : out.values()) v *= sigma;
  return out;
}

std::vector<double> GrfSampler::dense_covariance() const {
  const std::size_t n = grid_.size();
  Field delta(grid_, 1);
  delta.values()[0] = 1.0;
  const Field row0 = apply_covariance(delta);  // c(d) at offset d from the origin
  std::vector<double> dense(n * n);
  for (int i1 = 0; i1 < grid_.ny; ++i1) {
    for (int j1 = 0; j1 < grid_.nx; ++j1) {
      const std::size_t r = static_cast<std::size_t>(i1) * grid_.nx + j1;
      for (int i2 = 0; i2 < grid_.ny; ++i2) {
        const int dy = ((i1 - i2) % grid_.ny + grid_.ny) % grid_.ny;
        for (int j2 = 0; j2 < grid_.nx; ++j2) {
          const int dx = ((j1 - j2) % grid_.nx + grid_.nx) % grid_.nx;
          dense[r * n + static_cast<std::size_t>(i2) * grid_.nx + j2] = row0.at(0, dy, dx);
        }
      }
    }
  }
  return dense;
}

}  // namespace fundps
