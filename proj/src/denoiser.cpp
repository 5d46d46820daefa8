#include "fundps/denoiser.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace fundps {

using ad::Shape;
using ad::Tape;
using ad::Var;

Precond Precond::at(double sigma, double sigma_data) {
  const double s2 = sigma * sigma, d2 = sigma_data * sigma_data;
  return Precond{1.0 / std::sqrt(s2 + d2), d2 / (s2 + d2), sigma * sigma_data / std::sqrt(s2 + d2), std::log(sigma) / 4.0};
}

Var Denoiser::denoise(Tape& tape, Var y, double sigma) const {
  const std::vector<double> s(static_cast<std::size_t>(y.shape().n), sigma);
  return denoise(tape, y, s);
}

Field Denoiser::denoise(const Field& y, double sigma) const {
  Tape t;
  Var out = denoise(t, t.constant(y), sigma);
  return Field(y.grid(), y.channels(), std::vector<double>(out.value().begin(), out.value().end()));
}

Field score_from_denoiser(const Denoiser& d, const Field& y, double sigma) {
  if (!(sigma > 0.0)) throw InvalidArgument("score needs sigma > 0");
  Field out = d.denoise(y, sigma);
  auto o = out.values();
  auto yv = y.values();
  for (std::size_t k = 0; k < o.size(); ++k) o[k] = (o[k] - yv[k]) / (sigma * sigma);
  return out;
}

// ---- config -------------------------------------------------------------------------

void UnoConfig::validate() const {
  if (data_channels < 1 || levels < 1 || base_channels < 1 || projection_channels < 1 || embedding_channels < 2 ||
      norm_groups < 1) {
    throw InvalidArgument("denoiser channel counts must be positive");
  }
  if (embedding_channels % 2 != 0) throw InvalidArgument("embedding_channels must be even");
  if (static_cast<int>(modes.size()) != levels) {
    throw InvalidArgument("expected " + std::to_string(levels) + " mode counts, got " + std::to_string(modes.size()));
  }
  for (int l = 0; l < levels; ++l) {
    const int m = modes[static_cast<std::size_t>(l)];
    if (m < 2 || m % 2 != 0) throw InvalidArgument("level " + std::to_string(l) + ": mode count must be even and >= 2");
  }
  if (!(sigma_data > 0.0)) throw InvalidArgument("sigma_data must be positive");
}

void UnoConfig::check_resolution(int ny, int nx) const {
  for (int l = 0; l < levels; ++l) {
    const int f = 1 << l;
    const int m = modes[static_cast<std::size_t>(l)];
    if (ny % f != 0 || nx % f != 0) {
      throw InvalidArgument("level " + std::to_string(l) + ": grid " + std::to_string(nx) + "x" + std::to_string(ny) +
                            " is not divisible by " + std::to_string(f));
    }
    const int hy = ny / f, hx = nx / f;
    if (m > hy || m > hx || hy % 2 != 0 || hx % 2 != 0) {
      throw InvalidArgument("level " + std::to_string(l) + ": " + std::to_string(m) + " modes do not fit a " +
                            std::to_string(hx) + "x" + std::to_string(hy) + " grid");
    }
  }
}

std::string UnoConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "data_channels=" << data_channels << "\n"
     << "levels=" << levels << "\n"
     << "base_channels=" << base_channels << "\n"
     << "modes=";
  for (std::size_t k = 0; k < modes.size(); ++k) os << (k ? "," : "") << modes[k];
  os << "\n"
     << "projection_channels=" << projection_channels << "\n"
     << "embedding_channels=" << embedding_channels << "\n"
     << "norm_groups=" << norm_groups << "\n"
     << "sigma_data=" << sigma_data << "\n";
  return os.str();
}

UnoConfig UnoConfig::from_text(const std::string& text) {
  UnoConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed config line '" + line + "'");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "data_channels") c.data_channels = std::stoi(val);
    else if (key == "levels") c.levels = std::stoi(val);
    else if (key == "base_channels") c.base_channels = std::stoi(val);
    else if (key == "projection_channels") c.projection_channels = std::stoi(val);
    else if (key == "embedding_channels") c.embedding_channels = std::stoi(val);
    else if (key == "norm_groups") c.norm_groups = std::stoi(val);
    else if (key == "sigma_data") c.sigma_data = std::stod(val);
    else if (key == "modes") {
      c.modes.clear();
      std::istringstream ms(val);
      std::string tok;
      while (std::getline(ms, tok, ',')) c.modes.push_back(std::stoi(tok));
    } else {
      throw CheckpointError("unknown config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

// ---- layout -------------------------------------------------------------------------

namespace {

std::string level_name(const char* part, int l) { return std::string(part) + std::to_string(l); }

}  // namespace

void DenoiserModel::add_parameter(const std::string& name, Shape shape) {
  index_[name] = raw_.size();
  raw_.push_back(Parameter{name, shape, std::vector<double>(shape.size(), 0.0)});
}

// Parameter shapes depend on the config alone.
void DenoiserModel::build_layout() {
  const UnoConfig& c = config_;
  const int e = c.embedding_channels;
  add_parameter("temb.0.w", Shape{e, e, 1, 1});
  add_parameter("temb.0.b", Shape{1, e, 1, 1});
  add_parameter("temb.1.w", Shape{e, e, 1, 1});
  add_parameter("temb.1.b", Shape{1, e, 1, 1});
  add_parameter("lift.w", Shape{c.channels_at(0), c.data_channels + 2, 1, 1});
  add_parameter("lift.b", Shape{1, c.channels_at(0), 1, 1});
  auto block = [&](const std::string& p, int ch, int m) {
    add_parameter(p + ".spec", Shape{ch, ch, m, m});  // m x m/2 complex modes
    add_parameter(p + ".mix", Shape{ch, ch, 1, 1});
    add_parameter(p + ".bias", Shape{1, ch, 1, 1});
    add_parameter(p + ".film.w", Shape{2 * ch, e, 1, 1});
    add_parameter(p + ".film.b", Shape{1, 2 * ch, 1, 1});
  };
  for (int l = 0; l < c.levels; ++l) {
    block(level_name("enc", l), c.channels_at(l), c.modes[static_cast<std::size_t>(l)]);
    if (l + 1 < c.levels) add_parameter(level_name("down", l) + ".w", Shape{c.channels_at(l + 1), c.channels_at(l), 1, 1});
  }
  for (int l = c.levels - 2; l >= 0; --l) {
    add_parameter(level_name("up", l) + ".w", Shape{c.channels_at(l), c.channels_at(l + 1), 1, 1});
    add_parameter(level_name("merge", l) + ".w", Shape{c.channels_at(l), 2 * c.channels_at(l), 1, 1});
    add_parameter(level_name("merge", l) + ".b", Shape{1, c.channels_at(l), 1, 1});
    block(level_name("dec", l), c.channels_at(l), c.modes[static_cast<std::size_t>(l)]);
  }
  add_parameter("proj.0.w", Shape{c.projection_channels, c.channels_at(0), 1, 1});
  add_parameter("proj.0.b", Shape{1, c.projection_channels, 1, 1});
  add_parameter("proj.1.w", Shape{c.data_channels, c.projection_channels, 1, 1});
  add_parameter("proj.1.b", Shape{1, c.data_channels, 1, 1});
}

DenoiserModel::DenoiserModel(UnoConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  build_layout();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  for (auto& p : raw_) {
    const bool bias = p.name.ends_with(".b") || p.name.ends_with(".bias");
    if (bias) continue;
    double stdev;
    if (p.name.ends_with(".spec")) {
      // Spectral weights: fan-in over channels, shrunk so the branch starts small.
      stdev = 1.0 / (p.shape.c * std::sqrt(2.0));
    } else if (p.name.ends_with(".film.w")) {
      stdev = 0.1 / std::sqrt(static_cast<double>(p.shape.c));
    } else {
      stdev = 1.0 / std::sqrt(static_cast<double>(p.shape.c));
    }
    for (auto& v : p.values) v = stdev * nd(rng);
  }
  copy_raw_to_ema();
}

std::size_t DenoiserModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : raw_) n += p.values.size();
  return n;
}

void DenoiserModel::zero_output_projection() {
  for (auto* set : {&raw_, &ema_}) {
    for (auto& p : *set) {
      if (p.name == "proj.1.w" || p.name == "proj.1.b") std::fill(p.values.begin(), p.values.end(), 0.0);
    }
  }
}

void DenoiserModel::copy_raw_to_ema() { ema_ = raw_; }

// ---- forward ------------------------------------------------------------------------

DenoiserModel::Trace DenoiserModel::trace(Tape& t, Var y, std::span<const double> sigma, const ForwardOptions& opts) const {
  const UnoConfig& c = config_;
  const Shape ys = y.shape();
  if (ys.c != c.data_channels) {
    throw ShapeError("denoiser expects " + std::to_string(c.data_channels) + " channels, got " + std::to_string(ys.c));
  }
  if (sigma.size() != static_cast<std::size_t>(ys.n)) throw ShapeError("one sigma per batch entry is required");
  c.check_resolution(ys.h, ys.w);
  if (opts.dropout > 0.0 && opts.rng == nullptr) throw InvalidArgument("dropout needs a random generator");

  const auto& set = opts.use_ema ? ema_ : raw_;
  Trace tr;
  tr.params.reserve(set.size());
  for (const auto& p : set) tr.params.push_back(opts.trainable ? t.variable(p.shape, p.values) : t.constant(p.shape, p.values));
  auto P = [&](const std::string& name) { return tr.params[index_.at(name)]; };

  const int nb = ys.n;
  std::vector<double> c_in(nb), c_skip(nb), c_out(nb);
  const int e = c.embedding_channels, half = e / 2;
  std::vector<double> feats(static_cast<std::size_t>(nb) * e);
  for (int b = 0; b < nb; ++b) {
    if (!(sigma[b] > 0.0)) throw InvalidArgument("denoiser needs sigma > 0");
    const Precond pc = Precond::at(sigma[b], c.sigma_data);
    c_in[b] = pc.c_in;
    c_skip[b] = pc.c_skip;
    c_out[b] = pc.c_out;
    for (int k = 0; k < half; ++k) {
      const double freq = std::pow(100.0, static_cast<double>(k) / std::max(1, half - 1));
      feats[static_cast<std::size_t>(b) * e + k] = std::cos(freq * pc.c_noise);
      feats[static_cast<std::size_t>(b) * e + half + k] = std::sin(freq * pc.c_noise);
    }
  }
  const Shape per_sample{nb, 1, 1, 1};

  Var emb = t.constant(Shape{nb, e, 1, 1}, feats);
  emb = ad::gelu(ad::add(ad::channel_mix(emb, P("temb.0.w")), P("temb.0.b")));
  emb = ad::add(ad::channel_mix(emb, P("temb.1.w")), P("temb.1.b"));

  auto mix_dropout = [&](Var v) {
    if (opts.dropout <= 0.0) return v;
    std::bernoulli_distribution keep(1.0 - opts.dropout);
    std::vector<double> mask(v.shape().size());
    for (auto& m : mask) m = keep(*opts.rng) ? 1.0 / (1.0 - opts.dropout) : 0.0;
    return ad::mul(v, t.constant(v.shape(), std::move(mask)));
  };

  auto block = [&](const std::string& p, Var h, int m) {
    const Shape hs = h.shape();
    Var spec = ad::irfft2(ad::spectral_mix(ad::rfft2(h), P(p + ".spec"), m, m / 2), hs.w);
    Var z = ad::add(ad::add(spec, mix_dropout(ad::channel_mix(h, P(p + ".mix")))), P(p + ".bias"));
    z = ad::group_norm(z, std::gcd(hs.c, c.norm_groups));
    Var film = ad::add(ad::channel_mix(emb, P(p + ".film.w")), P(p + ".film.b"));
    Var s = ad::slice_channels(film, 0, hs.c);
    Var sh = ad::slice_channels(film, hs.c, hs.c);
    z = ad::add(ad::mul(z, ad::affine(s, 1.0, 1.0)), sh);
    return ad::add(h, ad::gelu(z));
  };

  // Input: c_in * y plus two coordinate channels.
  Var x = ad::mul(y, t.constant(per_sample, c_in));
  std::vector<double> pos(static_cast<std::size_t>(nb) * 2 * ys.h * ys.w);
  for (int b = 0; b < nb; ++b) {
    for (int i = 0; i < ys.h; ++i) {
      for (int j = 0; j < ys.w; ++j) {
        const std::size_t base = static_cast<std::size_t>(b) * 2 * ys.h * ys.w + static_cast<std::size_t>(i) * ys.w + j;
        pos[base] = (j + 0.5) / ys.w;
        pos[base + static_cast<std::size_t>(ys.h) * ys.w] = (i + 0.5) / ys.h;
      }
    }
  }
  x = ad::concat_channels(x, t.constant(Shape{nb, 2, ys.h, ys.w}, std::move(pos)));
  Var h = ad::add(ad::channel_mix(x, P("lift.w")), P("lift.b"));

  std::vector<Var> skips;
  for (int l = 0; l < c.levels; ++l) {
    h = block(level_name("enc", l), h, c.modes[static_cast<std::size_t>(l)]);
    skips.push_back(h);
    if (l + 1 < c.levels) {
      h = ad::fourier_resample(h, h.shape().h / 2, h.shape().w / 2);
      h = ad::channel_mix(h, P(level_name("down", l) + ".w"));
    }
  }
  for (int l = c.levels - 2; l >= 0; --l) {
    const Shape ss = skips[static_cast<std::size_t>(l)].shape();
    h = ad::channel_mix(ad::fourier_resample(h, ss.h, ss.w), P(level_name("up", l) + ".w"));
    h = ad::concat_channels(h, skips[static_cast<std::size_t>(l)]);
    h = ad::add(ad::channel_mix(h, P(level_name("merge", l) + ".w")), P(level_name("merge", l) + ".b"));
    h = block(level_name("dec", l), h, c.modes[static_cast<std::size_t>(l)]);
  }
  h = ad::gelu(ad::add(ad::channel_mix(h, P("proj.0.w")), P("proj.0.b")));
  Var f = ad::add(ad::channel_mix(h, P("proj.1.w")), P("proj.1.b"));

  tr.output = ad::add(ad::mul(y, t.constant(per_sample, c_skip)), ad::mul(f, t.constant(per_sample, c_out)));
  return tr;
}

Field DenoiserModel::forward(const Field& y, double sigma, bool use_ema) const {
  return ModelDenoiser(*this, use_ema).denoise(y, sigma);
}

Var ModelDenoiser::denoise(Tape& tape, Var y, std::span<const double> sigma) const {
  ForwardOptions opts;
  opts.use_ema = use_ema_;
  return model_.trace(tape, y, sigma, opts).output;
}

// ---- checkpoint ---------------------------------------------------------------------
// "FDCK", u32 version, u64 header length, header text, u32 parameter count, then
// the raw section followed by the EMA section. Each parameter: u32 name length,
// name bytes, 4 x u32 shape, f64 little-endian values.

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host assumed");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CheckpointError("checkpoint is truncated");
  return v;
}

void write_section(std::ostream& os, const std::vector<Parameter>& params) {
  for (const auto& p : params) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    for (int d : {p.shape.n, p.shape.c, p.shape.h, p.shape.w}) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(p.values.data()), static_cast<std::streamsize>(p.values.size() * sizeof(double)));
  }
}

void read_section(std::istream& is, std::vector<Parameter>& params) {
  for (auto& p : params) {
    const auto len = get<std::uint32_t>(is);
    if (len > 4096) throw CheckpointError("implausible parameter name length");
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw CheckpointError("checkpoint is truncated");
    if (name != p.name) throw CheckpointError("expected parameter '" + p.name + "', found '" + name + "'");
    Shape s;
    s.n = static_cast<int>(get<std::uint32_t>(is));
    s.c = static_cast<int>(get<std::uint32_t>(is));
    s.h = static_cast<int>(get<std::uint32_t>(is));
    s.w = static_cast<int>(get<std::uint32_t>(is));
    if (!(s == p.shape)) throw CheckpointError("parameter '" + name + "' has shape " + ad::to_string(s) + ", config implies " + ad::to_string(p.shape));
    is.read(reinterpret_cast<char*>(p.values.data()), static_cast<std::streamsize>(p.values.size() * sizeof(double)));
    if (!is) throw CheckpointError("checkpoint is truncated");
  }
}

}  // namespace

void DenoiserModel::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write " + path.string());
  os.write("FDCK", 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  const std::string header = config_.to_text();
  put<std::uint64_t>(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(raw_.size()));
  write_section(os, raw_);
  write_section(os, ema_);
  if (!os) throw CheckpointError("failed writing " + path.string());
}

DenoiserModel DenoiserModel::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FDCK", 4) != 0) throw CheckpointError(path.string() + " is not a checkpoint");
  if (get<std::uint32_t>(is) != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version");
  const auto hlen = get<std::uint64_t>(is);
  if (hlen > (1u << 20)) throw CheckpointError("implausible header length");
  std::string header(hlen, '\0');
  is.read(header.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw CheckpointError("checkpoint is truncated");

  DenoiserModel m;
  m.config_ = UnoConfig::from_text(header);
  m.build_layout();
  if (get<std::uint32_t>(is) != m.raw_.size()) throw CheckpointError("parameter count disagrees with the config");
  m.ema_ = m.raw_;
  read_section(is, m.raw_);
  read_section(is, m.ema_);
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after the EMA section");
  return m;
}

}  // namespace fundps
