#include "fundps/field.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "fundps/fft.hpp"

namespace fundps {

Grid2D::Grid2D(int nx_, int ny_) : nx(nx_), ny(ny_) {
  if (nx < 1 || ny < 1) {
    throw InvalidArgument("grid must have at least 1 point per axis, got " + std::to_string(nx) +
                          "x" + std::to_string(ny));
  }
}

std::string to_string(const Grid2D& g) { return std::to_string(g.nx) + "x" + std::to_string(g.ny); }

// ---- Field ------------------------------------------------------------------

Field::Field(Grid2D grid, int channels)
    : grid_(grid), channels_(channels), values_(static_cast<std::size_t>(channels) * grid.size(), 0.0) {
  if (channels < 1) throw InvalidArgument("field needs at least one channel");
}

Field::Field(Grid2D grid, int channels, std::vector<double> values)
    : grid_(grid), channels_(channels), values_(std::move(values)) {
  if (channels < 1) throw InvalidArgument("field needs at least one channel");
  if (values_.size() != static_cast<std::size_t>(channels) * grid.size()) {
    throw ShapeError("field payload has " + std::to_string(values_.size()) + " values, expected " +
                     std::to_string(static_cast<std::size_t>(channels) * grid.size()));
  }
  check_finite();
}

std::span<const double> Field::channel(int c) const {
  return std::span<const double>(values_).subspan(static_cast<std::size_t>(c) * grid_.size(), grid_.size());
}

std::span<double> Field::channel(int c) {
  return std::span<double>(values_).subspan(static_cast<std::size_t>(c) * grid_.size(), grid_.size());
}

Field Field::slice_channels(int first, int count) const {
  if (first < 0 || count < 1 || first + count > channels_) {
    throw ShapeError("channel slice out of range");
  }
  const auto begin = values_.begin() + static_cast<std::ptrdiff_t>(first * grid_.size());
  return Field(grid_, count, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(count * grid_.size())));
}

Field Field::concat_channels(const Field& a, const Field& b) {
  if (a.grid() != b.grid()) throw ShapeError("concat_channels: grids differ");
  std::vector<double> v(a.values().begin(), a.values().end());
  v.insert(v.end(), b.values().begin(), b.values().end());
  return Field(a.grid(), a.channels() + b.channels(), std::move(v));
}

void Field::check_finite() const {
  for (std::size_t k = 0; k < values_.size(); ++k) {
    if (!std::isfinite(values_[k])) {
      throw InvalidArgument("field value at flat index " + std::to_string(k) + " is not finite");
    }
  }
}

// ---- Mask -------------------------------------------------------------------

Mask::Mask(Grid2D grid, int channels, bool fill)
    : grid_(grid), channels_(channels), indicator_(static_cast<std::size_t>(channels) * grid.size(), fill ? 1 : 0) {
  if (channels < 1) throw InvalidArgument("mask needs at least one channel");
}

Mask::Mask(Grid2D grid, int channels, std::vector<std::uint8_t> indicator)
    : grid_(grid), channels_(channels), indicator_(std::move(indicator)) {
  if (indicator_.size() != static_cast<std::size_t>(channels) * grid.size()) {
    throw ShapeError("mask indicator has wrong length");
  }
  for (auto& b : indicator_) b = b ? 1 : 0;
}

bool Mask::at(int c, int i, int j) const {
  return indicator_[(static_cast<std::size_t>(c) * grid_.ny + i) * grid_.nx + j] != 0;
}

void Mask::set(int c, int i, int j, bool v) {
  indicator_[(static_cast<std::size_t>(c) * grid_.ny + i) * grid_.nx + j] = v ? 1 : 0;
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(indicator_.begin(), indicator_.end(), std::uint8_t{1}));
}

std::size_t Mask::count(int channel) const {
  const auto begin = indicator_.begin() + static_cast<std::ptrdiff_t>(channel * grid_.size());
  return static_cast<std::size_t>(std::count(begin, begin + static_cast<std::ptrdiff_t>(grid_.size()), std::uint8_t{1}));
}

double Mask::fraction() const {
  return indicator_.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(indicator_.size());
}

std::vector<std::size_t> Mask::indices() const {
  std::vector<std::size_t> out;
  out.reserve(count());
  for (std::size_t k = 0; k < indicator_.size(); ++k) {
    if (indicator_[k]) out.push_back(k);
  }
  return out;
}

ObservationVector apply_mask(const Field& f, const Mask& m) {
  if (f.grid() != m.grid() || f.channels() != m.channels()) {
    throw ShapeError("apply_mask: field " + to_string(f.grid()) + "x" + std::to_string(f.channels()) +
                     " vs mask " + to_string(m.grid()) + "x" + std::to_string(m.channels()));
  }
  ObservationVector out;
  out.reserve(m.count());
  const auto v = f.values();
  const auto ind = m.indicator();
  for (std::size_t k = 0; k < ind.size(); ++k) {
    if (ind[k]) out.push_back(v[k]);
  }
  return out;
}

// ---- resampling ---------------------------------------------------------------

ResampleMethod parse_resample_method(const std::string& name) {
  if (name == "bicubic") return ResampleMethod::bicubic;
  if (name == "fourier") return ResampleMethod::fourier;
  throw InvalidArgument("unknown resample method '" + name + "'");
}

namespace {

double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

// Resamples a strided line of n samples to m samples.
using LineFn = void (*)(const double* in, int n, double* out, int m);

void bicubic_line(const double* in, int n, double* out, int m) {
  const double ratio = static_cast<double>(n - 1) / (m - 1);
  for (int l = 0; l < m; ++l) {
    const double s = l * ratio;
    const int base = static_cast<int>(std::floor(s));
    const double frac = s - base;
    double acc = 0.0;
    for (int o = -1; o <= 2; ++o) {
      const int idx = std::clamp(base + o, 0, n - 1);
      acc += cubic_weight(frac - o) * in[idx];
    }
    out[l] = acc;
  }
}

// Trigonometric interpolation between cell-centered periodic grids.
void fourier_line(const double* in, int n, double* out, int m) {
  using fft::cplx;
  std::vector<cplx> x(in, in + n), X(static_cast<std::size_t>(n));
  fft::fft2(x, 1, n, X, false);
  std::vector<cplx> Y(static_cast<std::size_t>(m), cplx{0.0, 0.0});
  const double two_pi = 2.0 * std::numbers::pi;
  // Coefficient of signed mode k (f(x) = sum c_k e^{2 pi i k (x - 0.5/n)})
  // placed into target bin b with the phase for target points (l + 0.5) / m.
  auto deposit = [&](int k, cplx c, int bin_signed) {
    const double shift = bin_signed * (0.5 / m) - k * (0.5 / n);
    const cplx phase = std::polar(1.0, two_pi * shift);
    Y[static_cast<std::size_t>((bin_signed % m + m) % m)] += c * phase * static_cast<double>(m);
  };
  const int lo = std::min(n, m);
  for (int b = 0; b < n; ++b) {
    const int k = b <= n / 2 ? b : b - n;
    const cplx c = X[static_cast<std::size_t>(b)] / static_cast<double>(n);
    const bool src_nyquist = (n % 2 == 0) && (b == n / 2);
    if (2 * std::abs(k) < lo) {
      deposit(k, c, k);
    } else if (src_nyquist && n < m) {
      // Split the source Nyquist term symmetrically so the interpolant is real.
      deposit(k, 0.5 * c, n / 2);
      deposit(-k, 0.5 * c, -n / 2);
    } else if (m % 2 == 0 && m < n && std::abs(k) == m / 2) {
      // Both +m/2 and -m/2 alias onto the target Nyquist bin; on the target
      // points e^{-i pi (l+.5)} = -e^{i pi (l+.5)}.
      const double sign = k > 0 ? 1.0 : -1.0;
      const double shift = (m / 2) * (0.5 / m) - k * (0.5 / n);
      Y[static_cast<std::size_t>(m / 2)] += sign * c * std::polar(1.0, two_pi * shift) * static_cast<double>(m);
    } else if (src_nyquist && n == m) {
      deposit(k, c, k);
    }
  }
  std::vector<cplx> y(static_cast<std::size_t>(m));
  fft::fft2(Y, 1, m, y, true);
  for (int l = 0; l < m; ++l) out[l] = y[static_cast<std::size_t>(l)].real() / m;
}

Field separable_resample(const Field& f, Grid2D target, LineFn line) {
  const Grid2D& src = f.grid();
  Field out(target, f.channels());
  std::vector<double> tmp(static_cast<std::size_t>(src.ny) * target.nx);
  std::vector<double> col_in(static_cast<std::size_t>(src.ny)), col_out(static_cast<std::size_t>(target.ny));
  for (int c = 0; c < f.channels(); ++c) {
    const auto in = f.channel(c);
    for (int i = 0; i < src.ny; ++i) {
      line(in.data() + static_cast<std::size_t>(i) * src.nx, src.nx, tmp.data() + static_cast<std::size_t>(i) * target.nx,
           target.nx);
    }
    auto dst = out.channel(c);
    for (int j = 0; j < target.nx; ++j) {
      for (int i = 0; i < src.ny; ++i) col_in[static_cast<std::size_t>(i)] = tmp[static_cast<std::size_t>(i) * target.nx + j];
      line(col_in.data(), src.ny, col_out.data(), target.ny);
      for (int i = 0; i < target.ny; ++i) dst[static_cast<std::size_t>(i) * target.nx + j] = col_out[static_cast<std::size_t>(i)];
    }
  }
  return out;
}

}  // namespace

Field resample(const Field& f, Grid2D target, ResampleMethod method) {
  if (target.nx < 4 || target.ny < 4) throw InvalidArgument("resample target must be at least 4x4");
  if (target == f.grid()) return f;
  return separable_resample(f, target, method == ResampleMethod::bicubic ? &bicubic_line : &fourier_line);
}

// ---- FGRD -----------------------------------------------------------------------

FieldIoError::FieldIoError(Kind kind, const std::string& what) : Error("field-io", what), kind_(kind) {}

namespace {

constexpr std::array<char, 4> kMagic{'F', 'G', 'R', 'D'};
constexpr std::size_t kHeaderBytes = 4 + 4 * 4;

void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) buf.push_back(static_cast<std::uint8_t>((v >> (8 * b)) & 0xFFu));
}

void put_f64(std::vector<std::uint8_t>& buf, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) buf.push_back(static_cast<std::uint8_t>((bits >> (8 * b)) & 0xFFu));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return v;
}

double get_f64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return std::bit_cast<double>(v);
}

}  // namespace

std::vector<std::uint8_t> encode_field(const Field& f) {
  std::vector<std::uint8_t> buf;
  buf.reserve(kHeaderBytes + 8 * f.size());
  buf.insert(buf.end(), kMagic.begin(), kMagic.end());
  put_u32(buf, kFieldFormatVersion);
  put_u32(buf, static_cast<std::uint32_t>(f.channels()));
  put_u32(buf, static_cast<std::uint32_t>(f.grid().ny));
  put_u32(buf, static_cast<std::uint32_t>(f.grid().nx));
  for (double v : f.values()) put_f64(buf, v);
  return buf;
}

Field decode_field(std::span<const std::uint8_t> bytes) {
  using K = FieldIoError::Kind;
  if (bytes.size() < 4 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin(),
                                      [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; })) {
    throw FieldIoError(K::bad_magic, "not an FGRD file (bad magic)");
  }
  if (bytes.size() < kHeaderBytes) throw FieldIoError(K::truncated, "FGRD header truncated");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kFieldFormatVersion) {
    throw FieldIoError(K::version_mismatch, "FGRD version " + std::to_string(version) + " unsupported");
  }
  const std::uint32_t channels = get_u32(bytes.data() + 8);
  const std::uint32_t ny = get_u32(bytes.data() + 12);
  const std::uint32_t nx = get_u32(bytes.data() + 16);
  if (channels < 1 || ny < 1 || nx < 1 || ny > (1u << 16) || nx > (1u << 16) || channels > (1u << 16)) {
    throw FieldIoError(K::bad_header, "FGRD header declares an invalid shape");
  }
  const std::size_t count = static_cast<std::size_t>(channels) * ny * nx;
  if (bytes.size() - kHeaderBytes < 8 * count) {
    throw FieldIoError(K::truncated, "FGRD payload truncated: expected " + std::to_string(count) + " values, found " +
                                         std::to_string((bytes.size() - kHeaderBytes) / 8));
  }
  if (bytes.size() - kHeaderBytes > 8 * count) {
    throw FieldIoError(K::bad_header, "FGRD payload has trailing bytes");
  }
  std::vector<double> values(count);
  for (std::size_t k = 0; k < count; ++k) values[k] = get_f64(bytes.data() + kHeaderBytes + 8 * k);
  return Field(Grid2D(static_cast<int>(nx), static_cast<int>(ny)), static_cast<int>(channels), std::move(values));
}

void write_field(const Field& f, const std::filesystem::path& path) {
  const auto bytes = encode_field(f);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FieldIoError(FieldIoError::Kind::open_failed, "cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FieldIoError(FieldIoError::Kind::write_failed, "failed writing " + path.string());
}

Field read_field(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FieldIoError(FieldIoError::Kind::open_failed, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_field(bytes);
}

void export_pgm(const Field& f, const std::filesystem::path& stem) {
  std::ostringstream sidecar;
  sidecar << "# channel min max\n";
  for (int c = 0; c < f.channels(); ++c) {
    const auto ch = f.channel(c);
    const auto [lo_it, hi_it] = std::minmax_element(ch.begin(), ch.end());
    const double lo = *lo_it, hi = *hi_it;
    const double span = hi > lo ? hi - lo : 1.0;
    auto path = stem;
    path += "_c" + std::to_string(c) + ".pgm";
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FieldIoError(FieldIoError::Kind::open_failed, "cannot open " + path.string());
    os << "P5\n" << f.grid().nx << " " << f.grid().ny << "\n255\n";
    for (double v : ch) {
      const auto px = static_cast<unsigned char>(std::lround(255.0 * (v - lo) / span));
      os.put(static_cast<char>(px));
    }
    sidecar << c << " " << lo << " " << hi << "\n";
  }
  auto txt = stem;
  txt += ".txt";
  std::ofstream os(txt, std::ios::trunc);
  if (!os) throw FieldIoError(FieldIoError::Kind::open_failed, "cannot open " + txt.string());
  os.precision(17);
  os << sidecar.str();
}

}  // namespace fundps
