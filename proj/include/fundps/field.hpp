#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fundps/error.hpp"

namespace fundps {

/// Uniform grid on the unit square.
///
/// Two coordinate conventions are used, and only these two:
///  - node-centered (Dirichlet solvers, bicubic resampling): point (i, j) sits at
///    (j / (nx - 1), i / (ny - 1)), boundary nodes included;
///  - cell-centered periodic (spectral GRF sampling, Fourier resampling): point
///    (i, j) sits at ((j + 0.5) / nx, (i + 0.5) / ny) on the torus.
struct Grid2D {
  int nx = 0;
  int ny = 0;

  Grid2D() = default;
  Grid2D(int nx_, int ny_);
  static Grid2D square(int n) { return Grid2D(n, n); }

  std::size_t size() const { return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny); }
  double node_x(int j) const { return static_cast<double>(j) / (nx - 1); }
  double node_y(int i) const { return static_cast<double>(i) / (ny - 1); }
  double cell_x(int j) const { return (j + 0.5) / nx; }
  double cell_y(int i) const { return (i + 0.5) / ny; }

  friend bool operator==(const Grid2D&, const Grid2D&) = default;
};

std::string to_string(const Grid2D& g);

/// Real-valued multi-channel sample on a Grid2D, stored channel-major then
/// row-major (y outer, x inner). Values are always finite.
///
/// In joint samples channel 0 holds the PDE parameter a and channel 1 the
/// solution u.
class Field {
 public:
  Field() = default;
  Field(Grid2D grid, int channels);
  Field(Grid2D grid, int channels, std::vector<double> values);

  const Grid2D& grid() const { return grid_; }
  int channels() const { return channels_; }
  std::size_t size() const { return values_.size(); }
  std::size_t channel_size() const { return grid_.size(); }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  std::span<const double> channel(int c) const;
  std::span<double> channel(int c);

  double at(int c, int i, int j) const { return values_[index(c, i, j)]; }
  double& at(int c, int i, int j) { return values_[index(c, i, j)]; }

  std::size_t index(int c, int i, int j) const {
    return (static_cast<std::size_t>(c) * grid_.ny + i) * grid_.nx + j;
  }

  /// Copy of channels [first, first + count).
  Field slice_channels(int first, int count) const;
  static Field concat_channels(const Field& a, const Field& b);

  /// Throws InvalidArgument when any value is NaN or infinite.
  void check_finite() const;

  friend bool operator==(const Field&, const Field&) = default;

 private:
  Grid2D grid_;
  int channels_ = 0;
  std::vector<double> values_;
};

/// Observation indicator over a Field's layout.
class Mask {
 public:
  Mask() = default;
  Mask(Grid2D grid, int channels, bool fill = false);
  Mask(Grid2D grid, int channels, std::vector<std::uint8_t> indicator);

  const Grid2D& grid() const { return grid_; }
  int channels() const { return channels_; }
  std::size_t size() const { return indicator_.size(); }

  bool at(int c, int i, int j) const;
  void set(int c, int i, int j, bool v);
  std::span<const std::uint8_t> indicator() const { return indicator_; }

  std::size_t count() const;
  std::size_t count(int channel) const;
  double fraction() const;
  /// Flat positions of the true entries, channel-major then row-major.
  std::vector<std::size_t> indices() const;

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  Grid2D grid_;
  int channels_ = 0;
  std::vector<std::uint8_t> indicator_;
};

using ObservationVector = std::vector<double>;

/// Gathers the masked-in values in channel-major, row-major order.
ObservationVector apply_mask(const Field& f, const Mask& m);

enum class ResampleMethod { bicubic, fourier };

ResampleMethod parse_resample_method(const std::string& name);

/// Resamples every channel onto `target`.
///
/// bicubic: Keys cubic convolution (a = -0.5) on the node-centered convention
/// with clamped edges. fourier: trigonometric interpolation on the
/// cell-centered periodic convention (exact for band-limited input).
Field resample(const Field& f, Grid2D target, ResampleMethod method);

// ---- FGRD on-disk format ----------------------------------------------------

class FieldIoError : public Error {
 public:
  enum class Kind { open_failed, bad_magic, version_mismatch, truncated, bad_header, write_failed };

  FieldIoError(Kind kind, const std::string& what);
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kFieldFormatVersion = 1;

/// Layout: "FGRD", then version, channels, ny, nx as u32 little-endian, then
/// channels*ny*nx IEEE-754 binary64 little-endian values.
std::vector<std::uint8_t> encode_field(const Field& f);
Field decode_field(std::span<const std::uint8_t> bytes);

void write_field(const Field& f, const std::filesystem::path& path);
Field read_field(const std::filesystem::path& path);

/// Writes one 8-bit binary PGM per channel (`<stem>_c<k>.pgm`), each min-max
/// scaled, plus `<stem>.txt` recording the per-channel min and max.
void export_pgm(const Field& f, const std::filesystem::path& stem);

}  // namespace fundps
