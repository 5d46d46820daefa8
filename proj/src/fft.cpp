#include "fundps/fft.hpp"

#include <fftw3.h>

#include <cmath>
#include <cstring>
#include <map>
#include <mutex>
#include <tuple>
#include <vector>

namespace fundps::fft {
namespace {

enum class PlanKind { r2c, c2r, c2c_fwd, c2c_inv, dst };

// FFTW planning is not thread-safe; execution of an existing plan on new
// arrays is. Plans are created once per shape and kept for the process.
class PlanCache {
 public:
  fftw_plan get(PlanKind kind, int ny, int nx) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto key = std::make_tuple(kind, ny, nx);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    const std::size_t n = static_cast<std::size_t>(ny) * nx;
    const std::size_t nh = static_cast<std::size_t>(ny) * (nx / 2 + 1);
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    fftw_plan plan = nullptr;
    switch (kind) {
      case PlanKind::r2c: {
        std::vector<double> in(n);
        std::vector<fftw_complex> out(nh);
        plan = fftw_plan_dft_r2c_2d(ny, nx, in.data(), out.data(), flags);
        break;
      }
      case PlanKind::c2r: {
        std::vector<fftw_complex> in(nh);
        std::vector<double> out(n);
        plan = fftw_plan_dft_c2r_2d(ny, nx, in.data(), out.data(), flags);
        break;
      }
      case PlanKind::c2c_fwd:
      case PlanKind::c2c_inv: {
        std::vector<fftw_complex> in(n), out(n);
        plan = fftw_plan_dft_2d(ny, nx, in.data(), out.data(),
                                kind == PlanKind::c2c_fwd ? FFTW_FORWARD : FFTW_BACKWARD, flags);
        break;
      }
      case PlanKind::dst: {
        std::vector<double> in(n), out(n);
        plan = fftw_plan_r2r_2d(ny, nx, in.data(), out.data(), FFTW_RODFT00, FFTW_RODFT00, flags);
        break;
      }
    }
    plans_.emplace(key, plan);
    return plan;
  }

 private:
  std::mutex mutex_;
  std::map<std::tuple<PlanKind, int, int>, fftw_plan> plans_;
};

PlanCache& cache() {
  static PlanCache c;
  return c;
}

fftw_complex* as_fftw(cplx* p) { return reinterpret_cast<fftw_complex*>(p); }

}  // namespace

void rfft2(std::span<const double> in, int ny, int nx, std::span<cplx> out) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(ny) * nx);
  std::vector<double> buf(in.begin(), in.end());
  fftw_execute_dft_r2c(cache().get(PlanKind::r2c, ny, nx), buf.data(), as_fftw(out.data()));
  for (auto& v : out) v *= scale;
}

void irfft2(std::span<const cplx> in, int ny, int nx, std::span<double> out) {
  // Re(sum_ky Y(ky) e^{i ky y}) over a self-conjugate column equals the
  // Hermitian synthesis of (Y(ky) + conj(Y(-ky))) / 2, so those columns are
  // symmetrized first and c2r then sees strictly Hermitian data. c2r also
  // overwrites its input, hence the copy.
  const double scale = 1.0 / std::sqrt(static_cast<double>(ny) * nx);
  const int nh = half_width(nx);
  std::vector<cplx> buf(in.begin(), in.end());
  auto symmetrize_column = [&](int kx) {
    for (int ky = 0; ky <= ny / 2; ++ky) {
      const int neg = (ny - ky) % ny;
      const cplx a = in[static_cast<std::size_t>(ky) * nh + kx];
      const cplx b = in[static_cast<std::size_t>(neg) * nh + kx];
      const cplx h = 0.5 * (a + std::conj(b));
      buf[static_cast<std::size_t>(ky) * nh + kx] = h;
      buf[static_cast<std::size_t>(neg) * nh + kx] = std::conj(h);
    }
  };
  symmetrize_column(0);
  if (nx % 2 == 0) symmetrize_column(nx / 2);
  fftw_execute_dft_c2r(cache().get(PlanKind::c2r, ny, nx), as_fftw(buf.data()), out.data());
  for (auto& v : out) v *= scale;
}

void fft2(std::span<const cplx> in, int ny, int nx, std::span<cplx> out, bool inverse) {
  std::vector<cplx> buf(in.begin(), in.end());
  fftw_execute_dft(cache().get(inverse ? PlanKind::c2c_inv : PlanKind::c2c_fwd, ny, nx),
                   as_fftw(buf.data()), as_fftw(out.data()));
}

void dst1_2d(std::span<const double> in, int ny, int nx, std::span<double> out) {
  std::vector<double> buf(in.begin(), in.end());
  fftw_execute_r2r(cache().get(PlanKind::dst, ny, nx), buf.data(), out.data());
}

}  // namespace fundps::fft
