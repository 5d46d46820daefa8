#pragma once

#include <complex>
#include <span>

namespace fundps::fft {

using cplx = std::complex<double>;

/// Number of stored columns of a half spectrum for a row length nx.
inline int half_width(int nx) { return nx / 2 + 1; }

/// Orthonormal real-to-half-complex transform of an ny x nx row-major array.
/// `out` holds ny x (nx/2 + 1) coefficients, out[k] = N^{-1/2} sum_x in[x] e^{-i k.x}.
void rfft2(std::span<const double> in, int ny, int nx, std::span<cplx> out);

/// Orthonormal half-complex-to-real synthesis:
///   out[x] = N^{-1/2} Re( sum_k w(kx) in[k] e^{i k.x} ),
/// with w = 1 for the kx = 0 and (even nx) kx = nx/2 columns, w = 2 otherwise.
/// This is a well-defined real-linear map on arbitrary (non-Hermitian) input
/// and the exact inverse of rfft2 on Hermitian-consistent spectra.
void irfft2(std::span<const cplx> in, int ny, int nx, std::span<double> out);

/// Column weight w(kx) used by irfft2.
inline double column_weight(int kx, int nx) {
  return (kx == 0 || (nx % 2 == 0 && kx == nx / 2)) ? 1.0 : 2.0;
}

/// Unnormalized full complex 2-D DFT (sign -1 forward, +1 when `inverse`).
void fft2(std::span<const cplx> in, int ny, int nx, std::span<cplx> out, bool inverse);

/// Unnormalized 2-D type-I discrete sine transform (FFTW RODFT00 on both axes).
/// Applying it twice multiplies by 4 (ny + 1)(nx + 1).
void dst1_2d(std::span<const double> in, int ny, int nx, std::span<double> out);

}  // namespace fundps::fft
