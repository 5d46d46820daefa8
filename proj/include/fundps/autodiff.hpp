#pragma once

#include <complex>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fundps/error.hpp"
#include "fundps/field.hpp"
#include "fundps/pde.hpp"

namespace fundps::ad {

using cplx = std::complex<double>;

/// Batch x channels x height x width. Scalars are {1,1,1,1}; complex
/// half-spectra have w = nx/2 + 1.
struct Shape {
  int n = 1, c = 1, h = 1, w = 1;

  std::size_t size() const { return static_cast<std::size_t>(n) * c * h * w; }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

class Tape;

struct Node {
  std::string op;
  Shape shape;
  bool complex = false;
  bool requires_grad = false;
  std::vector<double> value;
  std::vector<cplx> cvalue;
  std::vector<double> grad;  // allocated on first accumulation
  std::vector<cplx> cgrad;   // d/dRe + i d/dIm
  std::function<void(Tape&, const Node&)> backward;
};

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Node& node() const;
  const Shape& shape() const { return node().shape; }
  std::span<const double> value() const { return node().value; }
  double scalar() const;
};

/// Linear record of primitive applications. Node ids are a topological order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Shape shape, std::vector<double> values);
  Var variable(Shape shape, std::vector<double> values);
  Var constant(const Field& f);
  Var variable(const Field& f);

  std::size_t size() const { return nodes_.size(); }
  Node& node(int id) { return *nodes_.at(static_cast<std::size_t>(id)); }
  const Node& node(int id) const { return *nodes_.at(static_cast<std::size_t>(id)); }
  bool owns(const Var& v) const { return v.tape == this && v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(); }

  /// Records a node. Used by the primitives.
  Var push(Node node, std::vector<int> inputs);

  /// Reverse sweep from a scalar output; clears previous gradients first.
  void backward(const Var& output);

  /// Gradient buffers for backward closures.
  std::vector<double>& grad_buffer(int id);
  std::vector<cplx>& cgrad_buffer(int id);

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
};

/// d output / d wrt for a scalar output. Throws InvalidArgument when `wrt`
/// was not recorded on the output's tape.
std::vector<double> grad(Tape& tape, const Var& output, const Var& wrt);

// ---- primitives --------------------------------------------------------------
// Binary pointwise ops broadcast along any axis where one operand has extent 1.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// alpha * x + beta
Var affine(Var x, double alpha, double beta = 0.0);
Var scale(Var x, double alpha);

/// out[n,o] = sum_i W[o,i] x[n,i]; W has shape {co, ci, 1, 1}.
Var channel_mix(Var x, Var weight);

Var gelu(Var x);
/// Normalizes each (sample, group) over its channels and pixels; no affine part.
Var group_norm(Var x, int groups, double eps = 1e-5);

Var concat_channels(Var a, Var b);
Var slice_channels(Var x, int first, int count);

/// Orthonormal half-spectrum transforms per (sample, channel) plane.
Var rfft2(Var x);
/// Needs the real width, since the half-spectrum width is ambiguous.
Var irfft2(Var spec, int nx);

/// Resamples every plane to ny x nx by Fourier interpolation/truncation: modes
/// with |ky| < min(h,ny)/2 and kx < min(w,nx)/2 are kept, Nyquist modes dropped.
Var fourier_resample(Var x, int ny, int nx);

/// Mode-truncated complex channel mixing. `weight` is real with shape
/// {co, ci, my, 2*mx}, interleaved (re, im) per mode; mode (r, kx) with
/// r < my/2 acts on ky = r and r >= my/2 on ky = r - my. Other modes are zeroed.
Var spectral_mix(Var spec, Var weight, int my, int mx);

Var sum(Var x);
Var squared_l2(Var x);
/// sqrt(sum x^2)
Var norm_l2(Var x);
/// sum of Huber(x_i; delta)
Var huber(Var x, double delta);
/// Flat positions of x gathered into shape {1,1,1,k}.
Var gather(Var x, std::vector<std::size_t> positions);

/// Per plane, interior nodes only.
Var laplacian(Var u, const Grid2D& g);
/// -div(a grad u) per plane.
Var darcy_operator(Var a, Var u, const Grid2D& g);
/// u = solve_darcy(a) per plane, with implicit-function adjoint.
Var darcy_solve(Var a, const Grid2D& g);

/// y = B x per sample, x flattened over (c, h, w).
Var dense_linear(Var x, std::shared_ptr<const Eigen::MatrixXd> matrix);

}  // namespace fundps::ad
