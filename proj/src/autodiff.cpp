#include "fundps/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include <malloc.h>

#include "fundps/fft.hpp"

namespace fundps::ad {

namespace {
// Tapes allocate and free many multi-megabyte buffers per step; keeping them in
// the heap instead of mmap avoids re-faulting fresh pages every time.
[[maybe_unused]] const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
}  // namespace

std::string to_string(const Shape& s) {
  return "[" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," +
         std::to_string(s.w) + "]";
}

const Node& Var::node() const {
  if (!valid()) throw InvalidArgument("use of an empty traced value");
  return tape->node(id);
}

double Var::scalar() const {
  const Node& n = node();
  if (n.complex || n.shape.size() != 1) throw ShapeError("expected a scalar, got " + to_string(n.shape));
  return n.value[0];
}

// ---- tape ---------------------------------------------------------------------

Var Tape::push(Node node, std::vector<int> inputs) {
  for (int id : inputs) {
    if (this->node(id).requires_grad) node.requires_grad = true;
  }
  if (!node.requires_grad) node.backward = nullptr;
  nodes_.push_back(std::make_unique<Node>(std::move(node)));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(Shape shape, std::vector<double> values) {
  if (values.size() != shape.size()) throw ShapeError("constant: " + std::to_string(values.size()) + " values for shape " + to_string(shape));
  Node n;
  n.op = "constant";
  n.shape = shape;
  n.value = std::move(values);
  return push(std::move(n), {});
}

Var Tape::variable(Shape shape, std::vector<double> values) {
  if (values.size() != shape.size()) throw ShapeError("variable: " + std::to_string(values.size()) + " values for shape " + to_string(shape));
  Node n;
  n.op = "variable";
  n.shape = shape;
  n.requires_grad = true;
  n.value = std::move(values);
  return push(std::move(n), {});
}

namespace {
Shape field_shape(const Field& f) { return Shape{1, f.channels(), f.grid().ny, f.grid().nx}; }
}  // namespace

Var Tape::constant(const Field& f) {
  return constant(field_shape(f), std::vector<double>(f.values().begin(), f.values().end()));
}

Var Tape::variable(const Field& f) {
  return variable(field_shape(f), std::vector<double>(f.values().begin(), f.values().end()));
}

std::vector<double>& Tape::grad_buffer(int id) {
  Node& n = node(id);
  if (n.grad.empty()) n.grad.assign(n.shape.size(), 0.0);
  return n.grad;
}

std::vector<cplx>& Tape::cgrad_buffer(int id) {
  Node& n = node(id);
  if (n.cgrad.empty()) n.cgrad.assign(n.shape.size(), cplx(0.0, 0.0));
  return n.cgrad;
}

void Tape::backward(const Var& output) {
  if (!owns(output)) throw InvalidArgument("backward: output is not on this tape");
  const Node& out = node(output.id);
  if (out.complex || out.shape.size() != 1) throw ShapeError("backward needs a scalar output, got " + to_string(out.shape));
  for (auto& n : nodes_) {
    n->grad.clear();
    n->cgrad.clear();
  }
  if (!out.requires_grad) return;
  grad_buffer(output.id)[0] = 1.0;
  for (int id = output.id; id >= 0; --id) {
    const Node& n = node(id);
    if (!n.requires_grad || !n.backward) continue;
    if (n.grad.empty() && n.cgrad.empty()) continue;
    n.backward(*this, n);
  }
}

std::vector<double> grad(Tape& tape, const Var& output, const Var& wrt) {
  if (!tape.owns(wrt)) throw InvalidArgument("grad: the differentiation variable is not recorded on this tape");
  if (!tape.owns(output)) throw InvalidArgument("grad: the output is not recorded on this tape");
  if (wrt.id > output.id) throw InvalidArgument("grad: the variable was recorded after the output");
  tape.backward(output);
  const Node& n = tape.node(wrt.id);
  if (n.complex) throw InvalidArgument("grad: complex variables are not supported");
  if (n.grad.empty()) return std::vector<double>(n.shape.size(), 0.0);
  return n.grad;
}

// ---- helpers -------------------------------------------------------------------

namespace {

Tape& same_tape(const Var& a, const Var& b) {
  if (!a.valid() || !b.valid() || a.tape != b.tape) throw InvalidArgument("operands live on different tapes");
  return *a.tape;
}

void require_real(const Var& x, const char* op) {
  if (x.node().complex) throw ShapeError(std::string(op) + ": expected a real operand");
}

void require_complex(const Var& x, const char* op) {
  if (!x.node().complex) throw ShapeError(std::string(op) + ": expected a spectrum operand");
}

bool needs(Tape& t, int id) { return t.node(id).requires_grad; }

Node make_node(const char* op, Shape shape) {
  Node n;
  n.op = op;
  n.shape = shape;
  n.value.assign(shape.size(), 0.0);
  return n;
}

Node make_cnode(const char* op, Shape shape) {
  Node n;
  n.op = op;
  n.shape = shape;
  n.complex = true;
  n.cvalue.assign(shape.size(), cplx(0.0, 0.0));
  return n;
}

// Broadcast plumbing: strides with zeros along extent-1 axes.
struct Broadcast {
  Shape out;
  std::array<std::size_t, 4> sa{}, sb{};
};

std::array<std::size_t, 4> strides_for(const Shape& s, const Shape& out) {
  const std::array<int, 4> e{s.n, s.c, s.h, s.w};
  const std::array<int, 4> o{out.n, out.c, out.h, out.w};
  std::array<std::size_t, 4> st{};
  std::size_t acc = 1;
  for (int d = 3; d >= 0; --d) {
    st[static_cast<std::size_t>(d)] = (e[static_cast<std::size_t>(d)] == 1 && o[static_cast<std::size_t>(d)] != 1) ? 0 : acc;
    acc *= static_cast<std::size_t>(e[static_cast<std::size_t>(d)]);
  }
  return st;
}

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  auto dim = [&](int x, int y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
  };
  Broadcast bc;
  bc.out = Shape{dim(a.n, b.n), dim(a.c, b.c), dim(a.h, b.h), dim(a.w, b.w)};
  bc.sa = strides_for(a, bc.out);
  bc.sb = strides_for(b, bc.out);
  return bc;
}

template <class Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  const Shape& o = bc.out;
  std::size_t k = 0;
  for (int n = 0; n < o.n; ++n) {
    for (int c = 0; c < o.c; ++c) {
      for (int h = 0; h < o.h; ++h) {
        const std::size_t ia0 = n * bc.sa[0] + c * bc.sa[1] + h * bc.sa[2];
        const std::size_t ib0 = n * bc.sb[0] + c * bc.sb[1] + h * bc.sb[2];
        for (int w = 0; w < o.w; ++w, ++k) fn(k, ia0 + w * bc.sa[3], ib0 + w * bc.sb[3]);
      }
    }
  }
}

enum class BinOp { add, sub, mul };

Var binary(Var a, Var b, BinOp kind, const char* name) {
  Tape& t = same_tape(a, b);
  require_real(a, name);
  require_real(b, name);
  const Broadcast bc = broadcast(a.shape(), b.shape(), name);
  Node n = make_node(name, bc.out);
  const auto& av = a.node().value;
  const auto& bv = b.node().value;
  for_each_broadcast(bc, [&](std::size_t k, std::size_t ia, std::size_t ib) {
    switch (kind) {
      case BinOp::add: n.value[k] = av[ia] + bv[ib]; break;
      case BinOp::sub: n.value[k] = av[ia] - bv[ib]; break;
      case BinOp::mul: n.value[k] = av[ia] * bv[ib]; break;
    }
  });
  const int ida = a.id, idb = b.id;
  n.backward = [bc, ida, idb, kind](Tape& tp, const Node& self) {
    const bool ga = needs(tp, ida), gb = needs(tp, idb);
    std::vector<double>* gav = ga ? &tp.grad_buffer(ida) : nullptr;
    std::vector<double>* gbv = gb ? &tp.grad_buffer(idb) : nullptr;
    const auto& av2 = tp.node(ida).value;
    const auto& bv2 = tp.node(idb).value;
    for_each_broadcast(bc, [&](std::size_t k, std::size_t ia, std::size_t ib) {
      const double g = self.grad[k];
      switch (kind) {
        case BinOp::add:
          if (ga) (*gav)[ia] += g;
          if (gb) (*gbv)[ib] += g;
          break;
        case BinOp::sub:
          if (ga) (*gav)[ia] += g;
          if (gb) (*gbv)[ib] -= g;
          break;
        case BinOp::mul:
          if (ga) (*gav)[ia] += g * bv2[ib];
          if (gb) (*gbv)[ib] += g * av2[ia];
          break;
      }
    });
  };
  return t.push(std::move(n), {ida, idb});
}

}  // namespace

// ---- pointwise -------------------------------------------------------------------

Var add(Var a, Var b) { return binary(a, b, BinOp::add, "add"); }
Var sub(Var a, Var b) { return binary(a, b, BinOp::sub, "sub"); }
Var mul(Var a, Var b) { return binary(a, b, BinOp::mul, "mul"); }

Var affine(Var x, double alpha, double beta) {
  require_real(x, "affine");
  Tape& t = *x.tape;
  Node n = make_node("affine", x.shape());
  const auto& xv = x.node().value;
  for (std::size_t k = 0; k < xv.size(); ++k) n.value[k] = alpha * xv[k] + beta;
  const int id = x.id;
  n.backward = [id, alpha](Tape& tp, const Node& self) {
    auto& g = tp.grad_buffer(id);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += alpha * self.grad[k];
  };
  return t.push(std::move(n), {id});
}

Var scale(Var x, double alpha) { return affine(x, alpha, 0.0); }

Var gelu(Var x) {
  require_real(x, "gelu");
  Tape& t = *x.tape;
  Node n = make_node("gelu", x.shape());
  const auto& xv = x.node().value;
  for (std::size_t k = 0; k < xv.size(); ++k) n.value[k] = 0.5 * xv[k] * (1.0 + std::erf(xv[k] * std::numbers::sqrt2 / 2.0));
  const int id = x.id;
  n.backward = [id](Tape& tp, const Node& self) {
    const auto& v = tp.node(id).value;
    auto& g = tp.grad_buffer(id);
    const double c = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t k = 0; k < g.size(); ++k) {
      const double d = 0.5 * (1.0 + std::erf(v[k] * std::numbers::sqrt2 / 2.0)) + v[k] * c * std::exp(-0.5 * v[k] * v[k]);
      g[k] += d * self.grad[k];
    }
  };
  return t.push(std::move(n), {id});
}

// ---- channel ops -----------------------------------------------------------------

Var channel_mix(Var x, Var weight) {
  Tape& t = same_tape(x, weight);
  require_real(x, "channel_mix");
  require_real(weight, "channel_mix");
  const Shape xs = x.shape(), ws = weight.shape();
  if (ws.h != 1 || ws.w != 1 || ws.c != xs.c) {
    throw ShapeError("channel_mix: weight " + to_string(ws) + " does not act on input " + to_string(xs));
  }
  const int ci = xs.c, co = ws.n;
  const Eigen::Index hw = static_cast<Eigen::Index>(xs.plane());
  Node n = make_node("channel_mix", Shape{xs.n, co, xs.h, xs.w});
  using Map = Eigen::Map<Eigen::MatrixXd>;
  using CMap = Eigen::Map<const Eigen::MatrixXd>;
  CMap wt(weight.node().value.data(), ci, co);  // W^T
  for (int s = 0; s < xs.n; ++s) {
    CMap xm(x.node().value.data() + static_cast<std::size_t>(s) * ci * hw, hw, ci);
    Map om(n.value.data() + static_cast<std::size_t>(s) * co * hw, hw, co);
    om.noalias() = xm * wt;
  }
  const int idx = x.id, idw = weight.id;
  n.backward = [idx, idw, ci, co, hw, nb = xs.n](Tape& tp, const Node& self) {
    CMap wt2(tp.node(idw).value.data(), ci, co);
    const bool gx = needs(tp, idx), gw = needs(tp, idw);
    for (int s = 0; s < nb; ++s) {
      CMap gm(self.grad.data() + static_cast<std::size_t>(s) * co * hw, hw, co);
      if (gx) {
        Map gxm(tp.grad_buffer(idx).data() + static_cast<std::size_t>(s) * ci * hw, hw, ci);
        gxm.noalias() += gm * wt2.transpose();
      }
      if (gw) {
        CMap xm(tp.node(idx).value.data() + static_cast<std::size_t>(s) * ci * hw, hw, ci);
        Map gwm(tp.grad_buffer(idw).data(), ci, co);
        gwm.noalias() += xm.transpose() * gm;
      }
    }
  };
  return t.push(std::move(n), {idx, idw});
}

Var group_norm(Var x, int groups, double eps) {
  require_real(x, "group_norm");
  const Shape s = x.shape();
  if (groups < 1 || s.c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(s.c) + " channels not divisible into " + std::to_string(groups) + " groups");
  }
  Tape& t = *x.tape;
  Node n = make_node("group_norm", s);
  const std::size_t m = static_cast<std::size_t>(s.c / groups) * s.plane();
  const std::size_t blocks = static_cast<std::size_t>(s.n) * groups;
  std::vector<double> inv_std(blocks);
  const auto& xv = x.node().value;
  for (std::size_t b = 0; b < blocks; ++b) {
    const double* p = xv.data() + b * m;
    double mean = 0.0;
    for (std::size_t k = 0; k < m; ++k) mean += p[k];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t k = 0; k < m; ++k) var += (p[k] - mean) * (p[k] - mean);
    var /= static_cast<double>(m);
    inv_std[b] = 1.0 / std::sqrt(var + eps);
    for (std::size_t k = 0; k < m; ++k) n.value[b * m + k] = (p[k] - mean) * inv_std[b];
  }
  const int id = x.id;
  n.backward = [id, m, blocks, inv_std = std::move(inv_std)](Tape& tp, const Node& self) {
    auto& g = tp.grad_buffer(id);
    for (std::size_t b = 0; b < blocks; ++b) {
      const double* gy = self.grad.data() + b * m;
      const double* y = self.value.data() + b * m;
      double mg = 0.0, mgy = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        mg += gy[k];
        mgy += gy[k] * y[k];
      }
      mg /= static_cast<double>(m);
      mgy /= static_cast<double>(m);
      for (std::size_t k = 0; k < m; ++k) g[b * m + k] += inv_std[b] * (gy[k] - mg - y[k] * mgy);
    }
  };
  return t.push(std::move(n), {id});
}

Var concat_channels(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_real(a, "concat_channels");
  require_real(b, "concat_channels");
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: " + to_string(sa) + " vs " + to_string(sb));
  }
  Node n = make_node("concat_channels", Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t pa = static_cast<std::size_t>(sa.c) * sa.plane(), pb = static_cast<std::size_t>(sb.c) * sb.plane();
  for (int s = 0; s < sa.n; ++s) {
    std::copy_n(a.node().value.data() + s * pa, pa, n.value.data() + s * (pa + pb));
    std::copy_n(b.node().value.data() + s * pb, pb, n.value.data() + s * (pa + pb) + pa);
  }
  const int ida = a.id, idb = b.id;
  n.backward = [ida, idb, pa, pb, nb = sa.n](Tape& tp, const Node& self) {
    for (int s = 0; s < nb; ++s) {
      const double* g = self.grad.data() + s * (pa + pb);
      if (needs(tp, ida)) {
        double* ga = tp.grad_buffer(ida).data() + s * pa;
        for (std::size_t k = 0; k < pa; ++k) ga[k] += g[k];
      }
      if (needs(tp, idb)) {
        double* gb = tp.grad_buffer(idb).data() + s * pb;
        for (std::size_t k = 0; k < pb; ++k) gb[k] += g[pa + k];
      }
    }
  };
  return t.push(std::move(n), {ida, idb});
}

Var slice_channels(Var x, int first, int count) {
  require_real(x, "slice_channels");
  const Shape s = x.shape();
  if (first < 0 || count < 1 || first + count > s.c) {
    throw ShapeError("slice_channels: [" + std::to_string(first) + ", " + std::to_string(first + count) + ") outside " + to_string(s));
  }
  Tape& t = *x.tape;
  Node n = make_node("slice_channels", Shape{s.n, count, s.h, s.w});
  const std::size_t plane = s.plane();
  for (int b = 0; b < s.n; ++b) {
    std::copy_n(x.node().value.data() + (static_cast<std::size_t>(b) * s.c + first) * plane, count * plane,
                n.value.data() + static_cast<std::size_t>(b) * count * plane);
  }
  const int id = x.id;
  n.backward = [id, s, first, count, plane](Tape& tp, const Node& self) {
    auto& g = tp.grad_buffer(id);
    for (int b = 0; b < s.n; ++b) {
      const double* src = self.grad.data() + static_cast<std::size_t>(b) * count * plane;
      double* dst = g.data() + (static_cast<std::size_t>(b) * s.c + first) * plane;
      for (std::size_t k = 0; k < count * plane; ++k) dst[k] += src[k];
    }
  };
  return t.push(std::move(n), {id});
}

// ---- spectral ----------------------------------------------------------------------

Var rfft2(Var x) {
  require_real(x, "rfft2");
  Tape& t = *x.tape;
  const Shape s = x.shape();
  const int hw = fft::half_width(s.w);
  Node n = make_cnode("rfft2", Shape{s.n, s.c, s.h, hw});
  const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
  const std::size_t in_plane = s.plane(), out_plane = static_cast<std::size_t>(s.h) * hw;
  for (std::size_t p = 0; p < planes; ++p) {
    fft::rfft2(std::span<const double>(x.node().value.data() + p * in_plane, in_plane), s.h, s.w,
               std::span<cplx>(n.cvalue.data() + p * out_plane, out_plane));
  }
  const int id = x.id;
  n.backward = [id, s, hw, planes, in_plane, out_plane](Tape& tp, const Node& self) {
    if (self.cgrad.empty()) return;
    auto& g = tp.grad_buffer(id);
    std::vector<cplx> buf(out_plane);
    std::vector<double> out(in_plane);
    for (std::size_t p = 0; p < planes; ++p) {
      for (int r = 0; r < s.h; ++r) {
        for (int k = 0; k < hw; ++k) {
          const std::size_t q = static_cast<std::size_t>(r) * hw + k;
          buf[q] = self.cgrad[p * out_plane + q] / fft::column_weight(k, s.w);
        }
      }
      fft::irfft2(buf, s.h, s.w, out);
      for (std::size_t k = 0; k < in_plane; ++k) g[p * in_plane + k] += out[k];
    }
  };
  return t.push(std::move(n), {id});
}

Var irfft2(Var spec, int nx) {
  require_complex(spec, "irfft2");
  Tape& t = *spec.tape;
  const Shape s = spec.shape();
  if (fft::half_width(nx) != s.w) throw ShapeError("irfft2: width " + std::to_string(nx) + " does not match spectrum " + to_string(s));
  Node n = make_node("irfft2", Shape{s.n, s.c, s.h, nx});
  const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
  const std::size_t in_plane = s.plane(), out_plane = static_cast<std::size_t>(s.h) * nx;
  for (std::size_t p = 0; p < planes; ++p) {
    fft::irfft2(std::span<const cplx>(spec.node().cvalue.data() + p * in_plane, in_plane), s.h, nx,
                std::span<double>(n.value.data() + p * out_plane, out_plane));
  }
  const int id = spec.id;
  n.backward = [id, s, nx, planes, in_plane, out_plane](Tape& tp, const Node& self) {
    auto& g = tp.cgrad_buffer(id);
    std::vector<cplx> buf(in_plane);
    for (std::size_t p = 0; p < planes; ++p) {
      fft::rfft2(std::span<const double>(self.grad.data() + p * out_plane, out_plane), s.h, nx, buf);
      for (int r = 0; r < s.h; ++r) {
        for (int k = 0; k < s.w; ++k) {
          const std::size_t q = static_cast<std::size_t>(r) * s.w + k;
          g[p * in_plane + q] += fft::column_weight(k, nx) * buf[q];
        }
      }
    }
  };
  return t.push(std::move(n), {id});
}

namespace {

// Linear copy of retained modes between half spectra; see fourier_resample.
Var spectral_resize(Var spec, int in_nx, int ny, int nx) {
  const Shape s = spec.shape();
  const int hw = fft::half_width(nx);
  Tape& t = *spec.tape;
  Node n = make_cnode("spectral_resize", Shape{s.n, s.c, ny, hw});
  const int ky_lim = std::min(s.h, ny);  // keep |ky| < ky_lim / 2
  const int kx_lim = std::min(in_nx, nx);
  const double factor = std::sqrt(static_cast<double>(ny) * nx / (static_cast<double>(s.h) * in_nx));
  struct Copy {
    std::size_t from, to;
  };
  std::vector<Copy> copies;
  for (int ky = -(ky_lim - 1) / 2; 2 * std::abs(ky) < ky_lim; ++ky) {
    const int rin = (ky + s.h) % s.h, rout = (ky + ny) % ny;
    for (int kx = 0; 2 * kx < kx_lim; ++kx) {
      copies.push_back({static_cast<std::size_t>(rin) * s.w + kx, static_cast<std::size_t>(rout) * hw + kx});
    }
  }
  const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
  const std::size_t in_plane = s.plane(), out_plane = static_cast<std::size_t>(ny) * hw;
  for (std::size_t p = 0; p < planes; ++p) {
    for (const auto& c : copies) n.cvalue[p * out_plane + c.to] = factor * spec.node().cvalue[p * in_plane + c.from];
  }
  const int id = spec.id;
  n.backward = [id, copies = std::move(copies), planes, in_plane, out_plane, factor](Tape& tp, const Node& self) {
    if (self.cgrad.empty()) return;
    auto& g = tp.cgrad_buffer(id);
    for (std::size_t p = 0; p < planes; ++p) {
      for (const auto& c : copies) g[p * in_plane + c.from] += factor * self.cgrad[p * out_plane + c.to];
    }
  };
  return t.push(std::move(n), {id});
}

}  // namespace

Var fourier_resample(Var x, int ny, int nx) {
  require_real(x, "fourier_resample");
  const Shape s = x.shape();
  if (ny < 2 || nx < 2) throw ShapeError("fourier_resample: target must be at least 2x2");
  if (s.h == ny && s.w == nx) return x;
  return irfft2(spectral_resize(rfft2(x), s.w, ny, nx), nx);
}

Var spectral_mix(Var spec, Var weight, int my, int mx) {
  Tape& t = same_tape(spec, weight);
  require_complex(spec, "spectral_mix");
  require_real(weight, "spectral_mix");
  const Shape s = spec.shape(), ws = weight.shape();
  if (ws.c != s.c || ws.h != my || ws.w != 2 * mx) {
    throw ShapeError("spectral_mix: weight " + to_string(ws) + " does not match input " + to_string(s) + " with modes " +
                     std::to_string(my) + "x" + std::to_string(mx));
  }
  if (my > s.h || mx > s.w) {
    throw ShapeError("spectral_mix: " + std::to_string(my) + "x" + std::to_string(mx) + " modes exceed spectrum " + to_string(s));
  }
  const int ci = s.c, co = ws.n, nb = s.n;
  Node n = make_cnode("spectral_mix", Shape{nb, co, s.h, s.w});
  const std::size_t plane = s.plane();
  const std::size_t modes = static_cast<std::size_t>(my) * mx;
  std::vector<std::size_t> pos(modes);
  for (int r = 0; r < my; ++r) {
    const int ky = r < my / 2 ? r : r - my;
    const int row = (ky + s.h) % s.h;
    for (int k = 0; k < mx; ++k) pos[static_cast<std::size_t>(r) * mx + k] = static_cast<std::size_t>(row) * s.w + k;
  }
  using CMat = Eigen::MatrixXcd;
  auto weight_matrix = [co, ci, modes](const std::vector<double>& w, std::size_t mode) {
    CMat m(co, ci);
    for (int o = 0; o < co; ++o) {
      for (int i = 0; i < ci; ++i) {
        const std::size_t base = (static_cast<std::size_t>(o) * ci + i) * modes * 2 + 2 * mode;
        m(o, i) = cplx(w[base], w[base + 1]);
      }
    }
    return m;
  };
  const auto& xv = spec.node().cvalue;
  const auto& wv = weight.node().value;
  CMat xm(ci, nb), ym;
  for (std::size_t mode = 0; mode < modes; ++mode) {
    for (int b = 0; b < nb; ++b) {
      for (int i = 0; i < ci; ++i) xm(i, b) = xv[(static_cast<std::size_t>(b) * ci + i) * plane + pos[mode]];
    }
    ym.noalias() = weight_matrix(wv, mode) * xm;
    for (int b = 0; b < nb; ++b) {
      for (int o = 0; o < co; ++o) n.cvalue[(static_cast<std::size_t>(b) * co + o) * plane + pos[mode]] = ym(o, b);
    }
  }
  const int idx = spec.id, idw = weight.id;
  n.backward = [idx, idw, ci, co, nb, plane, modes, pos = std::move(pos), weight_matrix](Tape& tp, const Node& self) {
    if (self.cgrad.empty()) return;
    const bool gx = needs(tp, idx), gw = needs(tp, idw);
    const auto& xv2 = tp.node(idx).cvalue;
    const auto& wv2 = tp.node(idw).value;
    CMat gm(co, nb), xm2(ci, nb);
    for (std::size_t mode = 0; mode < modes; ++mode) {
      for (int b = 0; b < nb; ++b) {
        for (int o = 0; o < co; ++o) gm(o, b) = self.cgrad[(static_cast<std::size_t>(b) * co + o) * plane + pos[mode]];
      }
      if (gx) {
        auto& g = tp.cgrad_buffer(idx);
        const CMat gxm = weight_matrix(wv2, mode).adjoint() * gm;
        for (int b = 0; b < nb; ++b) {
          for (int i = 0; i < ci; ++i) g[(static_cast<std::size_t>(b) * ci + i) * plane + pos[mode]] += gxm(i, b);
        }
      }
      if (gw) {
        for (int b = 0; b < nb; ++b) {
          for (int i = 0; i < ci; ++i) xm2(i, b) = xv2[(static_cast<std::size_t>(b) * ci + i) * plane + pos[mode]];
        }
        const CMat gwm = gm * xm2.adjoint();
        auto& g = tp.grad_buffer(idw);
        for (int o = 0; o < co; ++o) {
          for (int i = 0; i < ci; ++i) {
            const std::size_t base = (static_cast<std::size_t>(o) * ci + i) * modes * 2 + 2 * mode;
            g[base] += gwm(o, i).real();
            g[base + 1] += gwm(o, i).imag();
          }
        }
      }
    }
  };
  return t.push(std::move(n), {idx, idw});
}

// ---- reductions ------------------------------------------------------------------

namespace {

Var reduce(Var x, const char* name, double value, std::function<double(double)> dfdx) {
  Tape& t = *x.tape;
  Node n = make_node(name, Shape{});
  n.value[0] = value;
  const int id = x.id;
  n.backward = [id, dfdx = std::move(dfdx)](Tape& tp, const Node& self) {
    const auto& v = tp.node(id).value;
    auto& g = tp.grad_buffer(id);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[0] * dfdx(v[k]);
  };
  return t.push(std::move(n), {id});
}

}  // namespace

Var sum(Var x) {
  require_real(x, "sum");
  double s = 0.0;
  for (double v : x.node().value) s += v;
  return reduce(x, "sum", s, [](double) { return 1.0; });
}

Var squared_l2(Var x) {
  require_real(x, "squared_l2");
  double s = 0.0;
  for (double v : x.node().value) s += v * v;
  return reduce(x, "squared_l2", s, [](double v) { return 2.0 * v; });
}

Var norm_l2(Var x) {
  require_real(x, "norm_l2");
  double s = 0.0;
  for (double v : x.node().value) s += v * v;
  const double nrm = std::sqrt(s);
  // The subgradient at 0 is taken as 0.
  return reduce(x, "norm_l2", nrm, [nrm](double v) { return nrm > 0.0 ? v / nrm : 0.0; });
}

Var huber(Var x, double delta) {
  require_real(x, "huber");
  if (!(delta > 0.0)) throw InvalidArgument("huber: delta must be positive");
  double s = 0.0;
  for (double v : x.node().value) {
    const double a = std::abs(v);
    s += a <= delta ? 0.5 * v * v : delta * (a - 0.5 * delta);
  }
  return reduce(x, "huber", s, [delta](double v) { return std::clamp(v, -delta, delta); });
}

Var gather(Var x, std::vector<std::size_t> positions) {
  require_real(x, "gather");
  const std::size_t size = x.shape().size();
  for (std::size_t p : positions) {
    if (p >= size) throw ShapeError("gather: position " + std::to_string(p) + " outside " + to_string(x.shape()));
  }
  Tape& t = *x.tape;
  Node n = make_node("gather", Shape{1, 1, 1, static_cast<int>(positions.size())});
  for (std::size_t k = 0; k < positions.size(); ++k) n.value[k] = x.node().value[positions[k]];
  const int id = x.id;
  n.backward = [id, positions = std::move(positions)](Tape& tp, const Node& self) {
    auto& g = tp.grad_buffer(id);
    for (std::size_t k = 0; k < positions.size(); ++k) g[positions[k]] += self.grad[k];
  };
  return t.push(std::move(n), {id});
}

// ---- PDE operators -------------------------------------------------------------------

namespace {

void require_grid(const Shape& s, const Grid2D& g, const char* op) {
  if (s.h != g.ny || s.w != g.nx) throw ShapeError(std::string(op) + ": shape " + to_string(s) + " is not on grid " + to_string(g));
}

}  // namespace

Var laplacian(Var u, const Grid2D& g) {
  require_real(u, "laplacian");
  const Shape s = u.shape();
  require_grid(s, g, "laplacian");
  Tape& t = *u.tape;
  Node n = make_node("laplacian", s);
  const std::size_t plane = s.plane(), planes = static_cast<std::size_t>(s.n) * s.c;
  for (std::size_t p = 0; p < planes; ++p) {
    stencil::laplacian(std::span<const double>(u.node().value.data() + p * plane, plane), g,
                       std::span<double>(n.value.data() + p * plane, plane));
  }
  const int id = u.id;
  n.backward = [id, g, plane, planes](Tape& tp, const Node& self) {
    auto& gu = tp.grad_buffer(id);
    for (std::size_t p = 0; p < planes; ++p) {
      stencil::laplacian_adjoint(std::span<const double>(self.grad.data() + p * plane, plane), g,
                                 std::span<double>(gu.data() + p * plane, plane));
    }
  };
  return t.push(std::move(n), {id});
}

Var darcy_operator(Var a, Var u, const Grid2D& g) {
  Tape& t = same_tape(a, u);
  require_real(a, "darcy_operator");
  require_real(u, "darcy_operator");
  const Shape s = u.shape();
  if (!(a.shape() == s)) throw ShapeError("darcy_operator: " + to_string(a.shape()) + " vs " + to_string(s));
  require_grid(s, g, "darcy_operator");
  Node n = make_node("darcy_operator", s);
  const std::size_t plane = s.plane(), planes = static_cast<std::size_t>(s.n) * s.c;
  for (std::size_t p = 0; p < planes; ++p) {
    stencil::darcy_operator(std::span<const double>(a.node().value.data() + p * plane, plane),
                            std::span<const double>(u.node().value.data() + p * plane, plane), g,
                            std::span<double>(n.value.data() + p * plane, plane));
  }
  const int ida = a.id, idu = u.id;
  n.backward = [ida, idu, g, plane, planes](Tape& tp, const Node& self) {
    const bool ga = needs(tp, ida), gu = needs(tp, idu);
    for (std::size_t p = 0; p < planes; ++p) {
      std::span<double> spa, spu;
      if (ga) spa = std::span<double>(tp.grad_buffer(ida).data() + p * plane, plane);
      if (gu) spu = std::span<double>(tp.grad_buffer(idu).data() + p * plane, plane);
      stencil::darcy_operator_adjoint(std::span<const double>(tp.node(ida).value.data() + p * plane, plane),
                                      std::span<const double>(tp.node(idu).value.data() + p * plane, plane),
                                      std::span<const double>(self.grad.data() + p * plane, plane), g, spa, spu);
    }
  };
  return t.push(std::move(n), {ida, idu});
}

Var darcy_solve(Var a, const Grid2D& g) {
  require_real(a, "darcy_solve");
  const Shape s = a.shape();
  require_grid(s, g, "darcy_solve");
  Tape& t = *a.tape;
  Node n = make_node("darcy_solve", s);
  const std::size_t plane = s.plane(), planes = static_cast<std::size_t>(s.n) * s.c;
  auto plane_field = [&g, plane](const std::vector<double>& v, std::size_t p) {
    return Field(g, 1, std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(p * plane),
                                           v.begin() + static_cast<std::ptrdiff_t>((p + 1) * plane)));
  };
  for (std::size_t p = 0; p < planes; ++p) {
    const Field u = solve_darcy(plane_field(a.node().value, p));
    std::copy(u.values().begin(), u.values().end(), n.value.begin() + static_cast<std::ptrdiff_t>(p * plane));
  }
  const int id = a.id;
  n.backward = [id, plane, planes, plane_field](Tape& tp, const Node& self) {
    auto& ga = tp.grad_buffer(id);
    for (std::size_t p = 0; p < planes; ++p) {
      const Field da = darcy_solve_adjoint(plane_field(tp.node(id).value, p), plane_field(self.value, p),
                                           plane_field(self.grad, p));
      for (std::size_t k = 0; k < plane; ++k) ga[p * plane + k] += da.values()[k];
    }
  };
  return t.push(std::move(n), {id});
}

// ---- dense ------------------------------------------------------------------------

Var dense_linear(Var x, std::shared_ptr<const Eigen::MatrixXd> matrix) {
  require_real(x, "dense_linear");
  const Shape s = x.shape();
  const Eigen::Index per = static_cast<Eigen::Index>(static_cast<std::size_t>(s.c) * s.plane());
  if (!matrix || matrix->rows() != per || matrix->cols() != per) {
    throw ShapeError("dense_linear: matrix does not act on samples of shape " + to_string(s));
  }
  Tape& t = *x.tape;
  Node n = make_node("dense_linear", s);
  using CMap = Eigen::Map<const Eigen::VectorXd>;
  using Map = Eigen::Map<Eigen::VectorXd>;
  for (int b = 0; b < s.n; ++b) {
    Map(n.value.data() + b * per, per).noalias() = *matrix * CMap(x.node().value.data() + b * per, per);
  }
  const int id = x.id;
  n.backward = [id, matrix, per, nb = s.n](Tape& tp, const Node& self) {
    auto& g = tp.grad_buffer(id);
    for (int b = 0; b < nb; ++b) {
      Map(g.data() + b * per, per).noalias() += matrix->transpose() * CMap(self.grad.data() + b * per, per);
    }
  };
  return t.push(std::move(n), {id});
}

}  // namespace fundps::ad
