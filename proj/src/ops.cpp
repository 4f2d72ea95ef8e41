#include "ldkl/ops.hpp"

#include <cmath>
#include <string>

#include "ldkl/error.hpp"
#include "ldkl/kernels.hpp"

namespace ldkl::ad {

namespace kp = kernels::parallel;

namespace {

[[noreturn]] void dim_error(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

void require_same(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) dim_error(op, a.shape(), b.shape());
}

void require_rank(const char* op, Var a, std::size_t rank) {
  if (a.value().rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(a.shape()));
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw ContractError("operation on an unbound Var");
  return *a.tape();
}

void axpy(Tensor& dst, const Tensor& src, double s = 1.0) {
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += s * src[i];
}

template <typename F, typename D>
Var unary(OpKind kind, Var a, F f, D dfdx) {
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  const std::size_t ia = a.id();
  return tape_of(a).record(kind, std::move(out), {a}, [ia, dfdx](Tape& t, const Tensor& g) {
    if (!t.needs_grad(ia)) return;
    const Tensor& x = t.value(ia);
    Tensor& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * dfdx(x[i]);
  });
}

}  // namespace

Var add(Var a, Var b) {
  require_same("add", a, b);
  Tensor out = a.value();
  axpy(out, b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return tape_of(a).record(OpKind::Add, std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.needs_grad(ia)) axpy(t.grad_ref(ia), g);
    if (t.needs_grad(ib)) axpy(t.grad_ref(ib), g);
  });
}

Var sub(Var a, Var b) {
  require_same("sub", a, b);
  Tensor out = a.value();
  axpy(out, b.value(), -1.0);
  const std::size_t ia = a.id(), ib = b.id();
  return tape_of(a).record(OpKind::Sub, std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.needs_grad(ia)) axpy(t.grad_ref(ia), g);
    if (t.needs_grad(ib)) axpy(t.grad_ref(ib), g, -1.0);
  });
}

Var mul(Var a, Var b) {
  require_same("mul", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape_of(a).record(OpKind::Mul, std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (t.needs_grad(ia)) {
      Tensor& ga = t.grad_ref(ia);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_ref(ib);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var div(Var a, Var b) {
  require_same("div", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] / b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape_of(a).record(OpKind::Div, std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (t.needs_grad(ia)) {
      Tensor& ga = t.grad_ref(ia);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / bv[i];
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_ref(ib);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= s;
  const std::size_t ia = a.id();
  return tape_of(a).record(OpKind::Scale, std::move(out), {a}, [ia, s](Tape& t, const Tensor& g) {
    if (t.needs_grad(ia)) axpy(t.grad_ref(ia), g, s);
  });
}

Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.storage()) v += s;
  const std::size_t ia = a.id();
  return tape_of(a).record(OpKind::AddScalar, std::move(out), {a}, [ia](Tape& t, const Tensor& g) {
    if (t.needs_grad(ia)) axpy(t.grad_ref(ia), g);
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var add_broadcast(Var a, Var s) {
  if (s.numel() != 1) dim_error("add_broadcast", a.shape(), s.shape());
  Tensor out = a.value();
  const double sv = s.value()[0];
  for (double& v : out.storage()) v += sv;
  const std::size_t ia = a.id(), is = s.id();
  return tape_of(a).record(OpKind::AddBroadcast, std::move(out), {a, s}, [ia, is](Tape& t, const Tensor& g) {
    if (t.needs_grad(ia)) axpy(t.grad_ref(ia), g);
    if (t.needs_grad(is)) {
      double total = 0.0;
      for (double v : g.storage()) total += v;
      t.grad_ref(is)[0] += total;
    }
  });
}

Var mul_broadcast(Var a, Var s) {
  if (s.numel() != 1) dim_error("mul_broadcast", a.shape(), s.shape());
  Tensor out = a.value();
  const double sv = s.value()[0];
  for (double& v : out.storage()) v *= sv;
  const std::size_t ia = a.id(), is = s.id();
  return tape_of(a).record(OpKind::MulBroadcast, std::move(out), {a, s}, [ia, is](Tape& t, const Tensor& g) {
    const double sv = t.value(is)[0];
    if (t.needs_grad(ia)) axpy(t.grad_ref(ia), g, sv);
    if (t.needs_grad(is)) {
      const Tensor& av = t.value(ia);
      double total = 0.0;
      for (std::size_t i = 0; i < g.numel(); ++i) total += g[i] * av[i];
      t.grad_ref(is)[0] += total;
    }
  });
}

Var add_row(Var a, Var b) {
  require_rank("add_row", a, 2);
  if (b.numel() != a.shape()[1]) dim_error("add_row", a.shape(), b.shape());
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  Tensor out = a.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += b.value()[c];
  const std::size_t ia = a.id(), ib = b.id();
  return tape_of(a).record(OpKind::AddRow, std::move(out), {a, b}, [ia, ib, rows, cols](Tape& t, const Tensor& g) {
    if (t.needs_grad(ia)) axpy(t.grad_ref(ia), g);
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_ref(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
    }
  });
}

Var matmul(Var a, Var b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) dim_error("matmul", a.shape(), b.shape());
  Tensor out({m, n});
  kp::gemm(false, false, m, n, k, a.value().data().data(), b.value().data().data(), out.data().data(), false);
  const std::size_t ia = a.id(), ib = b.id();
  return tape_of(a).record(OpKind::MatMul, std::move(out), {a, b}, [ia, ib, m, n, k](Tape& t, const Tensor& g) {
    if (t.needs_grad(ia))  // dA = dC * B^T
      kp::gemm(false, true, m, k, n, g.data().data(), t.value(ib).data().data(), t.grad_ref(ia).data().data(), true);
    if (t.needs_grad(ib))  // dB = A^T * dC
      kp::gemm(true, false, k, n, m, t.value(ia).data().data(), g.data().data(), t.grad_ref(ib).data().data(), true);
  });
}

Var transpose(Var a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out = linalg::transpose(a.value());
  const std::size_t ia = a.id();
  return tape_of(a).record(OpKind::Transpose, std::move(out), {a}, [ia, m, n](Tape& t, const Tensor& g) {
    if (!t.needs_grad(ia)) return;
    Tensor& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

Var exp(Var a) {
  return unary(OpKind::Exp, a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(Var a) {
  return unary(OpKind::Log, a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var sqrt(Var a) {
  return unary(
      OpKind::Sqrt, a, [](double x) { return std::sqrt(x); }, [](double x) { return 0.5 / std::sqrt(x); });
}

Var square(Var a) {
  return unary(OpKind::Square, a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var sqrt_floor(Var a, double floor) {
  return unary(
      OpKind::SqrtFloor, a,
      [floor](double x) {
        const double r = x > 0.0 ? std::sqrt(x) : 0.0;
        return r > floor ? r : floor;
      },
      [floor](double x) {
        const double r = x > 0.0 ? std::sqrt(x) : 0.0;
        return r > floor ? 0.5 / r : 0.0;
      });
}

Var elu(Var a) {
  return unary(
      OpKind::Elu, a, [](double x) { return x >= 0.0 ? x : std::expm1(x); },
      [](double x) { return x >= 0.0 ? 1.0 : std::exp(x); });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().storage()) total += v;
  const std::size_t ia = a.id();
  return tape_of(a).record(OpKind::Sum, Tensor::scalar(total), {a}, [ia](Tape& t, const Tensor& g) {
    if (!t.needs_grad(ia)) return;
    for (double& v : t.grad_ref(ia).storage()) v += g[0];
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Var column_sums(Var a) {
  require_rank("column_sums", a, 2);
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  Tensor out({cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += a.value()[r * cols + c];
  const std::size_t ia = a.id();
  return tape_of(a).record(OpKind::ColumnSums, std::move(out), {a}, [ia, rows, cols](Tape& t, const Tensor& g) {
    if (!t.needs_grad(ia)) return;
    Tensor& ga = t.grad_ref(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[c];
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return tape_of(a).record(OpKind::Reshape, std::move(out), {a}, [ia](Tape& t, const Tensor& g) {
    if (t.needs_grad(ia)) axpy(t.grad_ref(ia), g);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Shape shape = parts[0].shape();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    Shape tail_a(shape.begin() + 1, shape.end()), tail_b(p.shape().begin() + 1, p.shape().end());
    if (p.value().rank() != shape.size() || tail_a != tail_b) dim_error("concat_rows", shape, p.shape());
    rows += p.shape()[0];
  }
  shape[0] = rows;
  Tensor out(shape);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().storage().begin(), p.value().storage().end(), out.storage().begin() + off);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.numel();
  }
  return tape_of(parts[0]).record(OpKind::Concat, std::move(out), parts, [ids, offsets](Tape& t, const Tensor& g) {
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.needs_grad(ids[k])) continue;
      Tensor& gp = t.grad_ref(ids[k]);
      for (std::size_t i = 0; i < gp.numel(); ++i) gp[i] += g[offsets[k] + i];
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts[0].shape()[0];
  std::size_t cols = 0;
  std::vector<std::size_t> ids, widths;
  for (const Var& p : parts) {
    require_rank("concat_cols", p, 2);
    if (p.shape()[0] != rows) dim_error("concat_cols", parts[0].shape(), p.shape());
    ids.push_back(p.id());
    widths.push_back(p.shape()[1]);
    cols += p.shape()[1];
  }
  Tensor out({rows, cols});
  std::size_t c0 = 0;
  for (const Var& p : parts) {
    const std::size_t w = p.shape()[1];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) out[r * cols + c0 + c] = p.value()[r * w + c];
    c0 += w;
  }
  return tape_of(parts[0]).record(OpKind::Concat, std::move(out), parts,
                                  [ids, widths, rows, cols](Tape& t, const Tensor& g) {
                                    std::size_t c0 = 0;
                                    for (std::size_t k = 0; k < ids.size(); ++k) {
                                      const std::size_t w = widths[k];
                                      if (t.needs_grad(ids[k])) {
                                        Tensor& gp = t.grad_ref(ids[k]);
                                        for (std::size_t r = 0; r < rows; ++r)
                                          for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * cols + c0 + c];
                                      }
                                      c0 += w;
                                    }
                                  });
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  const Shape& s = a.shape();
  if (count == 0 || start + count > s[0])
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + shape_string(s));
  Shape out_shape = s;
  out_shape[0] = count;
  const std::size_t stride = a.numel() / s[0];
  Tensor out(out_shape);
  std::copy_n(a.value().storage().begin() + start * stride, count * stride, out.storage().begin());
  const std::size_t ia = a.id();
  return tape_of(a).record(OpKind::Slice, std::move(out), {a}, [ia, start, stride](Tape& t, const Tensor& g) {
    if (!t.needs_grad(ia)) return;
    Tensor& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[start * stride + i] += g[i];
  });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  require_rank("slice_cols", a, 2);
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  if (count == 0 || start + count > cols)
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + shape_string(a.shape()));
  Tensor out({rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < count; ++c) out[r * count + c] = a.value()[r * cols + start + c];
  const std::size_t ia = a.id();
  return tape_of(a).record(OpKind::Slice, std::move(out), {a},
                           [ia, rows, cols, start, count](Tape& t, const Tensor& g) {
                             if (!t.needs_grad(ia)) return;
                             Tensor& ga = t.grad_ref(ia);
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < count; ++c) ga[r * cols + start + c] += g[r * count + c];
                           });
}

Var stop_grad(Var a) { return tape_of(a).constant(a.value()); }

// ---------------------------------------------------------------------------------------------
// Convolutions

namespace {

struct ConvInput {
  std::size_t batch, channels, height, width;
  bool batched;
};

ConvInput conv_input(const char* op, Var x) {
  const Shape& s = x.shape();
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  throw DimensionError(std::string(op) + ": input must be [B,C,H,W] or [C,H,W], got " + shape_string(s));
}

void add_channel_bias(Tensor& y, const Tensor& bias, std::size_t batch, std::size_t channels, std::size_t pixels) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      double* p = y.data().data() + (b * channels + c) * pixels;
      for (std::size_t i = 0; i < pixels; ++i) p[i] += bias[c];
    }
}

void channel_bias_grad(const Tensor& g, Tensor& gb, std::size_t batch, std::size_t channels, std::size_t pixels) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const double* p = g.data().data() + (b * channels + c) * pixels;
      double s = 0.0;
      for (std::size_t i = 0; i < pixels; ++i) s += p[i];
      gb[c] += s;
    }
}

}  // namespace

Var conv2d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad) {
  const ConvInput in = conv_input("conv2d", x);
  const Shape& ws = w.shape();
  if (ws.size() != 4 || ws[1] != in.channels || ws[2] != 3 || ws[3] != 3) dim_error("conv2d", x.shape(), ws);
  if (stride != 1 && stride != 2) throw ConfigError("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
  const std::size_t oc = ws[0];
  kernels::ConvGeometry g{in.channels, in.height, in.width, stride, pad,
                          kernels::conv_out_extent(in.height, stride, pad),
                          kernels::conv_out_extent(in.width, stride, pad)};
  if (g.out_h == 0 || g.out_w == 0)
    throw ConfigError("conv2d: non-positive output extent for input " + shape_string(x.shape()) + ", stride " +
                      std::to_string(stride) + ", padding " + std::to_string(pad));
  const bool has_bias = bias.valid();
  if (has_bias && bias.numel() != oc) dim_error("conv2d bias", ws, bias.shape());

  Shape out_shape = in.batched ? Shape{in.batch, oc, g.out_h, g.out_w} : Shape{oc, g.out_h, g.out_w};
  Tensor out(out_shape);
  kp::conv2d_forward(x.value().data().data(), w.value().data().data(), out.data().data(), in.batch, g, oc);
  if (has_bias) add_channel_bias(out, bias.value(), in.batch, oc, g.out_pixels());

  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  const std::size_t ix = x.id(), iw = w.id(), ib = has_bias ? bias.id() : 0;
  const std::size_t batch = in.batch;
  return tape_of(x).record(OpKind::Conv2d, std::move(out), inputs,
                           [ix, iw, ib, has_bias, g, oc, batch](Tape& t, const Tensor& grad) {
                             if (t.needs_grad(ix)) {
                               Tensor dx(t.value(ix).shape());
                               kp::conv2d_backward_input(grad.data().data(), t.value(iw).data().data(),
                                                         dx.data().data(), batch, g, oc);
                               axpy(t.grad_ref(ix), dx);
                             }
                             if (t.needs_grad(iw)) {
                               Tensor dw(t.value(iw).shape());
                               kp::conv2d_backward_weight(t.value(ix).data().data(), grad.data().data(),
                                                          dw.data().data(), batch, g, oc);
                               axpy(t.grad_ref(iw), dw);
                             }
                             if (has_bias && t.needs_grad(ib))
                               channel_bias_grad(grad, t.grad_ref(ib), batch, oc, g.out_pixels());
                           });
}

Var conv_transpose2d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad, std::size_t out_pad) {
  const ConvInput in = conv_input("conv_transpose2d", x);
  const Shape& ws = w.shape();
  if (ws.size() != 4 || ws[0] != in.channels || ws[2] != 3 || ws[3] != 3)
    dim_error("conv_transpose2d", x.shape(), ws);
  if (stride != 1 && stride != 2)
    throw ConfigError("conv_transpose2d: stride must be 1 or 2, got " + std::to_string(stride));
  if (out_pad >= stride && out_pad != 0)
    throw ConfigError("conv_transpose2d: output padding must be smaller than the stride");
  const long oh = static_cast<long>((in.height - 1) * stride + 3 + out_pad) - 2 * static_cast<long>(pad);
  const long ow = static_cast<long>((in.width - 1) * stride + 3 + out_pad) - 2 * static_cast<long>(pad);
  if (oh <= 0 || ow <= 0) throw ConfigError("conv_transpose2d: non-positive output extent");
  const std::size_t cout = ws[1];
  // The transpose conv is the input-adjoint of a conv whose image side is the output here.
  kernels::ConvGeometry g{cout, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), stride, pad,
                          in.height, in.width};
  if (kernels::conv_out_extent(g.height, stride, pad) != in.height ||
      kernels::conv_out_extent(g.width, stride, pad) != in.width)
    throw ConfigError("conv_transpose2d: inconsistent geometry");
  const bool has_bias = bias.valid();
  if (has_bias && bias.numel() != cout) dim_error("conv_transpose2d bias", ws, bias.shape());

  Shape out_shape = in.batched ? Shape{in.batch, cout, g.height, g.width} : Shape{cout, g.height, g.width};
  Tensor out(out_shape);
  const std::size_t cin = in.channels;
  kp::conv2d_backward_input(x.value().data().data(), w.value().data().data(), out.data().data(), in.batch, g, cin);
  if (has_bias) add_channel_bias(out, bias.value(), in.batch, cout, g.height * g.width);

  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  const std::size_t ix = x.id(), iw = w.id(), ib = has_bias ? bias.id() : 0;
  const std::size_t batch = in.batch;
  return tape_of(x).record(OpKind::ConvTranspose2d, std::move(out), inputs,
                           [ix, iw, ib, has_bias, g, cin, cout, batch](Tape& t, const Tensor& grad) {
                             if (t.needs_grad(ix)) {
                               Tensor dx(t.value(ix).shape());
                               kp::conv2d_forward(grad.data().data(), t.value(iw).data().data(), dx.data().data(),
                                                  batch, g, cin);
                               axpy(t.grad_ref(ix), dx);
                             }
                             if (t.needs_grad(iw)) {
                               Tensor dw(t.value(iw).shape());
                               kp::conv2d_backward_weight(grad.data().data(), t.value(ix).data().data(),
                                                          dw.data().data(), batch, g, cin);
                               axpy(t.grad_ref(iw), dw);
                             }
                             if (has_bias && t.needs_grad(ib))
                               channel_bias_grad(grad, t.grad_ref(ib), batch, cout, g.height * g.width);
                           });
}

// ---------------------------------------------------------------------------------------------
// Batch normalization

Var batch_norm(Var x, Var gamma, Var beta, Parameter& running_mean, Parameter& running_var,
               const BatchNormOptions& opts) {
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 4)
    throw DimensionError("batch_norm: expected [B,C] or [B,C,H,W], got " + shape_string(s));
  const std::size_t batch = s[0], channels = s[1];
  const std::size_t pixels = s.size() == 4 ? s[2] * s[3] : 1;
  if (gamma.numel() != channels || beta.numel() != channels || running_mean.value.numel() != channels ||
      running_var.value.numel() != channels)
    dim_error("batch_norm", s, gamma.shape());
  if (opts.training && batch < 2)
    throw ConfigError("batch_norm: training mode needs a batch of at least 2, got " + std::to_string(batch));

  const Tensor& xv = x.value();
  const double n = static_cast<double>(batch * pixels);
  Tensor mu({channels}), inv_std({channels});
  if (opts.training) {
    Tensor var({channels});
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = xv.data().data() + (b * channels + c) * pixels;
        for (std::size_t i = 0; i < pixels; ++i) acc += p[i];
      }
      mu[c] = acc / n;
      double sq = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = xv.data().data() + (b * channels + c) * pixels;
        for (std::size_t i = 0; i < pixels; ++i) sq += (p[i] - mu[c]) * (p[i] - mu[c]);
      }
      var[c] = sq / n;
      inv_std[c] = 1.0 / std::sqrt(var[c] + opts.eps);
    }
    for (std::size_t c = 0; c < channels; ++c) {
      running_mean.value[c] = (1.0 - opts.momentum) * running_mean.value[c] + opts.momentum * mu[c];
      running_var.value[c] = (1.0 - opts.momentum) * running_var.value[c] + opts.momentum * var[c] * n / (n - 1.0);
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = running_mean.value[c];
      inv_std[c] = 1.0 / std::sqrt(running_var.value[c] + opts.eps);
    }
  }

  Tensor xhat(s), out(s);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * pixels;
      for (std::size_t i = 0; i < pixels; ++i) {
        xhat[base + i] = (xv[base + i] - mu[c]) * inv_std[c];
        out[base + i] = gamma.value()[c] * xhat[base + i] + beta.value()[c];
      }
    }

  const std::size_t ix = x.id(), ig = gamma.id(), ibt = beta.id();
  const bool training = opts.training;
  return tape_of(x).record(
      OpKind::BatchNorm, std::move(out), {x, gamma, beta},
      [ix, ig, ibt, batch, channels, pixels, n, training, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
        const Tensor& gam = t.value(ig);
        Tensor sum_g({channels}), sum_gx({channels});
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * pixels;
            for (std::size_t i = 0; i < pixels; ++i) {
              sum_g[c] += g[base + i];
              sum_gx[c] += g[base + i] * xhat[base + i];
            }
          }
        if (t.needs_grad(ig)) axpy(t.grad_ref(ig), sum_gx);
        if (t.needs_grad(ibt)) axpy(t.grad_ref(ibt), sum_g);
        if (!t.needs_grad(ix)) return;
        Tensor& gx = t.grad_ref(ix);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * pixels;
            const double k = gam[c] * inv_std[c];
            for (std::size_t i = 0; i < pixels; ++i) {
              if (training)
                gx[base + i] += k * (g[base + i] - sum_g[c] / n - xhat[base + i] * sum_gx[c] / n);
              else
                gx[base + i] += k * g[base + i];
            }
          }
      });
}

// ---------------------------------------------------------------------------------------------
// Dense linear algebra

namespace linalg {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) dim_error("matmul", a.shape(), b.shape());
  Tensor out({a.dim(0), b.dim(1)});
  kp::gemm(false, false, a.dim(0), b.dim(1), a.dim(1), a.data().data(), b.data().data(), out.data().data(), false);
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expected rank 2, got " + shape_string(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

namespace {
bool try_cholesky(const Tensor& a, double jitter, Tensor& l) {
  const std::size_t n = a.dim(0);
  l = Tensor({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    const double diag = a[j * n + j] + jitter;
    double d = diag;
    for (std::size_t k = 0; k < j; ++k) d -= l[j * n + k] * l[j * n + k];
    // Pivots this small relative to the diagonal mean the factor is numerically singular.
    if (!(d > 1e-12 * diag) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    l[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = s / ljj;
    }
  }
  return true;
}
}  // namespace

Tensor cholesky_with_jitter(const Tensor& a, double* jitter_used) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw DimensionError("cholesky: matrix must be square, got " +
                                                                  shape_string(a.shape()));
  Tensor l;
  if (try_cholesky(a, 0.0, l)) {
    if (jitter_used) *jitter_used = 0.0;
    return l;
  }
  for (double jitter = 1e-8; jitter <= 1.0001e-4; jitter *= 10.0) {
    if (try_cholesky(a, jitter, l)) {
      if (jitter_used) *jitter_used = jitter;
      return l;
    }
  }
  throw NumericalError("cholesky: matrix " + shape_string(a.shape()) +
                       " not positive definite after jitter ladder 1e-8, 1e-7, 1e-6, 1e-5, 1e-4");
}

void tri_solve_inplace(const Tensor& l, Tensor& b, bool transpose_l) {
  const std::size_t n = l.dim(0);
  if (l.rank() != 2 || l.dim(1) != n || b.dim(0) != n) dim_error("tri_solve", l.shape(), b.shape());
  const std::size_t m = b.numel() / n;
  if (!transpose_l) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < i; ++k) {
        const double lik = l[i * n + k];
        if (lik == 0.0) continue;
        for (std::size_t c = 0; c < m; ++c) b[i * m + c] -= lik * b[k * m + c];
      }
      const double inv = 1.0 / l[i * n + i];
      for (std::size_t c = 0; c < m; ++c) b[i * m + c] *= inv;
    }
  } else {
    for (std::size_t i = n; i-- > 0;) {
      for (std::size_t k = i + 1; k < n; ++k) {
        const double lki = l[k * n + i];
        if (lki == 0.0) continue;
        for (std::size_t c = 0; c < m; ++c) b[i * m + c] -= lki * b[k * m + c];
      }
      const double inv = 1.0 / l[i * n + i];
      for (std::size_t c = 0; c < m; ++c) b[i * m + c] *= inv;
    }
  }
}

}  // namespace linalg

Var cholesky(Var a) {
  Tensor l = linalg::cholesky_with_jitter(a.value());
  const std::size_t ia = a.id();
  const std::size_t n = a.shape()[0];
  Tensor l_copy = l;
  return tape_of(a).record(OpKind::Cholesky, std::move(l), {a}, [ia, n, l = std::move(l_copy)](Tape& t, const Tensor& g) {
    if (!t.needs_grad(ia)) return;
    // A_bar = sym(L^{-T} Phi(L^T L_bar) L^{-1}), Phi = lower triangle with halved diagonal.
    Tensor s({n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k) acc += l[k * n + i] * g[k * n + j];
        s[i * n + j] = i == j ? 0.5 * acc : acc;
      }
    linalg::tri_solve_inplace(l, s, true);
    Tensor st = linalg::transpose(s);
    linalg::tri_solve_inplace(l, st, true);
    Tensor& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += 0.5 * (st[i * n + j] + st[j * n + i]);
  });
}

Var tri_solve(Var l, Var b, bool transpose_l) {
  require_rank("tri_solve", l, 2);
  const std::size_t n = l.shape()[0];
  if (l.shape()[1] != n || b.shape()[0] != n || b.value().rank() > 2) dim_error("tri_solve", l.shape(), b.shape());
  Tensor x = b.value();
  linalg::tri_solve_inplace(l.value(), x, transpose_l);
  const std::size_t il = l.id(), ib = b.id();
  const std::size_t m = b.numel() / n;
  Tensor x_copy = x;
  return tape_of(l).record(OpKind::TriSolve, std::move(x), {l, b},
                           [il, ib, n, m, transpose_l, x = std::move(x_copy)](Tape& t, const Tensor& g) {
                             const Tensor& lv = t.value(il);
                             Tensor gb = g;
                             linalg::tri_solve_inplace(lv, gb, !transpose_l);
                             if (t.needs_grad(ib)) axpy(t.grad_ref(ib), gb);
                             if (!t.needs_grad(il)) return;
                             // L_bar = -tril(B_bar X^T), or -tril(X B_bar^T) for the transposed solve.
                             Tensor& gl = t.grad_ref(il);
                             const Tensor& left = transpose_l ? x : gb;
                             const Tensor& right = transpose_l ? gb : x;
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j <= i; ++j) {
                                 double acc = 0.0;
                                 for (std::size_t c = 0; c < m; ++c) acc += left[i * m + c] * right[j * m + c];
                                 gl[i * n + j] -= acc;
                               }
                           });
}

Var diag(Var a) {
  require_rank("diag", a, 2);
  const std::size_t n = a.shape()[0];
  if (a.shape()[1] != n) throw DimensionError("diag: matrix must be square, got " + shape_string(a.shape()));
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i * n + i];
  const std::size_t ia = a.id();
  return tape_of(a).record(OpKind::Diag, std::move(out), {a}, [ia, n](Tape& t, const Tensor& g) {
    if (!t.needs_grad(ia)) return;
    Tensor& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < n; ++i) ga[i * n + i] += g[i];
  });
}

Var lower_exp_diag(Var raw) {
  require_rank("lower_exp_diag", raw, 2);
  const std::size_t n = raw.shape()[0];
  if (raw.shape()[1] != n) throw DimensionError("lower_exp_diag: matrix must be square");
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j)
      out[i * n + j] = i == j ? std::exp(raw.value()[i * n + i]) : raw.value()[i * n + j];
  const std::size_t ir = raw.id();
  return tape_of(raw).record(OpKind::LowerExpDiag, std::move(out), {raw}, [ir, n](Tape& t, const Tensor& g) {
    if (!t.needs_grad(ir)) return;
    const Tensor& rv = t.value(ir);
    Tensor& gr = t.grad_ref(ir);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j)
        gr[i * n + j] += i == j ? g[i * n + i] * std::exp(rv[i * n + i]) : g[i * n + j];
  });
}

Var ard_se_cross(Var x1, Var x2, Var log_ls, Var log_sf) {
  require_rank("ard_se_cross", x1, 2);
  require_rank("ard_se_cross", x2, 2);
  const std::size_t n1 = x1.shape()[0], n2 = x2.shape()[0], d = x1.shape()[1];
  if (x2.shape()[1] != d) dim_error("ard_se_cross", x1.shape(), x2.shape());
  if (log_ls.numel() != d) dim_error("ard_se_cross lengthscales", x1.shape(), log_ls.shape());
  if (log_sf.numel() != 1) dim_error("ard_se_cross signal std", Shape{1}, log_sf.shape());
  std::vector<double> inv_ls2(d);
  for (std::size_t k = 0; k < d; ++k) inv_ls2[k] = std::exp(-2.0 * log_ls.value()[k]);
  const double sf2 = std::exp(2.0 * log_sf.value()[0]);
  Tensor out({n1, n2});
  kp::ard_se_gram(x1.value().data().data(), n1, x2.value().data().data(), n2, d, inv_ls2.data(), sf2,
                  out.data().data());
  Tensor k_copy = out;
  const std::size_t i1 = x1.id(), i2 = x2.id(), il = log_ls.id(), is = log_sf.id();
  return tape_of(x1).record(
      OpKind::ArdSeCross, std::move(out), {x1, x2, log_ls, log_sf},
      [i1, i2, il, is, n1, n2, d, inv_ls2 = std::move(inv_ls2), k = std::move(k_copy)](Tape& t, const Tensor& g) {
        const Tensor& a = t.value(i1);
        const Tensor& b = t.value(i2);
        const bool g1 = t.needs_grad(i1), g2 = t.needs_grad(i2), gl = t.needs_grad(il), gs = t.needs_grad(is);
        Tensor* ga = g1 ? &t.grad_ref(i1) : nullptr;
        Tensor* gb = g2 ? &t.grad_ref(i2) : nullptr;
        Tensor* gls = gl ? &t.grad_ref(il) : nullptr;
        double gsf = 0.0;
        for (std::size_t i = 0; i < n1; ++i)
          for (std::size_t j = 0; j < n2; ++j) {
            const double w = g[i * n2 + j] * k[i * n2 + j];
            if (w == 0.0) continue;
            gsf += 2.0 * w;
            for (std::size_t c = 0; c < d; ++c) {
              const double diff = a[i * d + c] - b[j * d + c];
              const double r = diff * inv_ls2[c];
              if (ga) (*ga)[i * d + c] -= w * r;
              if (gb) (*gb)[j * d + c] += w * r;
              if (gls) (*gls)[c] += w * diff * r;
            }
          }
        if (gs) t.grad_ref(is)[0] += gsf;
      });
}

}  // namespace ldkl::ad
