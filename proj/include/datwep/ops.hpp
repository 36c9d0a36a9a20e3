#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "datwep/tape.hpp"

// Differentiable layer primitives. Every op reads its inputs from the tape,
// records one node, and registers a backward fn that accumulates into the
// gradient buffers of inputs that require grad.
namespace datwep::ops {

namespace detail {

inline void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::logic_error("vars recorded on different tapes");
}

inline void add_into(Tensor& dst, const Tensor& src) {
  double* d = dst.ptr();
  const double* s = src.ptr();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

// Tap window of a same-padded k×k convolution: output rows [y0, y1) read
// input row y + dy, output cols [x0, x1) read input col x + dx.
struct Tap {
  std::ptrdiff_t dy, dx;
  std::size_t y0, y1, x0, x1;
};

inline Tap make_tap(std::size_t ky, std::size_t kx, std::size_t k, std::size_t H, std::size_t W) {
  const auto p = static_cast<std::ptrdiff_t>(k / 2);
  Tap t{};
  t.dy = static_cast<std::ptrdiff_t>(ky) - p;
  t.dx = static_cast<std::ptrdiff_t>(kx) - p;
  const auto h = static_cast<std::ptrdiff_t>(H);
  const auto w = static_cast<std::ptrdiff_t>(W);
  t.y0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -t.dy));
  t.y1 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(h - t.dy, 0, h));
  t.x0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -t.dx));
  t.x1 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(w - t.dx, 0, w));
  if (t.y0 > t.y1) t.y0 = t.y1;
  if (t.x0 > t.x1) t.x0 = t.x1;
  return t;
}

inline void pack_bits(std::vector<std::uint32_t>& out, const std::vector<bool>& bits) {
  out.assign((bits.size() + 31) / 32, 0u);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) out[i / 32] |= (1u << (i % 32));
  }
}

}  // namespace detail

/// 2-D convolution, stride 1, zero "same" padding (k/2) for an odd square
/// kernel. input [N,C,H,W], kernel [F,C,k,k], bias [F] -> [N,F,H,W].
inline Var conv2d(Var input, Var kernel, Var bias) {
  detail::require_same_tape(input, kernel);
  detail::require_same_tape(input, bias);
  const Tensor& X = input.value();
  const Tensor& K = kernel.value();
  const Tensor& B = bias.value();
  require_rank(X, 4, "conv2d input");
  require_rank(K, 4, "conv2d kernel");
  require_rank(B, 1, "conv2d bias");
  const std::size_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  const std::size_t F = K.dim(0), k = K.dim(2);
  if (K.dim(1) != C) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(X.shape()) + ", kernel " +
                     shape_str(K.shape()));
  }
  if (K.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d kernel must be odd and square");
  if (B.dim(0) != F) throw ShapeError("conv2d bias length must equal filter count");

  const std::size_t HW = H * W, kk = k * k;
  Tensor out(Shape{N, F, H, W});
  {
    const double* xp = X.ptr();
    const double* kp = K.ptr();
    double* op = out.ptr();
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t f = 0; f < F; ++f) {
        double* plane = op + (n * F + f) * HW;
        std::fill(plane, plane + HW, B[f]);
        for (std::size_t c = 0; c < C; ++c) {
          const double* in = xp + (n * C + c) * HW;
          const double* wk = kp + (f * C + c) * kk;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const double wv = wk[ky * k + kx];
              const detail::Tap t = detail::make_tap(ky, kx, k, H, W);
              for (std::size_t y = t.y0; y < t.y1; ++y) {
                double* orow = plane + y * W;
                const double* irow = in + static_cast<std::ptrdiff_t>(y * W) +
                                     t.dy * static_cast<std::ptrdiff_t>(W) + t.dx;
                for (std::size_t x = t.x0; x < t.x1; ++x) orow[x] += wv * irow[x];
              }
            }
          }
        }
      }
    }
  }

  const std::size_t xid = input.id, kid = kernel.id, bid = bias.id;
  return input.tape->record(
      OpKind::Conv2d, std::move(out), {xid, kid, bid},
      [=](Tape& tp, std::size_t self) {
        const Tensor& G = tp.grad_buffer(self);
        const Tensor& Xv = tp.value(xid);
        const Tensor& Kv = tp.value(kid);
        const double* gp = G.ptr();
        if (tp.requires_grad(bid)) {
          Tensor& dB = tp.grad_buffer(bid);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t f = 0; f < F; ++f) {
              const double* g = gp + (n * F + f) * HW;
              double s = 0.0;
              for (std::size_t i = 0; i < HW; ++i) s += g[i];
              dB[f] += s;
            }
        }
        if (tp.requires_grad(kid)) {
          Tensor& dK = tp.grad_buffer(kid);
          const double* xp = Xv.ptr();
          for (std::size_t f = 0; f < F; ++f) {
            for (std::size_t c = 0; c < C; ++c) {
              for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const detail::Tap t = detail::make_tap(ky, kx, k, H, W);
                  double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                  for (std::size_t n = 0; n < N; ++n) {
                    const double* g = gp + (n * F + f) * HW;
                    const double* in = xp + (n * C + c) * HW;
                    for (std::size_t y = t.y0; y < t.y1; ++y) {
                      const double* grow = g + y * W;
                      const double* irow = in + static_cast<std::ptrdiff_t>(y * W) +
                                           t.dy * static_cast<std::ptrdiff_t>(W) + t.dx;
                      std::size_t x = t.x0;
                      for (; x + 4 <= t.x1; x += 4) {
                        a0 += grow[x] * irow[x];
                        a1 += grow[x + 1] * irow[x + 1];
                        a2 += grow[x + 2] * irow[x + 2];
                        a3 += grow[x + 3] * irow[x + 3];
                      }
                      for (; x < t.x1; ++x) a0 += grow[x] * irow[x];
                    }
                  }
                  dK[(f * C + c) * kk + ky * k + kx] += (a0 + a1) + (a2 + a3);
                }
              }
            }
          }
        }
        if (tp.requires_grad(xid)) {
          Tensor& dX = tp.grad_buffer(xid);
          const double* kp = Kv.ptr();
          double* dxp = dX.ptr();
          for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t f = 0; f < F; ++f) {
              const double* g = gp + (n * F + f) * HW;
              for (std::size_t c = 0; c < C; ++c) {
                double* din = dxp + (n * C + c) * HW;
                const double* wk = kp + (f * C + c) * kk;
                for (std::size_t ky = 0; ky < k; ++ky) {
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    const double wv = wk[ky * k + kx];
                    const detail::Tap t = detail::make_tap(ky, kx, k, H, W);
                    for (std::size_t y = t.y0; y < t.y1; ++y) {
                      const double* grow = g + y * W;
                      double* drow = din + static_cast<std::ptrdiff_t>(y * W) +
                                     t.dy * static_cast<std::ptrdiff_t>(W) + t.dx;
                      for (std::size_t x = t.x0; x < t.x1; ++x) drow[x] += wv * grow[x];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

/// 2×2 max pooling, stride 2. Ties go to the first element in row-major window order.
inline Var maxpool2(Var input) {
  const Tensor& X = input.value();
  require_rank(X, 4, "maxpool2 input");
  const std::size_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw ShapeError("maxpool2 needs even spatial dims, got " + shape_str(X.shape()));
  }
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor out(Shape{N, C, Ho, Wo});
  std::vector<std::uint32_t> argmax(out.size());
  const double* xp = X.ptr();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* in = xp + nc * H * W;
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        const std::size_t cand[4] = {(2 * i) * W + 2 * j, (2 * i) * W + 2 * j + 1,
                                     (2 * i + 1) * W + 2 * j, (2 * i + 1) * W + 2 * j + 1};
        std::size_t best = cand[0];
        for (int q = 1; q < 4; ++q) {
          if (in[cand[q]] > in[best]) best = cand[q];
        }
        const std::size_t o = (nc * Ho + i) * Wo + j;
        out[o] = in[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  const std::size_t xid = input.id;
  Var v = input.tape->record(OpKind::MaxPool2, std::move(out), {xid},
                             [=](Tape& tp, std::size_t self) {
                               const Tensor& G = tp.grad_buffer(self);
                               Tensor& dX = tp.grad_buffer(xid);
                               const std::size_t plane = Ho * Wo;
                               for (std::size_t o = 0; o < G.size(); ++o) {
                                 dX[(o / plane) * H * W + argmax[o]] += G[o];
                               }
                             });
  std::vector<std::uint32_t> rec(argmax);
  input.tape->set_kink_record(v.id, std::move(rec));
  return v;
}

/// Nearest-neighbour 2× upsampling. [N,C,H,W] -> [N,C,2H,2W].
inline Var upsample2(Var input) {
  const Tensor& X = input.value();
  require_rank(X, 4, "upsample2 input");
  const std::size_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  const std::size_t Ho = 2 * H, Wo = 2 * W;
  Tensor out(Shape{N, C, Ho, Wo});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* in = X.ptr() + nc * H * W;
    double* o = out.ptr() + nc * Ho * Wo;
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t x = 0; x < Wo; ++x) o[y * Wo + x] = in[(y / 2) * W + x / 2];
  }
  const std::size_t xid = input.id;
  return input.tape->record(OpKind::Upsample2, std::move(out), {xid},
                            [=](Tape& tp, std::size_t self) {
                              const Tensor& G = tp.grad_buffer(self);
                              Tensor& dX = tp.grad_buffer(xid);
                              for (std::size_t nc = 0; nc < N * C; ++nc) {
                                const double* g = G.ptr() + nc * Ho * Wo;
                                double* d = dX.ptr() + nc * H * W;
                                for (std::size_t y = 0; y < Ho; ++y)
                                  for (std::size_t x = 0; x < Wo; ++x)
                                    d[(y / 2) * W + x / 2] += g[y * Wo + x];
                              }
                            });
}

/// Affine map: input [N,D_in], weight [D_out,D_in], bias [D_out] -> [N,D_out].
inline Var linear(Var input, Var weight, Var bias) {
  detail::require_same_tape(input, weight);
  detail::require_same_tape(input, bias);
  const Tensor& X = input.value();
  const Tensor& Wt = weight.value();
  const Tensor& B = bias.value();
  require_rank(X, 2, "linear input");
  require_rank(Wt, 2, "linear weight");
  require_rank(B, 1, "linear bias");
  const std::size_t N = X.dim(0), Din = X.dim(1), Dout = Wt.dim(0);
  if (Wt.dim(1) != Din || B.dim(0) != Dout) {
    throw ShapeError("linear dimension mismatch: input " + shape_str(X.shape()) + ", weight " +
                     shape_str(Wt.shape()) + ", bias " + shape_str(B.shape()));
  }
  Tensor out(Shape{N, Dout});
  for (std::size_t n = 0; n < N; ++n) {
    const double* x = X.ptr() + n * Din;
    for (std::size_t o = 0; o < Dout; ++o) {
      const double* w = Wt.ptr() + o * Din;
      double s = 0.0;
      for (std::size_t i = 0; i < Din; ++i) s += w[i] * x[i];
      out[n * Dout + o] = s + B[o];
    }
  }
  const std::size_t xid = input.id, wid = weight.id, bid = bias.id;
  return input.tape->record(
      OpKind::Linear, std::move(out), {xid, wid, bid}, [=](Tape& tp, std::size_t self) {
        const Tensor& G = tp.grad_buffer(self);
        if (tp.requires_grad(bid)) {
          Tensor& dB = tp.grad_buffer(bid);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < Dout; ++o) dB[o] += G[n * Dout + o];
        }
        if (tp.requires_grad(wid)) {
          Tensor& dW = tp.grad_buffer(wid);
          const Tensor& Xv = tp.value(xid);
          for (std::size_t n = 0; n < N; ++n) {
            const double* x = Xv.ptr() + n * Din;
            for (std::size_t o = 0; o < Dout; ++o) {
              const double g = G[n * Dout + o];
              double* dw = dW.ptr() + o * Din;
              for (std::size_t i = 0; i < Din; ++i) dw[i] += g * x[i];
            }
          }
        }
        if (tp.requires_grad(xid)) {
          Tensor& dX = tp.grad_buffer(xid);
          const Tensor& Wv = tp.value(wid);
          for (std::size_t n = 0; n < N; ++n) {
            double* dx = dX.ptr() + n * Din;
            for (std::size_t o = 0; o < Dout; ++o) {
              const double g = G[n * Dout + o];
              const double* w = Wv.ptr() + o * Din;
              for (std::size_t i = 0; i < Din; ++i) dx[i] += g * w[i];
            }
          }
        }
      });
}

inline Var relu(Var input) {
  const Tensor& X = input.value();
  Tensor out(X.shape());
  std::vector<bool> active(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) {
    active[i] = X[i] > 0.0;
    out[i] = active[i] ? X[i] : 0.0;
  }
  const std::size_t xid = input.id;
  std::vector<std::uint32_t> rec;
  detail::pack_bits(rec, active);
  Var v = input.tape->record(OpKind::Relu, std::move(out), {xid},
                             [xid, active = std::move(active)](Tape& tp, std::size_t self) {
                               const Tensor& G = tp.grad_buffer(self);
                               Tensor& dX = tp.grad_buffer(xid);
                               for (std::size_t i = 0; i < G.size(); ++i)
                                 if (active[i]) dX[i] += G[i];
                             });
  input.tape->set_kink_record(v.id, std::move(rec));
  return v;
}

inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var input) {
  const Tensor& X = input.value();
  Tensor out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = logistic(X[i]);
  Tensor saved = out;
  const std::size_t xid = input.id;
  return input.tape->record(OpKind::Sigmoid, std::move(out), {xid},
                            [xid, saved = std::move(saved)](Tape& tp, std::size_t self) {
                              const Tensor& G = tp.grad_buffer(self);
                              Tensor& dX = tp.grad_buffer(xid);
                              for (std::size_t i = 0; i < G.size(); ++i)
                                dX[i] += G[i] * saved[i] * (1.0 - saved[i]);
                            });
}

/// Row-wise softmax over the last axis of a rank-2 tensor.
inline Var softmax_rows(Var input) {
  const Tensor& X = input.value();
  require_rank(X, 2, "softmax_rows input");
  const std::size_t N = X.dim(0), C = X.dim(1);
  Tensor out(X.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const double* x = X.ptr() + n * C;
    double* o = out.ptr() + n * C;
    const double m = *std::max_element(x, x + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += (o[c] = std::exp(x[c] - m));
    for (std::size_t c = 0; c < C; ++c) o[c] /= z;
  }
  Tensor saved = out;
  const std::size_t xid = input.id;
  return input.tape->record(OpKind::SoftmaxRows, std::move(out), {xid},
                            [=, saved = std::move(saved)](Tape& tp, std::size_t self) {
                              const Tensor& G = tp.grad_buffer(self);
                              Tensor& dX = tp.grad_buffer(xid);
                              for (std::size_t n = 0; n < N; ++n) {
                                const double* s = saved.ptr() + n * C;
                                const double* g = G.ptr() + n * C;
                                double dot = 0.0;
                                for (std::size_t c = 0; c < C; ++c) dot += g[c] * s[c];
                                for (std::size_t c = 0; c < C; ++c)
                                  dX[n * C + c] += s[c] * (g[c] - dot);
                              }
                            });
}

/// Row lookup into table [V,D]. `ids` has numel(prefix) entries; result shape is prefix + [D].
inline Var embedding_lookup(Var table, std::span<const std::int64_t> ids, Shape prefix) {
  const Tensor& T = table.value();
  require_rank(T, 2, "embedding table");
  const std::size_t V = T.dim(0), D = T.dim(1);
  if (ids.size() != numel(prefix)) throw ShapeError("embedding ids do not match index shape");
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw IndexError("embedding index " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(V) + " rows");
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  Shape shape = prefix;
  shape.push_back(D);
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(T.ptr() + rows[i] * D, D, out.ptr() + i * D);
  const std::size_t tid = table.id;
  return table.tape->record(OpKind::Embedding, std::move(out), {tid},
                            [=, rows = std::move(rows)](Tape& tp, std::size_t self) {
                              const Tensor& G = tp.grad_buffer(self);
                              Tensor& dT = tp.grad_buffer(tid);
                              for (std::size_t i = 0; i < rows.size(); ++i) {
                                double* d = dT.ptr() + rows[i] * D;
                                const double* g = G.ptr() + i * D;
                                for (std::size_t j = 0; j < D; ++j) d[j] += g[j];
                              }
                            });
}

/// Concatenate along axis 1. All inputs share rank and every extent except axis 1.
inline Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels needs at least one input");
  const Shape& s0 = parts[0].shape();
  if (s0.size() < 2) throw ShapeError("concat_channels needs rank >= 2");
  const std::size_t N = s0[0];
  std::size_t inner = 1;
  for (std::size_t a = 2; a < s0.size(); ++a) inner *= s0[a];
  std::vector<std::size_t> chans;
  std::vector<std::size_t> ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require_same_tape(parts[0], p);
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size() && s[0] == N;
    for (std::size_t a = 2; ok && a < s.size(); ++a) ok = s[a] == s0[a];
    if (!ok) {
      throw ShapeError("concat_channels shape mismatch: " + shape_str(s0) + " vs " + shape_str(s));
    }
    chans.push_back(s[1]);
    ids.push_back(p.id);
    total += s[1];
  }
  Shape shape = s0;
  shape[1] = total;
  Tensor out(shape);
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const Tensor& v = parts[k].value();
      std::copy_n(v.ptr() + n * chans[k] * inner, chans[k] * inner,
                  out.ptr() + (n * total + off) * inner);
      off += chans[k];
    }
  }
  return parts[0].tape->record(OpKind::ConcatChannels, std::move(out), ids,
                               [=](Tape& tp, std::size_t self) {
                                 const Tensor& G = tp.grad_buffer(self);
                                 std::size_t off = 0;
                                 for (std::size_t k = 0; k < ids.size(); ++k) {
                                   if (tp.requires_grad(ids[k])) {
                                     Tensor& d = tp.grad_buffer(ids[k]);
                                     for (std::size_t n = 0; n < N; ++n) {
                                       const double* g = G.ptr() + (n * total + off) * inner;
                                       double* dp = d.ptr() + n * chans[k] * inner;
                                       for (std::size_t i = 0; i < chans[k] * inner; ++i)
                                         dp[i] += g[i];
                                     }
                                   }
                                   off += chans[k];
                                 }
                               });
}

/// Mean over the spatial axes: [N,C,H,W] -> [N,C].
inline Var global_avg_pool(Var input) {
  const Tensor& X = input.value();
  require_rank(X, 4, "global_avg_pool input");
  const std::size_t N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
  Tensor out(Shape{N, C});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* p = X.ptr() + nc * HW;
    double s = 0.0;
    for (std::size_t i = 0; i < HW; ++i) s += p[i];
    out[nc] = s / static_cast<double>(HW);
  }
  const std::size_t xid = input.id;
  return input.tape->record(OpKind::GlobalAvgPool, std::move(out), {xid},
                            [=](Tape& tp, std::size_t self) {
                              const Tensor& G = tp.grad_buffer(self);
                              Tensor& dX = tp.grad_buffer(xid);
                              const double inv = 1.0 / static_cast<double>(HW);
                              for (std::size_t nc = 0; nc < N * C; ++nc) {
                                double* d = dX.ptr() + nc * HW;
                                const double g = G[nc] * inv;
                                for (std::size_t i = 0; i < HW; ++i) d[i] += g;
                              }
                            });
}

inline Var elementwise_mul(Var a, Var b) {
  detail::require_same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw ShapeError("elementwise_mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * B[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(OpKind::Mul, std::move(out), {aid, bid}, [=](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad_buffer(self);
    if (tp.requires_grad(aid)) {
      Tensor& d = tp.grad_buffer(aid);
      const Tensor& Bv = tp.value(bid);
      for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * Bv[i];
    }
    if (tp.requires_grad(bid)) {
      Tensor& d = tp.grad_buffer(bid);
      const Tensor& Av = tp.value(aid);
      for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * Av[i];
    }
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + B[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(OpKind::Add, std::move(out), {aid, bid}, [=](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad_buffer(self);
    if (tp.requires_grad(aid)) detail::add_into(tp.grad_buffer(aid), G);
    if (tp.requires_grad(bid)) detail::add_into(tp.grad_buffer(bid), G);
  });
}

/// [N, d1, d2, ...] -> [N, d1*d2*...].
inline Var flatten(Var input) {
  const Tensor& X = input.value();
  if (X.rank() < 1) throw ShapeError("flatten needs rank >= 1");
  const std::size_t N = X.dim(0);
  const std::size_t rest = N == 0 ? 0 : X.size() / N;
  const std::size_t xid = input.id;
  return input.tape->record(OpKind::Flatten, X.reshaped(Shape{N, rest}), {xid},
                            [=](Tape& tp, std::size_t self) {
                              detail::add_into(tp.grad_buffer(xid), tp.grad_buffer(self));
                            });
}

/// Per-channel normalisation with fixed statistics:
/// y = gamma[c] * (x - mean[c]) / sqrt(var[c] + eps) + beta[c] on [N,C,H,W].
/// With mean 0, var 1, eps 0 this is exactly the affine map gamma*x + beta.
inline Var channel_affine(Var input, Var gamma, Var beta, const Tensor& mean, const Tensor& var,
                          double eps) {
  detail::require_same_tape(input, gamma);
  detail::require_same_tape(input, beta);
  const Tensor& X = input.value();
  require_rank(X, 4, "channel_affine input");
  const std::size_t N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
  if (gamma.value().size() != C || beta.value().size() != C || mean.size() != C ||
      var.size() != C) {
    throw ShapeError("channel_affine parameters must have one entry per channel");
  }
  std::vector<double> inv(C);
  for (std::size_t c = 0; c < C; ++c) inv[c] = 1.0 / std::sqrt(var[c] + eps);
  const Tensor& Gm = gamma.value();
  const Tensor& Bt = beta.value();
  Tensor out(X.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double* x = X.ptr() + (n * C + c) * HW;
      double* o = out.ptr() + (n * C + c) * HW;
      const double g = Gm[c], b = Bt[c], m = mean[c], s = inv[c];
      for (std::size_t i = 0; i < HW; ++i) o[i] = g * ((x[i] - m) * s) + b;
    }
  const std::size_t xid = input.id, gid = gamma.id, bid = beta.id;
  Tensor mean_c = mean;
  return input.tape->record(
      OpKind::ChannelAffine, std::move(out), {xid, gid, bid},
      [=, inv = std::move(inv), mean_c = std::move(mean_c)](Tape& tp, std::size_t self) {
        const Tensor& G = tp.grad_buffer(self);
        const Tensor& Xv = tp.value(xid);
        const Tensor& Gv = tp.value(gid);
        const bool dx = tp.requires_grad(xid), dg = tp.requires_grad(gid),
                   db = tp.requires_grad(bid);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const double* g = G.ptr() + (n * C + c) * HW;
            const double* x = Xv.ptr() + (n * C + c) * HW;
            if (db) {
              double s = 0.0;
              for (std::size_t i = 0; i < HW; ++i) s += g[i];
              tp.grad_buffer(bid)[c] += s;
            }
            if (dg) {
              double s = 0.0;
              for (std::size_t i = 0; i < HW; ++i) s += g[i] * ((x[i] - mean_c[c]) * inv[c]);
              tp.grad_buffer(gid)[c] += s;
            }
            if (dx) {
              double* d = tp.grad_buffer(xid).ptr() + (n * C + c) * HW;
              const double k = Gv[c] * inv[c];
              for (std::size_t i = 0; i < HW; ++i) d[i] += g[i] * k;
            }
          }
      });
}

/// Batch normalisation with statistics of the current batch (biased variance).
/// Per-channel batch mean and variance are written to `batch_mean` / `batch_var`.
inline Var batch_norm(Var input, Var gamma, Var beta, double eps, Tensor* batch_mean = nullptr,
                      Tensor* batch_var = nullptr) {
  detail::require_same_tape(input, gamma);
  detail::require_same_tape(input, beta);
  const Tensor& X = input.value();
  require_rank(X, 4, "batch_norm input");
  const std::size_t N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
  if (gamma.value().size() != C || beta.value().size() != C) {
    throw ShapeError("batch_norm parameters must have one entry per channel");
  }
  const double M = static_cast<double>(N * HW);
  Tensor mean(Shape{C}), var(Shape{C});
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const double* x = X.ptr() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) s += x[i];
    }
    mean[c] = s / M;
    double q = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const double* x = X.ptr() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) q += (x[i] - mean[c]) * (x[i] - mean[c]);
    }
    var[c] = q / M;
  }
  Tensor xhat(X.shape());
  std::vector<double> inv(C);
  Tensor out(X.shape());
  const Tensor& Gm = gamma.value();
  const Tensor& Bt = beta.value();
  for (std::size_t c = 0; c < C; ++c) inv[c] = 1.0 / std::sqrt(var[c] + eps);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        xhat[off + i] = (X[off + i] - mean[c]) * inv[c];
        out[off + i] = Gm[c] * xhat[off + i] + Bt[c];
      }
    }
  if (batch_mean) *batch_mean = mean;
  if (batch_var) *batch_var = var;
  const std::size_t xid = input.id, gid = gamma.id, bid = beta.id;
  return input.tape->record(
      OpKind::BatchNorm, std::move(out), {xid, gid, bid},
      [=, inv = std::move(inv), xhat = std::move(xhat)](Tape& tp, std::size_t self) {
        const Tensor& G = tp.grad_buffer(self);
        const Tensor& Gv = tp.value(gid);
        for (std::size_t c = 0; c < C; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              sum_g += G[off + i];
              sum_gx += G[off + i] * xhat[off + i];
            }
          }
          if (tp.requires_grad(bid)) tp.grad_buffer(bid)[c] += sum_g;
          if (tp.requires_grad(gid)) tp.grad_buffer(gid)[c] += sum_gx;
          if (tp.requires_grad(xid)) {
            Tensor& dX = tp.grad_buffer(xid);
            const double k = Gv[c] * inv[c] / M;
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t off = (n * C + c) * HW;
              for (std::size_t i = 0; i < HW; ++i)
                dX[off + i] += k * (M * G[off + i] - sum_g - xhat[off + i] * sum_gx);
            }
          }
        }
      });
}

/// Select rows of a rank-2 tensor: out[m] = input[rows[m]].
inline Var gather_rows(Var input, std::span<const std::size_t> rows) {
  const Tensor& X = input.value();
  require_rank(X, 2, "gather_rows input");
  const std::size_t N = X.dim(0), D = X.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Tensor out(Shape{idx.size(), D});
  for (std::size_t m = 0; m < idx.size(); ++m) {
    if (idx[m] >= N) throw IndexError("gather_rows index out of range");
    std::copy_n(X.ptr() + idx[m] * D, D, out.ptr() + m * D);
  }
  const std::size_t xid = input.id;
  return input.tape->record(OpKind::GatherRows, std::move(out), {xid},
                            [=, idx = std::move(idx)](Tape& tp, std::size_t self) {
                              const Tensor& G = tp.grad_buffer(self);
                              Tensor& dX = tp.grad_buffer(xid);
                              for (std::size_t m = 0; m < idx.size(); ++m)
                                for (std::size_t j = 0; j < D; ++j)
                                  dX[idx[m] * D + j] += G[m * D + j];
                            });
}

inline Var sum(Var input) {
  const Tensor& X = input.value();
  double s = 0.0;
  for (double v : X.data()) s += v;
  const std::size_t xid = input.id;
  return input.tape->record(OpKind::Sum, Tensor::scalar(s), {xid}, [=](Tape& tp, std::size_t self) {
    const double g = tp.grad_buffer(self)[0];
    Tensor& d = tp.grad_buffer(xid);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g;
  });
}

/// Scalar sum_i coeffs[i] * input[i]; coeffs must match input's shape.
inline Var weighted_sum(Var input, const Tensor& coeffs) {
  const Tensor& X = input.value();
  if (coeffs.shape() != X.shape()) throw ShapeError("weighted_sum coefficient shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) s += coeffs[i] * X[i];
  const std::size_t xid = input.id;
  return input.tape->record(OpKind::WeightedSum, Tensor::scalar(s), {xid},
                            [=](Tape& tp, std::size_t self) {
                              const double g = tp.grad_buffer(self)[0];
                              Tensor& d = tp.grad_buffer(xid);
                              for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * coeffs[i];
                            });
}

/// ca * a + cb * b for two single-element tensors.
inline Var blend(Var a, double ca, Var b, double cb) {
  detail::require_same_tape(a, b);
  if (a.value().size() != 1 || b.value().size() != 1) throw ShapeError("blend takes scalars");
  const double v = ca * a.value()[0] + cb * b.value()[0];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(OpKind::Blend, Tensor::scalar(v), {aid, bid},
                        [=](Tape& tp, std::size_t self) {
                          const double g = tp.grad_buffer(self)[0];
                          if (tp.requires_grad(aid)) tp.grad_buffer(aid)[0] += ca * g;
                          if (tp.requires_grad(bid)) tp.grad_buffer(bid)[0] += cb * g;
                        });
}

}  // namespace datwep::ops
