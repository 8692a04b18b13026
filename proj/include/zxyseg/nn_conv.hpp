#pragma once

// 3-d convolution primitives: dense conv (kernel 3, padding 1, stride 1/2),
// transposed conv (kernel 2, stride 2), and the offset-driven sampling step
// of deformable convolution. All use flat [C, Z, Y, X] tensors; conv bodies
// are im2col slabs fed to Eigen GEMM.

#include <algorithm>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "zxyseg/nn_basic.hpp"

namespace zxyseg::ad {

namespace detail {

// one output-z slab of the im2col matrix, rows indexed (ci*27 + kz*9 + ky*3 + kx)
template <typename S>
void conv_fill_cols(const S* x, int ci_count, int Z, int Y, int X, int OY, int OX, int stride,
                    int oz, S* cols) {
  const std::int64_t plane = static_cast<std::int64_t>(OY) * OX;
  for (int ci = 0; ci < ci_count; ++ci)
    for (int kz = 0; kz < 3; ++kz) {
      const int iz = oz * stride + kz - 1;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          S* dst = cols + (static_cast<std::int64_t>(ci) * 27 + kz * 9 + ky * 3 + kx) * plane;
          if (iz < 0 || iz >= Z) {
            std::fill(dst, dst + plane, S(0));
            continue;
          }
          for (int oy = 0; oy < OY; ++oy, dst += OX) {
            const int iy = oy * stride + ky - 1;
            if (iy < 0 || iy >= Y) {
              std::fill(dst, dst + OX, S(0));
              continue;
            }
            const S* src = x + ((static_cast<std::int64_t>(ci) * Z + iz) * Y + iy) * X;
            if (stride == 1) {
              const int ox0 = std::max(0, 1 - kx);
              const int ox1 = std::min(OX - 1, X - kx);
              for (int ox = 0; ox < ox0; ++ox) dst[ox] = S(0);
              if (ox1 >= ox0) std::copy(src + ox0 + kx - 1, src + ox1 + kx, dst + ox0);
              for (int ox = ox1 + 1; ox < OX; ++ox) dst[ox] = S(0);
            } else {
              for (int ox = 0; ox < OX; ++ox) {
                const int ix = ox * stride + kx - 1;
                dst[ox] = (ix >= 0 && ix < X) ? src[ix] : S(0);
              }
            }
          }
        }
    }
}

// adjoint of conv_fill_cols: scatter-add a slab of column gradients back
// onto the input gradient
template <typename S>
void conv_scatter_cols(S* gx, int ci_count, int Z, int Y, int X, int OY, int OX, int stride,
                       int oz, const S* cols) {
  const std::int64_t plane = static_cast<std::int64_t>(OY) * OX;
  for (int ci = 0; ci < ci_count; ++ci)
    for (int kz = 0; kz < 3; ++kz) {
      const int iz = oz * stride + kz - 1;
      if (iz < 0 || iz >= Z) continue;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const S* src = cols + (static_cast<std::int64_t>(ci) * 27 + kz * 9 + ky * 3 + kx) * plane;
          for (int oy = 0; oy < OY; ++oy, src += OX) {
            const int iy = oy * stride + ky - 1;
            if (iy < 0 || iy >= Y) continue;
            S* dst = gx + ((static_cast<std::int64_t>(ci) * Z + iz) * Y + iy) * X;
            if (stride == 1) {
              const int ox0 = std::max(0, 1 - kx);
              const int ox1 = std::min(OX - 1, X - kx);
              for (int ox = ox0; ox <= ox1; ++ox) dst[ox + kx - 1] += src[ox];
            } else {
              for (int ox = 0; ox < OX; ++ox) {
                const int ix = ox * stride + kx - 1;
                if (ix >= 0 && ix < X) dst[ix] += src[ox];
              }
            }
          }
        }
    }
}

}  // namespace detail

// kernel-3 convolution, padding 1, stride 1 or 2; w is [Co, Ci, 3, 3, 3]
template <typename S>
Var conv3d(Tape<S>& tape, Var x, Var w, Var b, int stride = 1) {
  const Tensor<S>& X = tape.val(x);
  const Tensor<S>& W = tape.val(w);
  const Tensor<S>& B = tape.val(b);
  require(X.shape.size() == 4, "ops.shape", "conv3d expects [C,Z,Y,X] input");
  require(W.shape.size() == 5 && W.shape[2] == 3 && W.shape[3] == 3 && W.shape[4] == 3,
          "ops.shape", "conv3d expects [Co,Ci,3,3,3] weights");
  require(stride == 1 || stride == 2, "ops.stride", "conv3d supports stride 1 or 2");
  const int Ci = X.shape[0], Z = X.shape[1], Y = X.shape[2], Xd = X.shape[3];
  const int Co = W.shape[0];
  require(W.shape[1] == Ci, "ops.channels",
          "conv3d: weight expects " + std::to_string(W.shape[1]) + " input channels, got " +
              std::to_string(Ci));
  require(B.size() == Co, "ops.channels", "conv3d: bias size mismatch");
  const int OZ = (Z - 1) / stride + 1, OY = (Y - 1) / stride + 1, OX = (Xd - 1) / stride + 1;
  const std::int64_t plane = static_cast<std::int64_t>(OY) * OX;
  const std::int64_t out_vol = static_cast<std::int64_t>(OZ) * plane;
  const std::int64_t krows = static_cast<std::int64_t>(Ci) * 27;

  Tensor<S> out = Tensor<S>::zeros({Co, OZ, OY, OX});
  {
    auto wm = W.mat(Co, krows);
#ifdef _OPENMP
#pragma omp parallel
#endif
    {
      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> cols(krows, plane);
#ifdef _OPENMP
#pragma omp for schedule(static)
#endif
      for (int oz = 0; oz < OZ; ++oz) {
        detail::conv_fill_cols(X.ptr(), Ci, Z, Y, Xd, OY, OX, stride, oz, cols.data());
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0,
                   Eigen::OuterStride<>>
            out_slab(out.ptr() + oz * plane, Co, plane, Eigen::OuterStride<>(out_vol));
        out_slab.noalias() = wm * cols;
        out_slab.colwise() += B.data.matrix();
      }
    }
  }

  const bool ng = tape.needs_grad(x) || tape.needs_grad(w) || tape.needs_grad(b);
  Var self = tape.node(std::move(out), ng);
  if (ng)
    tape.set_backprop(self, [x, w, b, self, stride, Ci, Z, Y, Xd, Co, OZ, OY, OX, plane, out_vol,
                             krows](Tape<S>& t) {
      using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
      const Tensor<S>& G = t.grad(self);
      const Tensor<S>& Xv = t.val(x);
      const Tensor<S>& Wv = t.val(w);
      if (t.needs_grad(b)) t.grad(b).data.matrix() += G.mat(Co, out_vol).rowwise().sum();
      const bool need_x = t.needs_grad(x);
      const bool need_w = t.needs_grad(w);
      if (!need_x && !need_w) return;
      S* gx = need_x ? t.grad(x).ptr() : nullptr;

      // Slabs are processed as even-indexed then odd-indexed chunks of
      // length >= 2. Chunks within a phase never touch the same input z
      // rows, so the scatter is race-free; per-thread weight gradients are
      // merged in a fixed order.
      constexpr int kChunk = 2;
      int n_threads = 1;
#ifdef _OPENMP
      n_threads = omp_get_max_threads();
#endif
      std::vector<MatRM> gw_local;
      if (need_w)
        gw_local.assign(static_cast<size_t>(n_threads), MatRM::Zero(Co, krows));
      for (int phase = 0; phase < 2; ++phase) {
#ifdef _OPENMP
#pragma omp parallel
#endif
        {
          MatRM cols(krows, plane), dcols(krows, plane);
          int tid = 0;
#ifdef _OPENMP
          tid = omp_get_thread_num();
#pragma omp for schedule(static)
#endif
          for (int chunk = phase; chunk < (OZ + kChunk - 1) / kChunk; chunk += 2) {
            const int lo = chunk * kChunk;
            const int hi = std::min(lo + kChunk, OZ);
            for (int oz = lo; oz < hi; ++oz) {
              Eigen::Map<const MatRM, 0, Eigen::OuterStride<>> g_slab(
                  G.ptr() + oz * plane, Co, plane, Eigen::OuterStride<>(out_vol));
              if (need_w) {
                detail::conv_fill_cols(Xv.ptr(), Ci, Z, Y, Xd, OY, OX, stride, oz, cols.data());
                gw_local[static_cast<size_t>(tid)].noalias() += g_slab * cols.transpose();
              }
              if (need_x) {
                dcols.noalias() = Wv.mat(Co, krows).transpose() * g_slab;
                detail::conv_scatter_cols(gx, Ci, Z, Y, Xd, OY, OX, stride, oz, dcols.data());
              }
            }
          }
        }
      }
      if (need_w) {
        auto gw = t.grad(w).mat(Co, krows);
        for (int tid = 0; tid < n_threads; ++tid) gw += gw_local[static_cast<size_t>(tid)];
      }
    });
  return self;
}

// transposed convolution, kernel 2 stride 2; w is [Co, Ci, 2, 2, 2] and the
// output doubles every spatial axis
template <typename S>
Var conv_transpose3d(Tape<S>& tape, Var x, Var w, Var b) {
  const Tensor<S>& X = tape.val(x);
  const Tensor<S>& W = tape.val(w);
  const Tensor<S>& B = tape.val(b);
  require(X.shape.size() == 4, "ops.shape", "conv_transpose3d expects [C,Z,Y,X] input");
  require(W.shape.size() == 5 && W.shape[2] == 2 && W.shape[3] == 2 && W.shape[4] == 2,
          "ops.shape", "conv_transpose3d expects [Co,Ci,2,2,2] weights");
  const int Ci = X.shape[0], Z = X.shape[1], Y = X.shape[2], Xd = X.shape[3];
  const int Co = W.shape[0];
  require(W.shape[1] == Ci, "ops.channels", "conv_transpose3d: channel mismatch");
  require(B.size() == Co, "ops.channels", "conv_transpose3d: bias size mismatch");
  const int OZ = 2 * Z, OY = 2 * Y, OX = 2 * Xd;
  const std::int64_t p = static_cast<std::int64_t>(Z) * Y * Xd;

  using StrideD = Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>;
  using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Tensor<S> out = Tensor<S>::zeros({Co, OZ, OY, OX});
  for (int co = 0; co < Co; ++co)
    out.mat(Co, static_cast<std::int64_t>(OZ) * OY * OX).row(co).setConstant(B.data[co]);
  {
    MatRM tap(Co, p);
    for (int k = 0; k < 8; ++k) {
      const int dz = k >> 2, dy = (k >> 1) & 1, dx = k & 1;
      Eigen::Map<const MatRM, 0, StrideD> wk(W.ptr() + k, Co, Ci,
                                             StrideD(static_cast<std::int64_t>(Ci) * 8, 8));
      tap.noalias() = wk * X.mat(Ci, p);
      for (int co = 0; co < Co; ++co) {
        const S* src = tap.data() + static_cast<std::int64_t>(co) * p;
        for (int z = 0; z < Z; ++z)
          for (int y = 0; y < Y; ++y) {
            S* dst = out.ptr() +
                     ((static_cast<std::int64_t>(co) * OZ + 2 * z + dz) * OY + 2 * y + dy) * OX +
                     dx;
            const S* s = src + (static_cast<std::int64_t>(z) * Y + y) * Xd;
            for (int xx = 0; xx < Xd; ++xx) dst[2 * xx] += s[xx];
          }
      }
    }
  }

  const bool ng = tape.needs_grad(x) || tape.needs_grad(w) || tape.needs_grad(b);
  Var self = tape.node(std::move(out), ng);
  if (ng)
    tape.set_backprop(self, [x, w, b, self, Ci, Z, Y, Xd, Co, OZ, OY, OX, p](Tape<S>& t) {
      const Tensor<S>& G = t.grad(self);
      if (t.needs_grad(b))
        t.grad(b).data.matrix() +=
            G.mat(Co, static_cast<std::int64_t>(OZ) * OY * OX).rowwise().sum();
      const bool need_x = t.needs_grad(x);
      const bool need_w = t.needs_grad(w);
      if (!need_x && !need_w) return;
      MatRM gk(Co, p);
      for (int k = 0; k < 8; ++k) {
        const int dz = k >> 2, dy = (k >> 1) & 1, dx = k & 1;
        for (int co = 0; co < Co; ++co) {
          S* dst = gk.data() + static_cast<std::int64_t>(co) * p;
          for (int z = 0; z < Z; ++z)
            for (int y = 0; y < Y; ++y) {
              const S* src = G.ptr() +
                             ((static_cast<std::int64_t>(co) * OZ + 2 * z + dz) * OY + 2 * y + dy) *
                                 OX +
                             dx;
              S* d = dst + (static_cast<std::int64_t>(z) * Y + y) * Xd;
              for (int xx = 0; xx < Xd; ++xx) d[xx] = src[2 * xx];
            }
        }
        if (need_w) {
          Eigen::Map<MatRM, 0, StrideD> gwk(t.grad(w).ptr() + k, Co, Ci,
                                            StrideD(static_cast<std::int64_t>(Ci) * 8, 8));
          gwk.noalias() += gk * t.val(x).mat(Ci, p).transpose();
        }
        if (need_x) {
          Eigen::Map<const MatRM, 0, StrideD> wk(t.val(w).ptr() + k, Co, Ci,
                                                 StrideD(static_cast<std::int64_t>(Ci) * 8, 8));
          t.grad(x).mat(Ci, p).noalias() += wk.transpose() * gk;
        }
      }
    });
  return self;
}

// Offset-driven sampling of deformable convolution: for every voxel p and
// kernel tap k the input is sampled trilinearly at p + grid_k + delta_k(p)
// (zero outside the grid) and written to row ci*27+k of the column matrix.
// offsets carries 3*27 channels ordered (k, [dz,dy,dx]).
template <typename S>
Var deform_sample(Tape<S>& tape, Var x, Var offsets) {
  const Tensor<S>& X = tape.val(x);
  const Tensor<S>& O = tape.val(offsets);
  require(X.shape.size() == 4, "ops.shape", "deform_sample expects [C,Z,Y,X] input");
  require(O.shape.size() == 4 && O.shape[0] == 81, "ops.channels",
          "deform_sample expects 81 offset channels (3 per kernel tap)");
  for (int i = 1; i < 4; ++i)
    require(O.shape[i] == X.shape[i], "ops.shape", "deform_sample: offset grid mismatch");
  const int C = X.shape[0], Z = X.shape[1], Y = X.shape[2], Xd = X.shape[3];
  const std::int64_t P = static_cast<std::int64_t>(Z) * Y * Xd;
  const std::int64_t cvol = P;

  Tensor<S> out = Tensor<S>::zeros({C * 27, Z, Y, Xd});

  // corner gathering shared across channels for each (voxel, tap)
  auto corners_at = [Z, Y, Xd](double pz, double py, double px, std::int64_t idx[8], S wgt[8],
                               S dwz[8], S dwy[8], S dwx[8]) {
    const int z0 = static_cast<int>(std::floor(pz));
    const int y0 = static_cast<int>(std::floor(py));
    const int x0 = static_cast<int>(std::floor(px));
    const S wz = static_cast<S>(pz - z0), wy = static_cast<S>(py - y0),
            wx = static_cast<S>(px - x0);
    int n = 0;
    for (int cz = 0; cz < 2; ++cz)
      for (int cy = 0; cy < 2; ++cy)
        for (int cx = 0; cx < 2; ++cx) {
          const int zz = z0 + cz, yy = y0 + cy, xx = x0 + cx;
          if (zz < 0 || yy < 0 || xx < 0 || zz >= Z || yy >= Y || xx >= Xd) continue;
          const S fz = cz ? wz : S(1) - wz;
          const S fy = cy ? wy : S(1) - wy;
          const S fx = cx ? wx : S(1) - wx;
          idx[n] = (static_cast<std::int64_t>(zz) * Y + yy) * Xd + xx;
          wgt[n] = fz * fy * fx;
          dwz[n] = (cz ? S(1) : S(-1)) * fy * fx;
          dwy[n] = (cy ? S(1) : S(-1)) * fz * fx;
          dwx[n] = (cx ? S(1) : S(-1)) * fz * fy;
          ++n;
        }
    return n;
  };

  {
    const S* xp = X.ptr();
    const S* op = O.ptr();
    S* outp = out.ptr();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t p = 0; p < P; ++p) {
      const int z = static_cast<int>(p / (static_cast<std::int64_t>(Y) * Xd));
      const int y = static_cast<int>((p / Xd) % Y);
      const int xx = static_cast<int>(p % Xd);
      for (int k = 0; k < 27; ++k) {
        const int gz = k / 9 - 1, gy = (k / 3) % 3 - 1, gx = k % 3 - 1;
        const double pz = z + gz + static_cast<double>(op[(3 * k + 0) * P + p]);
        const double py = y + gy + static_cast<double>(op[(3 * k + 1) * P + p]);
        const double px = xx + gx + static_cast<double>(op[(3 * k + 2) * P + p]);
        std::int64_t idx[8];
        S wgt[8], dwz[8], dwy[8], dwx[8];
        const int n = corners_at(pz, py, px, idx, wgt, dwz, dwy, dwx);
        for (int c = 0; c < C; ++c) {
          const S* xc = xp + static_cast<std::int64_t>(c) * cvol;
          S acc = S(0);
          for (int j = 0; j < n; ++j) acc += wgt[j] * xc[idx[j]];
          outp[(static_cast<std::int64_t>(c) * 27 + k) * P + p] = acc;
        }
      }
    }
  }

  const bool ng = tape.needs_grad(x) || tape.needs_grad(offsets);
  Var self = tape.node(std::move(out), ng);
  if (ng)
    tape.set_backprop(self, [x, offsets, self, C, Z, Y, Xd, P, cvol, corners_at](Tape<S>& t) {
      const Tensor<S>& G = t.grad(self);
      const S* xp = t.val(x).ptr();
      const S* op = t.val(offsets).ptr();
      const S* gp = G.ptr();
      const bool need_x = t.needs_grad(x);
      const bool need_o = t.needs_grad(offsets);
      S* gxp = need_x ? t.grad(x).ptr() : nullptr;
      S* gop = need_o ? t.grad(offsets).ptr() : nullptr;
      for (std::int64_t p = 0; p < P; ++p) {
        const int z = static_cast<int>(p / (static_cast<std::int64_t>(Y) * Xd));
        const int y = static_cast<int>((p / Xd) % Y);
        const int xx = static_cast<int>(p % Xd);
        for (int k = 0; k < 27; ++k) {
          const int gz = k / 9 - 1, gy = (k / 3) % 3 - 1, gx = k % 3 - 1;
          const double pz = z + gz + static_cast<double>(op[(3 * k + 0) * P + p]);
          const double py = y + gy + static_cast<double>(op[(3 * k + 1) * P + p]);
          const double px = xx + gx + static_cast<double>(op[(3 * k + 2) * P + p]);
          std::int64_t idx[8];
          S wgt[8], dwz[8], dwy[8], dwx[8];
          const int n = corners_at(pz, py, px, idx, wgt, dwz, dwy, dwx);
          S sz = S(0), sy = S(0), sx = S(0);
          for (int c = 0; c < C; ++c) {
            const S g = gp[(static_cast<std::int64_t>(c) * 27 + k) * P + p];
            if (g == S(0)) continue;
            const S* xc = xp + static_cast<std::int64_t>(c) * cvol;
            if (need_x) {
              S* gxc = gxp + static_cast<std::int64_t>(c) * cvol;
              for (int j = 0; j < n; ++j) gxc[idx[j]] += g * wgt[j];
            }
            if (need_o) {
              for (int j = 0; j < n; ++j) {
                const S xv = xc[idx[j]];
                sz += g * dwz[j] * xv;
                sy += g * dwy[j] * xv;
                sx += g * dwx[j] * xv;
              }
            }
          }
          if (need_o) {
            gop[(3 * k + 0) * P + p] += sz;
            gop[(3 * k + 1) * P + p] += sy;
            gop[(3 * k + 2) * P + p] += sx;
          }
        }
      }
    });
  return self;
}

}  // namespace zxyseg::ad
