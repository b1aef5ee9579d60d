#pragma once

#include "diffseg/network/params.hpp"

#include <cstring>
#include <optional>

namespace diffseg {

/// Per-thread scratch for the blocked im2col GEMMs.
template <typename T>
struct Workspace {
  MatrixX<T> col, dcol, dy_block;
};

inline int conv_out_extent(int n, int k, int stride) {
  const int pad = (k - 1) / 2;
  return (n + 2 * pad - k) / stride + 1;
}

/// 3-D convolution, kernel 1 or 3, stride 1 or 2, zero padding (k-1)/2.
/// Weights are stored row-major as (cout, cin*k^3) with the column index
/// ci*k^3 + (kz*k + ky)*k + kx; evaluation is blocked im2col + GEMM over
/// z-slabs of the output.
template <typename T>
class Conv3d {
 public:
  struct Ctx {
    Grid<T> x;
  };

  Conv3d() = default;
  Conv3d(ParamTable& pt, const std::string& name, int cin, int cout, int ksize, int stride = 1,
         bool zero_init = false)
      : cin_(cin), cout_(cout), k_(ksize), stride_(stride) {
    const std::size_t fan_in = std::size_t(cin) * k_ * k_ * k_;
    w_off_ = pt.add(name + ".w", {cout, cin, k_, k_, k_}, 0.0, zero_init ? 0 : fan_in);
    b_off_ = pt.add(name + ".b", {cout});
  }

  int cin() const { return cin_; }
  int cout() const { return cout_; }

  Shape3 out_shape(const Shape3& in) const {
    if (stride_ == 1) return in;
    return {conv_out_extent(in.nx, k_, stride_), conv_out_extent(in.ny, k_, stride_),
            conv_out_extent(in.nz, k_, stride_)};
  }

  Grid<T> forward(const T* theta, const Grid<T>& x, Ctx* ctx, Workspace<T>& ws) const {
    require(x.channels() == cin_, "conv3d: channel mismatch");
    if (ctx) ctx->x = x;
    const Shape3 os = out_shape(x.shape());
    Grid<T> y = Grid<T>::uninit(cout_, os);
    auto W = weight_map(theta);
    auto b = bias_map(theta);

    if (k_ == 1 && stride_ == 1) {
      y.as_matrix().noalias() = x.as_matrix() * W.transpose();
      y.as_matrix().rowwise() += b.transpose();
      return y;
    }

    const Eigen::Index slab = Eigen::Index(os.nx) * os.ny;
    const int zstep = slab_zstep(os);
    for (int z0 = 0; z0 < os.nz; z0 += zstep) {
      const int z1 = std::min(os.nz, z0 + zstep);
      const Eigen::Index rows = slab * (z1 - z0);
      ws.col.resize(rows, K());
      im2col(x, os, z0, z1, ws.col);
      const Eigen::Index row0 = slab * z0;
      auto yblk = y.as_matrix().middleRows(row0, rows);
      yblk.noalias() = ws.col * W.transpose();
      yblk.rowwise() += b.transpose();
    }
    return y;
  }

  /// need_dx = false skips the input-gradient GEMM and scatter (first layer).
  Grid<T> backward(const T* theta, const Grid<T>& dy, const Ctx& ctx, T* grad, Workspace<T>& ws,
                   bool need_dx = true) const {
    const Grid<T>& x = ctx.x;
    const Shape3 os = out_shape(x.shape());
    require(dy.channels() == cout_ && dy.shape() == os, "conv3d backward: shape mismatch");
    auto W = weight_map(theta);
    auto dW = grad_weight_map(grad);
    auto db = grad_bias_map(grad);
    db += dy.as_matrix().colwise().sum().transpose();

    if (k_ == 1 && stride_ == 1) {
      dW += dy.as_matrix().transpose() * x.as_matrix();
      if (!need_dx) return {};
      Grid<T> dx = Grid<T>::uninit(cin_, x.shape());
      dx.as_matrix().noalias() = dy.as_matrix() * W;
      return dx;
    }

    Grid<T> dx;
    if (need_dx) dx = Grid<T>(cin_, x.shape());  // zeroed; col2im accumulates
    const Eigen::Index slab = Eigen::Index(os.nx) * os.ny;
    const int zstep = slab_zstep(os);
    for (int z0 = 0; z0 < os.nz; z0 += zstep) {
      const int z1 = std::min(os.nz, z0 + zstep);
      const Eigen::Index rows = slab * (z1 - z0);
      const Eigen::Index row0 = slab * z0;
      ws.col.resize(rows, K());
      im2col(x, os, z0, z1, ws.col);
      auto dyblk = dy.as_matrix().middleRows(row0, rows);
      dW.noalias() += dyblk.transpose() * ws.col;
      if (need_dx) {
        ws.dcol.resize(rows, K());
        ws.dcol.noalias() = dyblk * W;
        col2im(ws.dcol, os, z0, z1, dx);
      }
    }
    return dx;
  }

 private:
  Eigen::Index K() const { return Eigen::Index(cin_) * k_ * k_ * k_; }

  int slab_zstep(const Shape3& os) const {
    // Keep the col block near 8 MB.
    const double bytes_per_z = double(os.nx) * os.ny * K() * sizeof(T);
    int zstep = std::max(1, int(4e6 / std::max(1.0, bytes_per_z)));
    return std::min(zstep, os.nz);
  }

  auto weight_map(const T* theta) const {
    return Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        theta + w_off_, cout_, K());
  }
  auto bias_map(const T* theta) const {
    return Eigen::Map<const VectorX<T>>(theta + b_off_, cout_);
  }
  auto grad_weight_map(T* grad) const {
    return Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        grad + w_off_, cout_, K());
  }
  auto grad_bias_map(T* grad) const {
    return Eigen::Map<VectorX<T>>(grad + b_off_, cout_);
  }

  void im2col(const Grid<T>& x, const Shape3& os, int z0, int z1, MatrixX<T>& col) const {
    const int pad = (k_ - 1) / 2;
    const Shape3 is = x.shape();
    const Eigen::Index oxy = Eigen::Index(os.nx) * os.ny;
    for (int ci = 0; ci < cin_; ++ci)
      for (int kz = 0; kz < k_; ++kz)
        for (int ky = 0; ky < k_; ++ky)
          for (int kx = 0; kx < k_; ++kx) {
            const Eigen::Index kcol = ((Eigen::Index(ci) * k_ + kz) * k_ + ky) * k_ + kx;
            T* dst_base = col.data() + kcol * col.rows();
            for (int z = z0; z < z1; ++z) {
              const int sz = z * stride_ + kz - pad;
              for (int y = 0; y < os.ny; ++y) {
                T* dst = dst_base + (Eigen::Index(z - z0) * os.ny + y) * os.nx;
                const int sy = y * stride_ + ky - pad;
                if (sz < 0 || sz >= is.nz || sy < 0 || sy >= is.ny) {
                  std::memset(dst, 0, sizeof(T) * std::size_t(os.nx));
                  continue;
                }
                const T* src_row = x.data() + ((Eigen::Index(ci) * is.nz + sz) * is.ny + sy) * is.nx;
                if (stride_ == 1) {
                  const int sx0 = kx - pad;  // source x of output x=0
                  int lead = std::max(0, -sx0);
                  int tail = std::max(0, sx0 + os.nx - is.nx);
                  int run = os.nx - lead - tail;
                  if (lead) std::memset(dst, 0, sizeof(T) * std::size_t(lead));
                  if (run > 0) std::memcpy(dst + lead, src_row + sx0 + lead, sizeof(T) * std::size_t(run));
                  if (tail) std::memset(dst + os.nx - tail, 0, sizeof(T) * std::size_t(tail));
                } else {
                  for (int ox = 0; ox < os.nx; ++ox) {
                    const int sx = ox * stride_ + kx - pad;
                    dst[ox] = (sx >= 0 && sx < is.nx) ? src_row[sx] : T(0);
                  }
                }
              }
            }
          }
  }

  void col2im(const MatrixX<T>& dcol, const Shape3& os, int z0, int z1, Grid<T>& dx) const {
    const int pad = (k_ - 1) / 2;
    const Shape3 is = dx.shape();
    for (int ci = 0; ci < cin_; ++ci)
      for (int kz = 0; kz < k_; ++kz)
        for (int ky = 0; ky < k_; ++ky)
          for (int kx = 0; kx < k_; ++kx) {
            const Eigen::Index kcol = ((Eigen::Index(ci) * k_ + kz) * k_ + ky) * k_ + kx;
            const T* src_base = dcol.data() + kcol * dcol.rows();
            for (int z = z0; z < z1; ++z) {
              const int sz = z * stride_ + kz - pad;
              if (sz < 0 || sz >= is.nz) continue;
              for (int y = 0; y < os.ny; ++y) {
                const int sy = y * stride_ + ky - pad;
                if (sy < 0 || sy >= is.ny) continue;
                const T* src = src_base + (Eigen::Index(z - z0) * os.ny + y) * os.nx;
                T* dst_row = dx.data() + ((Eigen::Index(ci) * is.nz + sz) * is.ny + sy) * is.nx;
                if (stride_ == 1) {
                  const int sx0 = kx - pad;
                  const int lead = std::max(0, -sx0);
                  const int tail = std::max(0, sx0 + os.nx - is.nx);
                  const int run = os.nx - lead - tail;
                  const T* s = src + lead;
                  T* d = dst_row + sx0 + lead;
                  for (int i = 0; i < run; ++i) d[i] += s[i];
                } else {
                  for (int ox = 0; ox < os.nx; ++ox) {
                    const int sx = ox * stride_ + kx - pad;
                    if (sx >= 0 && sx < is.nx) dst_row[sx] += src[ox];
                  }
                }
              }
            }
          }
  }

  int cin_ = 0, cout_ = 0, k_ = 3, stride_ = 1;
  std::size_t w_off_ = 0, b_off_ = 0;
};

inline int norm_groups(int channels, int preferred = 8) {
  int g = std::min(preferred, channels);
  while (channels % g != 0) --g;
  return g;
}

template <typename T>
class GroupNorm {
 public:
  struct Ctx {
    Grid<T> x;
    VectorX<T> mean, invstd;  // per group
  };

  GroupNorm() = default;
  GroupNorm(ParamTable& pt, const std::string& name, int channels, int groups = 8)
      : channels_(channels), groups_(norm_groups(channels, groups)) {
    s_off_ = pt.add(name + ".scale", {channels}, 0.0, 0, 1.0);
    b_off_ = pt.add(name + ".bias", {channels});
  }

  Grid<T> forward(const T* theta, const Grid<T>& x, Ctx* ctx) const {
    require(x.channels() == channels_, "groupnorm: channel mismatch");
    const Eigen::Index N = x.voxels();
    const int cpg = channels_ / groups_;
    Grid<T> y = Grid<T>::uninit(channels_, x.shape());
    VectorX<T> mean(groups_), invstd(groups_);
    const T* s = theta + s_off_;
    const T* b = theta + b_off_;
    for (int g = 0; g < groups_; ++g) {
      const Eigen::Index n = Eigen::Index(cpg) * N;
      Eigen::Map<const ArrayX<T>> xg(x.data() + Eigen::Index(g) * n, n);
      const T m = xg.mean();
      const T var = (xg - m).square().sum() / T(n);
      const T is = T(1) / std::sqrt(var + T(1e-5));
      mean[g] = m;
      invstd[g] = is;
      for (int c = 0; c < cpg; ++c) {
        const int ch = g * cpg + c;
        y.channel(ch) = (x.channel(ch) - m) * (is * s[ch]) + b[ch];
      }
    }
    if (ctx) {
      ctx->x = x;
      ctx->mean = std::move(mean);
      ctx->invstd = std::move(invstd);
    }
    return y;
  }

  Grid<T> backward(const T* theta, const Grid<T>& dy, const Ctx& ctx, T* grad) const {
    const Grid<T>& x = ctx.x;
    const Eigen::Index N = x.voxels();
    const int cpg = channels_ / groups_;
    Grid<T> dx = Grid<T>::uninit(channels_, x.shape());
    const T* s = theta + s_off_;
    T* ds = grad + s_off_;
    T* db = grad + b_off_;
    for (int g = 0; g < groups_; ++g) {
      const Eigen::Index n = Eigen::Index(cpg) * N;
      const T m = ctx.mean[g], is = ctx.invstd[g];
      // dxhat, plus per-channel scale/bias grads
      T sum_dxhat = 0, sum_dxhat_xhat = 0;
      for (int c = 0; c < cpg; ++c) {
        const int ch = g * cpg + c;
        auto xc = x.channel(ch);
        auto dyc = dy.channel(ch);
        ArrayX<T> xhat = (xc - m) * is;
        ds[ch] += (dyc * xhat).sum();
        db[ch] += dyc.sum();
        ArrayX<T> dxhat = dyc * s[ch];
        sum_dxhat += dxhat.sum();
        sum_dxhat_xhat += (dxhat * xhat).sum();
      }
      const T inv_n = T(1) / T(n);
      for (int c = 0; c < cpg; ++c) {
        const int ch = g * cpg + c;
        auto xc = x.channel(ch);
        auto dyc = dy.channel(ch);
        ArrayX<T> xhat = (xc - m) * is;
        dx.channel(ch) =
            is * (dyc * s[ch] - inv_n * sum_dxhat - xhat * (inv_n * sum_dxhat_xhat));
      }
    }
    return dx;
  }

 private:
  int channels_ = 0, groups_ = 1;
  std::size_t s_off_ = 0, b_off_ = 0;
};

template <typename T>
struct SiluCtx {
  Grid<T> x;
};

template <typename T>
Grid<T> silu(const Grid<T>& x, SiluCtx<T>* ctx = nullptr) {
  if (ctx) ctx->x = x;
  Grid<T> y = Grid<T>::uninit(x.channels(), x.shape());
  y.array() = x.array() / (T(1) + (-x.array()).exp());
  return y;
}

template <typename T>
Grid<T> silu_backward(const Grid<T>& dy, const SiluCtx<T>& ctx) {
  Grid<T> dx = Grid<T>::uninit(dy.channels(), dy.shape());
  ArrayX<T> sig = T(1) / (T(1) + (-ctx.x.array()).exp());
  dx.array() = dy.array() * sig * (T(1) + ctx.x.array() * (T(1) - sig));
  return dx;
}

template <typename T>
VectorX<T> silu_vec(const VectorX<T>& x) {
  return (x.array() / (T(1) + (-x.array()).exp())).matrix();
}

template <typename T>
VectorX<T> silu_vec_backward(const VectorX<T>& dy, const VectorX<T>& x) {
  ArrayX<T> sig = T(1) / (T(1) + (-x.array()).exp());
  return (dy.array() * sig * (T(1) + x.array() * (T(1) - sig))).matrix();
}

template <typename T>
class Linear {
 public:
  struct Ctx {
    VectorX<T> x;
  };

  Linear() = default;
  Linear(ParamTable& pt, const std::string& name, int in, int out, bool zero_init = false)
      : in_(in), out_(out) {
    w_off_ = pt.add(name + ".w", {out, in}, 0.0, zero_init ? 0 : std::size_t(in));
    b_off_ = pt.add(name + ".b", {out});
  }

  VectorX<T> forward(const T* theta, const VectorX<T>& x, Ctx* ctx = nullptr) const {
    require(x.size() == in_, "linear: input size mismatch");
    if (ctx) ctx->x = x;
    auto W = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        theta + w_off_, out_, in_);
    auto b = Eigen::Map<const VectorX<T>>(theta + b_off_, out_);
    return W * x + b;
  }

  VectorX<T> backward(const T* theta, const VectorX<T>& dy, const Ctx& ctx, T* grad) const {
    auto W = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        theta + w_off_, out_, in_);
    auto dW = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        grad + w_off_, out_, in_);
    auto db = Eigen::Map<VectorX<T>>(grad + b_off_, out_);
    dW.noalias() += dy * ctx.x.transpose();
    db += dy;
    return W.transpose() * dy;
  }

 private:
  int in_ = 0, out_ = 0;
  std::size_t w_off_ = 0, b_off_ = 0;
};

/// Nearest-neighbor 2x upsampling.
template <typename T>
Grid<T> upsample_nearest2(const Grid<T>& x) {
  Grid<T> y = Grid<T>::uninit(x.channels(), {x.nx() * 2, x.ny() * 2, x.nz() * 2});
  for (int c = 0; c < x.channels(); ++c)
    for (int z = 0; z < y.nz(); ++z)
      for (int yy = 0; yy < y.ny(); ++yy) {
        const T* src = x.data() + ((Eigen::Index(c) * x.nz() + z / 2) * x.ny() + yy / 2) * x.nx();
        T* dst = y.data() + ((Eigen::Index(c) * y.nz() + z) * y.ny() + yy) * y.nx();
        for (int xx = 0; xx < y.nx(); ++xx) dst[xx] = src[xx / 2];
      }
  return y;
}

template <typename T>
Grid<T> upsample_nearest2_backward(const Grid<T>& dy, const Shape3& in_shape) {
  Grid<T> dx(dy.channels(), in_shape);
  for (int c = 0; c < dy.channels(); ++c)
    for (int z = 0; z < dy.nz(); ++z)
      for (int yy = 0; yy < dy.ny(); ++yy) {
        const T* src = dy.data() + ((Eigen::Index(c) * dy.nz() + z) * dy.ny() + yy) * dy.nx();
        T* dst = dx.data() +
                 ((Eigen::Index(c) * in_shape.nz + z / 2) * in_shape.ny + yy / 2) * in_shape.nx;
        for (int xx = 0; xx < dy.nx(); ++xx) dst[xx / 2] += src[xx];
      }
  return dx;
}

/// Sinusoidal timestep embedding: first half sin, second half cos.
template <typename T>
VectorX<T> sinusoidal_embedding(int t, int width) {
  require(width >= 2 && width % 2 == 0, "sinusoidal_embedding: width must be even and >= 2");
  const int half = width / 2;
  VectorX<T> e(width);
  for (int i = 0; i < half; ++i) {
    const double w = std::exp(-std::log(10000.0) * double(i) / double(half));
    e[i] = T(std::sin(t * w));
    e[half + i] = T(std::cos(t * w));
  }
  return e;
}

/// Two-layer MLP applied to the sinusoidal embedding of one timestep stream.
template <typename T>
class TimeMlp {
 public:
  struct Ctx {
    typename Linear<T>::Ctx l1, l2;
    VectorX<T> h_pre;
  };

  TimeMlp() = default;
  TimeMlp(ParamTable& pt, const std::string& name, int dim)
      : dim_(dim), l1_(pt, name + ".l1", dim, dim), l2_(pt, name + ".l2", dim, dim) {}

  VectorX<T> forward(const T* theta, int t, Ctx* ctx = nullptr) const {
    VectorX<T> s = sinusoidal_embedding<T>(t, dim_);
    VectorX<T> h = l1_.forward(theta, s, ctx ? &ctx->l1 : nullptr);
    if (ctx) ctx->h_pre = h;
    return l2_.forward(theta, silu_vec(h), ctx ? &ctx->l2 : nullptr);
  }

  void backward(const T* theta, const VectorX<T>& dy, const Ctx& ctx, T* grad) const {
    VectorX<T> dh = l2_.backward(theta, dy, ctx.l2, grad);
    dh = silu_vec_backward(dh, ctx.h_pre);
    l1_.backward(theta, dh, ctx.l1, grad);  // embedding itself is fixed
  }

 private:
  int dim_ = 0;
  Linear<T> l1_, l2_;
};

}  // namespace diffseg
