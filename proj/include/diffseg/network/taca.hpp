#pragma once

#include "diffseg/network/layers.hpp"

namespace diffseg {

struct TacaConfig {
  std::vector<int> kernel_sizes{7, 11, 15};
  int kernels_per_conv = 4;  // K, mixture size of each dynamic convolution

  void validate() const {
    require(kernels_per_conv >= 1, "taca: K must be >= 1");
    require(!kernel_sizes.empty(), "taca: need at least one kernel size");
    for (int k : kernel_sizes) require(k >= 1 && k % 2 == 1, "taca: kernel sizes must be odd");
  }
};

/// Time-adapted channel attention on a skip connection. Encoder and decoder
/// features (c channels each) are concatenated, pooled over space, passed
/// through per-scale dynamic 1-D convolutions along the channel axis whose
/// kernels are convex combinations of K learned kernels with mixture weights
/// produced from the two time embeddings, fused pointwise, and turned into a
/// sigmoid channel mask: out = f_cat + f_cat * mask.
template <typename T>
class TacaBlock {
 public:
  struct Ctx {
    Grid<T> f_cat;
    VectorX<T> f_pool, t_emb, mask;
    typename Linear<T>::Ctx time_ctx;
    std::vector<typename Linear<T>::Ctx> pi_ctx;
    std::vector<VectorX<T>> pi;   // softmax mixture weights per scale
    std::vector<VectorX<T>> f_s;  // per-scale convolution outputs
  };

  TacaBlock() = default;
  TacaBlock(ParamTable& pt, const std::string& name, int channels, int time_dim,
            const TacaConfig& cfg)
      : channels_(channels), time_dim_(time_dim), cfg_(cfg) {
    cfg_.validate();
    time_ = Linear<T>(pt, name + ".time", 2 * time_dim, time_dim);
    const int S = int(cfg_.kernel_sizes.size());
    pi_.reserve(S);
    for (int s = 0; s < S; ++s) {
      const int tau = cfg_.kernel_sizes[std::size_t(s)];
      const std::string base = name + ".scale" + std::to_string(tau);
      pi_.emplace_back(pt, base + ".pi", time_dim, cfg_.kernels_per_conv);
      kern_off_.push_back(pt.add(base + ".kernels", {cfg_.kernels_per_conv, tau}, 0.0,
                                 std::size_t(tau)));
      kbias_off_.push_back(pt.add(base + ".kbias", {cfg_.kernels_per_conv}));
    }
    fuse_w_off_ = pt.add(name + ".fuse.w", {S});
    fuse_b_off_ = pt.add(name + ".fuse.b", {1});
  }

  /// Mixture weights for one scale at a given fused time embedding; exposed
  /// for the convexity checks.
  VectorX<T> mixture_weights(const T* theta, int scale, const VectorX<T>& t_emb) const {
    VectorX<T> logits = pi_[std::size_t(scale)].forward(theta, t_emb);
    ArrayX<T> e = (logits.array() - logits.maxCoeff()).exp();
    return (e / e.sum()).matrix();
  }

  VectorX<T> fused_time_embedding(const T* theta, const VectorX<T>& e_d,
                                  const VectorX<T>& e_m) const {
    VectorX<T> tin(2 * time_dim_);
    tin << e_d, e_m;
    return time_.forward(theta, tin);
  }

  Grid<T> forward(const T* theta, const Grid<T>& f_enc, const Grid<T>& f_dec,
                  const VectorX<T>& e_d, const VectorX<T>& e_m, Ctx* ctx) const {
    require_same_layout(f_enc, f_dec, "taca");
    require(f_enc.channels() == channels_, "taca: channel mismatch");
    const Eigen::Index N = f_enc.voxels();
    const int c2 = 2 * channels_;

    Grid<T> f_cat = Grid<T>::uninit(c2, f_enc.shape());
    f_cat.array().head(f_enc.size()) = f_enc.array();
    f_cat.array().tail(f_dec.size()) = f_dec.array();

    VectorX<T> f_pool = f_cat.as_matrix().colwise().mean();

    VectorX<T> tin(2 * time_dim_);
    tin << e_d, e_m;
    VectorX<T> t_emb = time_.forward(theta, tin, ctx ? &ctx->time_ctx : nullptr);

    const int S = int(cfg_.kernel_sizes.size());
    if (ctx) {
      ctx->pi_ctx.resize(std::size_t(S));
      ctx->pi.resize(std::size_t(S));
      ctx->f_s.resize(std::size_t(S));
    }
    VectorX<T> fused = VectorX<T>::Constant(c2, theta[fuse_b_off_]);
    for (int s = 0; s < S; ++s) {
      const int tau = cfg_.kernel_sizes[std::size_t(s)];
      VectorX<T> logits =
          pi_[std::size_t(s)].forward(theta, t_emb, ctx ? &ctx->pi_ctx[std::size_t(s)] : nullptr);
      ArrayX<T> e = (logits.array() - logits.maxCoeff()).exp();
      VectorX<T> pi = (e / e.sum()).matrix();

      auto kernels = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic,
                                                    Eigen::RowMajor>>(
          theta + kern_off_[std::size_t(s)], cfg_.kernels_per_conv, tau);
      auto kbias = Eigen::Map<const VectorX<T>>(theta + kbias_off_[std::size_t(s)],
                                                cfg_.kernels_per_conv);
      VectorX<T> what = kernels.transpose() * pi;
      const T bhat = kbias.dot(pi);
      VectorX<T> fs = conv1d(f_pool, what, bhat);
      fused += theta[fuse_w_off_ + std::size_t(s)] * fs;
      if (ctx) {
        ctx->pi[std::size_t(s)] = std::move(pi);
        ctx->f_s[std::size_t(s)] = std::move(fs);
      }
    }
    // Scalar exp keeps sigmoid(0) exactly 0.5 (the vectorized path is off
    // by an ulp), so a zeroed fusion yields f_out = 1.5 * f_cat exactly.
    VectorX<T> mask(c2);
    for (int ch = 0; ch < c2; ++ch) mask[ch] = T(1) / (T(1) + std::exp(-fused[ch]));

    Grid<T> out = Grid<T>::uninit(c2, f_enc.shape());
    for (int ch = 0; ch < c2; ++ch)
      out.channel(ch) = f_cat.channel(ch) * (T(1) + mask[ch]);

    if (ctx) {
      ctx->f_cat = std::move(f_cat);
      ctx->f_pool = std::move(f_pool);
      ctx->t_emb = std::move(t_emb);
      ctx->mask = std::move(mask);
    }
    (void)N;
    return out;
  }

  /// Returns (df_enc, df_dec); time-embedding gradients are accumulated.
  std::pair<Grid<T>, Grid<T>> backward(const T* theta, const Grid<T>& dout, const Ctx& ctx,
                                       T* grad, VectorX<T>& de_d, VectorX<T>& de_m) const {
    const int c2 = 2 * channels_;
    const Eigen::Index N = dout.voxels();

    VectorX<T> dmask(c2);
    Grid<T> df_cat = Grid<T>::uninit(c2, dout.shape());
    for (int ch = 0; ch < c2; ++ch) {
      dmask[ch] = (dout.channel(ch) * ctx.f_cat.channel(ch)).sum();
      df_cat.channel(ch) = dout.channel(ch) * (T(1) + ctx.mask[ch]);
    }
    VectorX<T> dfused =
        (dmask.array() * ctx.mask.array() * (T(1) - ctx.mask.array())).matrix();

    grad[fuse_b_off_] += dfused.sum();
    VectorX<T> df_pool = VectorX<T>::Zero(c2);
    VectorX<T> dt_emb = VectorX<T>::Zero(time_dim_);
    const int S = int(cfg_.kernel_sizes.size());
    for (int s = 0; s < S; ++s) {
      const int tau = cfg_.kernel_sizes[std::size_t(s)];
      grad[fuse_w_off_ + std::size_t(s)] += dfused.dot(ctx.f_s[std::size_t(s)]);
      VectorX<T> dfs = theta[fuse_w_off_ + std::size_t(s)] * dfused;

      auto kernels = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic,
                                                    Eigen::RowMajor>>(
          theta + kern_off_[std::size_t(s)], cfg_.kernels_per_conv, tau);
      auto kbias = Eigen::Map<const VectorX<T>>(theta + kbias_off_[std::size_t(s)],
                                                cfg_.kernels_per_conv);
      const VectorX<T>& pi = ctx.pi[std::size_t(s)];
      VectorX<T> what = kernels.transpose() * pi;

      // conv1d backward
      const int pad = (tau - 1) / 2;
      VectorX<T> dwhat = VectorX<T>::Zero(tau);
      const T dbhat = dfs.sum();
      for (int j = 0; j < tau; ++j) {
        T acc = 0;
        for (int i = 0; i < c2; ++i) {
          const int q = i + j - pad;
          if (q >= 0 && q < c2) acc += dfs[i] * ctx.f_pool[q];
        }
        dwhat[j] = acc;
      }
      for (int q = 0; q < c2; ++q) {
        T acc = 0;
        for (int j = 0; j < tau; ++j) {
          const int i = q - j + pad;
          if (i >= 0 && i < c2) acc += dfs[i] * what[j];
        }
        df_pool[q] += acc;
      }

      // mixture backward
      VectorX<T> dpi = kernels * dwhat + dbhat * kbias;
      auto dkern = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          grad + kern_off_[std::size_t(s)], cfg_.kernels_per_conv, tau);
      dkern.noalias() += pi * dwhat.transpose();
      Eigen::Map<VectorX<T>>(grad + kbias_off_[std::size_t(s)], cfg_.kernels_per_conv) +=
          dbhat * pi;
      VectorX<T> dlogits = (pi.array() * (dpi.array() - dpi.dot(pi))).matrix();
      dt_emb += pi_[std::size_t(s)].backward(theta, dlogits, ctx.pi_ctx[std::size_t(s)], grad);
    }

    // pooled path back into the concatenated feature map
    const T inv_n = T(1) / T(double(N));
    for (int ch = 0; ch < c2; ++ch)
      df_cat.channel(ch) += df_pool[ch] * inv_n;

    VectorX<T> dtin = time_.backward(theta, dt_emb, ctx.time_ctx, grad);
    de_d += dtin.head(time_dim_);
    de_m += dtin.tail(time_dim_);

    Grid<T> de = Grid<T>::uninit(channels_, dout.shape());
    Grid<T> dd = Grid<T>::uninit(channels_, dout.shape());
    de.array() = df_cat.array().head(de.size());
    dd.array() = df_cat.array().tail(dd.size());
    return {std::move(de), std::move(dd)};
  }

  static VectorX<T> conv1d(const VectorX<T>& x, const VectorX<T>& w, T bias) {
    const int n = int(x.size()), tau = int(w.size());
    const int pad = (tau - 1) / 2;
    VectorX<T> y(n);
    for (int i = 0; i < n; ++i) {
      T acc = bias;
      const int j0 = std::max(0, pad - i);
      const int j1 = std::min(tau, n + pad - i);
      for (int j = j0; j < j1; ++j) acc += w[j] * x[i + j - pad];
      y[i] = acc;
    }
    return y;
  }

  const TacaConfig& config() const { return cfg_; }

 private:
  int channels_ = 0, time_dim_ = 0;
  TacaConfig cfg_;
  Linear<T> time_;
  std::vector<Linear<T>> pi_;
  std::vector<std::size_t> kern_off_, kbias_off_;
  std::size_t fuse_w_off_ = 0, fuse_b_off_ = 0;
};

}  // namespace diffseg
