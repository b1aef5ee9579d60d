#pragma once

#include "diffseg/network/layers.hpp"
#include "diffseg/network/taca.hpp"

#include <algorithm>
#include <memory>

namespace diffseg {

struct NetworkConfig {
  int classes = 4;
  int base_channels = 16;
  int depth = 3;     // downsampling levels
  int time_dim = 64;  // sinusoidal embedding width
  TacaConfig taca;
  bool use_taca = true;
  std::vector<int> taca_levels;  // empty = every level (when use_taca)

  int input_channels() const { return 1 + classes + 3; }
  int channel_mult(int level) const { return std::min(1 << level, 4); }
  int channels_at(int level) const { return base_channels * channel_mult(level); }

  bool taca_at(int level) const {
    if (!use_taca) return false;
    if (taca_levels.empty()) return true;
    return std::find(taca_levels.begin(), taca_levels.end(), level) != taca_levels.end();
  }

  void validate() const {
    require(classes >= 2 && classes <= 16, "network: classes outside [2,16]");
    require(base_channels >= 2 && base_channels % 2 == 0,
            "network: base_channels must be even and >= 2");
    require(depth >= 1 && depth <= 5, "network: depth outside [1,5]");
    require(time_dim >= 2 && time_dim % 2 == 0, "network: time_dim must be even");
    taca.validate();
  }
};

/// Residual block with two conv+groupnorm+SiLU stages. The two per-block
/// linear time projections (each to channels/2) are concatenated and added,
/// broadcast over space, between the stages. A 1x1 projection carries the
/// skip when the channel count changes.
template <typename T>
class ResBlock {
 public:
  struct Ctx {
    typename Conv3d<T>::Ctx c1, c2, cs;
    typename GroupNorm<T>::Ctx g1, g2;
    SiluCtx<T> s1, s2;
    typename Linear<T>::Ctx pd, pm;
  };

  ResBlock() = default;
  ResBlock(ParamTable& pt, const std::string& name, int cin, int cout, int time_dim)
      : cin_(cin), cout_(cout) {
    require(cout % 2 == 0, "res block: output channels must be even");
    conv1_ = Conv3d<T>(pt, name + ".conv1", cin, cout, 3);
    gn1_ = GroupNorm<T>(pt, name + ".gn1", cout);
    proj_d_ = Linear<T>(pt, name + ".time_d", time_dim, cout / 2);
    proj_m_ = Linear<T>(pt, name + ".time_m", time_dim, cout / 2);
    conv2_ = Conv3d<T>(pt, name + ".conv2", cout, cout, 3, 1, /*zero_init=*/true);
    gn2_ = GroupNorm<T>(pt, name + ".gn2", cout);
    if (cin != cout) skip_ = std::make_unique<Conv3d<T>>(pt, name + ".skip", cin, cout, 1);
  }

  Grid<T> forward(const T* theta, const Grid<T>& x, const VectorX<T>& e_d, const VectorX<T>& e_m,
                  Ctx* ctx, Workspace<T>& ws) const {
    Grid<T> h = conv1_.forward(theta, x, ctx ? &ctx->c1 : nullptr, ws);
    h = gn1_.forward(theta, h, ctx ? &ctx->g1 : nullptr);
    h = silu(h, ctx ? &ctx->s1 : nullptr);

    VectorX<T> pd = proj_d_.forward(theta, e_d, ctx ? &ctx->pd : nullptr);
    VectorX<T> pm = proj_m_.forward(theta, e_m, ctx ? &ctx->pm : nullptr);
    const int half = cout_ / 2;
    for (int c = 0; c < half; ++c) {
      h.channel(c) += pd[c];
      h.channel(half + c) += pm[c];
    }

    Grid<T> h2 = conv2_.forward(theta, h, ctx ? &ctx->c2 : nullptr, ws);
    h2 = gn2_.forward(theta, h2, ctx ? &ctx->g2 : nullptr);
    h2 = silu(h2, ctx ? &ctx->s2 : nullptr);

    if (skip_) {
      Grid<T> sk = skip_->forward(theta, x, ctx ? &ctx->cs : nullptr, ws);
      h2.array() += sk.array();
    } else {
      h2.array() += x.array();
    }
    return h2;
  }

  Grid<T> backward(const T* theta, const Grid<T>& dy, const Ctx& ctx, T* grad, Workspace<T>& ws,
                   VectorX<T>& de_d, VectorX<T>& de_m) const {
    Grid<T> dh = silu_backward(dy, ctx.s2);
    dh = gn2_.backward(theta, dh, ctx.g2, grad);
    dh = conv2_.backward(theta, dh, ctx.c2, grad, ws);

    const int half = cout_ / 2;
    VectorX<T> dpd(half), dpm(half);
    for (int c = 0; c < half; ++c) {
      dpd[c] = dh.channel(c).sum();
      dpm[c] = dh.channel(half + c).sum();
    }
    de_d += proj_d_.backward(theta, dpd, ctx.pd, grad);
    de_m += proj_m_.backward(theta, dpm, ctx.pm, grad);

    dh = silu_backward(dh, ctx.s1);
    dh = gn1_.backward(theta, dh, ctx.g1, grad);
    Grid<T> dx = conv1_.backward(theta, dh, ctx.c1, grad, ws);

    if (skip_) {
      Grid<T> ds = skip_->backward(theta, dy, ctx.cs, grad, ws);
      dx.array() += ds.array();
    } else {
      dx.array() += dy.array();
    }
    return dx;
  }

 private:
  int cin_ = 0, cout_ = 0;
  Conv3d<T> conv1_, conv2_;
  GroupNorm<T> gn1_, gn2_;
  Linear<T> proj_d_, proj_m_;
  std::unique_ptr<Conv3d<T>> skip_;
};

/// Collaborative denoising U-Net. Input is the channel concatenation
/// [image, noisy encoded label, noisy distance field]; every skip connection
/// passes through time-adapted channel attention (when enabled); the final
/// layer has a 3-channel field head and a classes-channel logit head.
template <typename T>
class DenoiseUNet {
 public:
  struct Ctx {
    typename TimeMlp<T>::Ctx mlp_d, mlp_m;
    VectorX<T> e_d, e_m;
    typename Conv3d<T>::Ctx stem;
    std::vector<typename Conv3d<T>::Ctx> down;
    std::vector<typename ResBlock<T>::Ctx> enc;
    std::vector<typename Conv3d<T>::Ctx> up;
    std::vector<Shape3> up_in_shape;
    std::vector<typename TacaBlock<T>::Ctx> taca;
    std::vector<typename ResBlock<T>::Ctx> dec;
    typename Conv3d<T>::Ctx head_d, head_m;
  };

  explicit DenoiseUNet(NetworkConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int D = cfg_.depth;
    mlp_d_ = TimeMlp<T>(table_, "time_mlp_d", cfg_.time_dim);
    mlp_m_ = TimeMlp<T>(table_, "time_mlp_m", cfg_.time_dim);
    stem_ = Conv3d<T>(table_, "stem", cfg_.input_channels(), cfg_.channels_at(0), 3);
    for (int l = 1; l <= D; ++l) {
      down_.emplace_back(table_, "down" + std::to_string(l - 1), cfg_.channels_at(l - 1),
                         cfg_.channels_at(l), 3, 2);
      const std::string nm = (l == D) ? "mid" : "enc" + std::to_string(l);
      enc_.emplace_back(table_, nm, cfg_.channels_at(l), cfg_.channels_at(l), cfg_.time_dim);
    }
    for (int l = D - 1; l >= 0; --l) {
      up_.emplace_back(table_, "up" + std::to_string(l), cfg_.channels_at(l + 1),
                       cfg_.channels_at(l), 1);
      if (cfg_.taca_at(l))
        taca_.push_back(std::make_unique<TacaBlock<T>>(table_, "taca" + std::to_string(l),
                                                       cfg_.channels_at(l), cfg_.time_dim,
                                                       cfg_.taca));
      else
        taca_.push_back(nullptr);
      dec_.emplace_back(table_, "dec" + std::to_string(l), 2 * cfg_.channels_at(l),
                        cfg_.channels_at(l), cfg_.time_dim);
    }
    head_d_ = Conv3d<T>(table_, "head_field", cfg_.channels_at(0), 3, 1, 1, /*zero_init=*/true);
    head_m_ = Conv3d<T>(table_, "head_label", cfg_.channels_at(0), cfg_.classes, 1, 1,
                        /*zero_init=*/true);
  }

  const NetworkConfig& config() const { return cfg_; }
  const ParamTable& params() const { return table_; }
  std::size_t param_count() const { return table_.total; }

  ArrayX<T> init_weights(uint64_t seed) const { return init_params<T>(table_, Rng(seed)); }

  void check_input(const Grid<T>& D_in, const Grid<T>& M_in, const Grid<T>& image) const {
    require(image.channels() == 1, "network: image must have 1 channel");
    require(M_in.channels() == cfg_.classes, "network: label channels != classes");
    require(D_in.channels() == 3, "network: field must have 3 channels");
    require(D_in.shape() == M_in.shape() && D_in.shape() == image.shape(),
            "network: input spatial shapes differ");
    const int f = 1 << cfg_.depth;
    const auto& s = image.shape();
    require(s.nx % f == 0 && s.ny % f == 0 && s.nz % f == 0,
            "network: patch side not divisible by 2^depth");
  }

  void forward(const T* theta, const Grid<T>& D_in, const Grid<T>& M_in, const Grid<T>& image,
               int t_d, int t_m, Grid<T>& D_hat, Grid<T>& logits, Ctx* ctx,
               Workspace<T>& ws) const {
    check_input(D_in, M_in, image);
    require(t_d >= 0 && t_m >= 0, "network: negative timestep");
    const int D = cfg_.depth;

    VectorX<T> e_d = mlp_d_.forward(theta, t_d, ctx ? &ctx->mlp_d : nullptr);
    VectorX<T> e_m = mlp_m_.forward(theta, t_m, ctx ? &ctx->mlp_m : nullptr);

    Grid<T> x = Grid<T>::uninit(cfg_.input_channels(), image.shape());
    x.channel(0) = image.channel(0);
    for (int c = 0; c < cfg_.classes; ++c) x.channel(1 + c) = M_in.channel(c);
    for (int c = 0; c < 3; ++c) x.channel(1 + cfg_.classes + c) = D_in.channel(c);

    if (ctx) {
      ctx->down.resize(std::size_t(D));
      ctx->enc.resize(std::size_t(D));
      ctx->up.resize(std::size_t(D));
      ctx->up_in_shape.resize(std::size_t(D));
      ctx->taca.resize(std::size_t(D));
      ctx->dec.resize(std::size_t(D));
      ctx->e_d = e_d;
      ctx->e_m = e_m;
    }

    std::vector<Grid<T>> skips(static_cast<std::size_t>(D));
    Grid<T> h = stem_.forward(theta, x, ctx ? &ctx->stem : nullptr, ws);
    for (int l = 1; l <= D; ++l) {
      skips[std::size_t(l - 1)] = h;
      h = down_[std::size_t(l - 1)].forward(theta, h, ctx ? &ctx->down[std::size_t(l - 1)] : nullptr,
                                            ws);
      h = enc_[std::size_t(l - 1)].forward(theta, h, e_d, e_m,
                                           ctx ? &ctx->enc[std::size_t(l - 1)] : nullptr, ws);
    }

    for (int i = 0; i < D; ++i) {
      const int l = D - 1 - i;
      if (ctx) ctx->up_in_shape[std::size_t(i)] = h.shape();
      Grid<T> u = upsample_nearest2(h);
      u = up_[std::size_t(i)].forward(theta, u, ctx ? &ctx->up[std::size_t(i)] : nullptr, ws);
      const Grid<T>& e = skips[std::size_t(l)];
      Grid<T> f;
      if (taca_[std::size_t(i)]) {
        f = taca_[std::size_t(i)]->forward(theta, e, u, e_d, e_m,
                                           ctx ? &ctx->taca[std::size_t(i)] : nullptr);
      } else {
        f = Grid<T>::uninit(2 * cfg_.channels_at(l), u.shape());
        f.array().head(e.size()) = e.array();
        f.array().tail(u.size()) = u.array();
      }
      h = dec_[std::size_t(i)].forward(theta, f, e_d, e_m,
                                       ctx ? &ctx->dec[std::size_t(i)] : nullptr, ws);
    }

    D_hat = head_d_.forward(theta, h, ctx ? &ctx->head_d : nullptr, ws);
    logits = head_m_.forward(theta, h, ctx ? &ctx->head_m : nullptr, ws);
  }

  void backward(const T* theta, const Grid<T>& dD_hat, const Grid<T>& dlogits, const Ctx& ctx,
                T* grad, Workspace<T>& ws) const {
    const int D = cfg_.depth;
    VectorX<T> de_d = VectorX<T>::Zero(cfg_.time_dim);
    VectorX<T> de_m = VectorX<T>::Zero(cfg_.time_dim);

    Grid<T> dh = head_d_.backward(theta, dD_hat, ctx.head_d, grad, ws);
    {
      Grid<T> dm = head_m_.backward(theta, dlogits, ctx.head_m, grad, ws);
      dh.array() += dm.array();
    }

    std::vector<Grid<T>> dskips(static_cast<std::size_t>(D));
    for (int i = D - 1; i >= 0; --i) {
      const int l = D - 1 - i;
      Grid<T> df = dec_[std::size_t(i)].backward(theta, dh, ctx.dec[std::size_t(i)], grad, ws,
                                                 de_d, de_m);
      Grid<T> de, du;
      if (taca_[std::size_t(i)]) {
        auto [a, b] = taca_[std::size_t(i)]->backward(theta, df, ctx.taca[std::size_t(i)], grad,
                                                      de_d, de_m);
        de = std::move(a);
        du = std::move(b);
      } else {
        de = Grid<T>::uninit(cfg_.channels_at(l), df.shape());
        du = Grid<T>::uninit(cfg_.channels_at(l), df.shape());
        de.array() = df.array().head(de.size());
        du.array() = df.array().tail(du.size());
      }
      dskips[std::size_t(l)] = std::move(de);
      Grid<T> dup = up_[std::size_t(i)].backward(theta, du, ctx.up[std::size_t(i)], grad, ws);
      dh = upsample_nearest2_backward(dup, ctx.up_in_shape[std::size_t(i)]);
    }

    // dh now holds the gradient at the bottleneck output.
    for (int l = D; l >= 1; --l) {
      Grid<T> g = enc_[std::size_t(l - 1)].backward(theta, dh, ctx.enc[std::size_t(l - 1)], grad,
                                                    ws, de_d, de_m);
      Grid<T> g2 = down_[std::size_t(l - 1)].backward(theta, g, ctx.down[std::size_t(l - 1)],
                                                      grad, ws);
      g2.array() += dskips[std::size_t(l - 1)].array();
      dh = std::move(g2);
    }
    stem_.backward(theta, dh, ctx.stem, grad, ws, /*need_dx=*/false);

    mlp_d_.backward(theta, de_d, ctx.mlp_d, grad);
    mlp_m_.backward(theta, de_m, ctx.mlp_m, grad);
  }

  /// Decoder-loop index of a resolution level (for tests poking TACA blocks).
  const TacaBlock<T>* taca_block_at_level(int level) const {
    const int i = cfg_.depth - 1 - level;
    if (i < 0 || i >= int(taca_.size())) return nullptr;
    return taca_[std::size_t(i)].get();
  }

 private:
  NetworkConfig cfg_;
  ParamTable table_;
  TimeMlp<T> mlp_d_, mlp_m_;
  Conv3d<T> stem_;
  std::vector<Conv3d<T>> down_;
  std::vector<ResBlock<T>> enc_;
  std::vector<Conv3d<T>> up_;
  std::vector<std::unique_ptr<TacaBlock<T>>> taca_;
  std::vector<ResBlock<T>> dec_;
  Conv3d<T> head_d_, head_m_;
};

}  // namespace diffseg
