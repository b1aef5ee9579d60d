#pragma once

#include "diffseg/core/grid.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace diffseg {

/// Numerical guard for the consistency loss: similarities are clamped into
/// [eps, 1-eps] before logarithms, which also discards negative cosines.
struct ClampPolicy {
  double eps = 1e-6;
};

struct DiceOptions {
  double smooth = 1e-5;
  bool include_background = true;
};

struct LossWeights {
  double mse = 1.0, dice = 1.0, ce = 1.0, sac = 1.0;
};

struct LossBreakdown {
  double mse_field = 0.0;
  double dice = 0.0;
  double ce = 0.0;
  double sac = 0.0;
  double total = 0.0;
};

/// Channelwise softmax at every voxel.
template <typename T>
Grid<T> softmax_channels(const Grid<T>& logits) {
  Grid<T> p = Grid<T>::uninit(logits.channels(), logits.shape());
  auto L = logits.as_matrix();
  auto P = p.as_matrix();
  VectorX<T> m = L.rowwise().maxCoeff();
  P = (L.colwise() - m).array().exp().matrix();
  VectorX<T> z = P.rowwise().sum();
  P.array().colwise() /= z.array();
  return p;
}

/// Pullback of dp through the softmax: dl = p .* (dp - rowdot(dp, p)).
template <typename T>
void softmax_backward(const Grid<T>& probs, const Grid<T>& dprobs, Grid<T>& dlogits_acc) {
  auto P = probs.as_matrix();
  auto dP = dprobs.as_matrix();
  VectorX<T> dot = (P.array() * dP.array()).rowwise().sum();
  dlogits_acc.as_matrix().array() += P.array() * (dP.array().colwise() - dot.array());
}

/// Mean squared error over all voxels and channels. If grad_acc is given,
/// accumulates weight * d(mse)/d(pred).
template <typename T>
double mse_loss(const Grid<T>& pred, const Grid<T>& target, Grid<T>* grad_acc = nullptr,
                double weight = 1.0) {
  require_same_layout(pred, target, "mse_loss");
  const double n = double(pred.size());
  ArrayX<T> diff = pred.array() - target.array();
  double loss = double(diff.template cast<double>().square().sum()) / n;
  if (grad_acc) grad_acc->array() += T(2.0 * weight / n) * diff;
  return loss;
}

/// Soft Dice loss: 1 - mean over classes of (2*I + s)/(P + G + s) on softmax
/// probabilities. Returns the loss; optionally accumulates the gradient with
/// respect to the logits.
template <typename T>
double dice_loss(const Grid<T>& logits, const Grid<T>& onehot, const DiceOptions& opts = {},
                 Grid<T>* grad_logits_acc = nullptr, double weight = 1.0) {
  require_same_layout(logits, onehot, "dice_loss");
  const int C = logits.channels();
  const int c0 = opts.include_background ? 0 : 1;
  const int nclasses = C - c0;
  require(nclasses >= 1, "dice_loss: no classes selected");

  Grid<T> probs = softmax_channels(logits);
  double mean_dice = 0.0;
  std::vector<double> inter(C, 0.0), psum(C, 0.0), gsum(C, 0.0);
  for (int c = 0; c < C; ++c) {
    auto p = probs.channel(c);
    auto g = onehot.channel(c);
    inter[c] = double((p * g).template cast<double>().sum());
    psum[c] = double(p.template cast<double>().sum());
    gsum[c] = double(g.template cast<double>().sum());
  }
  for (int c = c0; c < C; ++c)
    mean_dice += (2.0 * inter[c] + opts.smooth) / (psum[c] + gsum[c] + opts.smooth);
  mean_dice /= nclasses;

  if (grad_logits_acc) {
    Grid<T> dprobs(C, logits.shape());
    for (int c = c0; c < C; ++c) {
      const double den = psum[c] + gsum[c] + opts.smooth;
      const double num = 2.0 * inter[c] + opts.smooth;
      // d(1 - mean dice)/dp = -(2g*den - num) / (den^2 * nclasses)
      dprobs.channel(c) =
          T(-weight / nclasses) *
          (T(2.0 / den) * onehot.channel(c) - T(num / (den * den)));
    }
    softmax_backward(probs, dprobs, *grad_logits_acc);
  }
  return 1.0 - mean_dice;
}

/// Mean voxelwise cross-entropy of logits against one-hot targets.
template <typename T>
double ce_loss(const Grid<T>& logits, const Grid<T>& onehot, Grid<T>* grad_logits_acc = nullptr,
               double weight = 1.0) {
  require_same_layout(logits, onehot, "ce_loss");
  const double n = double(logits.voxels());
  Grid<T> probs = softmax_channels(logits);
  double loss = 0.0;
  for (int c = 0; c < logits.channels(); ++c) {
    auto p = probs.channel(c).template cast<double>();
    auto g = onehot.channel(c).template cast<double>();
    loss -= (g * (p + 1e-300).log()).sum();
  }
  loss /= n;
  if (grad_logits_acc)
    grad_logits_acc->array() += T(weight / n) * (probs.array() - onehot.array());
  return loss;
}

/// Composite denoising loss: field MSE + Dice + CE, each term optionally
/// weighted (variants mask the field term with weight 0). Gradients are
/// accumulated for the weighted sum. The sac field of the result is 0.
template <typename T>
LossBreakdown diff_loss(const Grid<T>& D_hat, const Grid<T>& D0, const Grid<T>& M_logits,
                        const Grid<T>& M0_onehot, const DiceOptions& dice_opts = {},
                        Grid<T>* grad_D_hat = nullptr, Grid<T>* grad_logits = nullptr,
                        const LossWeights& w = {}) {
  LossBreakdown b;
  b.mse_field = w.mse * mse_loss(D_hat, D0, grad_D_hat, w.mse);
  b.dice = w.dice * dice_loss(M_logits, M0_onehot, dice_opts, grad_logits, w.dice);
  b.ce = w.ce * ce_loss(M_logits, M0_onehot, grad_logits, w.ce);
  b.total = b.mse_field + b.dice + b.ce;
  return b;
}

/// Clamp to [0,1]; companion backward passes gradient unchanged inside the
/// interval and zeroes it outside.
template <typename T>
Grid<T> clamp_unit(const Grid<T>& x) {
  Grid<T> y = Grid<T>::uninit(x.channels(), x.shape());
  y.array() = x.array().min(T(1)).max(T(0));
  return y;
}

template <typename T>
void clamp_unit_backward(const Grid<T>& x_raw, Grid<T>& grad) {
  grad.array() *= ((x_raw.array() >= T(0)) && (x_raw.array() <= T(1))).template cast<T>();
}

/// Spatial similarity of two 3-channel fields with values in [0,1]:
///   1 - (1/N) sum_n sqrt( sum_c (a - b)^2 / 3 ).
/// Result lies in [0,1]. Inputs outside [0,1] are rejected; clamping is the
/// caller's responsibility.
template <typename T>
double field_similarity(const Grid<T>& a, const Grid<T>& b, Grid<T>* grad_a = nullptr,
                        Grid<T>* grad_b = nullptr, double weight = 1.0) {
  require_same_layout(a, b, "field_similarity");
  require(a.channels() == 3, "field_similarity: expected 3 channels");
  const T tol = T(1e-6);
  if ((a.array() < -tol).any() || (a.array() > T(1) + tol).any() ||
      (b.array() < -tol).any() || (b.array() > T(1) + tol).any())
    throw std::invalid_argument("field_similarity: values outside [0,1]");

  const Eigen::Index N = a.voxels();
  ArrayX<T> q = ArrayX<T>::Zero(N);
  for (int c = 0; c < 3; ++c)
    q += (a.channel(c) - b.channel(c)).square();
  ArrayX<T> r = (q / T(3)).sqrt();
  double sim = 1.0 - double(r.template cast<double>().sum()) / double(N);

  if (grad_a || grad_b) {
    // d sim / da = -(a-b) / (3 N r); zero subgradient where r == 0.
    ArrayX<T> inv = (r > T(0)).select(T(1) / (T(3) * T(double(N)) * r.max(T(1e-300))), ArrayX<T>::Zero(N));
    for (int c = 0; c < 3; ++c) {
      ArrayX<T> g = T(-weight) * (a.channel(c) - b.channel(c)) * inv;
      if (grad_a) grad_a->channel(c) += g;
      if (grad_b) grad_b->channel(c) -= g;
    }
  }
  return sim;
}

/// Anatomical similarity: mean over voxels of the cosine between the two
/// C-channel logit vectors, with an eps-guarded denominator. Range [-1,1].
template <typename T>
double logit_similarity(const Grid<T>& a, const Grid<T>& b, Grid<T>* grad_a = nullptr,
                        Grid<T>* grad_b = nullptr, double weight = 1.0, double eps = 1e-8) {
  require_same_layout(a, b, "logit_similarity");
  const Eigen::Index N = a.voxels();
  auto A = a.as_matrix();
  auto B = b.as_matrix();
  ArrayX<T> dot = (A.array() * B.array()).rowwise().sum();
  ArrayX<T> na = A.array().square().rowwise().sum().sqrt();
  ArrayX<T> nb = B.array().square().rowwise().sum().sqrt();
  ArrayX<T> den = na * nb + T(eps);
  ArrayX<T> cosv = dot / den;
  double sim = double(cosv.template cast<double>().sum()) / double(N);

  if (grad_a || grad_b) {
    const T wn = T(weight / double(N));
    ArrayX<T> safe_na = na.max(T(1e-300));
    ArrayX<T> safe_nb = nb.max(T(1e-300));
    ArrayX<T> ka = dot * nb / (safe_na * den * den);  // coefficient of a in d/da
    ArrayX<T> kb = dot * na / (safe_nb * den * den);
    if (grad_a)
      grad_a->as_matrix().array() +=
          wn * ((B.array().colwise() / den) - (A.array().colwise() * ka));
    if (grad_b)
      grad_b->as_matrix().array() +=
          wn * ((A.array().colwise() / den) - (B.array().colwise() * kb));
  }
  return sim;
}

/// Consistency loss: binary cross-entropy treating the spatial similarity as
/// the prediction and the anatomical similarity as the target, both clamped
/// into [eps, 1-eps]. d_sim_m / d_sim_d receive the partial derivatives.
inline double sac_loss(double sim_m, double sim_d, const ClampPolicy& policy = {},
                       double* d_sim_m = nullptr, double* d_sim_d = nullptr) {
  require(policy.eps > 0.0 && policy.eps < 0.5, "sac_loss: eps outside (0, 0.5)");
  const double lo = policy.eps, hi = 1.0 - policy.eps;
  const double m = std::clamp(sim_m, lo, hi);
  const double d = std::clamp(sim_d, lo, hi);
  const double loss = -m * std::log(d) - (1.0 - m) * std::log(1.0 - d);
  if (d_sim_m) *d_sim_m = (sim_m > lo && sim_m < hi) ? std::log(1.0 - d) - std::log(d) : 0.0;
  if (d_sim_d) *d_sim_d = (sim_d > lo && sim_d < hi) ? -m / d + (1.0 - m) / (1.0 - d) : 0.0;
  return loss;
}

/// Batch assembly: per-patch composite terms averaged over patches plus the
/// consistency term averaged over pairs, unit weights.
inline LossBreakdown total_loss(std::span<const LossBreakdown> per_patch,
                                std::span<const double> per_pair_sac) {
  require(!per_patch.empty(), "total_loss: empty batch");
  LossBreakdown b;
  for (const auto& p : per_patch) {
    b.mse_field += p.mse_field;
    b.dice += p.dice;
    b.ce += p.ce;
  }
  const double np = double(per_patch.size());
  b.mse_field /= np;
  b.dice /= np;
  b.ce /= np;
  if (!per_pair_sac.empty()) {
    for (double s : per_pair_sac) b.sac += s;
    b.sac /= double(per_pair_sac.size());
  }
  b.total = b.mse_field + b.dice + b.ce + b.sac;
  return b;
}

}  // namespace diffseg
