#pragma once

#include "diffseg/core/alloc.hpp"
#include "diffseg/io/checkpoint.hpp"
#include "diffseg/io/csv.hpp"
#include "diffseg/io/dataset.hpp"
#include "diffseg/metrics.hpp"
#include "diffseg/network/label_encoding.hpp"
#include "diffseg/sampler.hpp"
#include "diffseg/trainer_config.hpp"

#include <chrono>
#include <filesystem>
#include <future>
#include <iostream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace diffseg {

/// Decoupled-weight-decay Adam on the flat parameter array.
template <typename T>
class AdamW {
 public:
  explicit AdamW(std::size_t n)
      : m_(ArrayX<T>::Zero(Eigen::Index(n))), v_(ArrayX<T>::Zero(Eigen::Index(n))) {}

  void step(ArrayX<T>& theta, const ArrayX<T>& grad, double lr, double weight_decay,
            double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    ++t_;
    m_ = T(beta1) * m_ + T(1.0 - beta1) * grad;
    v_ = T(beta2) * v_ + T(1.0 - beta2) * grad.square();
    const T c1 = T(1.0 / (1.0 - std::pow(beta1, double(t_))));
    const T c2 = T(1.0 / (1.0 - std::pow(beta2, double(t_))));
    theta -= T(lr) * (m_ * c1) / ((v_ * c2).sqrt() + T(eps));
    if (weight_decay > 0.0) theta -= T(lr * weight_decay) * theta;
  }

  int64_t iterations() const { return t_; }

 private:
  ArrayX<T> m_, v_;
  int64_t t_ = 0;
};

/// Timestep regime per variant: plain feeds no field signal (t_d pinned to
/// T), dual conditions on the clean field (t_d = 0), collaborative samples
/// both timesteps uniformly and independently.
inline TimestepPair draw_timesteps(Variant v, int T, Rng& rng) {
  switch (v) {
    case Variant::plain: return {T, rng.uniform_int(0, T)};
    case Variant::dual_condition: return {0, rng.uniform_int(0, T)};
    case Variant::collaborative: return sample_timestep_pair(T, rng);
  }
  throw std::invalid_argument("draw_timesteps: bad variant");
}

/// Inference-time adapter: plain zero-fills the field input, the other
/// variants receive the clean field with t_d = 0.
template <typename T>
DenoiseFn<T> make_denoiser(const DenoiseUNet<T>& net, const ArrayX<T>& theta, Variant v,
                           int t_max) {
  return [&net, &theta, v, t_max](const Grid<T>& D_cond, const Grid<T>& M_state,
                                  const Grid<T>& image, int t_m, Grid<T>& D_hat,
                                  Grid<T>& logits) {
    Workspace<T> ws;
    if (v == Variant::plain) {
      Grid<T> zeros(3, image.shape());
      net.forward(theta.data(), zeros, M_state, image, t_max, t_m, D_hat, logits, nullptr, ws);
    } else {
      net.forward(theta.data(), D_cond, M_state, image, 0, t_m, D_hat, logits, nullptr, ws);
    }
  };
}

struct EvalOutcome {
  double mean_dice = 0.0;
  double mean_nsd = 0.0;
};

struct FitResult {
  std::string run_dir;
  int best_iteration = 0;
  double best_mean_dice = 0.0;
  double best_mean_nsd = 0.0;
  double iter0_mean_dice = 0.0;
  LossBreakdown final_loss;
  std::vector<std::pair<int, EvalOutcome>> eval_history;
  std::string best_checkpoint;
  std::string last_checkpoint;
};

template <typename T = float>
class Trainer {
 public:
  Trainer(TrainConfig cfg, const io::LoadedDataset& data)
      : cfg_(std::move(cfg)),
        data_((tune_allocator(), &data)),
        net_(make_network_config(cfg_, data.params.classes)),
        theta_(net_.init_weights(splitmix64(cfg_.seed ^ 0x1717))),
        opt_(net_.param_count()),
        sched_(make_schedule(cfg_.schedule_kind, cfg_.schedule_T)),
        rng_data_(Rng(cfg_.seed).fork(2)) {
    cfg_.validate();
    require(!data.train.empty(), "trainer: empty training split");
    require(data.params.size >= cfg_.patch_size, "trainer: patch larger than volume");
    const int B = cfg_.batch_size;
    grad_bufs_.resize(static_cast<std::size_t>(B));
    ctxs_.resize(static_cast<std::size_t>(B));
    outs_d_.resize(static_cast<std::size_t>(B));
    outs_m_.resize(static_cast<std::size_t>(B));
    for (auto& g : grad_bufs_) g = ArrayX<T>::Zero(Eigen::Index(net_.param_count()));
    total_grad_ = ArrayX<T>::Zero(Eigen::Index(net_.param_count()));
  }

  const DenoiseUNet<T>& net() const { return net_; }
  const ArrayX<T>& theta() const { return theta_; }
  ArrayX<T>& theta() { return theta_; }
  const NoiseSchedule& schedule() const { return sched_; }
  const TrainConfig& config() const { return cfg_; }

  std::vector<Patch> draw_batch() {
    std::vector<Patch> batch;
    batch.reserve(std::size_t(cfg_.batch_size));
    const auto& vols = data_->train;
    const int S = data_->params.size;
    const int span = S - cfg_.patch_size;
    for (int i = 0; i < cfg_.batch_size; ++i) {
      const int vi = rng_data_.uniform_int(0, int(vols.size()) - 1);
      Eigen::Vector3i origin(rng_data_.uniform_int(0, span), rng_data_.uniform_int(0, span),
                             rng_data_.uniform_int(0, span));
      batch.push_back(extract_patch(vols[std::size_t(vi)], origin, cfg_.patch_size));
    }
    return batch;
  }

  /// One optimizer step on a batch of patches: collaborative noising, the
  /// composite denoising loss, pairwise consistency when active, gradient
  /// clipping, AdamW update. Returns the batch loss breakdown.
  LossBreakdown train_step(const std::vector<Patch>& batch, bool sac_active) {
    const int B = int(batch.size());
    require(B >= 1, "train_step: empty batch");
    if (sac_active) require(B % 2 == 0, "train_step: sac pairing needs an even batch");

    // Draw all randomness up front so results are thread-count invariant.
    std::vector<TimestepPair> ts(static_cast<std::size_t>(B));
    std::vector<Grid<T>> noise_m(static_cast<std::size_t>(B)), noise_d(static_cast<std::size_t>(B));
    std::vector<Grid<T>> m_in(static_cast<std::size_t>(B)), d_in(static_cast<std::size_t>(B));
    std::vector<Grid<T>> d0(static_cast<std::size_t>(B)), onehot(static_cast<std::size_t>(B)), image(static_cast<std::size_t>(B));
    for (int i = 0; i < B; ++i) {
      const auto& p = batch[std::size_t(i)];
      ts[std::size_t(i)] = draw_timesteps(cfg_.variant, sched_.T, rng_data_);
      noise_m[std::size_t(i)] = Grid<T>(data_->params.classes, p.image.shape());
      fill_normal(noise_m[std::size_t(i)], rng_data_);
      noise_d[std::size_t(i)] = Grid<T>(3, p.image.shape());
      fill_normal(noise_d[std::size_t(i)], rng_data_);
    }
    std::vector<int> order(static_cast<std::size_t>(B));
    for (int i = 0; i < B; ++i) order[std::size_t(i)] = i;
    if (sac_active) {
      // Disjoint random pairing, re-drawn every step.
      for (int i = B - 1; i > 0; --i)
        std::swap(order[std::size_t(i)], order[std::size_t(rng_data_.uniform_int(0, i))]);
    }

    for (int i = 0; i < B; ++i) {
      const auto& p = batch[std::size_t(i)];
      image[std::size_t(i)] = convert_grid(p.image);
      d0[std::size_t(i)] = convert_grid(p.field);
      onehot[std::size_t(i)] = convert_grid(p.onehot_label);
      Grid<T> m0 = encode_label(onehot[std::size_t(i)]);
      m_in[std::size_t(i)] = forward_noise(m0, ts[std::size_t(i)].t_m, sched_, noise_m[std::size_t(i)]);
      switch (cfg_.variant) {
        case Variant::plain:
          d_in[std::size_t(i)] = Grid<T>(3, p.image.shape());
          break;
        case Variant::dual_condition:
          d_in[std::size_t(i)] = d0[std::size_t(i)];
          break;
        case Variant::collaborative:
          d_in[std::size_t(i)] =
              forward_noise(d0[std::size_t(i)], ts[std::size_t(i)].t_d, sched_, noise_d[std::size_t(i)]);
          break;
      }
    }

    run_parallel(B, [&](int i) {
      Workspace<T> ws;
      net_.forward(theta_.data(), d_in[std::size_t(i)], m_in[std::size_t(i)], image[std::size_t(i)],
                   ts[std::size_t(i)].t_d, ts[std::size_t(i)].t_m, outs_d_[std::size_t(i)],
                   outs_m_[std::size_t(i)], &ctxs_[std::size_t(i)], ws);
    });

    // Loss terms and output-side gradients (sequential, cheap).
    LossWeights w = cfg_.weights;
    if (cfg_.variant != Variant::collaborative) w.mse = 0.0;  // field head masked
    std::vector<LossBreakdown> per_patch(static_cast<std::size_t>(B));
    std::vector<Grid<T>> g_d(static_cast<std::size_t>(B)), g_m(static_cast<std::size_t>(B));
    for (int i = 0; i < B; ++i) {
      g_d[std::size_t(i)] = Grid<T>(3, outs_d_[std::size_t(i)].shape());
      g_m[std::size_t(i)] = Grid<T>(data_->params.classes, outs_m_[std::size_t(i)].shape());
      per_patch[std::size_t(i)] =
          diff_loss(outs_d_[std::size_t(i)], d0[std::size_t(i)], outs_m_[std::size_t(i)],
                    onehot[std::size_t(i)], cfg_.dice, &g_d[std::size_t(i)], &g_m[std::size_t(i)], w);
      g_d[std::size_t(i)].array() *= T(1.0 / B);
      g_m[std::size_t(i)].array() *= T(1.0 / B);
    }

    std::vector<double> sac_values;
    if (sac_active && cfg_.weights.sac > 0.0) {
      const int npairs = B / 2;
      for (int k = 0; k < npairs; ++k) {
        const int i = order[std::size_t(2 * k)], j = order[std::size_t(2 * k + 1)];
        Grid<T> ci = clamp_unit(outs_d_[std::size_t(i)]);
        Grid<T> cj = clamp_unit(outs_d_[std::size_t(j)]);
        const double sim_d = field_similarity<T>(ci, cj);
        const double sim_m = logit_similarity<T>(outs_m_[std::size_t(i)], outs_m_[std::size_t(j)]);
        double dm = 0.0, dd = 0.0;
        const double l = sac_loss(sim_m, sim_d, cfg_.clamp, &dm, &dd);
        sac_values.push_back(cfg_.weights.sac * l);
        const double scale = cfg_.weights.sac / double(npairs);
        if (dd != 0.0) {
          Grid<T> gi(3, ci.shape()), gj(3, cj.shape());
          field_similarity(ci, cj, &gi, &gj, dd * scale);
          clamp_unit_backward(outs_d_[std::size_t(i)], gi);
          clamp_unit_backward(outs_d_[std::size_t(j)], gj);
          g_d[std::size_t(i)].array() += gi.array();
          g_d[std::size_t(j)].array() += gj.array();
        }
        if (!cfg_.detach_sim_m && dm != 0.0)
          logit_similarity(outs_m_[std::size_t(i)], outs_m_[std::size_t(j)], &g_m[std::size_t(i)],
                           &g_m[std::size_t(j)], dm * scale);
      }
    }

    run_parallel(B, [&](int i) {
      grad_bufs_[std::size_t(i)].setZero();
      Workspace<T> ws;
      net_.backward(theta_.data(), g_d[std::size_t(i)], g_m[std::size_t(i)], ctxs_[std::size_t(i)],
                    grad_bufs_[std::size_t(i)].data(), ws);
    });
    total_grad_.setZero();
    for (int i = 0; i < B; ++i) total_grad_ += grad_bufs_[std::size_t(i)];

    if (cfg_.grad_clip > 0.0) {
      const double norm = std::sqrt(double(total_grad_.template cast<double>().square().sum()));
      if (norm > cfg_.grad_clip) total_grad_ *= T(cfg_.grad_clip / norm);
    }
    opt_.step(theta_, total_grad_, cfg_.lr, cfg_.weight_decay);

    return total_loss(per_patch, sac_values);
  }

  EvalOutcome evaluate() const {
    require(!data_->val.empty(), "trainer: empty validation split");
    auto fn = make_denoiser(net_, theta_, cfg_.variant, sched_.T);
    SamplerConfig scfg;
    scfg.steps = cfg_.sampler_steps;
    EvalOutcome out;
    for (const auto& s : data_->val) {
      Rng rng(splitmix64(cfg_.seed ^ 0xe7a1));
      Grid<T> probs = sliding_window_infer(fn, convert_grid(s.image), convert_grid(s.field),
                                           data_->params.classes, sched_, scfg, cfg_.patch_size,
                                           cfg_.infer_overlap, rng, cfg_.threads);
      Grid<int32_t> pred = argmax_grid(probs);
      EvalReport r = evaluate_labels(pred, s.label, data_->params.classes, 1.0);
      out.mean_dice += r.mean_dice;
      out.mean_nsd += r.mean_nsd;
    }
    out.mean_dice /= double(data_->val.size());
    out.mean_nsd /= double(data_->val.size());
    return out;
  }

  FitResult fit(const std::string& run_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(run_dir) / "checkpoints");
    write_config_json(run_dir);

    io::CsvWriter train_log(run_dir + "/train_log.csv",
                            {"iteration", "mse_field", "dice", "ce", "sac", "total"});
    io::CsvWriter eval_log(run_dir + "/eval_log.csv",
                           {"iteration", "mean_dice", "mean_nsd", "is_best"});

    FitResult res;
    res.run_dir = run_dir;
    res.best_checkpoint = run_dir + "/checkpoints/best.vxa";
    res.last_checkpoint = run_dir + "/checkpoints/last.vxa";

    const auto t_start = std::chrono::steady_clock::now();
    auto run_eval = [&](int iter) {
      EvalOutcome e = evaluate();
      const bool best = res.eval_history.empty() || e.mean_dice > res.best_mean_dice;
      if (best) {
        res.best_mean_dice = e.mean_dice;
        res.best_mean_nsd = e.mean_nsd;
        res.best_iteration = iter;
        save(res.best_checkpoint, iter, e.mean_dice);
      }
      res.eval_history.emplace_back(iter, e);
      eval_log.write_row({std::to_string(iter), io::format_double(e.mean_dice),
                          io::format_double(e.mean_nsd), best ? "1" : "0"});
      std::cout << "[iter " << iter << "] mean_dice=" << e.mean_dice
                << " mean_nsd=" << e.mean_nsd << (best ? " (best)" : "") << std::endl;
      return e;
    };

    res.iter0_mean_dice = run_eval(0).mean_dice;
    for (int iter = 1; iter <= cfg_.iterations; ++iter) {
      const bool sac_active = cfg_.use_sac && iter > cfg_.sac_warmup;
      auto batch = draw_batch();
      LossBreakdown b = train_step(batch, sac_active);
      res.final_loss = b;
      train_log.write_row({std::to_string(iter), io::format_double(b.mse_field),
                           io::format_double(b.dice), io::format_double(b.ce),
                           io::format_double(b.sac), io::format_double(b.total)});
      if (!std::isfinite(b.total))
        throw std::runtime_error("trainer: non-finite loss at iteration " + std::to_string(iter));
      if (iter % cfg_.eval_every == 0 || iter == cfg_.iterations) run_eval(iter);
    }
    save(res.last_checkpoint, cfg_.iterations,
         res.eval_history.empty() ? 0.0 : res.eval_history.back().second.mean_dice);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    std::cout << "fit: " << cfg_.iterations << " iterations in " << secs << " s; best mean dice "
              << res.best_mean_dice << " @ iter " << res.best_iteration << std::endl;
    return res;
  }

  void save(const std::string& path, int iteration, double mean_dice) const {
    io::CheckpointMeta meta;
    meta.config = net_.config();
    meta.schedule_kind = cfg_.schedule_kind;
    meta.schedule_T = cfg_.schedule_T;
    meta.variant = to_string(cfg_.variant);
    meta.iteration = iteration;
    meta.mean_dice = mean_dice;
    io::save_checkpoint(path, net_, theta_, meta);
  }

  static Grid<T> convert_grid(const Grid<float>& g) {
    if constexpr (std::is_same_v<T, float>) return g;
    else return g.template cast<T>();
  }

  static Grid<int32_t> argmax_grid(const Grid<T>& probs) {
    if constexpr (std::is_same_v<T, float>) return argmax_labels(probs);
    else return argmax_labels(probs.template cast<float>());
  }

 private:
  void run_parallel(int n, const std::function<void(int)>& fn) {
#ifdef _OPENMP
    if (cfg_.threads > 1) {
#pragma omp parallel for schedule(static) num_threads(std::min(cfg_.threads, n))
      for (int i = 0; i < n; ++i) fn(i);
      return;
    }
#endif
    for (int i = 0; i < n; ++i) fn(i);
  }

  void write_config_json(const std::string& run_dir) const {
    nlohmann::ordered_json j = train_config_to_json(cfg_);
    j["classes"] = data_->params.classes;
    j["volume_size"] = data_->params.size;
    std::ofstream os(run_dir + "/config.json", std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("trainer: cannot write config.json under " + run_dir);
    os << j.dump(2) << "\n";
  }

  TrainConfig cfg_;
  const io::LoadedDataset* data_;
  DenoiseUNet<T> net_;
  ArrayX<T> theta_;
  AdamW<T> opt_;
  NoiseSchedule sched_;
  Rng rng_data_;
  std::vector<ArrayX<T>> grad_bufs_;
  ArrayX<T> total_grad_;
  std::vector<typename DenoiseUNet<T>::Ctx> ctxs_;
  std::vector<Grid<T>> outs_d_, outs_m_;
};

inline FitResult fit_model(const TrainConfig& cfg, const io::LoadedDataset& data,
                           const std::string& run_dir) {
  Trainer<float> t(cfg, data);
  return t.fit(run_dir);
}

struct AblationRowSpec {
  std::string name;
  Variant variant;
  bool use_sac = false;
  bool use_taca = false;
  double paper_malc_dice = 0.0;  // reference column from the source tables
};

inline std::vector<AblationRowSpec> default_ablation_rows() {
  return {
      {"diffusion", Variant::plain, false, false, 88.72},
      {"dual_condition", Variant::dual_condition, false, false, 89.03},
      {"collaborative", Variant::collaborative, false, false, 89.62},
      {"collaborative_sac", Variant::collaborative, true, false, 90.19},
      {"collaborative_sac_taca", Variant::collaborative, true, true, 90.63},
  };
}

struct AblationRowResult {
  AblationRowSpec spec;
  std::vector<double> dice;  // per seed
  std::vector<double> nsd;
  double dice_mean = 0.0, dice_std = 0.0;
  double nsd_mean = 0.0, nsd_std = 0.0;
  bool ordering_ok_vs_prev = true;
};

struct AblationResult {
  std::vector<AblationRowResult> rows;
  std::string csv_path;
  std::vector<FitResult> fits;  // row-major: row * n_seeds + seed
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= double(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  s = v.size() > 1 ? std::sqrt(s / double(v.size() - 1)) : 0.0;
  return {m, s};
}

/// Trains every row configuration with identical settings except the ablated
/// component, aggregates Dice/NSD over seeds and marks whether each row
/// improves on the previous one. `jobs` runs fits concurrently.
inline AblationResult run_ablation(const TrainConfig& base, const io::LoadedDataset& data,
                                   const std::vector<uint64_t>& seeds, const std::string& out_dir,
                                   int jobs = 1,
                                   std::vector<AblationRowSpec> rows = default_ablation_rows()) {
  require(seeds.size() >= 2, "run_ablation: need at least 2 seeds");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  struct Job {
    std::size_t row, seed_idx;
    TrainConfig cfg;
    std::string dir;
  };
  std::vector<Job> jobs_list;
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      TrainConfig cfg = base;
      cfg.variant = rows[r].variant;
      cfg.use_sac = rows[r].use_sac;
      cfg.use_taca = rows[r].use_taca;
      cfg.seed = seeds[s];
      jobs_list.push_back({r, s, cfg,
                           out_dir + "/run_" + rows[r].name + "_seed" + std::to_string(seeds[s])});
    }

  std::vector<FitResult> fits(jobs_list.size());
  const int max_jobs = std::max(1, jobs);
  std::size_t next = 0;
  while (next < jobs_list.size()) {
    std::vector<std::pair<std::size_t, std::future<FitResult>>> running;
    for (int k = 0; k < max_jobs && next < jobs_list.size(); ++k, ++next) {
      const Job& job = jobs_list[next];
      running.emplace_back(next, std::async(std::launch::async, [&job, &data] {
                             return fit_model(job.cfg, data, job.dir);
                           }));
    }
    for (auto& [idx, fut] : running) fits[idx] = fut.get();
  }

  AblationResult result;
  result.fits = fits;
  result.rows.resize(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto& row = result.rows[r];
    row.spec = rows[r];
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& f = fits[r * seeds.size() + s];
      row.dice.push_back(f.best_mean_dice);
      row.nsd.push_back(f.best_mean_nsd);
    }
    std::tie(row.dice_mean, row.dice_std) = mean_std(row.dice);
    std::tie(row.nsd_mean, row.nsd_std) = mean_std(row.nsd);
    row.ordering_ok_vs_prev = r == 0 || row.dice_mean >= result.rows[r - 1].dice_mean;
  }

  result.csv_path = out_dir + "/ablation.csv";
  io::CsvWriter csv(result.csv_path,
                    {"design", "paper_malc_dice", "n_seeds", "mean_dice", "std_dice", "mean_nsd",
                     "std_nsd", "ordering_ok_vs_prev"});
  for (const auto& row : result.rows)
    csv.write_row({row.spec.name, io::format_double(row.spec.paper_malc_dice),
                   std::to_string(row.dice.size()), io::format_double(row.dice_mean),
                   io::format_double(row.dice_std), io::format_double(row.nsd_mean),
                   io::format_double(row.nsd_std), row.ordering_ok_vs_prev ? "1" : "0"});
  return result;
}

struct StepCurveRow {
  int steps = 0;
  double mean_dice = 0.0;
  double mean_nsd = 0.0;
};

/// Mean validation Dice/NSD as a function of the sampler step count.
template <typename T>
std::vector<StepCurveRow> step_curve(const DenoiseUNet<T>& net, const ArrayX<T>& theta, Variant v,
                                     const io::LoadedDataset& data, const NoiseSchedule& sched,
                                     int patch_size, double overlap, uint64_t noise_seed,
                                     const std::vector<int>& steps_list, int threads = 1) {
  auto fn = make_denoiser(net, theta, v, sched.T);
  std::vector<StepCurveRow> rows;
  for (int steps : steps_list) {
    SamplerConfig scfg;
    scfg.steps = steps;
    StepCurveRow row;
    row.steps = steps;
    for (const auto& s : data.val) {
      Rng rng(splitmix64(noise_seed ^ uint64_t(0x57e9)));
      Grid<T> probs = sliding_window_infer(fn, Trainer<T>::convert_grid(s.image),
                                           Trainer<T>::convert_grid(s.field), data.params.classes,
                                           sched, scfg, patch_size, overlap, rng, threads);
      EvalReport r = evaluate_labels(Trainer<T>::argmax_grid(probs), s.label,
                                     data.params.classes, 1.0);
      row.mean_dice += r.mean_dice;
      row.mean_nsd += r.mean_nsd;
    }
    row.mean_dice /= double(data.val.size());
    row.mean_nsd /= double(data.val.size());
    rows.push_back(row);
  }
  return rows;
}

}  // namespace diffseg
