#include "diffseg/core/alloc.hpp"
#include "diffseg/io/checkpoint.hpp"
#include "diffseg/io/csv.hpp"
#include "diffseg/io/dataset.hpp"
#include "diffseg/metrics.hpp"
#include "diffseg/trainer.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace diffseg;

namespace {

// Exit codes: 0 success, 2 usage/argument errors, 1 runtime failures.
constexpr int kUsageError = 2;
constexpr int kRuntimeError = 1;

std::string case_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%04d", i);
  return buf;
}

/// Simple SVG line plot; CSVs stay the source of truth.
void write_step_plot(const std::string& path, const std::vector<StepCurveRow>& rows) {
  const double W = 480, H = 320, ml = 60, mr = 20, mt = 20, mb = 50;
  double lo = 1.0, hi = 0.0;
  for (const auto& r : rows) {
    lo = std::min(lo, r.mean_dice);
    hi = std::max(hi, r.mean_dice);
  }
  if (hi <= lo) hi = lo + 1e-3;
  const double pad = 0.1 * (hi - lo);
  lo -= pad;
  hi += pad;
  const double xmax = double(rows.back().steps);
  auto px = [&](double s) { return ml + (W - ml - mr) * s / xmax; };
  auto py = [&](double d) { return H - mb - (H - mt - mb) * (d - lo) / (hi - lo); };

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  os << "<rect width='100%' height='100%' fill='white'/>\n";
  os << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
     << "' stroke='black'/>\n";
  os << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb
     << "' stroke='black'/>\n";
  os << "<polyline fill='none' stroke='steelblue' stroke-width='2' points='";
  for (const auto& r : rows) os << px(r.steps) << "," << py(r.mean_dice) << " ";
  os << "'/>\n";
  for (const auto& r : rows) {
    os << "<circle cx='" << px(r.steps) << "' cy='" << py(r.mean_dice)
       << "' r='3' fill='steelblue'/>\n";
    os << "<text x='" << px(r.steps) << "' y='" << H - mb + 18
       << "' font-size='11' text-anchor='middle'>" << r.steps << "</text>\n";
  }
  os << "<text x='" << (ml + W - mr) / 2 << "' y='" << H - 12
     << "' font-size='12' text-anchor='middle'>inference steps</text>\n";
  os << "<text x='14' y='" << (mt + H - mb) / 2
     << "' font-size='12' text-anchor='middle' transform='rotate(-90 14 "
     << (mt + H - mb) / 2 << ")'>mean Dice</text>\n";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", lo + pad);
  os << "<text x='" << ml - 6 << "' y='" << py(lo + pad) + 4
     << "' font-size='10' text-anchor='end'>" << buf << "</text>\n";
  std::snprintf(buf, sizeof(buf), "%.3f", hi - pad);
  os << "<text x='" << ml - 6 << "' y='" << py(hi - pad) + 4
     << "' font-size='10' text-anchor='end'>" << buf << "</text>\n";
  os << "</svg>\n";
}

struct InferArgs {
  std::string ckpt, data, out;
  int steps = 5;
  int patch = 32;
  double overlap = 0.5;
  uint64_t seed = 1;
  bool write_probs = false;
  int threads = 1;
};

void run_inference(const InferArgs& a) {
  auto data = io::load_dataset(a.data);
  require(!data.val.empty(), "infer: dataset has no validation split");
  auto ckpt = io::load_checkpoint<float>(a.ckpt);
  DenoiseUNet<float> net(ckpt.meta.config);
  auto sched = make_schedule(ckpt.meta.schedule_kind, ckpt.meta.schedule_T);
  auto fn = make_denoiser(net, ckpt.theta, variant_from_string(ckpt.meta.variant), sched.T);
  SamplerConfig scfg;
  scfg.steps = a.steps;

  fs::create_directories(a.out);
  for (std::size_t i = 0; i < data.val.size(); ++i) {
    const auto& s = data.val[i];
    Rng rng(splitmix64(a.seed ^ (0x1000 + i)));
    const int patch = std::min({a.patch, s.image.nx(), s.image.ny(), s.image.nz()});
    Grid<float> probs = sliding_window_infer(fn, s.image, s.field, data.params.classes, sched,
                                             scfg, patch, a.overlap, rng, a.threads);
    Grid<int32_t> pred = argmax_labels(probs);
    io::Archive out;
    out.add(io::grid_entry_i32("label", pred, true));
    if (a.write_probs) out.add(io::grid_entry_f32("probs", probs));
    out.write((fs::path(a.out) / (case_name(int(i)) + ".vxa")).string());
  }
  std::cout << "wrote " << data.val.size() << " prediction archives to " << a.out << std::endl;
}

void run_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& out_csv,
              double tolerance) {
  auto data = io::load_dataset(gt_dir);
  require(!data.val.empty(), "eval: dataset has no validation split");
  io::CsvWriter csv(out_csv, {"case", "class", "dice", "nsd"});
  double mean_dice = 0.0, mean_nsd = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < data.val.size(); ++i) {
    const std::string name = case_name(int(i));
    const fs::path file = fs::path(pred_dir) / (name + ".vxa");
    if (!fs::exists(file)) throw std::runtime_error("eval: missing prediction " + file.string());
    auto pred = io::entry_as_grid_i32(io::Archive::read(file.string()).at("label"));
    EvalReport r = evaluate_labels(pred, data.val[i].label, data.params.classes, tolerance);
    for (int c = 0; c < data.params.classes; ++c)
      csv.write_row({name, std::to_string(c), io::format_double(r.per_class_dice.at(c)),
                     io::format_double(r.per_class_nsd.at(c))});
    mean_dice += r.mean_dice;
    mean_nsd += r.mean_nsd;
    ++n;
  }
  mean_dice /= n;
  mean_nsd /= n;
  csv.write_row({"mean", "foreground", io::format_double(mean_dice),
                 io::format_double(mean_nsd)});
  std::cout << "mean foreground dice " << mean_dice << ", nsd " << mean_nsd << " ("
            << out_csv << ")" << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  diffseg::tune_allocator();
  CLI::App app{"Collaborative label/distance-field diffusion for volumetric segmentation"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "Read defaults from a TOML/INI config file");
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads (1 = fully sequential)")
      ->capture_default_str();

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic phantom dataset");
  io::DatasetParams dp;
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--size", dp.size, "Volume side length")->capture_default_str();
  gen->add_option("--classes", dp.classes, "Class count incl. background")->capture_default_str();
  gen->add_option("--train", dp.train, "Training volumes")->capture_default_str();
  gen->add_option("--val", dp.val, "Validation volumes")->capture_default_str();
  gen->add_option("--seed", dp.seed, "Master seed")->capture_default_str();
  gen->add_option("--noise", dp.noise_level, "Additive image noise sigma")->capture_default_str();
  gen->add_option("--warp", dp.warp_scale, "Warp strength")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "Train a model on a generated dataset");
  TrainConfig tc;
  std::string tr_data, tr_out, tr_variant = "collaborative";
  tr->add_option("--data", tr_data, "Dataset directory")->envname("DIFFSEG_DATA_ROOT")->required();
  tr->add_option("--out", tr_out, "Run directory")->required();
  tr->add_option("--variant", tr_variant, "plain|dual_condition|collaborative")
      ->capture_default_str();
  tr->add_option("--sac", tc.use_sac, "Use the consistency loss")->capture_default_str();
  tr->add_option("--taca", tc.use_taca, "Use time-adapted channel attention")
      ->capture_default_str();
  tr->add_option("--iters", tc.iterations, "Training iterations")->capture_default_str();
  tr->add_option("--batch", tc.batch_size, "Patches per step")->capture_default_str();
  tr->add_option("--lr", tc.lr, "Learning rate")->capture_default_str();
  tr->add_option("--weight-decay", tc.weight_decay, "Decoupled weight decay")
      ->capture_default_str();
  tr->add_option("--seed", tc.seed, "Run seed")->capture_default_str();
  tr->add_option("--patch", tc.patch_size, "Patch side length")->capture_default_str();
  tr->add_option("--eval-every", tc.eval_every, "Evaluation interval")->capture_default_str();
  tr->add_option("--steps", tc.sampler_steps, "Sampler steps at evaluation")
      ->capture_default_str();
  tr->add_option("--base-channels", tc.base_channels, "U-Net base width")->capture_default_str();
  tr->add_option("--depth", tc.depth, "Downsampling levels")->capture_default_str();
  tr->add_option("--time-dim", tc.time_dim, "Time embedding width")->capture_default_str();
  tr->add_option("--schedule-T", tc.schedule_T, "Diffusion steps T")->capture_default_str();
  std::string tr_sched = "cosine";
  tr->add_option("--schedule", tr_sched, "linear|cosine")->capture_default_str();
  tr->add_option("--sac-warmup", tc.sac_warmup, "Iterations before the consistency loss")
      ->capture_default_str();
  tr->add_option("--overlap", tc.infer_overlap, "Sliding-window overlap at evaluation")
      ->capture_default_str();

  // infer
  auto* in = app.add_subcommand("infer", "Run sliding-window inference on the val split");
  InferArgs ia;
  in->add_option("--ckpt", ia.ckpt, "Checkpoint path (.vxa)")->required();
  in->add_option("--data", ia.data, "Dataset directory")->envname("DIFFSEG_DATA_ROOT")->required();
  in->add_option("--out", ia.out, "Output directory")->required();
  in->add_option("--steps", ia.steps, "Sampler steps")->capture_default_str();
  in->add_option("--patch", ia.patch, "Tile side length")->capture_default_str();
  in->add_option("--overlap", ia.overlap, "Tile overlap fraction")->capture_default_str();
  in->add_option("--noise-seed", ia.seed, "Initial-noise seed")->capture_default_str();
  in->add_flag("--probs", ia.write_probs, "Also write per-class probabilities");

  // eval
  auto* ev = app.add_subcommand("eval", "Score predictions against ground truth");
  std::string ev_pred, ev_gt, ev_out = "metrics.csv";
  double ev_tol = 1.0;
  ev->add_option("--pred", ev_pred, "Prediction directory")->required();
  ev->add_option("--gt", ev_gt, "Dataset directory (ground truth)")->envname("DIFFSEG_DATA_ROOT")->required();
  ev->add_option("--out", ev_out, "Output CSV")->capture_default_str();
  ev->add_option("--tolerance", ev_tol, "NSD tolerance in voxels")->capture_default_str();

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train the ablation grid and tabulate Dice/NSD");
  std::string ab_data, ab_out;
  std::vector<uint64_t> ab_seeds{1, 2, 3};
  int ab_iters = 2000, ab_jobs = 1;
  ab->add_option("--data", ab_data, "Dataset directory")->envname("DIFFSEG_DATA_ROOT")->required();
  ab->add_option("--out", ab_out, "Output directory")->required();
  ab->add_option("--seeds", ab_seeds, "Seeds (>= 2)")->capture_default_str();
  ab->add_option("--iters", ab_iters, "Iterations per run")->capture_default_str();
  ab->add_option("--jobs", ab_jobs, "Concurrent training runs")->capture_default_str();

  // step-curve
  auto* sc = app.add_subcommand("step-curve", "Mean Dice as a function of sampler steps");
  std::string sc_ckpt, sc_data, sc_out = "step_curve.csv", sc_plot;
  uint64_t sc_seed = 1;
  double sc_overlap = 0.5;
  sc->add_option("--ckpt", sc_ckpt, "Checkpoint path (.vxa)")->required();
  sc->add_option("--data", sc_data, "Dataset directory")->envname("DIFFSEG_DATA_ROOT")->required();
  sc->add_option("--out", sc_out, "Output CSV")->capture_default_str();
  sc->add_option("--plot", sc_plot, "Optional SVG plot path");
  sc->add_option("--noise-seed", sc_seed, "Initial-noise seed")->capture_default_str();
  sc->add_option("--overlap", sc_overlap, "Tile overlap fraction")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kUsageError;
  }

  try {
    if (gen->parsed()) {
      io::generate_dataset(dp, gen_out, threads);
      std::cout << "dataset written to " << gen_out << std::endl;
    } else if (tr->parsed()) {
      tc.variant = variant_from_string(tr_variant);
      tc.schedule_kind = schedule_kind_from_string(tr_sched);
      tc.threads = threads;
      tc.validate();
      if (!fs::exists(fs::path(tr_data) / "manifest.json")) {
        std::cerr << "error: no dataset at " << tr_data << std::endl;
        return kUsageError;
      }
      auto data = io::load_dataset(tr_data);
      fit_model(tc, data, tr_out);
    } else if (in->parsed()) {
      ia.threads = threads;
      run_inference(ia);
    } else if (ev->parsed()) {
      run_eval(ev_pred, ev_gt, ev_out, ev_tol);
    } else if (ab->parsed()) {
      TrainConfig base;
      base.iterations = ab_iters;
      base.threads = threads;
      auto data = io::load_dataset(ab_data);
      auto result = run_ablation(base, data, ab_seeds, ab_out, ab_jobs);
      std::cout << "ablation table written to " << result.csv_path << std::endl;
    } else if (sc->parsed()) {
      auto data = io::load_dataset(sc_data);
      auto ckpt = io::load_checkpoint<float>(sc_ckpt);
      DenoiseUNet<float> net(ckpt.meta.config);
      auto sched = make_schedule(ckpt.meta.schedule_kind, ckpt.meta.schedule_T);
      auto rows = step_curve(net, ckpt.theta, variant_from_string(ckpt.meta.variant), data,
                             sched, std::min(data.params.size, 32), sc_overlap, sc_seed,
                             {1, 2, 3, 5, 10}, threads);
      io::CsvWriter csv(sc_out, {"steps", "mean_dice", "mean_nsd"});
      for (const auto& r : rows)
        csv.write_row({std::to_string(r.steps), io::format_double(r.mean_dice),
                       io::format_double(r.mean_nsd)});
      if (!sc_plot.empty()) write_step_plot(sc_plot, rows);
      std::cout << "step curve written to " << sc_out << std::endl;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kRuntimeError;
  }
  return 0;
}
