#include "diffseg/io/dataset.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace diffseg::io {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr int kFormatVersion = 1;

std::string sample_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%04d", i);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

uint64_t sample_stream(bool val_split, int index) {
  return (val_split ? 0x20000u : 0x10000u) + uint64_t(index);
}

}  // namespace

std::string warp_to_json(const WarpParams& w, uint64_t sample_seed) {
  ordered_json j;
  j["sample_seed"] = std::to_string(sample_seed);
  std::vector<double> affine(9);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) affine[std::size_t(r * 3 + c)] = w.affine(r, c);
  j["affine"] = affine;
  j["shift"] = {w.shift.x(), w.shift.y(), w.shift.z()};
  j["center"] = {w.center.x(), w.center.y(), w.center.z()};
  j["elastic_seed"] = std::to_string(w.elastic_seed);
  j["elastic_amp"] = w.elastic_amp;
  j["elastic_grid"] = w.elastic_grid;
  j["noise_level"] = w.noise_level;
  j["warp_scale"] = w.warp_scale;
  return j.dump(2) + "\n";
}

WarpParams warp_from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  WarpParams w;
  auto affine = j.at("affine").get<std::vector<double>>();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) w.affine(r, c) = affine[std::size_t(r * 3 + c)];
  auto shift = j.at("shift").get<std::vector<double>>();
  auto center = j.at("center").get<std::vector<double>>();
  w.shift = Eigen::Vector3d(shift[0], shift[1], shift[2]);
  w.center = Eigen::Vector3d(center[0], center[1], center[2]);
  w.elastic_seed = std::stoull(j.at("elastic_seed").get<std::string>());
  w.elastic_amp = j.at("elastic_amp").get<double>();
  w.elastic_grid = j.at("elastic_grid").get<int>();
  w.noise_level = j.at("noise_level").get<double>();
  w.warp_scale = j.at("warp_scale").get<double>();
  return w;
}

Archive sample_to_archive(const PhantomSample& s) {
  Archive a;
  a.add(grid_entry_f32("image", s.image, /*flat=*/true));
  a.add(grid_entry_i32("label", s.label, /*flat=*/true));
  a.add(grid_entry_f32("field", s.field));
  return a;
}

PhantomSample sample_from_archive(const Archive& a, int classes) {
  PhantomSample s;
  s.classes = classes;
  s.image = entry_as_grid_f32(a.at("image"));
  s.label = entry_as_grid_i32(a.at("label"));
  s.field = entry_as_grid_f32(a.at("field"));
  require(s.field.channels() == 3, "sample archive: field must have 3 channels");
  require(s.image.shape() == s.label.shape() && s.image.shape() == s.field.shape(),
          "sample archive: array shapes differ");
  return s;
}

void generate_dataset(const DatasetParams& p, const std::string& out_dir, int threads) {
  require(p.classes >= 2 && p.classes <= 16, "gen-data: classes outside [2,16]");
  require(p.size >= 16, "gen-data: size must be >= 16");
  require(p.train >= 1 && p.val >= 0, "gen-data: need at least one training sample");
  require(p.noise_level >= 0.0 && p.warp_scale >= 0.0, "gen-data: negative noise/warp");

  const fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root / "train", ec);
  fs::create_directories(root / "val", ec);
  if (!fs::exists(root / "train") || !fs::exists(root / "val"))
    throw std::runtime_error("gen-data: cannot create output directory: " + out_dir);

  Rng master(p.seed);
  Rng atlas_rng = master.fork(0);
  Atlas atlas = build_atlas(p.size, p.classes, atlas_rng);
  {
    Archive a;
    a.add(grid_entry_i32("label", atlas.canonical_label, true));
    a.add(grid_entry_f32("field", atlas.canonical_field));
    a.write((root / "atlas.vxa").string());
  }

  struct Job { bool val; int index; };
  std::vector<Job> jobs;
  for (int i = 0; i < p.train; ++i) jobs.push_back({false, i});
  for (int i = 0; i < p.val; ++i) jobs.push_back({true, i});

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, threads))
#endif
  for (std::int64_t k = 0; k < std::int64_t(jobs.size()); ++k) {
    const Job job = jobs[std::size_t(k)];
    const uint64_t stream = sample_stream(job.val, job.index);
    Rng rng = master.fork(stream);
    PhantomSample s = sample_from_atlas(atlas, rng, p.noise_level, p.warp_scale);
    const fs::path dir = root / (job.val ? "val" : "train");
    const std::string name = sample_name(job.index);
    sample_to_archive(s).write((dir / (name + ".vxa")).string());
    write_text(dir / (name + ".json"), warp_to_json(s.warp, stream));
  }

  ordered_json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["size"] = p.size;
  manifest["classes"] = p.classes;
  manifest["seed"] = std::to_string(p.seed);
  manifest["noise_level"] = p.noise_level;
  manifest["warp_scale"] = p.warp_scale;
  ordered_json train_list = ordered_json::array(), val_list = ordered_json::array();
  for (int i = 0; i < p.train; ++i) train_list.push_back(sample_name(i) + ".vxa");
  for (int i = 0; i < p.val; ++i) val_list.push_back(sample_name(i) + ".vxa");
  manifest["train"] = train_list;
  manifest["val"] = val_list;
  write_text(root / "manifest.json", manifest.dump(2) + "\n");
}

LoadedDataset load_dataset(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::exists(root / "manifest.json"))
    throw std::runtime_error("dataset: no manifest.json under " + dir);
  auto manifest = nlohmann::json::parse(read_text(root / "manifest.json"));

  LoadedDataset d;
  d.params.size = manifest.at("size").get<int>();
  d.params.classes = manifest.at("classes").get<int>();
  d.params.seed = std::stoull(manifest.at("seed").get<std::string>());
  d.params.noise_level = manifest.at("noise_level").get<double>();
  d.params.warp_scale = manifest.at("warp_scale").get<double>();
  d.params.train = int(manifest.at("train").size());
  d.params.val = int(manifest.at("val").size());

  auto load_split = [&](const char* split, const nlohmann::json& names) {
    std::vector<PhantomSample> out;
    for (const auto& name : names) {
      const fs::path file = root / split / name.get<std::string>();
      Archive a = Archive::read(file.string());
      PhantomSample s = sample_from_archive(a, d.params.classes);
      const fs::path sidecar = fs::path(file).replace_extension(".json");
      if (fs::exists(sidecar)) s.warp = warp_from_json(read_text(sidecar));
      out.push_back(std::move(s));
    }
    return out;
  };
  d.train = load_split("train", manifest.at("train"));
  d.val = load_split("val", manifest.at("val"));
  return d;
}

}  // namespace diffseg::io
