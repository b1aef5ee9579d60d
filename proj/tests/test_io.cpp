#include "diffseg/io/archive.hpp"
#include "diffseg/io/dataset.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace diffseg;
namespace fs = std::filesystem;

namespace {

std::vector<char> slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(bool(is));
  return std::vector<char>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("archive round trip preserves bytes and shapes") {
  TempDir tmp("diffseg_test_archive");
  Grid<float> g(2, 3, 4, 5);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = float(i) * 0.25f;
  Grid<int32_t> l(1, 3, 4, 5);
  for (Eigen::Index i = 0; i < l.size(); ++i) l.data()[i] = int32_t(i % 7);

  io::Archive a;
  a.add(io::grid_entry_f32("field", g));
  a.add(io::grid_entry_i32("label", l, true));
  const auto file = (tmp.path / "t.vxa").string();
  a.write(file);

  io::Archive b = io::Archive::read(file);
  auto g2 = io::entry_as_grid_f32(b.at("field"));
  auto l2 = io::entry_as_grid_i32(b.at("label"));
  CHECK(g2.channels() == 2);
  CHECK(g2.shape() == g.shape());
  CHECK((g2.array() == g.array()).all());
  CHECK(l2.channels() == 1);
  CHECK((l2.array() == l.array()).all());
  CHECK(b.at("label").dims.size() == 3);  // flat single-channel layout

  CHECK_THROWS(b.at("missing"));
  CHECK_THROWS(io::Archive::read((tmp.path / "nope.vxa").string()));
}

TEST_CASE("dataset generation is byte-identical under one seed") {
  TempDir t1("diffseg_test_ds1"), t2("diffseg_test_ds2");
  io::DatasetParams p;
  p.size = 20;
  p.classes = 3;
  p.train = 2;
  p.val = 1;
  p.seed = 99;
  io::generate_dataset(p, t1.path.string(), 1);
  io::generate_dataset(p, t2.path.string(), 2);  // thread count must not matter

  for (const auto& rel : {"manifest.json", "atlas.vxa", "train/sample_0000.vxa",
                          "train/sample_0000.json", "train/sample_0001.vxa",
                          "val/sample_0000.vxa", "val/sample_0000.json"}) {
    CAPTURE(rel);
    CHECK(slurp(t1.path / rel) == slurp(t2.path / rel));
  }

  auto d = io::load_dataset(t1.path.string());
  CHECK(d.params.classes == 3);
  CHECK(d.train.size() == 2);
  CHECK(d.val.size() == 1);
  CHECK(d.train[0].image.nx() == 20);
  CHECK(d.train[0].field.channels() == 3);
  // sidecar warp params survive the round trip
  CHECK(d.train[0].warp.warp_scale == doctest::Approx(1.0));
}

TEST_CASE("warp params json round trip") {
  WarpParams w;
  w.affine << 1.01, 0.02, -0.03, 0.0, 0.98, 0.01, 0.02, -0.01, 1.05;
  w.shift = {0.5, -1.25, 2.0};
  w.center = {9.5, 9.5, 9.5};
  w.elastic_seed = 0xDEADBEEFCAFEBABEull;
  w.elastic_amp = 1.5;
  w.elastic_grid = 4;
  w.noise_level = 0.05;
  w.warp_scale = 1.0;
  auto text = io::warp_to_json(w, 123);
  auto w2 = io::warp_from_json(text);
  CHECK((w2.affine - w.affine).norm() == 0.0);
  CHECK((w2.shift - w.shift).norm() == 0.0);
  CHECK(w2.elastic_seed == w.elastic_seed);
  CHECK(w2.elastic_amp == w.elastic_amp);
}
