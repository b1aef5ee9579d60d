#pragma once

#include "diffseg/io/archive.hpp"
#include "diffseg/phantom.hpp"

#include <string>
#include <vector>

namespace diffseg::io {

struct DatasetParams {
  int size = 48;
  int classes = 4;
  int train = 8;
  int val = 2;
  uint64_t seed = 17;
  double noise_level = 0.05;
  double warp_scale = 1.0;
};

/// Writes manifest.json, atlas.vxa and per-split sample archives with named
/// arrays image/label/field plus a JSON sidecar of warp parameters. Fully
/// deterministic for a given parameter set.
void generate_dataset(const DatasetParams& params, const std::string& out_dir, int threads = 1);

struct LoadedDataset {
  DatasetParams params;
  std::vector<PhantomSample> train;
  std::vector<PhantomSample> val;
};

LoadedDataset load_dataset(const std::string& dir);

/// Sample archive <-> in-memory sample.
Archive sample_to_archive(const PhantomSample& s);
PhantomSample sample_from_archive(const Archive& a, int classes);

std::string warp_to_json(const WarpParams& w, uint64_t sample_seed);
WarpParams warp_from_json(const std::string& text);

}  // namespace diffseg::io
