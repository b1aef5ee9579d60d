#include "diffseg/phantom.hpp"

#include <algorithm>
#include <cmath>

namespace diffseg {

namespace {

double trilinear(const Grid<float>& g, int c, const Eigen::Vector3d& p) {
  const int nx = g.nx(), ny = g.ny(), nz = g.nz();
  const double x = std::clamp(p.x(), 0.0, double(nx - 1));
  const double y = std::clamp(p.y(), 0.0, double(ny - 1));
  const double z = std::clamp(p.z(), 0.0, double(nz - 1));
  const int x0 = std::min(int(x), nx - 2 >= 0 ? nx - 2 : 0);
  const int y0 = std::min(int(y), ny - 2 >= 0 ? ny - 2 : 0);
  const int z0 = std::min(int(z), nz - 2 >= 0 ? nz - 2 : 0);
  const double fx = x - x0, fy = y - y0, fz = z - z0;
  auto v = [&](int i, int j, int k) { return double(g(c, i, j, k)); };
  const double c00 = v(x0, y0, z0) * (1 - fx) + v(x0 + 1, y0, z0) * fx;
  const double c10 = v(x0, y0 + 1, z0) * (1 - fx) + v(x0 + 1, y0 + 1, z0) * fx;
  const double c01 = v(x0, y0, z0 + 1) * (1 - fx) + v(x0 + 1, y0, z0 + 1) * fx;
  const double c11 = v(x0, y0 + 1, z0 + 1) * (1 - fx) + v(x0 + 1, y0 + 1, z0 + 1) * fx;
  const double c0 = c00 * (1 - fy) + c10 * fy;
  const double c1 = c01 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

int32_t nearest_label(const Grid<int32_t>& g, const Eigen::Vector3d& p) {
  const int x = int(std::lround(p.x()));
  const int y = int(std::lround(p.y()));
  const int z = int(std::lround(p.z()));
  if (x < 0 || y < 0 || z < 0 || x >= g.nx() || y >= g.ny() || z >= g.nz()) return 0;
  return g(0, x, y, z);
}

bool affine_in_bounds(const Eigen::Matrix3d& a) {
  Eigen::EigenSolver<Eigen::Matrix3d> es(a, false);
  for (int i = 0; i < 3; ++i) {
    const double mag = std::abs(es.eigenvalues()[i]);
    if (mag < 0.8 || mag > 1.25) return false;
  }
  return true;
}

}  // namespace

ElasticField::ElasticField(const WarpParams& params, int volume_size)
    : grid_(params.elastic_grid), size_(volume_size) {
  control_.assign(std::size_t(grid_) * grid_ * grid_, Eigen::Vector3d::Zero());
  if (params.elastic_amp <= 0.0) return;
  Rng rng(params.elastic_seed);
  const double comp = params.elastic_amp / std::sqrt(3.0);
  for (auto& c : control_)
    c = Eigen::Vector3d(rng.uniform(-comp, comp), rng.uniform(-comp, comp),
                        rng.uniform(-comp, comp));
}

Eigen::Vector3d ElasticField::at(const Eigen::Vector3d& v) const {
  if (control_.empty() || grid_ < 2) return Eigen::Vector3d::Zero();
  const double scale = double(grid_ - 1) / double(size_ - 1);
  Eigen::Vector3d u = v * scale;
  for (int i = 0; i < 3; ++i) u[i] = std::clamp(u[i], 0.0, double(grid_ - 1));
  const int x0 = std::min(int(u.x()), grid_ - 2);
  const int y0 = std::min(int(u.y()), grid_ - 2);
  const int z0 = std::min(int(u.z()), grid_ - 2);
  const double fx = u.x() - x0, fy = u.y() - y0, fz = u.z() - z0;
  auto at = [&](int i, int j, int k) -> const Eigen::Vector3d& {
    return control_[std::size_t((k * grid_ + j) * grid_ + i)];
  };
  Eigen::Vector3d c00 = at(x0, y0, z0) * (1 - fx) + at(x0 + 1, y0, z0) * fx;
  Eigen::Vector3d c10 = at(x0, y0 + 1, z0) * (1 - fx) + at(x0 + 1, y0 + 1, z0) * fx;
  Eigen::Vector3d c01 = at(x0, y0, z0 + 1) * (1 - fx) + at(x0 + 1, y0, z0 + 1) * fx;
  Eigen::Vector3d c11 = at(x0, y0 + 1, z0 + 1) * (1 - fx) + at(x0 + 1, y0 + 1, z0 + 1) * fx;
  Eigen::Vector3d c0 = c00 * (1 - fy) + c10 * fy;
  Eigen::Vector3d c1 = c01 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

Eigen::Vector3d warp_to_atlas(const WarpParams& params, const ElasticField& elastic,
                              const Eigen::Vector3d& v) {
  return params.affine * (v - params.center) + params.center + params.shift + elastic.at(v);
}

Eigen::Vector3d invert_warp(const WarpParams& params, const ElasticField& elastic,
                            const Eigen::Vector3d& p, int iters) {
  const Eigen::Matrix3d inv = params.affine.inverse();
  Eigen::Vector3d v = p;
  for (int i = 0; i < iters; ++i)
    v = inv * (p - params.center - params.shift - elastic.at(v)) + params.center;
  return v;
}

double class_intensity(int c, int classes) {
  if (classes < 2) throw std::invalid_argument("class_intensity: need >= 2 classes");
  return 0.1 + 0.8 * double(c) / double(classes - 1);
}

Eigen::Vector3d atlas_coordinate(const Eigen::Vector3d& p, int size) {
  Eigen::Vector3d c = p / double(size - 1);
  for (int i = 0; i < 3; ++i) c[i] = std::clamp(c[i], 0.0, 1.0);
  return c;
}

Atlas build_atlas(int size, int classes, Rng& rng) {
  if (size < 16) throw std::invalid_argument("build_atlas: size must be >= 16");
  if (classes < 2 || classes > 16) throw std::invalid_argument("build_atlas: classes outside [2,16]");

  Atlas atlas;
  atlas.size = size;
  atlas.classes = classes;
  const double mid = double(size - 1) / 2.0;
  atlas.origin = Eigen::Vector3d(mid, mid, mid);

  // Shells share a center; x stays on the mid-sagittal plane so the label
  // structure mirrors across it.
  atlas.shell_center =
      Eigen::Vector3d(mid, mid + rng.uniform(-size / 24.0, size / 24.0),
                      mid + rng.uniform(-size / 24.0, size / 24.0));
  Eigen::Vector3d axis_jitter(1.0 + rng.uniform(-0.08, 0.08), 1.0 + rng.uniform(-0.08, 0.08),
                              1.0 + rng.uniform(-0.08, 0.08));
  const int shells = classes - 1;
  atlas.shell_axes.resize(shells);
  for (int s = 0; s < shells; ++s) {
    const double frac = 0.44 * double(shells - s) / double(shells);
    atlas.shell_axes[s] = frac * (size / 2.0) * axis_jitter;
  }

  atlas.canonical_label = Grid<int32_t>(1, size, size, size);
  atlas.canonical_field = Grid<float>(3, size, size, size);
  for (int z = 0; z < size; ++z)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        Eigen::Vector3d v(x, y, z);
        int cls = 0;
        const Eigen::Vector3d d = v - atlas.shell_center;
        for (int s = 0; s < shells; ++s) {
          const Eigen::Vector3d q = d.array() / atlas.shell_axes[s].array();
          if (q.squaredNorm() <= 1.0) cls = s + 1;  // innermost wins
        }
        atlas.canonical_label(0, x, y, z) = cls;
        const Eigen::Vector3d coord = atlas_coordinate(v, size);
        for (int c = 0; c < 3; ++c) atlas.canonical_field(c, x, y, z) = float(coord[c]);
      }
  return atlas;
}

PhantomSample sample_from_atlas(const Atlas& atlas, Rng& rng, double noise_level,
                                double warp_scale) {
  if (noise_level < 0.0) throw std::invalid_argument("sample_from_atlas: negative noise level");
  if (warp_scale < 0.0) throw std::invalid_argument("sample_from_atlas: negative warp scale");

  const int S = atlas.size;
  WarpParams warp;
  warp.center = atlas.origin;
  warp.noise_level = noise_level;
  warp.warp_scale = warp_scale;
  warp.elastic_amp = std::min(3.0, 2.0 * warp_scale);
  warp.elastic_grid = 4;

  bool ok = false;
  for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
    Eigen::Matrix3d jitter;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) jitter(r, c) = rng.uniform(-0.1, 0.1);
    warp.affine = Eigen::Matrix3d::Identity() + warp_scale * jitter;
    warp.shift = Eigen::Vector3d(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)) *
                 warp_scale;
    ok = affine_in_bounds(warp.affine);
  }
  if (!ok) throw std::invalid_argument("sample_from_atlas: could not draw an invertible warp");
  warp.elastic_seed = rng.next_u64();
  const ElasticField elastic(warp, S);

  // Smooth multiplicative bias: one low-frequency sinusoid per axis.
  const double bias_amp = std::min(0.08, 0.24 / double(atlas.classes - 1));
  Eigen::Vector3d bias_freq, bias_phase;
  for (int i = 0; i < 3; ++i) {
    bias_freq[i] = rng.uniform(0.5, 1.5);
    bias_phase[i] = rng.uniform(0.0, 1.0);
  }

  PhantomSample s;
  s.classes = atlas.classes;
  s.warp = warp;
  s.image = Grid<float>(1, S, S, S);
  s.label = Grid<int32_t>(1, S, S, S);
  s.field = Grid<float>(3, S, S, S);

  for (int z = 0; z < S; ++z)
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const Eigen::Vector3d v(x, y, z);
        const Eigen::Vector3d p = warp_to_atlas(warp, elastic, v);
        const int32_t cls = nearest_label(atlas.canonical_label, p);
        s.label(0, x, y, z) = cls;
        for (int c = 0; c < 3; ++c) {
          const double f = std::clamp(trilinear(atlas.canonical_field, c, p), 0.0, 1.0);
          s.field(c, x, y, z) = float(f);
        }
        double bias = 0.0;
        const Eigen::Vector3d u = v / double(S - 1);
        for (int i = 0; i < 3; ++i)
          bias += std::sin(2.0 * M_PI * (bias_freq[i] * u[i] + bias_phase[i]));
        bias = 1.0 + bias_amp * bias / 3.0;
        double val = class_intensity(cls, atlas.classes) * bias;
        if (noise_level > 0.0) val += noise_level * rng.normal();
        s.image(0, x, y, z) = float(val);
      }
  return s;
}

Patch extract_patch(const PhantomSample& sample, const Eigen::Vector3i& origin, int patch_size) {
  const int S = sample.label.nx();
  for (int i = 0; i < 3; ++i)
    if (origin[i] < 0 || origin[i] + patch_size > S)
      throw std::invalid_argument("extract_patch: patch out of bounds");

  Patch p;
  p.origin_voxel = origin;
  p.image = Grid<float>(1, patch_size, patch_size, patch_size);
  p.onehot_label = Grid<float>(sample.classes, patch_size, patch_size, patch_size);
  p.field = Grid<float>(3, patch_size, patch_size, patch_size);

  Eigen::Vector3d mean_field = Eigen::Vector3d::Zero();
  for (int z = 0; z < patch_size; ++z)
    for (int y = 0; y < patch_size; ++y)
      for (int x = 0; x < patch_size; ++x) {
        const int sx = origin.x() + x, sy = origin.y() + y, sz = origin.z() + z;
        p.image(0, x, y, z) = sample.image(0, sx, sy, sz);
        p.onehot_label(sample.label(0, sx, sy, sz), x, y, z) = 1.0f;
        for (int c = 0; c < 3; ++c) {
          const float f = sample.field(c, sx, sy, sz);
          p.field(c, x, y, z) = f;
          mean_field[c] += f;
        }
      }
  p.origin_atlas = mean_field / double(Eigen::Index(patch_size) * patch_size * patch_size);
  return p;
}

Grid<float> onehot_encode(const Grid<int32_t>& label, int classes) {
  require(label.channels() == 1, "onehot_encode: label must be single-channel");
  Grid<float> out(classes, label.shape());
  for (Eigen::Index i = 0; i < label.voxels(); ++i) {
    const int32_t c = label.data()[i];
    require(c >= 0 && c < classes, "onehot_encode: label value out of range");
    out.data()[Eigen::Index(c) * label.voxels() + i] = 1.0f;
  }
  return out;
}

Grid<int32_t> argmax_labels(const Grid<float>& probs) {
  Grid<int32_t> out(1, probs.shape());
  const Eigen::Index n = probs.voxels();
  for (Eigen::Index i = 0; i < n; ++i) {
    int best = 0;
    float best_v = probs.data()[i];
    for (int c = 1; c < probs.channels(); ++c) {
      const float v = probs.data()[Eigen::Index(c) * n + i];
      if (v > best_v) { best_v = v; best = c; }
    }
    out.data()[i] = best;
  }
  return out;
}

}  // namespace diffseg
