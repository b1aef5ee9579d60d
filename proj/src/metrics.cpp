#include "diffseg/metrics.hpp"

#include <cmath>
#include <limits>

namespace diffseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
// Large finite stand-in for "no site"; dominates any real squared distance
// while keeping the parabola intersections well-defined.
constexpr double kFar = 1e15;

// 1-D squared-distance transform (lower envelope of parabolas).
void edt_1d(const double* f, double* d, int n, std::vector<int>& v, std::vector<double>& z) {
  v.resize(std::size_t(n));
  z.resize(std::size_t(n) + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
    while (s <= z[k]) {
      --k;
      s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = double(q) - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace

Grid<double> squared_distance_transform(const Grid<int32_t>& mask) {
  require(mask.channels() == 1, "squared_distance_transform: single channel expected");
  const int nx = mask.nx(), ny = mask.ny(), nz = mask.nz();
  Grid<double> dist(1, nx, ny, nz);
  bool any = false;
  for (Eigen::Index i = 0; i < mask.voxels(); ++i) {
    dist.data()[i] = mask.data()[i] ? 0.0 : kFar;
    any = any || mask.data()[i];
  }
  if (!any) {
    dist.array().setConstant(kInf);
    return dist;
  }

  const int nmax = std::max({nx, ny, nz});
  std::vector<double> line(static_cast<std::size_t>(nmax)), out(static_cast<std::size_t>(nmax));
  std::vector<int> v;
  std::vector<double> z;

  // x pass
  for (int zz = 0; zz < nz; ++zz)
    for (int yy = 0; yy < ny; ++yy) {
      for (int xx = 0; xx < nx; ++xx) line[std::size_t(xx)] = dist(0, xx, yy, zz);
      edt_1d(line.data(), out.data(), nx, v, z);
      for (int xx = 0; xx < nx; ++xx) dist(0, xx, yy, zz) = out[std::size_t(xx)];
    }
  // y pass
  for (int zz = 0; zz < nz; ++zz)
    for (int xx = 0; xx < nx; ++xx) {
      for (int yy = 0; yy < ny; ++yy) line[std::size_t(yy)] = dist(0, xx, yy, zz);
      edt_1d(line.data(), out.data(), ny, v, z);
      for (int yy = 0; yy < ny; ++yy) dist(0, xx, yy, zz) = out[std::size_t(yy)];
    }
  // z pass
  for (int yy = 0; yy < ny; ++yy)
    for (int xx = 0; xx < nx; ++xx) {
      for (int zz = 0; zz < nz; ++zz) line[std::size_t(zz)] = dist(0, xx, yy, zz);
      edt_1d(line.data(), out.data(), nz, v, z);
      for (int zz = 0; zz < nz; ++zz) dist(0, xx, yy, zz) = out[std::size_t(zz)];
    }
  return dist;
}

Grid<int32_t> boundary_mask(const Grid<int32_t>& label, int cls) {
  const int nx = label.nx(), ny = label.ny(), nz = label.nz();
  Grid<int32_t> b(1, nx, ny, nz);
  auto inside = [&](int x, int y, int z) {
    if (x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz) return false;
    return label(0, x, y, z) == cls;
  };
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        if (label(0, x, y, z) != cls) continue;
        const bool surface = !inside(x - 1, y, z) || !inside(x + 1, y, z) ||
                             !inside(x, y - 1, z) || !inside(x, y + 1, z) ||
                             !inside(x, y, z - 1) || !inside(x, y, z + 1);
        b(0, x, y, z) = surface ? 1 : 0;
      }
  return b;
}

std::vector<double> dice_per_class(const Grid<int32_t>& pred, const Grid<int32_t>& gt,
                                   int classes) {
  require_same_layout(pred, gt, "dice_per_class");
  std::vector<double> inter(std::size_t(classes), 0.0), np(std::size_t(classes), 0.0),
      ng(std::size_t(classes), 0.0);
  for (Eigen::Index i = 0; i < pred.voxels(); ++i) {
    const int p = pred.data()[i], g = gt.data()[i];
    require(p >= 0 && p < classes && g >= 0 && g < classes, "dice_per_class: label out of range");
    np[std::size_t(p)] += 1.0;
    ng[std::size_t(g)] += 1.0;
    if (p == g) inter[std::size_t(p)] += 1.0;
  }
  std::vector<double> dice(static_cast<std::size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    const double denom = np[std::size_t(c)] + ng[std::size_t(c)];
    dice[std::size_t(c)] = denom == 0.0 ? 1.0 : 2.0 * inter[std::size_t(c)] / denom;
  }
  return dice;
}

std::vector<double> nsd_per_class(const Grid<int32_t>& pred, const Grid<int32_t>& gt, int classes,
                                  double tolerance_voxels) {
  require_same_layout(pred, gt, "nsd_per_class");
  require(tolerance_voxels >= 0.0, "nsd_per_class: negative tolerance");
  const double tol2 = tolerance_voxels * tolerance_voxels + 1e-9;
  std::vector<double> nsd(static_cast<std::size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    Grid<int32_t> bp = boundary_mask(pred, c);
    Grid<int32_t> bg = boundary_mask(gt, c);
    const Eigen::Index n = bp.voxels();
    int64_t total_p = 0, total_g = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      total_p += bp.data()[i];
      total_g += bg.data()[i];
    }
    if (total_p == 0 && total_g == 0) { nsd[std::size_t(c)] = 1.0; continue; }
    if (total_p == 0 || total_g == 0) { nsd[std::size_t(c)] = 0.0; continue; }
    Grid<double> dg = squared_distance_transform(bg);
    Grid<double> dp = squared_distance_transform(bp);
    int64_t hit = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (bp.data()[i] && dg.data()[i] <= tol2) ++hit;
      if (bg.data()[i] && dp.data()[i] <= tol2) ++hit;
    }
    nsd[std::size_t(c)] = double(hit) / double(total_p + total_g);
  }
  return nsd;
}

EvalReport evaluate_labels(const Grid<int32_t>& pred, const Grid<int32_t>& gt, int classes,
                           double tolerance_voxels) {
  EvalReport r;
  r.tolerance_voxels = tolerance_voxels;
  auto dice = dice_per_class(pred, gt, classes);
  auto nsd = nsd_per_class(pred, gt, classes, tolerance_voxels);
  double sd = 0.0, sn = 0.0;
  for (int c = 0; c < classes; ++c) {
    r.per_class_dice[c] = dice[std::size_t(c)];
    r.per_class_nsd[c] = nsd[std::size_t(c)];
    if (c > 0) { sd += dice[std::size_t(c)]; sn += nsd[std::size_t(c)]; }
  }
  const int fg = classes - 1;
  r.mean_dice = fg > 0 ? sd / fg : 0.0;
  r.mean_nsd = fg > 0 ? sn / fg : 0.0;
  return r;
}

}  // namespace diffseg
