#pragma once

#include "diffseg/core/grid.hpp"
#include "diffseg/core/rng.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace diffseg {

/// Canonical reference volume: nested ellipsoidal shells (classes 1..C-1 from
/// outermost to innermost, 0 = background) plus the normalized coordinate
/// field about the frame origin at the volume center. The shells are centered
/// on the mid-sagittal plane so the two x-halves mirror each other.
struct Atlas {
  int size = 0;     // S, cubic volume
  int classes = 0;  // C including background
  Grid<int32_t> canonical_label;
  Grid<float> canonical_field;  // 3 channels, each in [0,1]
  Eigen::Vector3d origin;       // voxel coordinates of the frame origin
  Eigen::Vector3d shell_center;
  std::vector<Eigen::Vector3d> shell_axes;  // semi-axes per foreground class
};

/// Invertible smooth warp mapping sample space to atlas space:
/// T(v) = A (v - center) + center + shift + elastic(v).
struct WarpParams {
  Eigen::Matrix3d affine = Eigen::Matrix3d::Identity();
  Eigen::Vector3d shift = Eigen::Vector3d::Zero();
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  uint64_t elastic_seed = 0;
  double elastic_amp = 0.0;  // max displacement magnitude, voxels
  int elastic_grid = 4;      // control points per axis
  double noise_level = 0.0;
  double warp_scale = 0.0;
};

/// Dense low-frequency displacement field, trilinearly upsampled from the
/// control grid encoded in WarpParams.
class ElasticField {
 public:
  ElasticField() = default;
  ElasticField(const WarpParams& params, int volume_size);
  Eigen::Vector3d at(const Eigen::Vector3d& v) const;

 private:
  int grid_ = 0;
  int size_ = 1;
  std::vector<Eigen::Vector3d> control_;
};

Eigen::Vector3d warp_to_atlas(const WarpParams& params, const ElasticField& elastic,
                              const Eigen::Vector3d& v);

/// Solve T(v) = p by fixed-point iteration; used by the registration oracles.
Eigen::Vector3d invert_warp(const WarpParams& params, const ElasticField& elastic,
                            const Eigen::Vector3d& p, int iters = 40);

struct PhantomSample {
  int classes = 0;
  Grid<float> image;    // 1 channel
  Grid<int32_t> label;  // 1 channel, values in {0..C-1}
  Grid<float> field;    // 3 channels in [0,1]
  WarpParams warp;
};

struct Patch {
  Grid<float> image;         // 1 channel, P^3
  Grid<float> onehot_label;  // C channels
  Grid<float> field;         // 3 channels
  Eigen::Vector3d origin_atlas;  // mean field value over the patch
  Eigen::Vector3i origin_voxel;
};

/// Per-class mean intensity ramp used when rendering images; strictly
/// increasing in the class index.
double class_intensity(int c, int classes);

Atlas build_atlas(int size, int classes, Rng& rng);

PhantomSample sample_from_atlas(const Atlas& atlas, Rng& rng, double noise_level,
                                double warp_scale);

Patch extract_patch(const PhantomSample& sample, const Eigen::Vector3i& origin, int patch_size);

Grid<float> onehot_encode(const Grid<int32_t>& label, int classes);
Grid<int32_t> argmax_labels(const Grid<float>& probs);

/// Normalized atlas coordinate of a (possibly fractional) atlas-space voxel
/// position: component-wise p/(S-1), clamped to [0,1].
Eigen::Vector3d atlas_coordinate(const Eigen::Vector3d& p, int size);

}  // namespace diffseg
