#pragma once

#include "diffseg/core/grid.hpp"

#include <map>
#include <vector>

namespace diffseg {

struct EvalReport {
  std::map<int, double> per_class_dice;
  std::map<int, double> per_class_nsd;
  double mean_dice = 0.0;  // arithmetic mean over foreground classes
  double mean_nsd = 0.0;
  double tolerance_voxels = 1.0;
};

/// Per-class Dice overlap 2|P∩G| / (|P|+|G|); 1 when both masks are empty,
/// 0 when exactly one is.
std::vector<double> dice_per_class(const Grid<int32_t>& pred, const Grid<int32_t>& gt, int classes);

/// Normalized surface Dice at the given voxel tolerance. Boundaries use
/// 6-connectivity (a mask voxel with any face neighbor outside the mask,
/// volume borders counting as outside); distances are exact Euclidean.
std::vector<double> nsd_per_class(const Grid<int32_t>& pred, const Grid<int32_t>& gt, int classes,
                                  double tolerance_voxels);

EvalReport evaluate_labels(const Grid<int32_t>& pred, const Grid<int32_t>& gt, int classes,
                           double tolerance_voxels = 1.0);

/// Boundary mask of `label == cls` under the convention above.
Grid<int32_t> boundary_mask(const Grid<int32_t>& label, int cls);

/// Exact squared Euclidean distance to the nearest nonzero voxel of `mask`
/// (separable transform). Empty mask yields +inf everywhere.
Grid<double> squared_distance_transform(const Grid<int32_t>& mask);

}  // namespace diffseg
