#pragma once

#include <utility>

#include "multisiam/tensor.h"
#include "multisiam/view_sampler.h"

namespace msiam {

/// Box relative to a view's own extent, all coordinates in [0,1].
struct RelBox {
  double x0 = 0, y0 = 0, x1 = 1, y1 = 1;
  bool valid() const {
    return 0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 &&
           y1 <= 1.0;
  }
};

enum class AlignMode { kRoi, kOffset, kNone };

struct Point {
  double x = 0, y = 0;
};

/// Source-image coordinate of the center of grid cell (row i, col j) of an
/// H x W map laid over the view. A flipped view mirrors the column first.
Point grid_coord(const ViewSpec& spec, std::size_t i, std::size_t j,
                 std::size_t h, std::size_t w);

/// Undoes the horizontal flip of a view's feature map.
Tensor flip_back(const Tensor& map, bool flipped);

/// Intersection of both source boxes, expressed relative to each view.
/// Throws InvalidArgument when the boxes do not overlap.
std::pair<RelBox, RelBox> intersection_relative(const ViewSpec& a,
                                                const ViewSpec& b);

/// One bilinear sample per output bin center; pixel (i,j) of the input has
/// relative center ((j+0.5)/W, (i+0.5)/H). Samples outside the pixel-center
/// hull clamp to the edge.
Tensor roi_align(const Tensor& map, const RelBox& roi, std::size_t out_h,
                 std::size_t out_w);

/// Per-cell coordinate difference between the (flip-backed) grids of view b
/// and view a, shape [2,H,W] with channel 0 = x, 1 = y. With `normalize`,
/// each axis is divided by view a's grid span coord(H-1,W-1) - coord(0,0).
Tensor offset_map(const ViewSpec& a, const ViewSpec& b, std::size_t h,
                  std::size_t w, bool normalize);

struct AlignedPair {
  Tensor online;
  Tensor target;
  AlignMode mode = AlignMode::kNone;
};

/// Aligns flip-backed online map G (view a) and target map G' (view b).
AlignedPair align_pair(const Tensor& online, const Tensor& target,
                       const ViewSpec& a, const ViewSpec& b, AlignMode mode,
                       bool normalize_offset = true);

/// Source coordinate of aligned cell (i,j) when a view's map was RoI-aligned
/// with `roi` to an H x W grid. Both views agree on this for a shared region.
Point aligned_cell_coord(const ViewSpec& spec, const RelBox& roi,
                         std::size_t i, std::size_t j, std::size_t h,
                         std::size_t w);

} // namespace msiam
