#pragma once

#include "mus/geometry.hpp"

namespace mus {

// Neighborhood used by component labeling: 6 = faces, 26 = full cube,
// c8_2d = 8-neighborhood within each z-slice (components never span slices).
enum class Connectivity { c6 = 6, c26 = 26, c8_2d = 8 };

struct LabeledComponents {
  GridSpec grid;
  std::vector<int32_t> ids;       // 0 = background, components 1..K
  std::vector<int64_t> counts;    // counts[k-1] = voxel count of component k
  Connectivity connectivity = Connectivity::c26;

  int64_t component_count() const { return static_cast<int64_t>(counts.size()); }
};

// Morphological closing (dilation then erosion) with a cubic element of the
// given odd size. The dilation is evaluated on a grid padded by the element
// radius and the erosion back on the original extent, which makes the result
// the infinite-domain closing restricted to the volume — hence idempotent.
LabelVolume closing(const LabelVolume& mask, int64_t kernel_size = 3);

// Components assigned in scan order (x-fastest), ids dense 1..K.
LabeledComponents connected_components(const LabelVolume& mask,
                                       Connectivity conn = Connectivity::c26);

// Drops components with fewer than min_voxels voxels (strict <; a component
// of exactly min_voxels survives).
LabelVolume filter_small(const LabeledComponents& comps, int64_t min_voxels);

// Rescales a voxel-count threshold defined at a reference isotropic spacing
// to the current grid spacing, preserving physical volume (never below 1).
int64_t scaled_min_voxels(const std::array<double, 3>& spacing_mm,
                          int64_t reference_min_voxels = 10000,
                          double reference_spacing_mm = 0.03);

}  // namespace mus
