#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "mus/common.hpp"

namespace mus {

using Vec3 = std::array<double, 3>;

// Acquisition geometry of a rotational sweep: 2D frames containing the probe
// axis, one per rotation angle. The probe axis is the world z-axis; the frame
// at θ = 0 lies in the x–z half-plane with x > 0. Within a frame, u indexes
// pixels along the probe axis (axial) and v along depth away from the probe
// surface (radial).
struct FanGeometry {
  double probe_radius_mm = 10.0;  // distance from axis to the first sample row
  int64_t axial_pixels = 0;       // frame width (u)
  int64_t radial_pixels = 0;      // frame height (v)
  double axial_spacing_mm = 0.0;
  double radial_spacing_mm = 0.0;
  std::vector<double> angles_deg;  // strictly monotonic, within (-180, 180]

  int64_t frame_count() const { return static_cast<int64_t>(angles_deg.size()); }
  double axial_extent_mm() const {
    return static_cast<double>(axial_pixels - 1) * axial_spacing_mm;
  }
  double radial_extent_mm() const {
    return static_cast<double>(radial_pixels - 1) * radial_spacing_mm;
  }
  double min_angle_deg() const;
  double max_angle_deg() const;
  void validate() const;
};

// A stack of per-angle frames. Row-major with the radial coordinate as the
// slow axis: pixel (v, u) of frame i sits at frames[i][v * axial_pixels + u].
// T = float carries intensities; T = uint8_t carries labels.
template <typename T>
struct FrameStackT {
  FanGeometry geometry;
  std::vector<std::vector<T>> frames;

  T at(int64_t frame, int64_t v, int64_t u) const {
    return frames[static_cast<size_t>(frame)]
                 [static_cast<size_t>(v * geometry.axial_pixels + u)];
  }
  T& at(int64_t frame, int64_t v, int64_t u) {
    return frames[static_cast<size_t>(frame)]
                 [static_cast<size_t>(v * geometry.axial_pixels + u)];
  }
  void validate() const;
};

using ImageStack = FrameStackT<float>;
using LabelStack = FrameStackT<uint8_t>;

// Cartesian voxel lattice. Voxel (ix, iy, iz) is centered at
// origin + index * spacing; values are stored x-fastest.
struct GridSpec {
  std::array<int64_t, 3> dims{};     // (nx, ny, nz)
  std::array<double, 3> spacing_mm{};
  std::array<double, 3> origin_mm{};

  int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
  int64_t index(int64_t ix, int64_t iy, int64_t iz) const {
    return (iz * dims[1] + iy) * dims[0] + ix;
  }
  Vec3 voxel_center(int64_t ix, int64_t iy, int64_t iz) const {
    return {origin_mm[0] + ix * spacing_mm[0], origin_mm[1] + iy * spacing_mm[1],
            origin_mm[2] + iz * spacing_mm[2]};
  }
  void validate() const;
  bool operator==(const GridSpec&) const = default;
};

template <typename T>
struct VolumeT {
  GridSpec grid;
  std::vector<T> values;  // x-fastest

  T at(int64_t ix, int64_t iy, int64_t iz) const {
    return values[static_cast<size_t>(grid.index(ix, iy, iz))];
  }
  T& at(int64_t ix, int64_t iy, int64_t iz) {
    return values[static_cast<size_t>(grid.index(ix, iy, iz))];
  }
  void validate() const;
};

using ImageVolume = VolumeT<float>;
using LabelVolume = VolumeT<uint8_t>;

// Cylindrical coordinates of a world point relative to the sweep.
// depth_mm is measured from the probe surface (radius probe_radius_mm), so a
// frame pixel (u, v) maps to depth v * radial_spacing, axial u * axial_spacing.
struct FanCoord {
  double theta_deg = 0;
  double depth_mm = 0;
  double axial_mm = 0;
  bool in_coverage = false;
};

Vec3 frame_to_world(const FanGeometry& geom, int64_t frame_index, double u,
                    double v);

// Exact inverse of frame_to_world for points at radial distance >=
// probe_radius. in_coverage is true iff theta lies within the sweep's angle
// range, depth within [0, radial extent], and axial within [0, axial extent].
FanCoord world_to_fan(const FanGeometry& geom, const Vec3& p);

enum class FanInterp { trilinear, nearest };

// Scan conversion to a Cartesian lattice. trilinear means linear across the
// two bracketing angles and bilinear in-plane; label payloads (integral T)
// must use nearest. Out-of-coverage voxels take the fill value.
template <typename T>
VolumeT<T> reconstruct_cartesian(const FrameStackT<T>& stack,
                                 const GridSpec& grid, FanInterp interp,
                                 double fill = 0.0);

// Inverse direction: sample a volume at every frame pixel's world position.
// Pixels outside the volume take the fill value.
template <typename T>
FrameStackT<T> project_to_frames(const VolumeT<T>& vol, const FanGeometry& geom,
                                 FanInterp interp, double fill = 0.0);

// 1 where world_to_fan reports in-coverage, else 0.
LabelVolume coverage_mask(const FanGeometry& geom, const GridSpec& grid);

// Axis-aligned bounding box of the swept fan, as (lo, hi) corners.
std::pair<Vec3, Vec3> fan_bounds(const FanGeometry& geom);

// Isotropic grid covering fan_bounds at the given spacing.
GridSpec default_grid(const FanGeometry& geom, double spacing_mm);

// Grid with exactly the given dims, centered on the fan's bounding box.
// Useful to make a reconstruction land on a network's patch size directly.
GridSpec patch_grid(const FanGeometry& geom, const std::array<int64_t, 3>& dims,
                    double spacing_mm);

}  // namespace mus
