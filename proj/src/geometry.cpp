#include "mus/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mus {

namespace {
constexpr double kDegToRad = 3.14159265358979323846 / 180.0;
}

double FanGeometry::min_angle_deg() const {
  return std::min(angles_deg.front(), angles_deg.back());
}

double FanGeometry::max_angle_deg() const {
  return std::max(angles_deg.front(), angles_deg.back());
}

void FanGeometry::validate() const {
  require(probe_radius_mm >= 0, "probe radius must be >= 0");
  require(axial_pixels >= 1 && radial_pixels >= 1,
          "frame dims must be >= 1 pixel");
  require(axial_spacing_mm > 0 && radial_spacing_mm > 0,
          "pixel spacings must be > 0");
  require(angles_deg.size() >= 2, "at least two frames required");
  const bool asc = angles_deg.front() < angles_deg.back();
  for (size_t i = 1; i < angles_deg.size(); ++i) {
    const bool ok = asc ? angles_deg[i] > angles_deg[i - 1]
                        : angles_deg[i] < angles_deg[i - 1];
    require(ok, "angles must be strictly monotonic");
  }
  for (double a : angles_deg)
    require(a > -180.0 && a <= 180.0, "angles must lie in (-180, 180] degrees");
}

template <typename T>
void FrameStackT<T>::validate() const {
  geometry.validate();
  require(static_cast<int64_t>(frames.size()) == geometry.frame_count(),
          "frame count must match angle count");
  const size_t px =
      static_cast<size_t>(geometry.radial_pixels * geometry.axial_pixels);
  for (const auto& f : frames)
    require(f.size() == px, "frame pixel count mismatch");
  if constexpr (std::is_floating_point_v<T>) {
    for (const auto& f : frames)
      for (T fv : f)
        require(std::isfinite(static_cast<double>(fv)),
                "intensity frames must be finite");
  }
}

void GridSpec::validate() const {
  require(dims[0] >= 1 && dims[1] >= 1 && dims[2] >= 1, "grid dims must be >= 1");
  require(spacing_mm[0] > 0 && spacing_mm[1] > 0 && spacing_mm[2] > 0,
          "grid spacing must be > 0");
}

template <typename T>
void VolumeT<T>::validate() const {
  grid.validate();
  require(static_cast<int64_t>(values.size()) == grid.voxel_count(),
          "volume value count must match grid dims");
  if constexpr (std::is_floating_point_v<T>) {
    for (T v : values)
      require(std::isfinite(static_cast<double>(v)),
              "volume values must be finite");
  }
}

Vec3 frame_to_world(const FanGeometry& geom, int64_t frame_index, double u,
                    double v) {
  require(frame_index >= 0 && frame_index < geom.frame_count(),
          "frame index out of range");
  const double theta = geom.angles_deg[static_cast<size_t>(frame_index)] * kDegToRad;
  const double d = geom.probe_radius_mm + v * geom.radial_spacing_mm;
  const double l = u * geom.axial_spacing_mm;
  return {d * std::cos(theta), d * std::sin(theta), l};
}

FanCoord world_to_fan(const FanGeometry& geom, const Vec3& p) {
  // Boundaries are closed. The slack keeps points that sit exactly on a
  // boundary inside coverage after a world round trip; it is far above the
  // atan2/hypot rounding noise and far below a nanometer at probe scale.
  constexpr double kSlack = 1e-9;  // degrees / mm
  FanCoord fc;
  fc.theta_deg = std::atan2(p[1], p[0]) / kDegToRad;
  fc.depth_mm = std::hypot(p[0], p[1]) - geom.probe_radius_mm;
  fc.axial_mm = p[2];
  fc.in_coverage = fc.theta_deg >= geom.min_angle_deg() - kSlack &&
                   fc.theta_deg <= geom.max_angle_deg() + kSlack &&
                   fc.depth_mm >= -kSlack &&
                   fc.depth_mm <= geom.radial_extent_mm() + kSlack &&
                   fc.axial_mm >= -kSlack &&
                   fc.axial_mm <= geom.axial_extent_mm() + kSlack;
  return fc;
}

namespace {

struct Bracket {
  int64_t i0, i1;
  double t;  // 0 at i0, 1 at i1
};

// Bracketing frame pair for theta; works for ascending or descending angle
// lists. Callers pass in-coverage thetas, so t is clamped only as a guard.
Bracket angle_bracket(const std::vector<double>& a, double theta) {
  const int64_t n = static_cast<int64_t>(a.size());
  const bool asc = a.front() < a.back();
  int64_t lo = 0, hi = n - 1;
  while (hi - lo > 1) {
    const int64_t mid = (lo + hi) / 2;
    const bool left = asc ? a[static_cast<size_t>(mid)] <= theta
                          : a[static_cast<size_t>(mid)] >= theta;
    if (left)
      lo = mid;
    else
      hi = mid;
  }
  double t = (theta - a[static_cast<size_t>(lo)]) /
             (a[static_cast<size_t>(hi)] - a[static_cast<size_t>(lo)]);
  t = std::clamp(t, 0.0, 1.0);
  return {lo, hi, t};
}

template <typename T>
double bilinear_in_frame(const FrameStackT<T>& stack, int64_t fi, double v,
                         double u) {
  const FanGeometry& g = stack.geometry;
  const auto& f = stack.frames[static_cast<size_t>(fi)];
  auto split = [](double q, int64_t n, int64_t& q0, double& fq) {
    q0 = static_cast<int64_t>(std::floor(q));
    q0 = std::clamp<int64_t>(q0, 0, std::max<int64_t>(n - 2, 0));
    fq = n > 1 ? std::clamp(q - static_cast<double>(q0), 0.0, 1.0) : 0.0;
  };
  int64_t v0, u0;
  double fv, fu;
  split(v, g.radial_pixels, v0, fv);
  split(u, g.axial_pixels, u0, fu);
  const int64_t v1 = std::min(v0 + 1, g.radial_pixels - 1);
  const int64_t u1 = std::min(u0 + 1, g.axial_pixels - 1);
  auto px = [&](int64_t vv, int64_t uu) {
    return static_cast<double>(f[static_cast<size_t>(vv * g.axial_pixels + uu)]);
  };
  return (1 - fv) * ((1 - fu) * px(v0, u0) + fu * px(v0, u1)) +
         fv * ((1 - fu) * px(v1, u0) + fu * px(v1, u1));
}

template <typename T>
double sample_fan(const FrameStackT<T>& stack, const FanCoord& fc,
                  FanInterp interp) {
  const FanGeometry& g = stack.geometry;
  const double v = fc.depth_mm / g.radial_spacing_mm;
  const double u = fc.axial_mm / g.axial_spacing_mm;
  const Bracket br = angle_bracket(g.angles_deg, fc.theta_deg);
  if (interp == FanInterp::nearest) {
    const int64_t fi = br.t <= 0.5 ? br.i0 : br.i1;
    const int64_t vi =
        std::clamp<int64_t>(std::llround(v), 0, g.radial_pixels - 1);
    const int64_t ui =
        std::clamp<int64_t>(std::llround(u), 0, g.axial_pixels - 1);
    return static_cast<double>(stack.at(fi, vi, ui));
  }
  return (1 - br.t) * bilinear_in_frame(stack, br.i0, v, u) +
         br.t * bilinear_in_frame(stack, br.i1, v, u);
}

// Samples a volume at a world point. Returns false when the point falls
// outside the lattice of voxel centers.
template <typename T>
bool sample_volume(const VolumeT<T>& vol, const Vec3& p, FanInterp interp,
                   double& out) {
  const GridSpec& g = vol.grid;
  double q[3];
  for (int a = 0; a < 3; ++a) {
    q[a] = (p[a] - g.origin_mm[a]) / g.spacing_mm[a];
    if (q[a] < 0.0 || q[a] > static_cast<double>(g.dims[a] - 1)) return false;
  }
  if (interp == FanInterp::nearest) {
    const int64_t ix = std::clamp<int64_t>(std::llround(q[0]), 0, g.dims[0] - 1);
    const int64_t iy = std::clamp<int64_t>(std::llround(q[1]), 0, g.dims[1] - 1);
    const int64_t iz = std::clamp<int64_t>(std::llround(q[2]), 0, g.dims[2] - 1);
    out = static_cast<double>(vol.at(ix, iy, iz));
    return true;
  }
  int64_t i0[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    i0[a] = static_cast<int64_t>(std::floor(q[a]));
    i0[a] = std::clamp<int64_t>(i0[a], 0, std::max<int64_t>(g.dims[a] - 2, 0));
    f[a] = g.dims[a] > 1 ? std::clamp(q[a] - static_cast<double>(i0[a]), 0.0, 1.0)
                         : 0.0;
  }
  const int64_t i1[3] = {std::min(i0[0] + 1, g.dims[0] - 1),
                         std::min(i0[1] + 1, g.dims[1] - 1),
                         std::min(i0[2] + 1, g.dims[2] - 1)};
  auto at = [&](int64_t ix, int64_t iy, int64_t iz) {
    return static_cast<double>(vol.at(ix, iy, iz));
  };
  out = (1 - f[2]) * ((1 - f[1]) * ((1 - f[0]) * at(i0[0], i0[1], i0[2]) +
                                    f[0] * at(i1[0], i0[1], i0[2])) +
                      f[1] * ((1 - f[0]) * at(i0[0], i1[1], i0[2]) +
                              f[0] * at(i1[0], i1[1], i0[2]))) +
        f[2] * ((1 - f[1]) * ((1 - f[0]) * at(i0[0], i0[1], i1[2]) +
                              f[0] * at(i1[0], i0[1], i1[2])) +
                f[1] * ((1 - f[0]) * at(i0[0], i1[1], i1[2]) +
                        f[0] * at(i1[0], i1[1], i1[2])));
  return true;
}

}  // namespace

template <typename T>
VolumeT<T> reconstruct_cartesian(const FrameStackT<T>& stack,
                                 const GridSpec& grid, FanInterp interp,
                                 double fill) {
  stack.validate();
  grid.validate();
  if constexpr (std::is_integral_v<T>)
    require(interp == FanInterp::nearest,
            "label payloads require nearest interpolation");
  VolumeT<T> out;
  out.grid = grid;
  out.values.assign(static_cast<size_t>(grid.voxel_count()),
                    static_cast<T>(fill));
  const int64_t nx = grid.dims[0], ny = grid.dims[1], nz = grid.dims[2];
  parallel_chunks(nz, [&](int64_t zlo, int64_t zhi) {
    for (int64_t iz = zlo; iz < zhi; ++iz)
      for (int64_t iy = 0; iy < ny; ++iy)
        for (int64_t ix = 0; ix < nx; ++ix) {
          const FanCoord fc =
              world_to_fan(stack.geometry, grid.voxel_center(ix, iy, iz));
          if (!fc.in_coverage) continue;
          out.values[static_cast<size_t>(grid.index(ix, iy, iz))] =
              static_cast<T>(sample_fan(stack, fc, interp));
        }
  });
  return out;
}

template <typename T>
FrameStackT<T> project_to_frames(const VolumeT<T>& vol, const FanGeometry& geom,
                                 FanInterp interp, double fill) {
  vol.validate();
  geom.validate();
  if constexpr (std::is_integral_v<T>)
    require(interp == FanInterp::nearest,
            "label payloads require nearest interpolation");
  FrameStackT<T> out;
  out.geometry = geom;
  out.frames.assign(
      static_cast<size_t>(geom.frame_count()),
      std::vector<T>(static_cast<size_t>(geom.radial_pixels * geom.axial_pixels),
                     static_cast<T>(fill)));
  parallel_chunks(geom.frame_count(), [&](int64_t flo, int64_t fhi) {
    for (int64_t fi = flo; fi < fhi; ++fi) {
      auto& frame = out.frames[static_cast<size_t>(fi)];
      for (int64_t v = 0; v < geom.radial_pixels; ++v)
        for (int64_t u = 0; u < geom.axial_pixels; ++u) {
          const Vec3 p = frame_to_world(geom, fi, static_cast<double>(u),
                                        static_cast<double>(v));
          double val;
          if (sample_volume(vol, p, interp, val))
            frame[static_cast<size_t>(v * geom.axial_pixels + u)] =
                static_cast<T>(val);
        }
    }
  });
  return out;
}

LabelVolume coverage_mask(const FanGeometry& geom, const GridSpec& grid) {
  geom.validate();
  grid.validate();
  LabelVolume out;
  out.grid = grid;
  out.values.assign(static_cast<size_t>(grid.voxel_count()), 0);
  const int64_t nx = grid.dims[0], ny = grid.dims[1], nz = grid.dims[2];
  parallel_chunks(nz, [&](int64_t zlo, int64_t zhi) {
    for (int64_t iz = zlo; iz < zhi; ++iz)
      for (int64_t iy = 0; iy < ny; ++iy)
        for (int64_t ix = 0; ix < nx; ++ix)
          if (world_to_fan(geom, grid.voxel_center(ix, iy, iz)).in_coverage)
            out.values[static_cast<size_t>(grid.index(ix, iy, iz))] = 1;
  });
  return out;
}

std::pair<Vec3, Vec3> fan_bounds(const FanGeometry& geom) {
  geom.validate();
  const double tmin = geom.min_angle_deg(), tmax = geom.max_angle_deg();
  std::vector<double> thetas = {tmin, tmax};
  for (double c : {-180.0, -90.0, 0.0, 90.0, 180.0})
    if (c >= tmin && c <= tmax) thetas.push_back(c);
  const double r0 = geom.probe_radius_mm;
  const double r1 = r0 + geom.radial_extent_mm();
  Vec3 lo = {std::numeric_limits<double>::infinity(),
             std::numeric_limits<double>::infinity(), 0.0};
  Vec3 hi = {-std::numeric_limits<double>::infinity(),
             -std::numeric_limits<double>::infinity(), geom.axial_extent_mm()};
  for (double th : thetas)
    for (double d : {r0, r1}) {
      const double x = d * std::cos(th * kDegToRad);
      const double y = d * std::sin(th * kDegToRad);
      lo[0] = std::min(lo[0], x);
      lo[1] = std::min(lo[1], y);
      hi[0] = std::max(hi[0], x);
      hi[1] = std::max(hi[1], y);
    }
  return {lo, hi};
}

GridSpec default_grid(const FanGeometry& geom, double spacing_mm) {
  require(spacing_mm > 0, "grid spacing must be > 0");
  auto [lo, hi] = fan_bounds(geom);
  GridSpec g;
  for (int a = 0; a < 3; ++a) {
    g.origin_mm[a] = lo[a];
    g.spacing_mm[a] = spacing_mm;
    g.dims[a] =
        static_cast<int64_t>(std::ceil((hi[a] - lo[a]) / spacing_mm)) + 1;
  }
  return g;
}

GridSpec patch_grid(const FanGeometry& geom, const std::array<int64_t, 3>& dims,
                    double spacing_mm) {
  require(spacing_mm > 0, "grid spacing must be > 0");
  auto [lo, hi] = fan_bounds(geom);
  GridSpec g;
  g.dims = dims;
  for (int a = 0; a < 3; ++a) {
    require(dims[a] >= 1, "patch grid dims must be >= 1");
    g.spacing_mm[a] = spacing_mm;
    const double center = 0.5 * (lo[a] + hi[a]);
    g.origin_mm[a] =
        center - 0.5 * static_cast<double>(dims[a] - 1) * spacing_mm;
  }
  return g;
}

template struct FrameStackT<float>;
template struct FrameStackT<uint8_t>;
template struct VolumeT<float>;
template struct VolumeT<uint8_t>;

template VolumeT<float> reconstruct_cartesian<float>(const FrameStackT<float>&,
                                                     const GridSpec&, FanInterp,
                                                     double);
template VolumeT<uint8_t> reconstruct_cartesian<uint8_t>(
    const FrameStackT<uint8_t>&, const GridSpec&, FanInterp, double);
template FrameStackT<float> project_to_frames<float>(const VolumeT<float>&,
                                                     const FanGeometry&,
                                                     FanInterp, double);
template FrameStackT<uint8_t> project_to_frames<uint8_t>(
    const VolumeT<uint8_t>&, const FanGeometry&, FanInterp, double);

}  // namespace mus
