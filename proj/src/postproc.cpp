#include "mus/postproc.hpp"

#include <algorithm>
#include <cmath>

namespace mus {

namespace {

void check_binary(const LabelVolume& mask) {
  mask.validate();
  for (uint8_t v : mask.values)
    require(v <= 1, "mask must be binary (0/1)");
}

}  // namespace

LabelVolume closing(const LabelVolume& mask, int64_t kernel_size) {
  check_binary(mask);
  require(kernel_size >= 1 && kernel_size % 2 == 1,
          "kernel size must be odd and >= 1");
  const int64_t r = kernel_size / 2;
  const auto& d = mask.grid.dims;
  const int64_t px = d[0] + 2 * r, py = d[1] + 2 * r, pz = d[2] + 2 * r;

  std::vector<uint8_t> dil(static_cast<size_t>(px * py * pz), 0);
  auto didx = [&](int64_t x, int64_t y, int64_t z) {
    return static_cast<size_t>((z * py + y) * px + x);
  };
  // Padded cell (x,y,z) sits at original coordinates (x-r, y-r, z-r); it is
  // dilated iff any mask voxel lies within the element around that point.
  parallel_chunks(pz, [&](int64_t zlo, int64_t zhi) {
    for (int64_t z = zlo; z < zhi; ++z) {
      const int64_t z0 = std::max<int64_t>(z - 2 * r, 0);
      const int64_t z1 = std::min(z, d[2] - 1);
      for (int64_t y = 0; y < py; ++y) {
        const int64_t y0 = std::max<int64_t>(y - 2 * r, 0);
        const int64_t y1 = std::min(y, d[1] - 1);
        for (int64_t x = 0; x < px; ++x) {
          const int64_t x0 = std::max<int64_t>(x - 2 * r, 0);
          const int64_t x1 = std::min(x, d[0] - 1);
          bool hit = false;
          for (int64_t zz = z0; !hit && zz <= z1; ++zz)
            for (int64_t yy = y0; !hit && yy <= y1; ++yy)
              for (int64_t xx = x0; xx <= x1; ++xx)
                if (mask.values[static_cast<size_t>(
                        mask.grid.index(xx, yy, zz))]) {
                  hit = true;
                  break;
                }
          dil[didx(x, y, z)] = hit ? 1 : 0;
        }
      }
    }
  });

  LabelVolume out;
  out.grid = mask.grid;
  out.values.assign(mask.values.size(), 0);
  parallel_chunks(d[2], [&](int64_t zlo, int64_t zhi) {
    for (int64_t z = zlo; z < zhi; ++z)
      for (int64_t y = 0; y < d[1]; ++y)
        for (int64_t x = 0; x < d[0]; ++x) {
          bool all = true;
          for (int64_t dz = -r; all && dz <= r; ++dz)
            for (int64_t dy = -r; all && dy <= r; ++dy)
              for (int64_t dx = -r; dx <= r; ++dx)
                if (!dil[didx(x + dx + r, y + dy + r, z + dz + r)]) {
                  all = false;
                  break;
                }
          if (all)
            out.values[static_cast<size_t>(out.grid.index(x, y, z))] = 1;
        }
  });
  return out;
}

LabeledComponents connected_components(const LabelVolume& mask,
                                       Connectivity conn) {
  check_binary(mask);
  const auto& d = mask.grid.dims;

  std::vector<std::array<int64_t, 3>> offsets;
  for (int64_t dz = -1; dz <= 1; ++dz)
    for (int64_t dy = -1; dy <= 1; ++dy)
      for (int64_t dx = -1; dx <= 1; ++dx) {
        if (dx == 0 && dy == 0 && dz == 0) continue;
        const int64_t manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (conn == Connectivity::c6 && manhattan != 1) continue;
        if (conn == Connectivity::c8_2d && dz != 0) continue;
        offsets.push_back({dx, dy, dz});
      }

  LabeledComponents out;
  out.grid = mask.grid;
  out.connectivity = conn;
  out.ids.assign(mask.values.size(), 0);
  std::vector<int64_t> stack;
  for (int64_t z = 0; z < d[2]; ++z)
    for (int64_t y = 0; y < d[1]; ++y)
      for (int64_t x = 0; x < d[0]; ++x) {
        const int64_t i = mask.grid.index(x, y, z);
        if (!mask.values[static_cast<size_t>(i)] ||
            out.ids[static_cast<size_t>(i)])
          continue;
        const auto id = static_cast<int32_t>(out.counts.size() + 1);
        int64_t count = 0;
        stack.assign(1, i);
        out.ids[static_cast<size_t>(i)] = id;
        while (!stack.empty()) {
          const int64_t cur = stack.back();
          stack.pop_back();
          ++count;
          const int64_t cz = cur / (d[0] * d[1]);
          const int64_t cy = (cur / d[0]) % d[1];
          const int64_t cx = cur % d[0];
          for (const auto& o : offsets) {
            const int64_t nx = cx + o[0], ny = cy + o[1], nz = cz + o[2];
            if (nx < 0 || ny < 0 || nz < 0 || nx >= d[0] || ny >= d[1] ||
                nz >= d[2])
              continue;
            const int64_t ni = mask.grid.index(nx, ny, nz);
            if (mask.values[static_cast<size_t>(ni)] &&
                !out.ids[static_cast<size_t>(ni)]) {
              out.ids[static_cast<size_t>(ni)] = id;
              stack.push_back(ni);
            }
          }
        }
        out.counts.push_back(count);
      }
  return out;
}

LabelVolume filter_small(const LabeledComponents& comps, int64_t min_voxels) {
  LabelVolume out;
  out.grid = comps.grid;
  out.values.assign(comps.ids.size(), 0);
  for (size_t i = 0; i < comps.ids.size(); ++i) {
    const int32_t id = comps.ids[i];
    if (id > 0 && comps.counts[static_cast<size_t>(id - 1)] >= min_voxels)
      out.values[i] = 1;
  }
  return out;
}

int64_t scaled_min_voxels(const std::array<double, 3>& spacing_mm,
                          int64_t reference_min_voxels,
                          double reference_spacing_mm) {
  require(spacing_mm[0] > 0 && spacing_mm[1] > 0 && spacing_mm[2] > 0,
          "spacing must be > 0");
  require(reference_spacing_mm > 0 && reference_min_voxels >= 0,
          "reference threshold must be non-negative at positive spacing");
  const double ref_vol = std::pow(reference_spacing_mm, 3);
  const double cur_vol = spacing_mm[0] * spacing_mm[1] * spacing_mm[2];
  const auto scaled = static_cast<int64_t>(
      std::llround(static_cast<double>(reference_min_voxels) * ref_vol / cur_vol));
  return std::max<int64_t>(scaled, 1);
}

}  // namespace mus
