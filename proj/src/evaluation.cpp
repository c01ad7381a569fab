#include "mus/evaluation.hpp"

#include <algorithm>
#include <cmath>

namespace mus {

LesionSet extract_lesions(const LabelVolume& mask, Connectivity conn) {
  const LabeledComponents comps = connected_components(mask, conn);
  LesionSet out;
  out.grid = comps.grid;
  out.lesions.resize(comps.counts.size());
  for (size_t k = 0; k < comps.counts.size(); ++k) {
    out.lesions[k].id = static_cast<int32_t>(k + 1);
    out.lesions[k].voxels.reserve(static_cast<size_t>(comps.counts[k]));
  }
  for (size_t i = 0; i < comps.ids.size(); ++i)
    if (comps.ids[i] > 0)
      out.lesions[static_cast<size_t>(comps.ids[i] - 1)].voxels.push_back(
          static_cast<int64_t>(i));
  return out;
}

namespace {

int64_t intersection_size(const std::vector<int64_t>& a,
                          const std::vector<int64_t>& b) {
  int64_t n = 0;
  size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] < b[j])
      ++i;
    else if (b[j] < a[i])
      ++j;
    else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

int64_t count_fg(const LabelVolume& m) {
  int64_t n = 0;
  for (uint8_t v : m.values) n += v != 0;
  return n;
}

std::optional<double> ratio(int64_t num, int64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

LesionMatch match_lesions(const LesionSet& pred, const LesionSet& gt,
                          double overlap_threshold, OverlapDenominator denom) {
  require(pred.grid == gt.grid, "lesion sets live on different grids");
  require(overlap_threshold >= 0 && overlap_threshold < 1,
          "overlap threshold must lie in [0, 1)");
  LesionMatch m;
  m.gt_detected.assign(gt.lesions.size(), false);
  m.pred_matched.assign(pred.lesions.size(), false);
  for (size_t gi = 0; gi < gt.lesions.size(); ++gi) {
    const auto& g = gt.lesions[gi];
    for (size_t pi = 0; pi < pred.lesions.size(); ++pi) {
      const auto& p = pred.lesions[pi];
      const int64_t inter = intersection_size(p.voxels, g.voxels);
      if (inter == 0) continue;
      const auto den =
          denom == OverlapDenominator::gt_lesion
              ? static_cast<double>(g.voxels.size())
              : static_cast<double>(p.voxels.size() + g.voxels.size()) -
                    static_cast<double>(inter);
      if (static_cast<double>(inter) / den > overlap_threshold) {
        m.gt_detected[gi] = true;
        m.pred_matched[pi] = true;
      }
    }
  }
  for (bool d : m.gt_detected) (d ? m.counts.tp : m.counts.fn)++;
  for (bool d : m.pred_matched)
    if (!d) ++m.counts.fp;
  return m;
}

SectorMap sector_partition(const LabelVolume& prostate_mask, int64_t sectors,
                           int64_t thirds) {
  prostate_mask.validate();
  require(sectors >= 1 && thirds >= 1, "sector/third counts must be >= 1");
  const auto& d = prostate_mask.grid.dims;

  // z-slab boundaries at (as close as possible) equal cumulative voxel count
  std::vector<int64_t> per_slice(static_cast<size_t>(d[2]), 0);
  int64_t total = 0;
  for (int64_t z = 0; z < d[2]; ++z)
    for (int64_t y = 0; y < d[1]; ++y)
      for (int64_t x = 0; x < d[0]; ++x)
        if (prostate_mask.at(x, y, z)) {
          ++per_slice[static_cast<size_t>(z)];
          ++total;
        }
  require(total > 0, "prostate mask is empty");

  std::vector<int64_t> slab_of(static_cast<size_t>(d[2]), thirds - 1);
  int64_t cum = 0, slab = 0;
  for (int64_t z = 0; z < d[2]; ++z) {
    // advance once the count below this slice reaches the next slab's start
    while (slab + 1 < thirds && cum * thirds >= (slab + 1) * total) ++slab;
    slab_of[static_cast<size_t>(z)] = slab;
    cum += per_slice[static_cast<size_t>(z)];
  }

  // in-plane centroid per slab (world coordinates)
  std::vector<double> cx(static_cast<size_t>(thirds), 0.0),
      cy(static_cast<size_t>(thirds), 0.0);
  std::vector<int64_t> n(static_cast<size_t>(thirds), 0);
  for (int64_t z = 0; z < d[2]; ++z) {
    const auto s = static_cast<size_t>(slab_of[static_cast<size_t>(z)]);
    for (int64_t y = 0; y < d[1]; ++y)
      for (int64_t x = 0; x < d[0]; ++x)
        if (prostate_mask.at(x, y, z)) {
          const Vec3 p = prostate_mask.grid.voxel_center(x, y, z);
          cx[s] += p[0];
          cy[s] += p[1];
          ++n[s];
        }
  }
  for (size_t s = 0; s < static_cast<size_t>(thirds); ++s)
    if (n[s] > 0) {
      cx[s] /= static_cast<double>(n[s]);
      cy[s] /= static_cast<double>(n[s]);
    }

  SectorMap out;
  out.grid = prostate_mask.grid;
  out.sectors = sectors;
  out.thirds = thirds;
  out.region.assign(prostate_mask.values.size(), 0);
  out.counts.assign(static_cast<size_t>(out.region_count()), 0);
  const double two_pi = 2.0 * 3.14159265358979323846;
  for (int64_t z = 0; z < d[2]; ++z) {
    const int64_t s = slab_of[static_cast<size_t>(z)];
    for (int64_t y = 0; y < d[1]; ++y)
      for (int64_t x = 0; x < d[0]; ++x) {
        if (!prostate_mask.at(x, y, z)) continue;
        const Vec3 p = prostate_mask.grid.voxel_center(x, y, z);
        const double ang = std::atan2(p[1] - cy[static_cast<size_t>(s)],
                                      p[0] - cx[static_cast<size_t>(s)]);
        auto bin = static_cast<int64_t>(
            std::floor((ang + 3.14159265358979323846) / two_pi *
                       static_cast<double>(sectors)));
        bin = std::clamp<int64_t>(bin, 0, sectors - 1);
        const int64_t id = s * sectors + bin + 1;
        out.region[static_cast<size_t>(prostate_mask.grid.index(x, y, z))] =
            static_cast<int32_t>(id);
        ++out.counts[static_cast<size_t>(id - 1)];
      }
  }
  return out;
}

ConfusionCounts sector_confusion(const LabelVolume& pred_mask,
                                 const LabelVolume& gt_mask,
                                 const SectorMap& sectors, int64_t min_voxels) {
  require(pred_mask.grid == gt_mask.grid && pred_mask.grid == sectors.grid,
          "masks and sector map live on different grids");
  require(min_voxels >= 1, "min_voxels must be >= 1");
  const int64_t R = sectors.region_count();
  std::vector<int64_t> pred_vox(static_cast<size_t>(R), 0),
      gt_vox(static_cast<size_t>(R), 0);
  for (size_t i = 0; i < sectors.region.size(); ++i) {
    const int32_t r = sectors.region[i];
    if (r == 0) continue;
    if (pred_mask.values[i]) ++pred_vox[static_cast<size_t>(r - 1)];
    if (gt_mask.values[i]) ++gt_vox[static_cast<size_t>(r - 1)];
  }
  ConfusionCounts c;
  for (int64_t r = 0; r < R; ++r) {
    const bool pp = pred_vox[static_cast<size_t>(r)] >= min_voxels;
    const bool gp = gt_vox[static_cast<size_t>(r)] >= min_voxels;
    if (pp && gp)
      ++c.tp;
    else if (pp && !gp)
      ++c.fp;
    else if (!pp && gp)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

ConfusionCounts combined_counts(const LesionMatch& lesions,
                                const ConfusionCounts& sector) {
  ConfusionCounts c;
  c.tp = lesions.counts.tp;
  c.fn = lesions.counts.fn;
  c.fp = sector.fp;
  c.tn = sector.tn;
  return c;
}

std::pair<bool, bool> patient_level(const LabelVolume& pred_mask,
                                    const LabelVolume& gt_mask) {
  require(pred_mask.grid == gt_mask.grid, "masks live on different grids");
  return {count_fg(pred_mask) > 0, count_fg(gt_mask) > 0};
}

std::optional<double> dsc(const LabelVolume& pred, const LabelVolume& gt) {
  require(pred.grid == gt.grid, "masks live on different grids");
  int64_t np = 0, ng = 0, ni = 0;
  for (size_t i = 0; i < pred.values.size(); ++i) {
    const bool p = pred.values[i] != 0, g = gt.values[i] != 0;
    np += p;
    ng += g;
    ni += p && g;
  }
  if (np + ng == 0) return std::nullopt;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(np + ng);
}

MetricsReport metrics(const ConfusionCounts& counts,
                      std::optional<double> dsc_value) {
  require(counts.tp >= 0 && counts.fp >= 0 && counts.fn >= 0 && counts.tn >= 0,
          "confusion counts must be non-negative");
  MetricsReport r;
  r.counts = counts;
  r.dsc = dsc_value;
  r.sensitivity = ratio(counts.tp, counts.tp + counts.fn);
  r.specificity = ratio(counts.tn, counts.tn + counts.fp);
  r.accuracy = ratio(counts.tp + counts.tn, counts.total());
  r.ppv = ratio(counts.tp, counts.tp + counts.fp);
  r.npv = ratio(counts.tn, counts.tn + counts.fn);
  if (r.ppv && r.sensitivity && *r.ppv + *r.sensitivity > 0)
    r.f1 = 2.0 * *r.ppv * *r.sensitivity / (*r.ppv + *r.sensitivity);
  return r;
}

}  // namespace mus
