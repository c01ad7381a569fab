#pragma once

#include <optional>

#include "mus/postproc.hpp"

namespace mus {

struct Lesion {
  int32_t id = 0;
  std::vector<int64_t> voxels;  // linear grid indices, ascending
};

struct LesionSet {
  GridSpec grid;
  std::vector<Lesion> lesions;
};

LesionSet extract_lesions(const LabelVolume& mask,
                          Connectivity conn = Connectivity::c26);

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  int64_t total() const { return tp + fp + fn + tn; }
};

// Denominator of the overlap fraction deciding a detection.
enum class OverlapDenominator { gt_lesion, iou };

struct LesionMatch {
  ConfusionCounts counts;          // tp/fn over GT lesions, fp over predictions
  std::vector<bool> gt_detected;   // per GT lesion
  std::vector<bool> pred_matched;  // per predicted lesion
};

// A GT lesion counts as detected iff some predicted lesion overlaps it
// STRICTLY more than the threshold (default fraction of the GT lesion's
// size; exactly 20% is a miss). One predicted lesion may detect several GT
// lesions; predictions matching nothing are false positives.
LesionMatch match_lesions(const LesionSet& pred, const LesionSet& gt,
                          double overlap_threshold = 0.20,
                          OverlapDenominator denom = OverlapDenominator::gt_lesion);

struct SectorMap {
  GridSpec grid;
  std::vector<int32_t> region;  // 0 outside the prostate, else 1..region_count
  std::vector<int64_t> counts;  // voxels per region (may be 0)
  int64_t sectors = 13, thirds = 3;

  int64_t region_count() const { return sectors * thirds; }
};

// Splits the prostate into `thirds` z-slabs of (as close as possible) equal
// prostate-voxel count, then into `sectors` equal angular bins around each
// slab's in-plane centroid. Regions partition the mask exactly.
SectorMap sector_partition(const LabelVolume& prostate_mask,
                           int64_t sectors = 13, int64_t thirds = 3);

// Region-level confusion: a region is positive for a mask iff it contains at
// least min_voxels of its foreground. Every region of the scheme is counted,
// including empty ones.
ConfusionCounts sector_confusion(const LabelVolume& pred_mask,
                                 const LabelVolume& gt_mask,
                                 const SectorMap& sectors,
                                 int64_t min_voxels = 1);

// Lesion-level counts with sector-based negatives: TP/FN from lesion
// matching, FP/TN from the sector scheme.
ConfusionCounts combined_counts(const LesionMatch& lesions,
                                const ConfusionCounts& sector);

// (prediction positive, ground truth positive): mask non-empty.
std::pair<bool, bool> patient_level(const LabelVolume& pred_mask,
                                    const LabelVolume& gt_mask);

// 2|P∩G| / (|P|+|G|); absent when both masks are empty.
std::optional<double> dsc(const LabelVolume& pred, const LabelVolume& gt);

// Ratios undefined at 0/0 are absent, never coerced to 0 or 1.
struct MetricsReport {
  ConfusionCounts counts;
  std::optional<double> sensitivity, specificity, accuracy, ppv, npv, f1, dsc;
};

MetricsReport metrics(const ConfusionCounts& counts,
                      std::optional<double> dsc_value = std::nullopt);

}  // namespace mus
