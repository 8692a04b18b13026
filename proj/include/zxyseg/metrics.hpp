#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "zxyseg/volume.hpp"

namespace zxyseg {

struct OverlapMetrics {
  double dice = 0;
  double jaccard = 0;
  double sensitivity = 0;
  bool sensitivity_defined = true;
};

struct SurfaceDistances {
  double hd95_mm = 0;
  double asd_mm = 0;
};

struct ClassMetrics {
  double dice = 0;
  double jaccard = 0;
  double sensitivity = 0;
  bool sensitivity_defined = true;
  double hd95_mm = 0;
  double asd_mm = 0;
  bool distances_defined = true;
};

// Per-class report for one case; classes are tooth (label 1) and
// root canal (label 2).
struct MetricsReport {
  std::string case_id;
  ClassMetrics tooth;
  ClassMetrics root_canal;
};

// dice = 2|P&G|/(|P|+|G|), jaccard = |P&G|/|P|G|union, sensitivity = |P&G|/|G|.
// Both empty: all three are 1. Only G empty: sensitivity flagged undefined.
OverlapMetrics overlap_metrics(const std::vector<std::uint8_t>& pred,
                               const std::vector<std::uint8_t>& gt);

// Surfaces are mask voxels with a 6-neighbour outside the mask (the volume
// boundary counts as outside). HD95 is the 95th percentile (linear
// interpolation) of the concatenated bidirectional nearest-surface distance
// multiset; ASD is its mean. Distances are voxel-centre Euclidean in mm.
// Throws if either mask is empty.
SurfaceDistances surface_distances(const std::vector<std::uint8_t>& pred,
                                   const std::vector<std::uint8_t>& gt,
                                   const std::array<int, 3>& shape,
                                   const std::array<double, 3>& spacing_mm);

MetricsReport evaluate_case(const LabelVolume& pred, const LabelVolume& gt,
                            const std::string& case_id = "");

std::string metrics_report_json(const MetricsReport& r);

struct AggregateStat {
  double mean = 0;
  double stddev = 0;  // sample standard deviation; 0 when n < 2
  int n = 0;
};

// mean +/- sample std per metric per class across cases; undefined entries
// are excluded from the aggregation.
std::string aggregate_reports_json(const std::vector<MetricsReport>& reports);

}  // namespace zxyseg
