#include "zxyseg/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace zxyseg {

namespace {

using nlohmann::json;

constexpr double kInf = std::numeric_limits<double>::infinity();

// mask voxels with at least one 6-neighbour outside the mask; the volume
// boundary counts as outside
std::vector<std::int64_t> surface_voxels(const std::vector<std::uint8_t>& mask,
                                         const std::array<int, 3>& shape) {
  std::vector<std::int64_t> surf;
  const int Z = shape[0], Y = shape[1], X = shape[2];
  std::int64_t idx = 0;
  for (int z = 0; z < Z; ++z)
    for (int y = 0; y < Y; ++y)
      for (int x = 0; x < X; ++x, ++idx) {
        if (!mask[static_cast<size_t>(idx)]) continue;
        const bool boundary =
            z == 0 || z == Z - 1 || y == 0 || y == Y - 1 || x == 0 || x == X - 1 ||
            !mask[static_cast<size_t>(idx - static_cast<std::int64_t>(Y) * X)] ||
            !mask[static_cast<size_t>(idx + static_cast<std::int64_t>(Y) * X)] ||
            !mask[static_cast<size_t>(idx - X)] || !mask[static_cast<size_t>(idx + X)] ||
            !mask[static_cast<size_t>(idx - 1)] || !mask[static_cast<size_t>(idx + 1)];
        if (boundary) surf.push_back(idx);
      }
  return surf;
}

// Felzenszwalb-Huttenlocher 1-d squared distance transform with sample
// positions i*step. f is overwritten with the lower envelope values.
void edt_1d(std::vector<double>& f, double step, std::vector<double>& d, std::vector<int>& v,
            std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  if (n == 1) {
    return;
  }
  v.assign(static_cast<size_t>(n), 0);
  z.assign(static_cast<size_t>(n) + 1, 0.0);
  d.assign(static_cast<size_t>(n), 0.0);
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  auto sq = [](double x) { return x * x; };
  for (int q = 1; q < n; ++q) {
    if (f[static_cast<size_t>(q)] == kInf) continue;
    if (f[static_cast<size_t>(v[static_cast<size_t>(k)])] == kInf) {
      v[static_cast<size_t>(k)] = q;
      z[static_cast<size_t>(k)] = -kInf;
      z[static_cast<size_t>(k) + 1] = kInf;
      continue;
    }
    double s;
    for (;;) {
      const int p = v[static_cast<size_t>(k)];
      s = ((f[static_cast<size_t>(q)] + sq(q * step)) - (f[static_cast<size_t>(p)] + sq(p * step))) /
          (2.0 * step * step * (q - p));
      if (s <= z[static_cast<size_t>(k)] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<size_t>(k)] = q;
    z[static_cast<size_t>(k)] = s;
    z[static_cast<size_t>(k) + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<size_t>(k) + 1] < q) ++k;
    const int p = v[static_cast<size_t>(k)];
    if (f[static_cast<size_t>(p)] == kInf) {
      d[static_cast<size_t>(q)] = kInf;
    } else {
      d[static_cast<size_t>(q)] = sq((q - p) * step) + f[static_cast<size_t>(p)];
    }
  }
  std::copy(d.begin(), d.end(), f.begin());
}

// exact squared Euclidean distance (mm^2) from every voxel centre to the
// nearest seed voxel centre
std::vector<double> squared_edt(const std::vector<std::int64_t>& seeds,
                                const std::array<int, 3>& shape,
                                const std::array<double, 3>& spacing) {
  const int Z = shape[0], Y = shape[1], X = shape[2];
  std::vector<double> g(static_cast<size_t>(static_cast<std::int64_t>(Z) * Y * X), kInf);
  for (std::int64_t s : seeds) g[static_cast<size_t>(s)] = 0.0;

  const int nmax = std::max({Z, Y, X});
  std::vector<double> line(static_cast<size_t>(nmax)), d;
  std::vector<int> v;
  std::vector<double> zbuf;

  // x pass
  for (int z = 0; z < Z; ++z)
    for (int y = 0; y < Y; ++y) {
      line.assign(static_cast<size_t>(X), 0.0);
      const std::int64_t base = flat_index(shape, z, y, 0);
      for (int x = 0; x < X; ++x) line[static_cast<size_t>(x)] = g[static_cast<size_t>(base + x)];
      edt_1d(line, spacing[2], d, v, zbuf);
      for (int x = 0; x < X; ++x) g[static_cast<size_t>(base + x)] = line[static_cast<size_t>(x)];
    }
  // y pass
  for (int z = 0; z < Z; ++z)
    for (int x = 0; x < X; ++x) {
      line.assign(static_cast<size_t>(Y), 0.0);
      for (int y = 0; y < Y; ++y)
        line[static_cast<size_t>(y)] = g[static_cast<size_t>(flat_index(shape, z, y, x))];
      edt_1d(line, spacing[1], d, v, zbuf);
      for (int y = 0; y < Y; ++y)
        g[static_cast<size_t>(flat_index(shape, z, y, x))] = line[static_cast<size_t>(y)];
    }
  // z pass
  for (int y = 0; y < Y; ++y)
    for (int x = 0; x < X; ++x) {
      line.assign(static_cast<size_t>(Z), 0.0);
      for (int z = 0; z < Z; ++z)
        line[static_cast<size_t>(z)] = g[static_cast<size_t>(flat_index(shape, z, y, x))];
      edt_1d(line, spacing[0], d, v, zbuf);
      for (int z = 0; z < Z; ++z)
        g[static_cast<size_t>(flat_index(shape, z, y, x))] = line[static_cast<size_t>(z)];
    }
  return g;
}

// linear-interpolation percentile of a sorted sample
double percentile_sorted(const std::vector<double>& sorted, double q) {
  const size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double rank = q * static_cast<double>(n - 1);
  const size_t lo = static_cast<size_t>(rank);
  if (lo + 1 >= n) return sorted[n - 1];
  const double frac = rank - static_cast<double>(lo);
  return sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac;
}

std::vector<std::uint8_t> class_mask(const LabelVolume& v, std::uint8_t cls) {
  std::vector<std::uint8_t> m(v.labels.size());
  for (size_t i = 0; i < m.size(); ++i) m[i] = v.labels[i] == cls ? 1 : 0;
  return m;
}

ClassMetrics class_metrics(const std::vector<std::uint8_t>& pred,
                           const std::vector<std::uint8_t>& gt, const std::array<int, 3>& shape,
                           const std::array<double, 3>& spacing) {
  ClassMetrics cm;
  const OverlapMetrics om = overlap_metrics(pred, gt);
  cm.dice = om.dice;
  cm.jaccard = om.jaccard;
  cm.sensitivity = om.sensitivity;
  cm.sensitivity_defined = om.sensitivity_defined;
  const bool pred_nonempty = std::find(pred.begin(), pred.end(), 1) != pred.end();
  const bool gt_nonempty = std::find(gt.begin(), gt.end(), 1) != gt.end();
  if (pred_nonempty && gt_nonempty) {
    const SurfaceDistances sd = surface_distances(pred, gt, shape, spacing);
    cm.hd95_mm = sd.hd95_mm;
    cm.asd_mm = sd.asd_mm;
    cm.distances_defined = true;
  } else {
    cm.distances_defined = false;
  }
  return cm;
}

json class_metrics_json(const ClassMetrics& c) {
  json j;
  j["dice"] = c.dice;
  j["jaccard"] = c.jaccard;
  j["sensitivity"] = c.sensitivity_defined ? json(c.sensitivity) : json();
  j["hd95_mm"] = c.distances_defined ? json(c.hd95_mm) : json();
  j["asd_mm"] = c.distances_defined ? json(c.asd_mm) : json();
  return j;
}

}  // namespace

OverlapMetrics overlap_metrics(const std::vector<std::uint8_t>& pred,
                               const std::vector<std::uint8_t>& gt) {
  require(pred.size() == gt.size(), "metrics.shape", "mask sizes differ");
  std::int64_t np = 0, ng = 0, ni = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    np += p;
    ng += g;
    ni += p && g;
  }
  OverlapMetrics m;
  if (np == 0 && ng == 0) {
    m.dice = m.jaccard = m.sensitivity = 1.0;
    return m;
  }
  m.dice = 2.0 * static_cast<double>(ni) / static_cast<double>(np + ng);
  m.jaccard = static_cast<double>(ni) / static_cast<double>(np + ng - ni);
  if (ng == 0) {
    m.sensitivity = 0.0;
    m.sensitivity_defined = false;
  } else {
    m.sensitivity = static_cast<double>(ni) / static_cast<double>(ng);
  }
  return m;
}

SurfaceDistances surface_distances(const std::vector<std::uint8_t>& pred,
                                   const std::vector<std::uint8_t>& gt,
                                   const std::array<int, 3>& shape,
                                   const std::array<double, 3>& spacing_mm) {
  require(pred.size() == gt.size(), "metrics.shape", "mask sizes differ");
  const auto sp = surface_voxels(pred, shape);
  const auto sg = surface_voxels(gt, shape);
  require(!sp.empty() && !sg.empty(), "metrics.empty_mask",
          "surface distances are undefined for an empty mask");

  const auto dt_to_gt = squared_edt(sg, shape, spacing_mm);
  const auto dt_to_pred = squared_edt(sp, shape, spacing_mm);

  std::vector<double> dists;
  dists.reserve(sp.size() + sg.size());
  for (std::int64_t i : sp) dists.push_back(std::sqrt(dt_to_gt[static_cast<size_t>(i)]));
  for (std::int64_t i : sg) dists.push_back(std::sqrt(dt_to_pred[static_cast<size_t>(i)]));
  std::sort(dists.begin(), dists.end());

  SurfaceDistances sd;
  sd.hd95_mm = percentile_sorted(dists, 0.95);
  double sum = 0;
  for (double d : dists) sum += d;
  sd.asd_mm = sum / static_cast<double>(dists.size());
  return sd;
}

MetricsReport evaluate_case(const LabelVolume& pred, const LabelVolume& gt,
                            const std::string& case_id) {
  pred.validate();
  gt.validate();
  require(pred.header == gt.header, "metrics.header", "prediction and ground-truth headers differ");
  MetricsReport r;
  r.case_id = case_id;
  r.tooth = class_metrics(class_mask(pred, 1), class_mask(gt, 1), gt.header.shape,
                          gt.header.spacing_mm);
  r.root_canal = class_metrics(class_mask(pred, 2), class_mask(gt, 2), gt.header.shape,
                               gt.header.spacing_mm);
  return r;
}

std::string metrics_report_json(const MetricsReport& r) {
  json j;
  j["case"] = r.case_id;
  j["tooth"] = class_metrics_json(r.tooth);
  j["root_canal"] = class_metrics_json(r.root_canal);
  return j.dump(2);
}

std::string aggregate_reports_json(const std::vector<MetricsReport>& reports) {
  json j;
  j["cases"] = json::array();
  for (const auto& r : reports) j["cases"].push_back(json::parse(metrics_report_json(r)));

  auto aggregate = [&](auto select) {
    json out;
    const char* metric_names[] = {"dice", "jaccard", "sensitivity", "hd95_mm", "asd_mm"};
    for (int mi = 0; mi < 5; ++mi) {
      std::vector<double> vals;
      for (const auto& r : reports) {
        const ClassMetrics& c = select(r);
        switch (mi) {
          case 0: vals.push_back(c.dice); break;
          case 1: vals.push_back(c.jaccard); break;
          case 2:
            if (c.sensitivity_defined) vals.push_back(c.sensitivity);
            break;
          case 3:
            if (c.distances_defined) vals.push_back(c.hd95_mm);
            break;
          case 4:
            if (c.distances_defined) vals.push_back(c.asd_mm);
            break;
        }
      }
      json stat;
      if (vals.empty()) {
        stat["mean"] = json();
        stat["std"] = json();
      } else {
        double mean = 0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(vals.size());
        double var = 0;
        for (double v : vals) var += (v - mean) * (v - mean);
        const double stddev =
            vals.size() > 1 ? std::sqrt(var / static_cast<double>(vals.size() - 1)) : 0.0;
        stat["mean"] = mean;
        stat["std"] = stddev;
      }
      stat["n"] = vals.size();
      out[metric_names[mi]] = stat;
    }
    return out;
  };

  j["aggregate"]["tooth"] = aggregate([](const MetricsReport& r) -> const ClassMetrics& {
    return r.tooth;
  });
  j["aggregate"]["root_canal"] = aggregate([](const MetricsReport& r) -> const ClassMetrics& {
    return r.root_canal;
  });
  j["n_cases"] = reports.size();
  return j.dump(2);
}

}  // namespace zxyseg
