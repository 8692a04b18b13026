#include "zxyseg/phantom.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "zxyseg/config.hpp"
#include "zxyseg/rng.hpp"
#include "zxyseg/volume_io.hpp"

namespace zxyseg {

namespace {

using nlohmann::json;

struct Ellipsoid {
  std::array<double, 3> center;  // [z, y, x] voxel coordinates
  std::array<double, 3> semi;    // semi-axes in voxels

  // normalized radius; < 1 is inside
  double rho(double z, double y, double x) const {
    const double dz = (z - center[0]) / semi[0];
    const double dy = (y - center[1]) / semi[1];
    const double dx = (x - center[2]) / semi[2];
    return std::sqrt(dz * dz + dy * dy + dx * dx);
  }
};

constexpr int kPlacementAttempts = 1000;
constexpr double kCanalRhoLimit = 0.8;  // keeps canal voxels strictly interior

std::vector<Ellipsoid> place_teeth(const PhantomSpec& spec, Xoshiro256& rng) {
  std::vector<Ellipsoid> teeth;
  teeth.reserve(static_cast<size_t>(spec.n_teeth));
  for (int t = 0; t < spec.n_teeth; ++t) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      Ellipsoid e;
      for (int d = 0; d < 3; ++d) {
        const double lo_frac = (d == 0) ? 0.11 : 0.08;
        const double hi_frac = (d == 0) ? 0.16 : 0.13;
        e.semi[d] = std::max(3.0, rng.uniform(lo_frac, hi_frac) * spec.shape[d]);
      }
      bool fits = true;
      for (int d = 0; d < 3; ++d) {
        const double margin = e.semi[d] + 2.0;
        if (2.0 * margin >= spec.shape[d] - 1) {
          fits = false;
          break;
        }
        e.center[d] = rng.uniform(margin, spec.shape[d] - 1 - margin);
      }
      if (!fits) continue;
      const double r_new = *std::max_element(e.semi.begin(), e.semi.end());
      bool overlaps = false;
      for (const Ellipsoid& other : teeth) {
        const double r_other = *std::max_element(other.semi.begin(), other.semi.end());
        double d2 = 0;
        for (int d = 0; d < 3; ++d) {
          const double diff = e.center[d] - other.center[d];
          d2 += diff * diff;
        }
        if (std::sqrt(d2) <= r_new + r_other + 1.0) {
          overlaps = true;
          break;
        }
      }
      if (!overlaps) {
        teeth.push_back(e);
        placed = true;
      }
    }
    require(placed, "phantom.placement",
            "could not fit " + std::to_string(spec.n_teeth) + " non-overlapping teeth into " +
                std::to_string(spec.shape[0]) + "^3-ish volume after " +
                std::to_string(kPlacementAttempts) + " attempts");
  }
  return teeth;
}

void stamp_canal(const Ellipsoid& tooth, Xoshiro256& rng, const std::array<int, 3>& shape,
                 std::vector<std::uint8_t>& labels) {
  // polyline from apex (low z) toward crown with jittered interior points
  constexpr int kControl = 5;
  std::array<std::array<double, 3>, kControl> pts;
  for (int i = 0; i < kControl; ++i) {
    const double f = static_cast<double>(i) / (kControl - 1);
    const double z = tooth.center[0] + (-0.75 + 1.30 * f) * tooth.semi[0];
    double y = tooth.center[1];
    double x = tooth.center[2];
    if (i > 0 && i < kControl - 1) {
      y += rng.uniform(-0.12, 0.12) * tooth.semi[1];
      x += rng.uniform(-0.12, 0.12) * tooth.semi[2];
    }
    pts[i] = {z, y, x};
  }
  const double radius = rng.uniform(1.0, 1.9);

  auto stamp_ball = [&](const std::array<double, 3>& c) {
    const int z0 = std::max(0, static_cast<int>(std::floor(c[0] - radius)));
    const int z1 = std::min(shape[0] - 1, static_cast<int>(std::ceil(c[0] + radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(c[1] - radius)));
    const int y1 = std::min(shape[1] - 1, static_cast<int>(std::ceil(c[1] + radius)));
    const int x0 = std::max(0, static_cast<int>(std::floor(c[2] - radius)));
    const int x1 = std::min(shape[2] - 1, static_cast<int>(std::ceil(c[2] + radius)));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double dz = z - c[0], dy = y - c[1], dx = x - c[2];
          if (dz * dz + dy * dy + dx * dx > radius * radius) continue;
          if (tooth.rho(z, y, x) > kCanalRhoLimit) continue;
          const std::int64_t idx = flat_index(shape, z, y, x);
          if (labels[static_cast<size_t>(idx)] == 1) labels[static_cast<size_t>(idx)] = 2;
        }
  };

  for (int s = 0; s + 1 < kControl; ++s) {
    double seg_len = 0;
    for (int d = 0; d < 3; ++d) {
      const double diff = pts[s + 1][d] - pts[s][d];
      seg_len += diff * diff;
    }
    seg_len = std::sqrt(seg_len);
    const int steps = std::max(1, static_cast<int>(std::ceil(seg_len / 0.5)));
    for (int k = 0; k <= steps; ++k) {
      const double f = static_cast<double>(k) / steps;
      std::array<double, 3> p;
      for (int d = 0; d < 3; ++d) p[d] = pts[s][d] + f * (pts[s + 1][d] - pts[s][d]);
      stamp_ball(p);
    }
  }
}

void gaussian_blur_1vox(std::vector<double>& v, const std::array<int, 3>& shape) {
  constexpr int kRadius = 3;
  double w[2 * kRadius + 1];
  double sum = 0;
  for (int i = -kRadius; i <= kRadius; ++i) {
    w[i + kRadius] = std::exp(-0.5 * i * i);
    sum += w[i + kRadius];
  }
  for (double& x : w) x /= sum;

  const int Z = shape[0], Y = shape[1], X = shape[2];
  std::vector<double> tmp(v.size());
  auto pass = [&](int axis, const std::vector<double>& src, std::vector<double>& dst) {
    const int n = shape[axis];
    for (int z = 0; z < Z; ++z)
      for (int y = 0; y < Y; ++y)
        for (int x = 0; x < X; ++x) {
          double acc = 0;
          const int pos = axis == 0 ? z : (axis == 1 ? y : x);
          for (int i = -kRadius; i <= kRadius; ++i) {
            const int q = std::clamp(pos + i, 0, n - 1);
            const int zz = axis == 0 ? q : z, yy = axis == 1 ? q : y, xx = axis == 2 ? q : x;
            acc += w[i + kRadius] * src[static_cast<size_t>(flat_index(shape, zz, yy, xx))];
          }
          dst[static_cast<size_t>(flat_index(shape, z, y, x))] = acc;
        }
  };
  pass(2, v, tmp);
  pass(1, tmp, v);
  pass(0, v, tmp);
  v.swap(tmp);
}

}  // namespace

void PhantomSpec::validate() const {
  for (int d : shape) require(d >= 32, "phantom.spec", "phantom shape components must be >= 32");
  for (double s : spacing_mm) require(s > 0, "phantom.spec", "spacing must be > 0");
  require(n_teeth >= 1, "phantom.spec", "n_teeth must be >= 1");
  require(noise_sigma >= 0, "phantom.spec", "noise_sigma must be >= 0");
  for (double v : {intensity_bone, intensity_tooth, intensity_canal})
    require(v >= 0 && v <= 2500, "phantom.spec", "intensities must lie in [0, 2500]");
  require(intensity_canal < intensity_bone && intensity_bone < intensity_tooth, "phantom.spec",
          "intensities must satisfy canal < bone < tooth");
}

std::pair<Volume3D, LabelVolume> generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  std::uint64_t geom_seed_src = spec.seed;
  Xoshiro256 geom(splitmix64(geom_seed_src));
  std::uint64_t noise_seed_src = spec.seed ^ 0x6e6f697365ULL;  // independent noise stream
  Xoshiro256 noise(splitmix64(noise_seed_src));

  const auto& shape = spec.shape;
  const std::int64_t n = static_cast<std::int64_t>(shape[0]) * shape[1] * shape[2];

  LabelVolume lbl;
  lbl.header.shape = shape;
  lbl.header.spacing_mm = spec.spacing_mm;
  lbl.header.dtype = "uint8";
  lbl.labels.assign(static_cast<size_t>(n), 0);

  const auto teeth = place_teeth(spec, geom);
  for (const Ellipsoid& e : teeth) {
    const int z0 = std::max(0, static_cast<int>(std::floor(e.center[0] - e.semi[0])));
    const int z1 = std::min(shape[0] - 1, static_cast<int>(std::ceil(e.center[0] + e.semi[0])));
    const int y0 = std::max(0, static_cast<int>(std::floor(e.center[1] - e.semi[1])));
    const int y1 = std::min(shape[1] - 1, static_cast<int>(std::ceil(e.center[1] + e.semi[1])));
    const int x0 = std::max(0, static_cast<int>(std::floor(e.center[2] - e.semi[2])));
    const int x1 = std::min(shape[2] - 1, static_cast<int>(std::ceil(e.center[2] + e.semi[2])));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
          if (e.rho(z, y, x) < 1.0)
            lbl.labels[static_cast<size_t>(flat_index(shape, z, y, x))] = 1;
  }
  for (const Ellipsoid& e : teeth) stamp_canal(e, geom, shape, lbl.labels);

  std::vector<double> intensity(static_cast<size_t>(n));
  const double base[3] = {spec.intensity_bone, spec.intensity_tooth, spec.intensity_canal};
  for (std::int64_t i = 0; i < n; ++i) {
    double v = base[lbl.labels[static_cast<size_t>(i)]];
    if (spec.noise_sigma > 0) v += spec.noise_sigma * noise.gaussian();
    intensity[static_cast<size_t>(i)] = v;
  }
  if (spec.blur) gaussian_blur_1vox(intensity, shape);

  Volume3D img;
  img.header.shape = shape;
  img.header.spacing_mm = spec.spacing_mm;
  img.header.dtype = "float32";
  img.voxels.resize(static_cast<size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    img.voxels[static_cast<size_t>(i)] =
        static_cast<float>(std::clamp(intensity[static_cast<size_t>(i)], 0.0, 2500.0));
  return {std::move(img), std::move(lbl)};
}

DatasetManifest generate_dataset(int n_cases, std::uint64_t base_seed, const PhantomSpec& spec,
                                 const std::filesystem::path& out_dir) {
  require(n_cases >= 1, "phantom.dataset", "n_cases must be >= 1");
  spec.validate();
  std::filesystem::create_directories(out_dir);

  DatasetManifest m;
  m.spec = spec;
  m.base_seed = base_seed;
  const int n_train = std::max(1, static_cast<int>(std::floor(0.70 * n_cases)));
  const int n_val = static_cast<int>(std::floor(0.15 * n_cases));
  for (int i = 0; i < n_cases; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "case_%04d", i);
    PhantomSpec cs = spec;
    cs.seed = base_seed + static_cast<std::uint64_t>(i);
    auto [img, lbl] = generate_phantom(cs);
    write_volume(img, out_dir / (std::string(stem) + "_image"));
    write_volume(lbl, out_dir / (std::string(stem) + "_label"));
    DatasetCase c;
    c.stem = stem;
    c.split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    m.cases.push_back(std::move(c));
  }
  write_manifest(m, out_dir / "manifest.json");
  return m;
}

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  json j;
  j["cases"] = json::array();
  for (const auto& c : m.cases) j["cases"].push_back({{"stem", c.stem}, {"split", c.split}});
  j["spec"] = phantom_spec_to_json(m.spec);
  j["base_seed"] = m.base_seed;
  std::ofstream out(path);
  require(out.good(), "io.unwritable", "cannot write manifest " + path.string());
  out << j.dump(2) << "\n";
  require(out.good(), "io.unwritable", "failed writing manifest " + path.string());
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "io.missing_file", "cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail("io.bad_manifest", "invalid manifest JSON: " + std::string(e.what()));
  }
  DatasetManifest m;
  try {
    for (const auto& cj : j.at("cases")) {
      DatasetCase c;
      c.stem = cj.at("stem").get<std::string>();
      c.split = cj.at("split").get<std::string>();
      require(c.split == "train" || c.split == "val" || c.split == "test", "io.bad_manifest",
              "unknown split '" + c.split + "'");
      m.cases.push_back(std::move(c));
    }
    m.spec = phantom_spec_from_json(j.at("spec"));
    m.base_seed = j.at("base_seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    fail("io.bad_manifest", "malformed manifest: " + std::string(e.what()));
  }
  return m;
}

}  // namespace zxyseg
