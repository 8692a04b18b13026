#include "zxyseg/volume_io.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace zxyseg {

static_assert(std::endian::native == std::endian::little,
              "raw volume payloads are little-endian");

namespace {

using nlohmann::json;

namespace fs = std::filesystem;

fs::path stem_of(const fs::path& path) {
  if (path.extension() == ".json" || path.extension() == ".raw") {
    fs::path p = path;
    p.replace_extension();
    return p;
  }
  return path;
}

VolumeHeader read_header(const fs::path& json_path) {
  std::ifstream in(json_path);
  require(in.good(), "io.missing_file", "cannot open header " + json_path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail("io.bad_header", "invalid JSON in " + json_path.string() + ": " + e.what());
  }
  for (const auto& item : j.items()) {
    const std::string& k = item.key();
    require(k == "shape" || k == "spacing_mm" || k == "dtype" || k == "order", "io.bad_header",
            "unknown header key '" + k + "' in " + json_path.string());
  }
  require(j.contains("shape") && j.contains("spacing_mm") && j.contains("dtype") &&
              j.contains("order"),
          "io.bad_header", "header must contain shape, spacing_mm, dtype, order");
  require(j["order"] == kVoxelOrder, "io.bad_header",
          "unsupported voxel order in " + json_path.string());
  VolumeHeader h;
  try {
    for (int i = 0; i < 3; ++i) {
      h.shape[i] = j["shape"].at(i).get<int>();
      h.spacing_mm[i] = j["spacing_mm"].at(i).get<double>();
    }
    h.dtype = j["dtype"].get<std::string>();
  } catch (const json::exception& e) {
    fail("io.bad_header", "malformed header " + json_path.string() + ": " + e.what());
  }
  h.validate();
  return h;
}

void write_header(const VolumeHeader& h, const fs::path& json_path) {
  json j;
  j["shape"] = h.shape;
  j["spacing_mm"] = h.spacing_mm;
  j["dtype"] = h.dtype;
  j["order"] = kVoxelOrder;
  std::ofstream out(json_path);
  require(out.good(), "io.unwritable", "cannot write " + json_path.string());
  out << j.dump(2) << "\n";
  require(out.good(), "io.unwritable", "failed writing " + json_path.string());
}

std::vector<char> read_raw(const fs::path& raw_path, std::int64_t expected_bytes) {
  std::ifstream in(raw_path, std::ios::binary | std::ios::ate);
  require(in.good(), "io.missing_file", "cannot open raw file " + raw_path.string());
  const std::int64_t actual = static_cast<std::int64_t>(in.tellg());
  require(actual == expected_bytes, "io.size_mismatch",
          raw_path.string() + ": raw file has " + std::to_string(actual) +
              " bytes, header implies " + std::to_string(expected_bytes));
  std::vector<char> bytes(static_cast<size_t>(expected_bytes));
  in.seekg(0);
  in.read(bytes.data(), expected_bytes);
  require(in.good(), "io.read_failed", "short read from " + raw_path.string());
  return bytes;
}

void write_raw(const void* data, std::int64_t bytes, const fs::path& raw_path) {
  std::ofstream out(raw_path, std::ios::binary | std::ios::trunc);
  require(out.good(), "io.unwritable", "cannot write " + raw_path.string());
  out.write(static_cast<const char*>(data), bytes);
  require(out.good(), "io.unwritable", "failed writing " + raw_path.string());
}

int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

// align-corners source coordinate of output index i
double src_coord(int i, int out_n, int in_n) {
  if (out_n <= 1 || in_n <= 1) return 0.0;
  return static_cast<double>(i) * (in_n - 1) / static_cast<double>(out_n - 1);
}

std::vector<float> resample_trilinear(const std::vector<float>& in,
                                      const std::array<int, 3>& in_shape,
                                      const std::array<int, 3>& out_shape) {
  std::vector<float> out(static_cast<size_t>(static_cast<std::int64_t>(out_shape[0]) *
                                             out_shape[1] * out_shape[2]));
  const int IZ = in_shape[0], IY = in_shape[1], IX = in_shape[2];
  std::int64_t o = 0;
  for (int z = 0; z < out_shape[0]; ++z) {
    const double fz = src_coord(z, out_shape[0], IZ);
    const int z0 = std::min(static_cast<int>(fz), IZ - 1), z1 = std::min(z0 + 1, IZ - 1);
    const double wz = fz - z0;
    for (int y = 0; y < out_shape[1]; ++y) {
      const double fy = src_coord(y, out_shape[1], IY);
      const int y0 = std::min(static_cast<int>(fy), IY - 1), y1 = std::min(y0 + 1, IY - 1);
      const double wy = fy - y0;
      for (int x = 0; x < out_shape[2]; ++x, ++o) {
        const double fx = src_coord(x, out_shape[2], IX);
        const int x0 = std::min(static_cast<int>(fx), IX - 1), x1 = std::min(x0 + 1, IX - 1);
        const double wx = fx - x0;
        auto at = [&](int zz, int yy, int xx) {
          return static_cast<double>(in[flat_index(in_shape, zz, yy, xx)]);
        };
        const double c00 = at(z0, y0, x0) * (1 - wx) + at(z0, y0, x1) * wx;
        const double c01 = at(z0, y1, x0) * (1 - wx) + at(z0, y1, x1) * wx;
        const double c10 = at(z1, y0, x0) * (1 - wx) + at(z1, y0, x1) * wx;
        const double c11 = at(z1, y1, x0) * (1 - wx) + at(z1, y1, x1) * wx;
        const double c0 = c00 * (1 - wy) + c01 * wy;
        const double c1 = c10 * (1 - wy) + c11 * wy;
        out[static_cast<size_t>(o)] = static_cast<float>(c0 * (1 - wz) + c1 * wz);
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> resample_nearest(const std::vector<std::uint8_t>& in,
                                           const std::array<int, 3>& in_shape,
                                           const std::array<int, 3>& out_shape) {
  std::vector<std::uint8_t> out(static_cast<size_t>(static_cast<std::int64_t>(out_shape[0]) *
                                                    out_shape[1] * out_shape[2]));
  std::int64_t o = 0;
  for (int z = 0; z < out_shape[0]; ++z) {
    const int sz = std::min(round_half_up(src_coord(z, out_shape[0], in_shape[0])), in_shape[0] - 1);
    for (int y = 0; y < out_shape[1]; ++y) {
      const int sy =
          std::min(round_half_up(src_coord(y, out_shape[1], in_shape[1])), in_shape[1] - 1);
      for (int x = 0; x < out_shape[2]; ++x, ++o) {
        const int sx =
            std::min(round_half_up(src_coord(x, out_shape[2], in_shape[2])), in_shape[2] - 1);
        out[static_cast<size_t>(o)] = in[flat_index(in_shape, sz, sy, sx)];
      }
    }
  }
  return out;
}

std::array<int, 3> isotropic_shape(const VolumeHeader& h, double target_mm) {
  std::array<int, 3> s;
  for (int i = 0; i < 3; ++i)
    s[i] = std::max(1, round_half_up(h.shape[i] * h.spacing_mm[i] / target_mm));
  return s;
}

std::array<double, 3> rescaled_spacing(const VolumeHeader& h, const std::array<int, 3>& out_shape) {
  std::array<double, 3> s;
  for (int i = 0; i < 3; ++i)
    s[i] = h.spacing_mm[i] * static_cast<double>(h.shape[i]) / out_shape[i];
  return s;
}

}  // namespace

AnyVolume read_volume(const fs::path& path) {
  const fs::path stem = stem_of(path);
  const VolumeHeader h = read_header(stem.string() + ".json");
  if (h.dtype == "float32") {
    const auto bytes = read_raw(stem.string() + ".raw", h.voxel_count() * 4);
    Volume3D v;
    v.header = h;
    v.voxels.resize(static_cast<size_t>(h.voxel_count()));
    std::memcpy(v.voxels.data(), bytes.data(), bytes.size());
    for (float f : v.voxels)
      require(std::isfinite(f), "volume.values", "non-finite voxel in " + stem.string());
    return v;
  }
  const auto bytes = read_raw(stem.string() + ".raw", h.voxel_count());
  LabelVolume v;
  v.header = h;
  v.labels.resize(static_cast<size_t>(h.voxel_count()));
  std::memcpy(v.labels.data(), bytes.data(), bytes.size());
  v.validate();
  return v;
}

Volume3D read_image(const fs::path& path) {
  AnyVolume v = read_volume(path);
  require(std::holds_alternative<Volume3D>(v), "io.dtype",
          path.string() + " does not hold a float32 image");
  return std::get<Volume3D>(std::move(v));
}

LabelVolume read_labels(const fs::path& path) {
  AnyVolume v = read_volume(path);
  require(std::holds_alternative<LabelVolume>(v), "io.dtype",
          path.string() + " does not hold a uint8 label mask");
  return std::get<LabelVolume>(std::move(v));
}

void write_volume(const Volume3D& v, const fs::path& stem) {
  v.validate();
  write_header(v.header, stem.string() + ".json");
  write_raw(v.voxels.data(), static_cast<std::int64_t>(v.voxels.size()) * 4,
            stem.string() + ".raw");
}

void write_volume(const LabelVolume& v, const fs::path& stem) {
  v.validate();
  write_header(v.header, stem.string() + ".json");
  write_raw(v.labels.data(), static_cast<std::int64_t>(v.labels.size()), stem.string() + ".raw");
}

Volume3D resample_isotropic(const Volume3D& v, double target_mm) {
  require(target_mm > 0.0, "resample.target", "target spacing must be > 0");
  v.validate();
  const auto out_shape = isotropic_shape(v.header, target_mm);
  Volume3D out;
  out.header.shape = out_shape;
  out.header.spacing_mm = {target_mm, target_mm, target_mm};
  out.header.dtype = "float32";
  out.voxels = resample_trilinear(v.voxels, v.header.shape, out_shape);
  return out;
}

LabelVolume resample_isotropic(const LabelVolume& v, double target_mm) {
  require(target_mm > 0.0, "resample.target", "target spacing must be > 0");
  v.validate();
  const auto out_shape = isotropic_shape(v.header, target_mm);
  LabelVolume out;
  out.header.shape = out_shape;
  out.header.spacing_mm = {target_mm, target_mm, target_mm};
  out.header.dtype = "uint8";
  out.labels = resample_nearest(v.labels, v.header.shape, out_shape);
  return out;
}

Volume3D resize_to(const Volume3D& v, const std::array<int, 3>& shape) {
  for (int d : shape) require(d >= 1, "resample.shape", "requested shape must be positive");
  v.validate();
  Volume3D out;
  out.header.shape = shape;
  out.header.spacing_mm = rescaled_spacing(v.header, shape);
  out.header.dtype = "float32";
  out.voxels = resample_trilinear(v.voxels, v.header.shape, shape);
  return out;
}

LabelVolume resize_to(const LabelVolume& v, const std::array<int, 3>& shape) {
  for (int d : shape) require(d >= 1, "resample.shape", "requested shape must be positive");
  v.validate();
  LabelVolume out;
  out.header.shape = shape;
  out.header.spacing_mm = rescaled_spacing(v.header, shape);
  out.header.dtype = "uint8";
  out.labels = resample_nearest(v.labels, v.header.shape, shape);
  return out;
}

Volume3D clip_and_normalize(const Volume3D& v, double lo, double hi) {
  require(hi > lo, "normalize.bounds", "normalization requires hi > lo");
  v.validate();
  Volume3D out = v;
  const double scale = 1.0 / (hi - lo);
  for (float& f : out.voxels) {
    const double c = std::min(std::max(static_cast<double>(f), lo), hi);
    f = static_cast<float>((c - lo) * scale);
  }
  return out;
}

}  // namespace zxyseg
