#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "zxyseg/error.hpp"

namespace zxyseg {

inline constexpr const char* kVoxelOrder = "zyx-x-fastest";

// Self-describing grid header. Axis order is fixed as [Z, Y, X] with x
// fastest in memory.
struct VolumeHeader {
  std::array<int, 3> shape{0, 0, 0};           // [Z, Y, X]
  std::array<double, 3> spacing_mm{0, 0, 0};   // [sz, sy, sx]
  std::string dtype;                           // "float32" | "uint8"

  std::int64_t voxel_count() const {
    return static_cast<std::int64_t>(shape[0]) * shape[1] * shape[2];
  }

  void validate() const {
    for (int d : shape) require(d >= 1, "volume.shape", "shape components must be >= 1");
    for (double s : spacing_mm)
      require(s > 0.0 && std::isfinite(s), "volume.spacing", "spacing components must be > 0");
    require(dtype == "float32" || dtype == "uint8", "volume.dtype",
            "dtype must be float32 or uint8, got '" + dtype + "'");
  }

  bool operator==(const VolumeHeader& o) const {
    return shape == o.shape && spacing_mm == o.spacing_mm && dtype == o.dtype;
  }
};

// Scalar voxel grid (float32 payload), [Z, Y, X] with x fastest.
struct Volume3D {
  VolumeHeader header;
  std::vector<float> voxels;

  void validate() const {
    header.validate();
    require(header.dtype == "float32", "volume.dtype", "Volume3D requires dtype float32");
    require(static_cast<std::int64_t>(voxels.size()) == header.voxel_count(), "volume.size",
            "voxel count does not match header shape");
    for (float v : voxels)
      require(std::isfinite(v), "volume.values", "Volume3D contains non-finite voxels");
  }
};

// Integer mask over the same grid; classes {0 background, 1 tooth, 2 root canal}.
struct LabelVolume {
  VolumeHeader header;
  std::vector<std::uint8_t> labels;

  void validate() const {
    header.validate();
    require(header.dtype == "uint8", "volume.dtype", "LabelVolume requires dtype uint8");
    require(static_cast<std::int64_t>(labels.size()) == header.voxel_count(), "volume.size",
            "label count does not match header shape");
    for (std::uint8_t v : labels)
      require(v <= 2, "volume.labels", "labels must lie in {0,1,2}");
  }
};

inline std::int64_t flat_index(const std::array<int, 3>& shape, int z, int y, int x) {
  return (static_cast<std::int64_t>(z) * shape[1] + y) * shape[2] + x;
}

}  // namespace zxyseg
