#pragma once

#include <array>
#include <filesystem>
#include <variant>

#include "zxyseg/volume.hpp"

namespace zxyseg {

using AnyVolume = std::variant<Volume3D, LabelVolume>;

// Reads `<stem>.json` + `<stem>.raw`. `path` may be the stem or either file.
AnyVolume read_volume(const std::filesystem::path& path);
Volume3D read_image(const std::filesystem::path& path);
LabelVolume read_labels(const std::filesystem::path& path);

// Writes `<stem>.json` + `<stem>.raw`, little-endian, no header bytes in the
// raw file. Round-trips bit-exactly.
void write_volume(const Volume3D& v, const std::filesystem::path& stem);
void write_volume(const LabelVolume& v, const std::filesystem::path& stem);

// Resamples to isotropic `target_mm` spacing. Output shape per axis is
// round-half-up of shape*spacing/target, floored at 1. Images interpolate
// trilinearly, labels nearest-neighbour; both use the align-corners
// convention (corner voxels map to corner voxels).
Volume3D resample_isotropic(const Volume3D& v, double target_mm = 0.4);
LabelVolume resample_isotropic(const LabelVolume& v, double target_mm = 0.4);

// Resamples to an explicit grid shape; spacing is rescaled so the physical
// extent is preserved.
Volume3D resize_to(const Volume3D& v, const std::array<int, 3>& shape);
LabelVolume resize_to(const LabelVolume& v, const std::array<int, 3>& shape);

// out = (clamp(I, lo, hi) - lo) / (hi - lo); every output lies in [0, 1].
Volume3D clip_and_normalize(const Volume3D& v, double lo = 0.0, double hi = 2500.0);

}  // namespace zxyseg
