#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "zxyseg/volume.hpp"

namespace zxyseg {

// Synthetic "dental" volume: bright ellipsoidal teeth holding thin dark
// tubular canals, embedded in medium-intensity bone. Intensities live on the
// raw [0, 2500] scale; noise then a 1-voxel-sigma blur soften the edges.
struct PhantomSpec {
  std::array<int, 3> shape{96, 96, 96};
  std::array<double, 3> spacing_mm{0.4, 0.4, 0.4};
  int n_teeth = 6;
  double noise_sigma = 60.0;
  std::uint64_t seed = 0;
  double intensity_bone = 1200.0;
  double intensity_tooth = 1900.0;
  double intensity_canal = 400.0;
  bool blur = true;  // debug escape hatch; production phantoms keep it on

  void validate() const;
};

std::pair<Volume3D, LabelVolume> generate_phantom(const PhantomSpec& spec);

struct DatasetCase {
  std::string stem;
  std::string split;  // "train" | "val" | "test"
};

struct DatasetManifest {
  std::vector<DatasetCase> cases;
  PhantomSpec spec;  // template; per-case seed = base_seed + index
  std::uint64_t base_seed = 0;
};

// Writes `<stem>_image` / `<stem>_label` volume pairs plus manifest.json.
// Split is train/val/test by fixed 70/15/15 order. Re-running reproduces
// identical bytes.
DatasetManifest generate_dataset(int n_cases, std::uint64_t base_seed, const PhantomSpec& spec,
                                 const std::filesystem::path& out_dir);

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);

}  // namespace zxyseg
