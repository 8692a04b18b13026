#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "zxyseg/rng.hpp"
#include "zxyseg/volume_io.hpp"

using namespace zxyseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  static int counter = 0;
  fs::path p = fs::temp_directory_path() / ("zxyseg_io_" + std::to_string(counter++));
  fs::create_directories(p);
  return p;
}

Volume3D make_image(std::array<int, 3> shape, std::array<double, 3> spacing,
                    std::vector<float> voxels) {
  Volume3D v;
  v.header.shape = shape;
  v.header.spacing_mm = spacing;
  v.header.dtype = "float32";
  v.voxels = std::move(voxels);
  return v;
}

LabelVolume make_labels(std::array<int, 3> shape, std::vector<std::uint8_t> labels) {
  LabelVolume v;
  v.header.shape = shape;
  v.header.spacing_mm = {0.4, 0.4, 0.4};
  v.header.dtype = "uint8";
  v.labels = std::move(labels);
  return v;
}

}  // namespace

TEST_SUITE("volume_io") {

TEST_CASE("zero volume reads back as eight zero voxels") {
  const auto dir = temp_dir();
  {
    std::ofstream h(dir / "z.json");
    h << R"({"shape":[2,2,2],"spacing_mm":[0.4,0.4,0.4],"dtype":"float32","order":"zyx-x-fastest"})";
  }
  {
    std::ofstream r(dir / "z.raw", std::ios::binary);
    std::vector<char> zeros(32, 0);
    r.write(zeros.data(), 32);
  }
  const Volume3D v = read_image(dir / "z");
  REQUIRE(v.voxels.size() == 8);
  for (float f : v.voxels) CHECK(f == 0.0f);
}

TEST_CASE("uint8 payload is read verbatim") {
  const auto dir = temp_dir();
  {
    std::ofstream h(dir / "l.json");
    h << R"({"shape":[1,1,3],"spacing_mm":[1,1,1],"dtype":"uint8","order":"zyx-x-fastest"})";
  }
  {
    std::ofstream r(dir / "l.raw", std::ios::binary);
    const char bytes[3] = {0, 1, 2};
    r.write(bytes, 3);
  }
  const LabelVolume v = read_labels(dir / "l");
  REQUIRE(v.labels.size() == 3);
  CHECK(v.labels[0] == 0);
  CHECK(v.labels[1] == 1);
  CHECK(v.labels[2] == 2);
}

TEST_CASE("size mismatch between header and raw file is an error") {
  const auto dir = temp_dir();
  {
    std::ofstream h(dir / "bad.json");
    h << R"({"shape":[4,4,4],"spacing_mm":[0.4,0.4,0.4],"dtype":"float32","order":"zyx-x-fastest"})";
  }
  {
    std::ofstream r(dir / "bad.raw", std::ios::binary);
    std::vector<char> junk(255, 7);
    r.write(junk.data(), 255);
  }
  CHECK_THROWS_WITH_AS(read_volume(dir / "bad"), doctest::Contains("255"), Error);
}

TEST_CASE("missing file and bad headers raise typed errors") {
  const auto dir = temp_dir();
  CHECK_THROWS_AS(read_volume(dir / "nope"), Error);

  std::ofstream(dir / "neg.json")
      << R"({"shape":[2,2,2],"spacing_mm":[-1,0.4,0.4],"dtype":"float32","order":"zyx-x-fastest"})";
  CHECK_THROWS_AS(read_volume(dir / "neg"), Error);

  std::ofstream(dir / "dt.json")
      << R"({"shape":[2,2,2],"spacing_mm":[1,1,1],"dtype":"int16","order":"zyx-x-fastest"})";
  CHECK_THROWS_AS(read_volume(dir / "dt"), Error);
}

TEST_CASE("write then read round-trips bit-exactly") {
  const auto dir = temp_dir();
  Xoshiro256 rng(42);
  std::vector<float> vox(3 * 4 * 5);
  for (float& f : vox) f = static_cast<float>(rng.uniform(-100.0, 3000.0));
  const Volume3D v = make_image({3, 4, 5}, {0.4, 0.5, 0.6}, vox);
  write_volume(v, dir / "rt");
  const Volume3D back = read_image(dir / "rt");
  REQUIRE(back.header == v.header);
  REQUIRE(back.voxels.size() == v.voxels.size());
  for (size_t i = 0; i < vox.size(); ++i) {
    CHECK(std::memcmp(&back.voxels[i], &v.voxels[i], 4) == 0);
  }

  std::vector<std::uint8_t> lab(24);
  for (auto& l : lab) l = static_cast<std::uint8_t>(rng.below(3));
  const LabelVolume lv = make_labels({2, 3, 4}, lab);
  write_volume(lv, dir / "rt_l");
  const LabelVolume lback = read_labels(dir / "rt_l");
  CHECK(lback.labels == lv.labels);
  CHECK(lback.header == lv.header);
}

TEST_CASE("NaN voxels are rejected on write") {
  const auto dir = temp_dir();
  Volume3D v = make_image({1, 1, 2}, {0.4, 0.4, 0.4}, {0.0f, std::nanf("")});
  CHECK_THROWS_AS(write_volume(v, dir / "nan"), Error);
}

TEST_CASE("resample at identical spacing is the identity") {
  Xoshiro256 rng(7);
  std::vector<float> vox(4 * 4 * 4);
  for (float& f : vox) f = static_cast<float>(rng.uniform());
  const Volume3D v = make_image({4, 4, 4}, {0.4, 0.4, 0.4}, vox);
  const Volume3D out = resample_isotropic(v, 0.4);
  REQUIRE(out.header.shape == v.header.shape);
  for (size_t i = 0; i < vox.size(); ++i) CHECK(out.voxels[i] == doctest::Approx(vox[i]).epsilon(1e-7));
}

TEST_CASE("resampling a constant volume preserves the constant") {
  const Volume3D v = make_image({4, 5, 6}, {0.7, 0.9, 1.1}, std::vector<float>(120, 3.5f));
  const Volume3D out = resample_isotropic(v, 0.4);
  for (float f : out.voxels) CHECK(f == doctest::Approx(3.5f).epsilon(1e-7));
}

TEST_CASE("1x1x2 upsampling matches hand-evaluated align-corners weights") {
  // x axis spacing 0.8 -> 0.4 doubles the axis: src = i/3, values 0,1/3,2/3,1
  const Volume3D v = make_image({1, 1, 2}, {0.4, 0.4, 0.8}, {0.0f, 1.0f});
  const Volume3D out = resample_isotropic(v, 0.4);
  REQUIRE(out.header.shape == std::array<int, 3>{1, 1, 4});
  CHECK(out.voxels[0] == doctest::Approx(0.0).epsilon(1e-7));
  CHECK(out.voxels[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  CHECK(out.voxels[2] == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
  CHECK(out.voxels[3] == doctest::Approx(1.0).epsilon(1e-7));

  const Volume3D out2 = resize_to(v, {1, 1, 4});
  REQUIRE(out2.header.shape == std::array<int, 3>{1, 1, 4});
  for (int i = 0; i < 4; ++i) CHECK(out2.voxels[static_cast<size_t>(i)] ==
                                    doctest::Approx(i / 3.0).epsilon(1e-6));
  CHECK(out2.header.spacing_mm[2] == doctest::Approx(0.4));
}

TEST_CASE("resize to own shape is the identity") {
  Xoshiro256 rng(9);
  std::vector<float> vox(3 * 3 * 3);
  for (float& f : vox) f = static_cast<float>(rng.uniform());
  const Volume3D v = make_image({3, 3, 3}, {0.4, 0.4, 0.4}, vox);
  const Volume3D out = resize_to(v, {3, 3, 3});
  for (size_t i = 0; i < vox.size(); ++i) CHECK(out.voxels[i] == vox[i]);
}

TEST_CASE("label resampling never invents labels") {
  Xoshiro256 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::uint8_t> lab(5 * 6 * 7);
    for (auto& l : lab) l = static_cast<std::uint8_t>(rng.below(2) * 2);  // only {0,2}
    LabelVolume lv = make_labels({5, 6, 7}, lab);
    lv.header.spacing_mm = {0.3, 0.5, 0.8};
    const LabelVolume out = resample_isotropic(lv, 0.4);
    for (std::uint8_t l : out.labels) CHECK((l == 0 || l == 2));
  }
}

TEST_CASE("clip_and_normalize matches the affine map") {
  const Volume3D v = make_image({1, 1, 3}, {0.4, 0.4, 0.4}, {3000.0f, 0.0f, 1250.0f});
  const Volume3D out = clip_and_normalize(v, 0.0, 2500.0);
  CHECK(out.voxels[0] == doctest::Approx(1.0));
  CHECK(out.voxels[1] == doctest::Approx(0.0));
  CHECK(out.voxels[2] == doctest::Approx(0.5));
  CHECK_THROWS_AS(clip_and_normalize(v, 5.0, 5.0), Error);
}

TEST_CASE("clip_and_normalize with [0,1] is idempotent after the first pass") {
  Xoshiro256 rng(13);
  std::vector<float> vox(64);
  for (float& f : vox) f = static_cast<float>(rng.uniform(-500.0, 4000.0));
  const Volume3D v = make_image({4, 4, 4}, {0.4, 0.4, 0.4}, vox);
  const Volume3D once = clip_and_normalize(v, 0.0, 2500.0);
  const Volume3D twice = clip_and_normalize(once, 0.0, 1.0);
  for (size_t i = 0; i < vox.size(); ++i) CHECK(twice.voxels[i] == once.voxels[i]);
}

TEST_CASE("resample then inverse resample of a constant returns the constant") {
  const Volume3D v = make_image({4, 4, 4}, {0.8, 0.8, 0.8}, std::vector<float>(64, 1.25f));
  const Volume3D down = resample_isotropic(v, 0.4);
  const Volume3D back = resize_to(down, {4, 4, 4});
  for (float f : back.voxels) CHECK(f == doctest::Approx(1.25f).epsilon(1e-7));
}

}  // TEST_SUITE
