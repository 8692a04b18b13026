#pragma once

// Coarse-to-fine orchestration: coarse training on resized whole volumes,
// parameter transfer into the fine net, ROI mapping back to the original
// grid, ROI-constrained patch training, overlap-averaged sliding-window
// inference, and largest-component post-processing.

#include <array>
#include <iosfwd>
#include <optional>

#include "zxyseg/checkpoint.hpp"
#include "zxyseg/losses.hpp"
#include "zxyseg/optimizer.hpp"
#include "zxyseg/phantom.hpp"
#include "zxyseg/volume.hpp"

namespace zxyseg {

// Inclusive voxel box in original-volume coordinates.
struct RoiBox {
  std::array<int, 3> lo{0, 0, 0};
  std::array<int, 3> hi{0, 0, 0};

  int extent(int axis) const { return hi[static_cast<size_t>(axis)] - lo[static_cast<size_t>(axis)] + 1; }
  void validate(const std::array<int, 3>& shape) const {
    for (int a = 0; a < 3; ++a) {
      require(lo[static_cast<size_t>(a)] <= hi[static_cast<size_t>(a)], "roi.invalid",
              "RoiBox lo must not exceed hi");
      require(lo[static_cast<size_t>(a)] >= 0 && hi[static_cast<size_t>(a)] < shape[static_cast<size_t>(a)],
              "roi.invalid", "RoiBox outside volume bounds");
    }
  }
  static RoiBox whole(const std::array<int, 3>& shape) {
    return RoiBox{{0, 0, 0}, {shape[0] - 1, shape[1] - 1, shape[2] - 1}};
  }
};

struct TransferReport {
  std::vector<std::string> copied;
  std::vector<std::string> skipped;
};

// copies every name+shape match from `coarse` over `fine_init`; throws when
// nothing matches (a config mismatch)
NetworkParameters<float> transfer_weights(const NetworkParameters<float>& coarse,
                                          NetworkParameters<float> fine_init,
                                          TransferReport* report = nullptr);

// nearest-neighbour upscale of the coarse foreground to the original grid,
// then the tight bounding box dilated by `margin` and clipped to bounds;
// throws (roi.empty) when the coarse mask has no foreground
RoiBox coarse_to_roi(const LabelVolume& coarse_mask, const std::array<int, 3>& original_shape,
                     int margin = 8);

struct PatchPair {
  Tensor<float> image;               // [1, s, s, s]
  std::vector<std::uint8_t> labels;  // s^3
  std::array<int, 3> origin;
};

// uniform over patch origins that intersect the ROI; volumes smaller than
// the patch are zero-padded
PatchPair sample_patch(const Volume3D& image, const LabelVolume& labels, const RoiBox& roi,
                       int size, Xoshiro256& rng);

struct LoadedCase {
  std::string stem;
  Volume3D image;     // preprocessed intensities in [0, 1]
  LabelVolume labels;
};

struct Dataset {
  std::vector<LoadedCase> cases;
  std::vector<size_t> train, val, test;  // indices into cases
};

Dataset load_dataset(const std::filesystem::path& dir);

struct TrainLogLine {
  long step = 0;
  double lr = 0;
  LossBreakdown loss;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TrainLogLine> log;
  TransferReport transfer;  // fine stage only
};

void write_train_log(const std::vector<TrainLogLine>& log, std::ostream& os);

// whole-volume training at the coarse grid
TrainResult train_coarse(const Dataset& ds, const TrainConfig& tc, const ModelConfig& mc,
                         const std::array<int, 3>& coarse_shape, bool use_uncertainty = true);

// ROI-constrained patch training at original resolution; the frozen coarse
// net (run at coarse_shape) provides the per-case ROI and, when use_transfer
// is set, the initial parameters
TrainResult train_fine(const Dataset& ds, const Checkpoint& coarse, const TrainConfig& tc,
                       const ModelConfig& mc, const std::array<int, 3>& coarse_shape,
                       int roi_margin, bool use_transfer = true, bool use_uncertainty = true);

// overlap-averaged class probabilities [3, Z, Y, X]; outside the ROI the
// background probability is exactly 1
Tensor<float> sliding_window_predict(const Volume3D& image, const RoiBox& roi,
                                     const Checkpoint& ckpt, int patch, int stride = 0);

// keeps only the largest 26-connected foreground component (ties: smallest
// seed linear index); labels inside the kept component are unchanged
LabelVolume postprocess_largest_component(const LabelVolume& mask);

struct InferOptions {
  std::array<int, 3> coarse_shape{64, 64, 64};
  int patch = 64;
  int stride = 0;  // 0 means patch/2
  int roi_margin = 8;
  double clip_lo = 0.0;
  double clip_hi = 2500.0;
  bool already_preprocessed = false;
};

struct InferResult {
  LabelVolume mask;
  RoiBox roi;
  bool whole_volume_fallback = false;
};

InferResult infer_case(const Volume3D& image, const Checkpoint& coarse, const Checkpoint& fine,
                       const InferOptions& opts);

}  // namespace zxyseg
