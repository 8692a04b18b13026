#include "zxyseg/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <ostream>

#include "zxyseg/volume_io.hpp"

namespace zxyseg {

namespace {

NetworkParameters<float> zeros_like(const NetworkParameters<float>& p) {
  NetworkParameters<float> out;
  for (const auto& name : p.order) out.add(name, Tensor<float>::zeros(p.at(name).shape));
  return out;
}

Tensor<float> volume_to_tensor(const Volume3D& v) {
  Tensor<float> t = Tensor<float>::zeros(
      {1, v.header.shape[0], v.header.shape[1], v.header.shape[2]});
  std::copy(v.voxels.begin(), v.voxels.end(), t.ptr());
  return t;
}

// forward one [1,D,H,W] tensor through a checkpoint, returning softmax
// probabilities [n_classes, D, H, W]
Tensor<float> predict_probs(const Tensor<float>& x, const Checkpoint& ckpt) {
  ad::Tape<float> tape;
  auto bound = ad::bind_parameters(tape, ckpt.params, false);
  const auto pred = ad::network_forward(tape, tape.input(x), bound, ckpt.config);
  const ad::Var probs = ad::softmax_ch(tape, pred.main_logits);
  return tape.val(probs);
}

struct TrainingSample {
  Tensor<float> image;
  std::vector<std::uint8_t> labels;
};

using SampleDraw = std::function<TrainingSample(Xoshiro256&)>;

std::vector<TrainLogLine> run_training(NetworkParameters<float>& params, const TrainConfig& tc,
                                       const ModelConfig& mc, const SampleDraw& draw,
                                       bool use_uncertainty) {
  AdamOptimizer<float> opt(params);
  NetworkParameters<float> grads = zeros_like(params);
  Xoshiro256 rng(tc.seed);
  std::vector<TrainLogLine> log;
  log.reserve(static_cast<size_t>(tc.max_iters));

  for (long step = 0; step < tc.max_iters; ++step) {
    const double lr = lr_at(step, tc);
    for (const auto& name : grads.order) grads.at(name).data.setZero();
    LossBreakdown mean{};
    for (int b = 0; b < tc.batch_size; ++b) {
      const TrainingSample sample = draw(rng);
      ad::Tape<float> tape;
      auto bound = ad::bind_parameters(tape, params, true);
      const auto pred = ad::network_forward(tape, tape.input(sample.image), bound, mc);
      LossBreakdown part;
      const ad::Var loss = total_loss_on_tape<float>(tape, pred.main_logits, pred.aux_logits,
                                                     sample.labels, use_uncertainty, &part);
      tape.backward(loss);
      for (const auto& name : grads.order) {
        const ad::Var v = bound.at(name);
        if (tape.has_grad(v)) grads.at(name).data += tape.grad(v).data;
      }
      mean.ce += part.ce;
      mean.dice += part.dice;
      mean.un += part.un;
    }
    const float inv_b = 1.0f / static_cast<float>(tc.batch_size);
    mean.ce *= inv_b;
    mean.dice *= inv_b;
    mean.un *= inv_b;
    mean.total = mean.ce + mean.dice + mean.un;
    if (tc.batch_size > 1)
      for (const auto& name : grads.order) grads.at(name).data *= inv_b;

    require(std::isfinite(mean.total), "train.divergence",
            "non-finite loss at step " + std::to_string(step) + " (ce=" + std::to_string(mean.ce) +
                ", dice=" + std::to_string(mean.dice) + ", un=" + std::to_string(mean.un) + ")");

    opt.step(params, grads, lr, tc);
    log.push_back({step, lr, mean});
  }
  return log;
}

LabelVolume argmax_to_labels(const Tensor<float>& probs, const VolumeHeader& like) {
  LabelVolume out;
  out.header = like;
  out.header.dtype = "uint8";
  out.labels = argmax_classes(probs);
  return out;
}

}  // namespace

NetworkParameters<float> transfer_weights(const NetworkParameters<float>& coarse,
                                          NetworkParameters<float> fine_init,
                                          TransferReport* report) {
  TransferReport local;
  for (const auto& name : fine_init.order) {
    if (coarse.has(name) && coarse.at(name).shape == fine_init.at(name).shape) {
      fine_init.at(name) = coarse.at(name);
      local.copied.push_back(name);
    } else {
      local.skipped.push_back(name);
    }
  }
  require(!local.copied.empty(), "transfer.no_match",
          "no parameter matched between the coarse and fine networks; configs differ");
  if (report) *report = std::move(local);
  return fine_init;
}

RoiBox coarse_to_roi(const LabelVolume& coarse_mask, const std::array<int, 3>& original_shape,
                     int margin) {
  require(margin >= 0, "roi.invalid", "margin must be >= 0");
  const LabelVolume up = resize_to(coarse_mask, original_shape);
  std::array<int, 3> lo = {original_shape[0], original_shape[1], original_shape[2]};
  std::array<int, 3> hi = {-1, -1, -1};
  std::int64_t idx = 0;
  for (int z = 0; z < original_shape[0]; ++z)
    for (int y = 0; y < original_shape[1]; ++y)
      for (int x = 0; x < original_shape[2]; ++x, ++idx) {
        if (up.labels[static_cast<size_t>(idx)] == 0) continue;
        lo = {std::min(lo[0], z), std::min(lo[1], y), std::min(lo[2], x)};
        hi = {std::max(hi[0], z), std::max(hi[1], y), std::max(hi[2], x)};
      }
  require(hi[0] >= 0, "roi.empty",
          "coarse mask has no foreground; fall back to the whole-volume ROI");
  RoiBox box;
  for (int a = 0; a < 3; ++a) {
    box.lo[static_cast<size_t>(a)] = std::max(0, lo[static_cast<size_t>(a)] - margin);
    box.hi[static_cast<size_t>(a)] =
        std::min(original_shape[static_cast<size_t>(a)] - 1, hi[static_cast<size_t>(a)] + margin);
  }
  box.validate(original_shape);
  return box;
}

PatchPair sample_patch(const Volume3D& image, const LabelVolume& labels, const RoiBox& roi,
                       int size, Xoshiro256& rng) {
  require(size >= 1, "patch.size", "patch size must be >= 1");
  require(image.header.shape == labels.header.shape, "patch.shape",
          "image and label grids differ");
  const auto& shape = image.header.shape;
  roi.validate(shape);

  std::array<int, 3> origin{};
  for (int a = 0; a < 3; ++a) {
    const int vol = shape[static_cast<size_t>(a)];
    int lo_min = 0, lo_max = 0;
    if (vol >= size) {
      lo_min = std::max(0, roi.lo[static_cast<size_t>(a)] - size + 1);
      lo_max = std::min(vol - size, roi.hi[static_cast<size_t>(a)]);
    }
    origin[static_cast<size_t>(a)] =
        lo_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(lo_max - lo_min + 1)));
  }

  PatchPair out;
  out.origin = origin;
  out.image = Tensor<float>::zeros({1, size, size, size});
  out.labels.assign(static_cast<size_t>(size) * size * size, 0);
  for (int z = 0; z < size; ++z) {
    const int sz = origin[0] + z;
    if (sz < 0 || sz >= shape[0]) continue;
    for (int y = 0; y < size; ++y) {
      const int sy = origin[1] + y;
      if (sy < 0 || sy >= shape[1]) continue;
      for (int x = 0; x < size; ++x) {
        const int sx = origin[2] + x;
        if (sx < 0 || sx >= shape[2]) continue;
        const std::int64_t src = flat_index(shape, sz, sy, sx);
        const std::int64_t dst = (static_cast<std::int64_t>(z) * size + y) * size + x;
        out.image.data[dst] = image.voxels[static_cast<size_t>(src)];
        out.labels[static_cast<size_t>(dst)] = labels.labels[static_cast<size_t>(src)];
      }
    }
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const DatasetManifest manifest = read_manifest(dir / "manifest.json");
  Dataset ds;
  for (const auto& c : manifest.cases) {
    LoadedCase lc;
    lc.stem = c.stem;
    lc.image = read_image(dir / (c.stem + "_image"));
    lc.labels = read_labels(dir / (c.stem + "_label"));
    require(lc.image.header.shape == lc.labels.header.shape, "dataset.shape",
            "image/label grid mismatch for " + c.stem);
    const size_t idx = ds.cases.size();
    if (c.split == "train") ds.train.push_back(idx);
    if (c.split == "val") ds.val.push_back(idx);
    if (c.split == "test") ds.test.push_back(idx);
    ds.cases.push_back(std::move(lc));
  }
  return ds;
}

void write_train_log(const std::vector<TrainLogLine>& log, std::ostream& os) {
  for (const auto& line : log) {
    nlohmann::json j{{"step", line.step},   {"lr", line.lr},
                     {"ce", line.loss.ce},  {"dice", line.loss.dice},
                     {"un", line.loss.un},  {"total", line.loss.total}};
    os << j.dump() << "\n";
  }
}

TrainResult train_coarse(const Dataset& ds, const TrainConfig& tc, const ModelConfig& mc,
                         const std::array<int, 3>& coarse_shape, bool use_uncertainty) {
  tc.validate();
  mc.validate();
  require(!ds.train.empty(), "train.empty", "training split is empty");

  // pre-resize every training case to the coarse grid
  std::vector<TrainingSample> samples;
  samples.reserve(ds.train.size());
  for (size_t idx : ds.train) {
    const auto& c = ds.cases[idx];
    TrainingSample s;
    s.image = volume_to_tensor(resize_to(c.image, coarse_shape));
    s.labels = resize_to(c.labels, coarse_shape).labels;
    samples.push_back(std::move(s));
  }

  NetworkParameters<float> params = init_parameters<float>(mc, tc.seed);
  auto draw = [&samples](Xoshiro256& rng) {
    return samples[static_cast<size_t>(rng.below(samples.size()))];
  };
  TrainResult result;
  result.log = run_training(params, tc, mc, draw, use_uncertainty);
  result.checkpoint = Checkpoint{mc, tc.max_iters, std::move(params)};
  return result;
}

TrainResult train_fine(const Dataset& ds, const Checkpoint& coarse, const TrainConfig& tc,
                       const ModelConfig& mc, const std::array<int, 3>& coarse_shape,
                       int roi_margin, bool use_transfer, bool use_uncertainty) {
  tc.validate();
  mc.validate();
  require(!ds.train.empty(), "train.empty", "training split is empty");
  const int div = 1 << (mc.n_levels - 1);
  require(tc.patch_size % div == 0, "train.config",
          "patch_size must divide by 2^(n_levels-1)");

  // the frozen coarse net maps each training case to its ROI once, up front
  std::vector<RoiBox> rois;
  rois.reserve(ds.train.size());
  for (size_t idx : ds.train) {
    const auto& c = ds.cases[idx];
    const Volume3D coarse_in = resize_to(c.image, coarse_shape);
    const Tensor<float> probs = predict_probs(volume_to_tensor(coarse_in), coarse);
    const LabelVolume cmask = argmax_to_labels(probs, coarse_in.header);
    try {
      rois.push_back(coarse_to_roi(cmask, c.image.header.shape, roi_margin));
    } catch (const Error& e) {
      require(e.code() == "roi.empty", e.code(), e.what());
      rois.push_back(RoiBox::whole(c.image.header.shape));
    }
  }

  TrainResult result;
  NetworkParameters<float> params = init_parameters<float>(mc, tc.seed);
  if (use_transfer) params = transfer_weights(coarse.params, std::move(params), &result.transfer);

  auto draw = [&](Xoshiro256& rng) {
    const size_t pick = static_cast<size_t>(rng.below(ds.train.size()));
    const auto& c = ds.cases[ds.train[pick]];
    PatchPair pp = sample_patch(c.image, c.labels, rois[pick], tc.patch_size, rng);
    return TrainingSample{std::move(pp.image), std::move(pp.labels)};
  };
  result.log = run_training(params, tc, mc, draw, use_uncertainty);
  result.checkpoint = Checkpoint{mc, tc.max_iters, std::move(params)};
  return result;
}

Tensor<float> sliding_window_predict(const Volume3D& image, const RoiBox& roi,
                                     const Checkpoint& ckpt, int patch, int stride) {
  image.validate();
  const auto& shape = image.header.shape;
  roi.validate(shape);
  if (stride <= 0) stride = patch / 2;
  require(stride >= 1 && stride <= patch, "infer.stride", "stride must lie in [1, patch]");

  auto positions = [&](int a) {
    std::vector<int> pos;
    const int vol = shape[static_cast<size_t>(a)];
    const int lo = roi.lo[static_cast<size_t>(a)];
    const int span = roi.extent(a);
    if (vol < patch) {
      pos.push_back(0);  // padded single window covers everything
    } else if (span <= patch) {
      pos.push_back(std::min(lo, vol - patch));
    } else {
      for (int o = lo; o + patch <= lo + span; o += stride) pos.push_back(o);
      const int last = lo + span - patch;
      if (pos.back() != last) pos.push_back(last);
    }
    return pos;
  };
  const auto pz = positions(0), py = positions(1), px = positions(2);

  const std::int64_t vol = image.header.voxel_count();
  const int n_classes = ckpt.config.n_classes;
  Tensor<float> accum = Tensor<float>::zeros({n_classes, shape[0], shape[1], shape[2]});
  std::vector<std::int32_t> count(static_cast<size_t>(vol), 0);

  for (int oz : pz)
    for (int oy : py)
      for (int ox : px) {
        Tensor<float> x = Tensor<float>::zeros({1, patch, patch, patch});
        for (int z = 0; z < patch; ++z) {
          const int sz = oz + z;
          if (sz < 0 || sz >= shape[0]) continue;
          for (int y = 0; y < patch; ++y) {
            const int sy = oy + y;
            if (sy < 0 || sy >= shape[1]) continue;
            for (int xx = 0; xx < patch; ++xx) {
              const int sx = ox + xx;
              if (sx < 0 || sx >= shape[2]) continue;
              x.data[(static_cast<std::int64_t>(z) * patch + y) * patch + xx] =
                  image.voxels[static_cast<size_t>(flat_index(shape, sz, sy, sx))];
            }
          }
        }
        const Tensor<float> probs = predict_probs(x, ckpt);
        const std::int64_t pvol = static_cast<std::int64_t>(patch) * patch * patch;
        for (int z = 0; z < patch; ++z) {
          const int sz = oz + z;
          if (sz < roi.lo[0] || sz > roi.hi[0]) continue;
          for (int y = 0; y < patch; ++y) {
            const int sy = oy + y;
            if (sy < roi.lo[1] || sy > roi.hi[1]) continue;
            for (int xx = 0; xx < patch; ++xx) {
              const int sx = ox + xx;
              if (sx < roi.lo[2] || sx > roi.hi[2]) continue;
              const std::int64_t src = (static_cast<std::int64_t>(z) * patch + y) * patch + xx;
              const std::int64_t dst = flat_index(shape, sz, sy, sx);
              for (int c = 0; c < n_classes; ++c)
                accum.data[c * vol + dst] += probs.data[c * pvol + src];
              ++count[static_cast<size_t>(dst)];
            }
          }
        }
      }

  for (std::int64_t i = 0; i < vol; ++i) {
    if (count[static_cast<size_t>(i)] > 0) {
      const float inv = 1.0f / static_cast<float>(count[static_cast<size_t>(i)]);
      for (int c = 0; c < n_classes; ++c) accum.data[c * vol + i] *= inv;
    } else {
      accum.data[i] = 1.0f;  // background probability 1 outside the ROI
    }
  }
  return accum;
}

LabelVolume postprocess_largest_component(const LabelVolume& mask) {
  mask.validate();
  const auto& shape = mask.header.shape;
  const std::int64_t n = mask.header.voxel_count();

  // union-find over foreground voxels, 26-connectivity
  std::vector<std::int32_t> parent(static_cast<size_t>(n), -1);
  std::function<std::int32_t(std::int32_t)> find = [&](std::int32_t i) {
    while (parent[static_cast<size_t>(i)] != i) {
      parent[static_cast<size_t>(i)] = parent[static_cast<size_t>(parent[static_cast<size_t>(i)])];
      i = parent[static_cast<size_t>(i)];
    }
    return i;
  };
  auto unite = [&](std::int32_t a, std::int32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) std::swap(a, b);  // keep the smaller index as root
    parent[static_cast<size_t>(a)] = b;
  };

  std::int64_t idx = 0;
  for (int z = 0; z < shape[0]; ++z)
    for (int y = 0; y < shape[1]; ++y)
      for (int x = 0; x < shape[2]; ++x, ++idx) {
        if (mask.labels[static_cast<size_t>(idx)] == 0) continue;
        parent[static_cast<size_t>(idx)] = static_cast<std::int32_t>(idx);
        // unite with previously scanned foreground neighbours
        for (int dz = -1; dz <= 0; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              if (dz == 0 && (dy > 0 || (dy == 0 && dx >= 0))) continue;
              const int zz = z + dz, yy = y + dy, xx = x + dx;
              if (zz < 0 || yy < 0 || xx < 0 || yy >= shape[1] || xx >= shape[2]) continue;
              const std::int64_t ni = flat_index(shape, zz, yy, xx);
              if (mask.labels[static_cast<size_t>(ni)] != 0)
                unite(static_cast<std::int32_t>(idx), static_cast<std::int32_t>(ni));
            }
      }

  std::unordered_map<std::int32_t, std::int64_t> sizes;
  for (std::int64_t i = 0; i < n; ++i)
    if (parent[static_cast<size_t>(i)] >= 0) ++sizes[find(static_cast<std::int32_t>(i))];
  if (sizes.empty()) return mask;

  std::int32_t best_root = -1;
  std::int64_t best_size = -1;
  for (const auto& [root, size] : sizes) {
    // ties resolve to the smallest seed (= root, the component's min index)
    if (size > best_size || (size == best_size && root < best_root)) {
      best_size = size;
      best_root = root;
    }
  }

  LabelVolume out = mask;
  for (std::int64_t i = 0; i < n; ++i) {
    if (parent[static_cast<size_t>(i)] < 0) continue;
    if (find(static_cast<std::int32_t>(i)) != best_root) out.labels[static_cast<size_t>(i)] = 0;
  }
  return out;
}

InferResult infer_case(const Volume3D& image, const Checkpoint& coarse, const Checkpoint& fine,
                       const InferOptions& opts) {
  image.validate();
  const Volume3D pre =
      opts.already_preprocessed ? image : clip_and_normalize(image, opts.clip_lo, opts.clip_hi);

  const Volume3D coarse_in = resize_to(pre, opts.coarse_shape);
  const Tensor<float> coarse_probs = predict_probs(volume_to_tensor(coarse_in), coarse);
  const LabelVolume coarse_mask = argmax_to_labels(coarse_probs, coarse_in.header);

  InferResult result;
  try {
    result.roi = coarse_to_roi(coarse_mask, pre.header.shape, opts.roi_margin);
  } catch (const Error& e) {
    require(e.code() == "roi.empty", e.code(), e.what());
    result.roi = RoiBox::whole(pre.header.shape);
    result.whole_volume_fallback = true;
  }

  const Tensor<float> probs =
      sliding_window_predict(pre, result.roi, fine, opts.patch, opts.stride);
  LabelVolume labels = argmax_to_labels(probs, image.header);
  result.mask = postprocess_largest_component(labels);
  return result;
}

}  // namespace zxyseg
