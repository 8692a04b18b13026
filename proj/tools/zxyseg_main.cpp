// zxyseg: batch CLI for the coarse-to-fine tooth / root-canal segmentation
// pipeline. Subcommands: phantom, preprocess, train, infer, evaluate,
// overlay. Errors leave a machine-readable JSON object on stderr and a
// nonzero exit code.

#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Core>

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "zxyseg/config.hpp"
#include "zxyseg/metrics.hpp"
#include "zxyseg/pipeline.hpp"
#include "zxyseg/png_io.hpp"
#include "zxyseg/volume_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace zxyseg;

namespace {

void check_device() {
  const char* dev = std::getenv("ZXYSEG_DEVICE");
  if (!dev || !*dev) return;
  std::string d(dev);
  for (char& c : d) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  require(d == "cpu", "device.unsupported",
          "ZXYSEG_DEVICE=" + std::string(dev) + " is not available; this build runs on cpu");
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  require(!path.empty(), "config.missing", "--config is required for this command");
  return load_experiment_config(path, overrides);
}

int cmd_phantom(const std::string& config_path, const std::vector<std::string>& overrides,
                std::string out_dir) {
  const ExperimentConfig cfg = load_config(config_path, overrides);
  if (out_dir.empty()) out_dir = cfg.data_dir;
  require(!out_dir.empty(), "config.missing", "give --out or set paths.data_dir");
  const DatasetManifest m = generate_dataset(cfg.n_cases, cfg.seed, cfg.phantom, out_dir);
  json summary{{"cases", m.cases.size()}, {"out_dir", out_dir}};
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_preprocess(const std::string& in_dir, const std::string& out_dir, double target_mm,
                   double clip_lo, double clip_hi) {
  const DatasetManifest m = read_manifest(fs::path(in_dir) / "manifest.json");
  fs::create_directories(out_dir);
  for (const auto& c : m.cases) {
    const Volume3D raw = read_image(fs::path(in_dir) / (c.stem + "_image"));
    const LabelVolume lbl = read_labels(fs::path(in_dir) / (c.stem + "_label"));
    const Volume3D iso = resample_isotropic(raw, target_mm);
    write_volume(clip_and_normalize(iso, clip_lo, clip_hi),
                 fs::path(out_dir) / (c.stem + "_image"));
    write_volume(resample_isotropic(lbl, target_mm), fs::path(out_dir) / (c.stem + "_label"));
  }
  write_manifest(m, fs::path(out_dir) / "manifest.json");
  std::cout << json{{"cases", m.cases.size()}, {"out_dir", out_dir}}.dump() << "\n";
  return 0;
}

int cmd_train(const std::string& stage, const std::string& config_path,
              const std::vector<std::string>& overrides, std::string data_dir,
              std::string out_dir, std::string coarse_ckpt_path) {
  ExperimentConfig cfg = load_config(config_path, overrides);
  if (data_dir.empty()) data_dir = cfg.data_dir;
  if (out_dir.empty()) out_dir = cfg.out_dir;
  require(!data_dir.empty() && !out_dir.empty(), "config.missing",
          "give --data/--out or set paths in the config");
  fs::create_directories(out_dir);

  ModelConfig mc = cfg.model;
  if (!cfg.ablation.zxyformer) mc.zxy_levels = {};
  const bool use_un = cfg.ablation.aux_branch;
  const Dataset ds = load_dataset(data_dir);

  if (stage == "coarse") {
    const TrainResult res = train_coarse(ds, cfg.train_coarse, mc, cfg.coarse_shape, use_un);
    save_checkpoint(res.checkpoint, fs::path(out_dir) / "coarse.ckpt");
    std::ofstream log(fs::path(out_dir) / "coarse_train_log.jsonl");
    write_train_log(res.log, log);
    std::cout << json{{"stage", "coarse"},
                      {"steps", res.log.size()},
                      {"final_total", res.log.back().loss.total},
                      {"checkpoint", (fs::path(out_dir) / "coarse.ckpt").string()}}
                     .dump()
              << "\n";
    return 0;
  }
  require(stage == "fine", "cli.stage", "--stage must be coarse or fine");
  if (coarse_ckpt_path.empty()) coarse_ckpt_path = (fs::path(out_dir) / "coarse.ckpt").string();
  const Checkpoint coarse = load_checkpoint(coarse_ckpt_path);
  const TrainResult res = train_fine(ds, coarse, cfg.train_fine, mc, cfg.coarse_shape,
                                     cfg.roi_margin, cfg.ablation.weight_transfer, use_un);
  save_checkpoint(res.checkpoint, fs::path(out_dir) / "fine.ckpt");
  {
    std::ofstream log(fs::path(out_dir) / "fine_train_log.jsonl");
    write_train_log(res.log, log);
  }
  {
    std::ofstream rep(fs::path(out_dir) / "transfer_report.json");
    rep << json{{"copied", res.transfer.copied}, {"skipped", res.transfer.skipped}}.dump(2)
        << "\n";
  }
  std::cout << json{{"stage", "fine"},
                    {"steps", res.log.size()},
                    {"final_total", res.log.back().loss.total},
                    {"copied", res.transfer.copied.size()},
                    {"skipped", res.transfer.skipped.size()},
                    {"checkpoint", (fs::path(out_dir) / "fine.ckpt").string()}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_infer(const std::string& image_path, const std::string& coarse_path,
              const std::string& fine_path, const std::string& out_stem,
              const std::string& config_path, const std::vector<std::string>& overrides,
              bool preprocessed) {
  InferOptions opts;
  if (!config_path.empty()) {
    const ExperimentConfig cfg = load_config(config_path, overrides);
    opts.coarse_shape = cfg.coarse_shape;
    opts.patch = cfg.train_fine.patch_size;
    opts.stride = cfg.infer_stride;
    opts.roi_margin = cfg.roi_margin;
    opts.clip_lo = cfg.clip_lo;
    opts.clip_hi = cfg.clip_hi;
  }
  opts.already_preprocessed = preprocessed;
  const Volume3D image = read_image(image_path);
  const Checkpoint coarse = load_checkpoint(coarse_path);
  const Checkpoint fine = load_checkpoint(fine_path);
  const InferResult res = infer_case(image, coarse, fine, opts);
  write_volume(res.mask, out_stem);
  if (res.whole_volume_fallback)
    std::cerr << json{{"warning", "empty coarse foreground; used whole-volume ROI"}}.dump()
              << "\n";
  std::cout << json{{"out", out_stem},
                    {"fallback", res.whole_volume_fallback},
                    {"roi_lo", res.roi.lo},
                    {"roi_hi", res.roi.hi}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_evaluate(const std::string& pred_dir, const std::string& gt_dir,
                 const std::string& out_path) {
  // prediction stems pair with "<case>_label" ground truth; when a directory
  // is evaluated against itself the label files stand in for predictions
  std::vector<std::pair<std::string, std::string>> pairs;  // (case id, pred stem)
  for (const auto& entry : fs::directory_iterator(pred_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() > 10 && name.ends_with("_pred.json"))
      pairs.emplace_back(name.substr(0, name.size() - 10), name.substr(0, name.size() - 5));
  }
  if (pairs.empty()) {
    for (const auto& entry : fs::directory_iterator(pred_dir)) {
      const std::string name = entry.path().filename().string();
      if (name.size() > 11 && name.ends_with("_label.json"))
        pairs.emplace_back(name.substr(0, name.size() - 11), name.substr(0, name.size() - 5));
    }
  }
  require(!pairs.empty(), "evaluate.empty", "no predictions found in " + pred_dir);
  std::sort(pairs.begin(), pairs.end());

  std::vector<MetricsReport> reports;
  for (const auto& [case_id, pred_stem] : pairs) {
    const LabelVolume pred = read_labels(fs::path(pred_dir) / pred_stem);
    const LabelVolume gt = read_labels(fs::path(gt_dir) / (case_id + "_label"));
    reports.push_back(evaluate_case(pred, gt, case_id));
  }
  const std::string aggregate = aggregate_reports_json(reports);
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    require(out.good(), "io.unwritable", "cannot write " + out_path);
    out << aggregate << "\n";
  }
  std::cout << aggregate << "\n";
  return 0;
}

int cmd_overlay(const std::string& image_path, const std::string& mask_path, char axis,
                int index, const std::string& out_png) {
  const Volume3D image = read_image(image_path);
  const LabelVolume mask = read_labels(mask_path);
  require(image.header.shape == mask.header.shape, "overlay.shape",
          "image and mask grids differ");
  require(axis == 'z' || axis == 'y' || axis == 'x', "overlay.axis", "--axis must be z, y or x");
  const auto& shape = image.header.shape;
  const int ax = axis == 'z' ? 0 : (axis == 'y' ? 1 : 2);
  require(index >= 0 && index < shape[static_cast<size_t>(ax)], "overlay.index",
          "slice index out of range");

  float lo = image.voxels[0], hi = image.voxels[0];
  for (float v : image.voxels) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const float scale = hi > lo ? 255.0f / (hi - lo) : 0.0f;

  const int h = ax == 0 ? shape[1] : shape[0];
  const int w = ax == 2 ? shape[1] : shape[2];
  std::vector<std::uint8_t> rgb(static_cast<size_t>(w) * h * 3);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      int z = 0, y = 0, x = 0;
      if (ax == 0) {
        z = index, y = r, x = c;
      } else if (ax == 1) {
        z = r, y = index, x = c;
      } else {
        z = r, y = c, x = index;
      }
      const std::int64_t at = flat_index(shape, z, y, x);
      const float g = (image.voxels[static_cast<size_t>(at)] - lo) * scale;
      float rr = g, gg = g, bb = g;
      const std::uint8_t label = mask.labels[static_cast<size_t>(at)];
      if (label == 1) gg = 0.5f * gg + 0.5f * 255.0f;  // tooth: green at 50% alpha
      if (label == 2) rr = 0.5f * rr + 0.5f * 255.0f;  // root canal: red at 50% alpha
      const size_t px = (static_cast<size_t>(r) * w + c) * 3;
      rgb[px + 0] = static_cast<std::uint8_t>(std::min(255.0f, rr));
      rgb[px + 1] = static_cast<std::uint8_t>(std::min(255.0f, gg));
      rgb[px + 2] = static_cast<std::uint8_t>(std::min(255.0f, bb));
    }
  write_png_rgb(out_png, w, h, rgb);
  std::cout << json{{"out", out_png}, {"width", w}, {"height", h}}.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Eigen::initParallel();
  CLI::App app{"coarse-to-fine 3-d tooth and root-canal segmentation"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, out_path, stage, coarse_ckpt, fine_ckpt, image_path,
      mask_path, pred_dir, gt_dir, out_stem;
  std::vector<std::string> overrides;
  double target_mm = 0.4, clip_lo = 0.0, clip_hi = 2500.0;
  bool preprocessed = false;
  std::string axis = "z";
  int index = 0;

  auto* phantom = app.add_subcommand("phantom", "generate a synthetic dataset with labels");
  phantom->add_option("--config", config_path, "experiment config JSON")->required();
  phantom->add_option("--out", out_dir, "output directory (default: paths.data_dir)");
  phantom->add_option("--set", overrides, "override config keys, key.path=value");

  auto* preprocess = app.add_subcommand("preprocess", "resample + clip + normalize a dataset");
  preprocess->add_option("--in", data_dir, "input dataset directory")->required();
  preprocess->add_option("--out", out_dir, "output directory")->required();
  preprocess->add_option("--target-mm", target_mm, "isotropic target spacing");
  preprocess->add_option("--clip-lo", clip_lo, "lower intensity clip");
  preprocess->add_option("--clip-hi", clip_hi, "upper intensity clip");

  auto* train = app.add_subcommand("train", "train the coarse or fine network");
  train->add_option("--stage", stage, "coarse | fine")->required();
  train->add_option("--config", config_path, "experiment config JSON")->required();
  train->add_option("--data", data_dir, "preprocessed dataset directory");
  train->add_option("--out", out_dir, "artifact directory");
  train->add_option("--coarse-ckpt", coarse_ckpt, "coarse checkpoint (fine stage)");
  train->add_option("--set", overrides, "override config keys, key.path=value");

  auto* infer = app.add_subcommand("infer", "segment one volume");
  infer->add_option("--image", image_path, "image stem or .json path")->required();
  infer->add_option("--coarse-ckpt", coarse_ckpt, "coarse checkpoint")->required();
  infer->add_option("--fine-ckpt", fine_ckpt, "fine checkpoint")->required();
  infer->add_option("--out", out_stem, "output stem for the label volume")->required();
  infer->add_option("--config", config_path, "experiment config JSON");
  infer->add_option("--set", overrides, "override config keys, key.path=value");
  infer->add_flag("--preprocessed", preprocessed, "input is already clip-normalized");

  auto* evaluate = app.add_subcommand("evaluate", "score predictions against ground truth");
  evaluate->add_option("--pred", pred_dir, "prediction directory")->required();
  evaluate->add_option("--gt", gt_dir, "ground-truth directory")->required();
  evaluate->add_option("--out", out_path, "aggregate report JSON path");

  auto* overlay = app.add_subcommand("overlay", "render one slice with the mask blended in");
  overlay->add_option("--image", image_path, "image stem")->required();
  overlay->add_option("--mask", mask_path, "label stem")->required();
  overlay->add_option("--axis", axis, "slice axis: z, y or x");
  overlay->add_option("--index", index, "slice index")->required();
  overlay->add_option("--out", out_path, "output PNG path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    check_device();
    if (phantom->parsed()) return cmd_phantom(config_path, overrides, out_dir);
    if (preprocess->parsed()) return cmd_preprocess(data_dir, out_dir, target_mm, clip_lo, clip_hi);
    if (train->parsed())
      return cmd_train(stage, config_path, overrides, data_dir, out_dir, coarse_ckpt);
    if (infer->parsed())
      return cmd_infer(image_path, coarse_ckpt, fine_ckpt, out_stem, config_path, overrides,
                       preprocessed);
    if (evaluate->parsed()) return cmd_evaluate(pred_dir, gt_dir, out_path);
    if (overlay->parsed())
      return cmd_overlay(image_path, mask_path, axis.empty() ? 'z' : axis[0], index, out_path);
  } catch (const Error& e) {
    std::cerr << json{{"error", {{"code", e.code()}, {"message", e.what()}}}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump() << "\n";
    return 2;
  }
  return 0;
}
