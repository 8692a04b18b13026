#include "zxyseg/config.hpp"

#include <fstream>

namespace zxyseg {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::vector<std::string>& allowed,
                const std::string& where) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const auto& k : allowed) ok |= item.key() == k;
    require(ok, "config.invalid", "unknown key '" + item.key() + "' in " + where);
  }
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail("config.invalid", std::string("bad value for '") + key + "': " + e.what());
  }
}

template <typename T, size_t N>
void read_array_if(const json& j, const char* key, std::array<T, N>& out) {
  if (!j.contains(key)) return;
  try {
    for (size_t i = 0; i < N; ++i) out[i] = j.at(key).at(i).get<T>();
  } catch (const json::exception& e) {
    fail("config.invalid", std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace

json model_config_to_json(const ModelConfig& cfg) {
  return json{{"in_channels", cfg.in_channels},
              {"n_classes", cfg.n_classes},
              {"base_channels", cfg.base_channels},
              {"n_levels", cfg.n_levels},
              {"heads", cfg.heads},
              {"zxy_levels", cfg.resolved_zxy_levels()},
              {"channel_expand", cfg.channel_expand},
              {"max_tokens", cfg.max_tokens},
              {"activation", cfg.activation},
              {"norm", cfg.norm}};
}

ModelConfig model_config_from_json(const json& j) {
  check_keys(j,
             {"in_channels", "n_classes", "base_channels", "n_levels", "heads", "zxy_levels",
              "channel_expand", "max_tokens", "activation", "norm"},
             "model config");
  ModelConfig cfg;
  read_if(j, "in_channels", cfg.in_channels);
  read_if(j, "n_classes", cfg.n_classes);
  read_if(j, "base_channels", cfg.base_channels);
  read_if(j, "n_levels", cfg.n_levels);
  read_if(j, "heads", cfg.heads);
  read_if(j, "zxy_levels", cfg.zxy_levels);
  read_if(j, "channel_expand", cfg.channel_expand);
  read_if(j, "max_tokens", cfg.max_tokens);
  read_if(j, "activation", cfg.activation);
  read_if(j, "norm", cfg.norm);
  cfg.validate();
  return cfg;
}

json train_config_to_json(const TrainConfig& cfg) {
  return json{{"lr0", cfg.lr0},
              {"max_iters", cfg.max_iters},
              {"decay", cfg.decay},
              {"decay_every", cfg.decay_every},
              {"batch_size", cfg.batch_size},
              {"patch_size", cfg.patch_size},
              {"seed", cfg.seed},
              {"adam_beta1", cfg.adam_beta1},
              {"adam_beta2", cfg.adam_beta2},
              {"adam_eps", cfg.adam_eps}};
}

TrainConfig train_config_from_json(const json& j) {
  check_keys(j,
             {"lr0", "max_iters", "decay", "decay_every", "batch_size", "patch_size", "seed",
              "adam_beta1", "adam_beta2", "adam_eps"},
             "train config");
  TrainConfig cfg;
  read_if(j, "lr0", cfg.lr0);
  read_if(j, "max_iters", cfg.max_iters);
  read_if(j, "decay", cfg.decay);
  read_if(j, "decay_every", cfg.decay_every);
  read_if(j, "batch_size", cfg.batch_size);
  read_if(j, "patch_size", cfg.patch_size);
  read_if(j, "seed", cfg.seed);
  read_if(j, "adam_beta1", cfg.adam_beta1);
  read_if(j, "adam_beta2", cfg.adam_beta2);
  read_if(j, "adam_eps", cfg.adam_eps);
  cfg.validate();
  return cfg;
}

json phantom_spec_to_json(const PhantomSpec& spec) {
  return json{{"shape", spec.shape},
              {"spacing_mm", spec.spacing_mm},
              {"n_teeth", spec.n_teeth},
              {"noise_sigma", spec.noise_sigma},
              {"seed", spec.seed},
              {"intensity_bone", spec.intensity_bone},
              {"intensity_tooth", spec.intensity_tooth},
              {"intensity_canal", spec.intensity_canal},
              {"blur", spec.blur}};
}

PhantomSpec phantom_spec_from_json(const json& j) {
  check_keys(j,
             {"shape", "spacing_mm", "n_teeth", "noise_sigma", "seed", "intensity_bone",
              "intensity_tooth", "intensity_canal", "blur"},
             "phantom spec");
  PhantomSpec spec;
  read_array_if(j, "shape", spec.shape);
  read_array_if(j, "spacing_mm", spec.spacing_mm);
  read_if(j, "n_teeth", spec.n_teeth);
  read_if(j, "noise_sigma", spec.noise_sigma);
  read_if(j, "seed", spec.seed);
  read_if(j, "intensity_bone", spec.intensity_bone);
  read_if(j, "intensity_tooth", spec.intensity_tooth);
  read_if(j, "intensity_canal", spec.intensity_canal);
  read_if(j, "blur", spec.blur);
  spec.validate();
  return spec;
}

void ExperimentConfig::validate() const {
  phantom.validate();
  model.validate();
  train_coarse.validate();
  train_fine.validate();
  require(n_cases >= 1, "config.invalid", "n_cases must be >= 1");
  require(clip_hi > clip_lo, "config.invalid", "clip_hi must exceed clip_lo");
  require(roi_margin >= 0, "config.invalid", "roi_margin must be >= 0");
  require(infer_stride >= 0, "config.invalid", "infer_stride must be >= 0");
  for (int d : coarse_shape) require(d >= 8, "config.invalid", "coarse_shape too small");
  const int div = 1 << (model.n_levels - 1);
  for (int d : coarse_shape)
    require(d % div == 0, "config.invalid", "coarse_shape must divide by 2^(n_levels-1)");
  require(train_fine.patch_size % div == 0, "config.invalid",
          "fine patch_size must divide by 2^(n_levels-1)");
}

json experiment_to_json(const ExperimentConfig& cfg) {
  return json{{"seed", cfg.seed},
              {"n_cases", cfg.n_cases},
              {"phantom", phantom_spec_to_json(cfg.phantom)},
              {"model", model_config_to_json(cfg.model)},
              {"train_coarse", train_config_to_json(cfg.train_coarse)},
              {"train_fine", train_config_to_json(cfg.train_fine)},
              {"coarse_shape", cfg.coarse_shape},
              {"clip_lo", cfg.clip_lo},
              {"clip_hi", cfg.clip_hi},
              {"roi_margin", cfg.roi_margin},
              {"infer_stride", cfg.infer_stride},
              {"ablation",
               json{{"weight_transfer", cfg.ablation.weight_transfer},
                    {"zxyformer", cfg.ablation.zxyformer},
                    {"aux_branch", cfg.ablation.aux_branch}}},
              {"paths", json{{"data_dir", cfg.data_dir}, {"out_dir", cfg.out_dir}}}};
}

ExperimentConfig experiment_from_json(const json& j) {
  check_keys(j,
             {"seed", "n_cases", "phantom", "model", "train_coarse", "train_fine", "coarse_shape",
              "clip_lo", "clip_hi", "roi_margin", "infer_stride", "ablation", "paths"},
             "experiment config");
  ExperimentConfig cfg;
  read_if(j, "seed", cfg.seed);
  read_if(j, "n_cases", cfg.n_cases);
  if (j.contains("phantom")) cfg.phantom = phantom_spec_from_json(j.at("phantom"));
  if (j.contains("model")) cfg.model = model_config_from_json(j.at("model"));
  if (j.contains("train_coarse")) cfg.train_coarse = train_config_from_json(j.at("train_coarse"));
  if (j.contains("train_fine")) cfg.train_fine = train_config_from_json(j.at("train_fine"));
  read_array_if(j, "coarse_shape", cfg.coarse_shape);
  read_if(j, "clip_lo", cfg.clip_lo);
  read_if(j, "clip_hi", cfg.clip_hi);
  read_if(j, "roi_margin", cfg.roi_margin);
  read_if(j, "infer_stride", cfg.infer_stride);
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    check_keys(a, {"weight_transfer", "zxyformer", "aux_branch"}, "ablation");
    read_if(a, "weight_transfer", cfg.ablation.weight_transfer);
    read_if(a, "zxyformer", cfg.ablation.zxyformer);
    read_if(a, "aux_branch", cfg.ablation.aux_branch);
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    check_keys(p, {"data_dir", "out_dir"}, "paths");
    read_if(p, "data_dir", cfg.data_dir);
    read_if(p, "out_dir", cfg.out_dir);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  require(in.good(), "io.missing_file", "cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail("config.invalid", "invalid config JSON: " + std::string(e.what()));
  }
  for (const std::string& ov : overrides) {
    const auto eq = ov.find('=');
    require(eq != std::string::npos, "config.invalid", "--set expects key.path=value: " + ov);
    const std::string keypath = ov.substr(0, eq);
    const std::string value = ov.substr(eq + 1);
    json parsed;
    try {
      parsed = json::parse(value);
    } catch (const json::exception&) {
      parsed = value;  // plain string
    }
    json* node = &j;
    size_t start = 0;
    for (;;) {
      const auto dot = keypath.find('.', start);
      const std::string part = keypath.substr(start, dot - start);
      require(!part.empty(), "config.invalid", "empty key segment in " + keypath);
      if (dot == std::string::npos) {
        (*node)[part] = parsed;
        break;
      }
      node = &(*node)[part];
      start = dot + 1;
    }
  }
  return experiment_from_json(j);
}

}  // namespace zxyseg
