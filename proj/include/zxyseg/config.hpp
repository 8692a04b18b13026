#pragma once

// JSON (de)serialization for the experiment configuration and its embedded
// sections. Parsing is strict: unknown keys are rejected everywhere.

#include <json.hpp>

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "zxyseg/model.hpp"
#include "zxyseg/optimizer.hpp"
#include "zxyseg/phantom.hpp"

namespace zxyseg {

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

nlohmann::json phantom_spec_to_json(const PhantomSpec& spec);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);

struct AblationToggles {
  bool weight_transfer = true;
  bool zxyformer = true;
  bool aux_branch = true;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int n_cases = 29;
  PhantomSpec phantom;
  ModelConfig model;
  TrainConfig train_coarse;
  TrainConfig train_fine;
  std::array<int, 3> coarse_shape{64, 64, 64};
  double clip_lo = 0.0;
  double clip_hi = 2500.0;
  int roi_margin = 8;
  int infer_stride = 0;  // 0 means patch/2
  AblationToggles ablation;
  std::string data_dir;
  std::string out_dir;

  void validate() const;
};

nlohmann::json experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const nlohmann::json& j);

// loads a config file and applies `--set key.path=value` overrides; values
// parse as JSON scalars, falling back to strings
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {});

}  // namespace zxyseg
