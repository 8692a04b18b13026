#pragma once

// Step-decayed learning rate plus adaptive-moment updates.

#include <cmath>

#include "zxyseg/model.hpp"

namespace zxyseg {

struct TrainConfig {
  double lr0 = 1e-3;
  int max_iters = 500;       // full-scale runs use 50000
  double decay = 0.99;
  int decay_every = 500;
  int batch_size = 1;
  int patch_size = 64;       // full-scale runs use 128
  std::uint64_t seed = 0;
  // adaptive-moment defaults, recorded here rather than hard-coded
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    require(lr0 > 0, "train.config", "lr0 must be positive");
    require(max_iters >= 1, "train.config", "max_iters must be >= 1");
    require(decay > 0 && decay <= 1, "train.config", "decay must lie in (0, 1]");
    require(decay_every >= 1, "train.config", "decay_every must be >= 1");
    require(batch_size >= 1, "train.config", "batch_size must be >= 1");
    require(patch_size >= 1, "train.config", "patch_size must be >= 1");
  }
};

inline double lr_at(long step, const TrainConfig& cfg) {
  require(step >= 0, "train.step", "step must be >= 0");
  return cfg.lr0 * std::pow(cfg.decay, static_cast<double>(step / cfg.decay_every));
}

template <typename S>
class AdamOptimizer {
public:
  explicit AdamOptimizer(const NetworkParameters<S>& like) {
    for (const auto& name : like.order) {
      m_.add(name, Tensor<S>::zeros(like.at(name).shape));
      v_.add(name, Tensor<S>::zeros(like.at(name).shape));
    }
  }

  void step(NetworkParameters<S>& params, const NetworkParameters<S>& grads, double lr,
            const TrainConfig& cfg) {
    ++t_;
    const S b1 = static_cast<S>(cfg.adam_beta1);
    const S b2 = static_cast<S>(cfg.adam_beta2);
    const S corr1 = S(1) - static_cast<S>(std::pow(cfg.adam_beta1, t_));
    const S corr2 = S(1) - static_cast<S>(std::pow(cfg.adam_beta2, t_));
    for (const auto& name : params.order) {
      auto& p = params.at(name).data;
      const auto& g = grads.at(name).data;
      auto& m = m_.at(name).data;
      auto& v = v_.at(name).data;
      m = b1 * m + (S(1) - b1) * g;
      v = b2 * v + (S(1) - b2) * g.square();
      p -= static_cast<S>(lr) * (m / corr1) /
           ((v / corr2).sqrt() + static_cast<S>(cfg.adam_eps));
    }
  }

  long steps_taken() const { return t_; }

private:
  NetworkParameters<S> m_, v_;
  long t_ = 0;
};

}  // namespace zxyseg
