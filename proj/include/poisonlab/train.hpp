#pragma once

#include <functional>

#include "poisonlab/dataset.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/optim.hpp"

namespace poisonlab {

struct TrainConfig {
  double lr = 0.1;
  int64_t epochs = 40;
  int64_t batch_size = 128;
  double momentum = 0.9;  // Nesterov
  double weight_decay = 5e-4;
  std::vector<double> drop_points = {3.0 / 8.0, 5.0 / 8.0, 7.0 / 8.0};
  double drop_factor = 10.0;
  AugmentPolicy augment = AugmentPolicy::FlipCrop;
  uint64_t seed = 0;

  void validate() const {
    if (lr < 0 || momentum < 0 || weight_decay < 0 || epochs < 1 || batch_size < 1)
      throw ConfigError("train config: coefficients must be nonnegative, epochs/batch >= 1");
    double prev = 0;
    for (double p : drop_points) {
      if (p <= prev || p >= 1) throw ConfigError("train config: drop points must be strictly increasing in (0,1)");
      prev = p;
    }
  }

  double lr_at_epoch(int64_t epoch_index_1based) const {
    double out = lr;
    for (double p : drop_points)
      if (static_cast<double>(epoch_index_1based) > p * static_cast<double>(epochs)) out /= drop_factor;
    return out;
  }
};

enum class Scenario { FromScratch, FineTuning, Transfer };

struct EpochStats {
  double train_loss = 0;
  double train_acc = 0;
  double val_acc = 0;
};

// Called on every batch before the optimizer step; returns the batch actually
// trained on (Algorithm-style defenses rewrite it).
using DefenseHook = std::function<Batch(const Model&, const Batch&, SplitRng&)>;

// Called on the trainable-parameter gradients (before weight decay is folded
// in); gradient-space defenses clip and noise them here.
using GradHook = std::function<void(std::vector<Tensor>&, SplitRng&)>;

Model train(Model model, const Dataset& train_set, const Dataset* val_set, const TrainConfig& cfg,
            const DefenseHook& hook = {}, std::vector<EpochStats>* history = nullptr,
            const GradHook& grad_hook = {});

// Transfer: head reinitialized, features frozen. FineTuning: head
// reinitialized, everything trainable at lr 0.001. FromScratch: fresh model,
// base ignored.
Model retrain_for_scenario(const Model& base, Scenario scenario, const Dataset& train_set, const Dataset* val_set,
                           TrainConfig cfg, const DefenseHook& hook = {}, std::vector<EpochStats>* history = nullptr,
                           const GradHook& grad_hook = {});

}  // namespace poisonlab
