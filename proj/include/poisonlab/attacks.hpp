#pragma once

#include <optional>
#include <string>

#include "poisonlab/model.hpp"
#include "poisonlab/optim.hpp"
#include "poisonlab/train.hpp"

namespace poisonlab {

enum class AttackKind {
  None,
  FeatureCollision,
  Bullseye,
  GradientMatching,
  MetaPoisonUnrolled,
  BackdoorPatch,
  HiddenTrigger,
  Watermark,
};

enum class MatchMode { Cosine, SquaredError };

// Backdoor patch: per-channel checkerboard bits stamped at a fixed corner
// offset; (row,col) = -1 places it at the lower right.
struct Trigger {
  Tensor pattern;  // [C, h, w], values in [0,1]
  int64_t h = 6;
  int64_t w = 6;
  int64_t row = -1;
  int64_t col = -1;
};

Trigger sample_checkerboard_trigger(int64_t channels, int64_t h, int64_t w, SplitRng& rng);
void imprint_trigger(double* image, const Shape& image_shape, const Trigger& trigger);

struct AttackConfig {
  AttackKind kind = AttackKind::GradientMatching;
  MatchMode mode = MatchMode::Cosine;
  int64_t steps = 240;
  double step_size = 0.1;
  int64_t restarts = 1;
  bool augment_during_attack = true;
  int64_t unroll = 2;      // MetaPoison inner steps
  double inner_lr = 0.1;   // MetaPoison simulated SGD rate
  double opacity = 16.0 / 255.0;  // watermark
  double dp_noise = 0.0;   // adaptive DP-SGD: noise added to surrogate gradients
  uint64_t seed = 0;

  void validate() const {
    if (steps < 1 || restarts < 1) throw ConfigError("attack config: steps and restarts must be >= 1");
  }
};

struct PoisonSet {
  std::vector<int64_t> ids;  // stable dataset ids
  Tensor deltas;             // [k, D]
  std::optional<Trigger> trigger;
  PerturbationBudget budget;
  AttackKind kind = AttackKind::None;
  uint64_t seed = 0;

  int64_t count() const { return static_cast<int64_t>(ids.size()); }
};

// Returns a copy of the dataset with deltas applied to the poisoned ids.
Dataset apply_poisons(const Dataset& d, const PoisonSet& ps);

PoisonSet attack_feature_collision(const Model& surrogate, const Dataset& train, const std::vector<int64_t>& poison_ids,
                                   const Tensor& target_image, const PerturbationBudget& budget,
                                   const AttackConfig& cfg);
PoisonSet attack_bullseye(const Model& surrogate, const Dataset& train, const std::vector<int64_t>& poison_ids,
                          const Tensor& target_image, const PerturbationBudget& budget, const AttackConfig& cfg);
PoisonSet attack_gradient_matching(const Model& surrogate, const Dataset& train, const std::vector<int64_t>& poison_ids,
                                   const Tensor& target_image, int adversarial_label, const PerturbationBudget& budget,
                                   const AttackConfig& cfg);
PoisonSet attack_metapoison_unrolled(const Model& surrogate, const Dataset& train,
                                     const std::vector<int64_t>& poison_ids, const Tensor& target_image,
                                     int adversarial_label, const PerturbationBudget& budget, const AttackConfig& cfg);
PoisonSet attack_backdoor_patch(const Dataset& train, const Trigger& trigger, const PerturbationBudget& budget,
                                int poison_class, uint64_t seed);
PoisonSet attack_hidden_trigger(const Model& surrogate, const Dataset& train, const std::vector<int64_t>& poison_ids,
                                const Trigger& trigger, const std::vector<Tensor>& source_images,
                                const PerturbationBudget& budget, const AttackConfig& cfg);
PoisonSet attack_watermark(const Dataset& train, const std::vector<int64_t>& poison_ids, const Tensor& target_image,
                           double opacity);

void save_poisonset(const PoisonSet& ps, const std::string& path);
PoisonSet load_poisonset(const std::string& path);

}  // namespace poisonlab
