#pragma once

#include "poisonlab/attacks.hpp"
#include "poisonlab/train.hpp"

namespace poisonlab {

enum class DefenseKind {
  None,
  AdversarialPoisoning,
  DPSGD,
  AdvTraining,
  InputNoise,
  Mixup,
  Cutout,
  CutMix,
  Maxup,
  SpectralFilter,
  DeepKNNFilter,
  ActivationClusterFilter,
};

struct DefenseConfig {
  DefenseKind kind = DefenseKind::None;
  double p = 0.75;          // split probability (targeted default; 0.5 for backdoors)
  int64_t inner_steps = 5;  // surrogate craft steps inside the training loop
  AttackKind surrogate = AttackKind::GradientMatching;  // AttackKind::None = plain loss ascent
  MatchMode surrogate_mode = MatchMode::Cosine;
  double epsilon = 16.0 / 255.0;  // defended budget; adv-training ball; input-noise magnitude
  double inner_step_size = 0.1;   // signed Adam step for targeted surrogates
  double adv_step_size = -1.0;    // adversarial training ascent step; < 0 means epsilon/4
  int64_t unroll = 2;             // unrolled-surrogate inner steps
  double inner_lr = 0.1;
  double clip = 1.0;   // DPSGD minibatch gradient norm bound
  double noise = 1e-3; // DPSGD noise standard deviation
  double mixup_alpha = 0.8;
  bool gray_patch = false;  // backdoor surrogate stamps uniform gray instead of a checkerboard
  double overestimate = 1.5;
  int64_t knn_k = 0;  // 0 = 2x the expected per-class poison count
  double cluster_threshold = 0.35;

  void validate() const {
    if (p <= 0.0 || p >= 1.0)
      throw ConfigError("defense config: split probability must lie strictly inside (0,1)");
    if (inner_steps < 1) throw ConfigError("defense config: inner steps must be >= 1");
    if (clip <= 0.0) throw ConfigError("defense config: gradient clip must be positive");
    if (epsilon < 0.0) throw ConfigError("defense config: epsilon must be >= 0");
    if (noise < 0.0) throw ConfigError("defense config: noise scale must be >= 0");
    if (mixup_alpha < 0.0 || mixup_alpha > 1.0) throw ConfigError("defense config: mixing factor must be in [0,1]");
  }
};

// One training-time pass of the modified iterative routine: split the batch
// into poison/target partitions, craft the configured surrogate attack
// against the current model, and return the concatenated batch with original
// labels. An empty partition returns the batch unchanged.
Batch adversarial_poisoning_batch(const Model& model, const Batch& batch, const DefenseConfig& cfg, SplitRng& rng,
                                  const Shape& image_shape, int64_t classes);

// Per-example PGD from a random start in the epsilon ball: signed cross
// entropy ascent, projected every step.
Batch adv_training_perturb(const Model& model, const Batch& batch, double epsilon, int64_t steps, SplitRng& rng,
                           double step_size = -1.0);

// Rescale the minibatch gradient to norm <= clip, then add componentwise
// Gaussian noise.
void dp_sgd_step(std::vector<Tensor>& grads, double clip, double noise_scale, SplitRng& rng);

// Each pixel moves by +eps or -eps with probability 1/2, then clamps to [0,1].
Batch input_noise(const Batch& batch, double epsilon, SplitRng& rng);

// Augmentation baselines. Mixup/Cutout/CutMix split and pair exactly like the
// corresponding surrogate of adversarial_poisoning_batch, which is what makes
// the watermark<->mixup and gray-patch<->cutout equivalences pixel-exact.
// Maxup keeps, per example, the max-loss variant of `candidates` cutouts and
// therefore needs the current model.
Batch mixup(const Batch& batch, double alpha, double p, SplitRng& rng, int64_t classes);
Batch cutout(const Batch& batch, double p, SplitRng& rng, const Shape& image_shape, int64_t classes);
Batch cutmix(const Batch& batch, double p, SplitRng& rng, const Shape& image_shape, int64_t classes);
Batch maxup(const Model& model, const Batch& batch, double p, SplitRng& rng, const Shape& image_shape,
            int64_t classes, int64_t candidates = 4);

// Batch-level hook for the training loop; returns an empty function for
// defenses that act elsewhere (gradients, filtering).
DefenseHook make_defense_hook(const DefenseConfig& cfg, const Shape& image_shape, int64_t classes);
// Gradient-space hook; non-empty only for DPSGD.
GradHook make_grad_hook(const DefenseConfig& cfg);

// Filtering defenses over per-example feature rows [N, F]; return row indices
// slated for removal.
std::vector<int64_t> filter_spectral(const Tensor& features, const std::vector<int>& labels, int64_t classes,
                                     int64_t budget_count, double overestimate = 1.5);
std::vector<int64_t> filter_deep_knn(const Tensor& features, const std::vector<int>& labels, int64_t classes,
                                     int64_t k, int64_t budget_count, double overestimate = 2.0);
std::vector<int64_t> filter_activation_clustering(const Tensor& features, const std::vector<int>& labels,
                                                  int64_t classes, double threshold = 0.35);

}  // namespace poisonlab
