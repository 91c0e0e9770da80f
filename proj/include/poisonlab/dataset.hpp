#pragma once

#include <optional>
#include <string>
#include <vector>

#include "poisonlab/linmap.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/tensor.hpp"

namespace poisonlab {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One minibatch; images are flattened row-per-example. soft_labels, when set,
// carries per-class label weights (mixup/cutmix) and overrides labels in the
// loss.
struct Batch {
  Tensor images;  // [B, D]
  std::vector<int> labels;
  std::vector<int64_t> ids;
  std::optional<Tensor> soft_labels;  // [B, classes]

  int64_t size() const { return images.shape.empty() ? 0 : images.shape[0]; }
  int64_t dim() const { return images.shape.size() < 2 ? 0 : images.shape[1]; }
};

// Immutable after load; pixels normalized to [0,1]; ids are stable across
// subsetting.
struct Dataset {
  int64_t classes = 10;
  Shape image_shape;  // per-example shape, e.g. {3,32,32} or {dim}
  std::vector<double> pixels;
  std::vector<int> labels;
  std::vector<int64_t> ids;
  std::string split = "train";

  int64_t n() const { return static_cast<int64_t>(labels.size()); }
  int64_t dim() const { return numel(image_shape); }

  const double* image(int64_t pos) const { return pixels.data() + pos * dim(); }
  Batch batch(const std::vector<int64_t>& positions) const;
  Tensor image_tensor(int64_t pos) const;
  // Position of an example by stable id; -1 if absent.
  int64_t position_of(int64_t id) const;
};

// Standard CIFAR-10 binary layout: per record one label byte + 3072 pixel
// bytes, channel-major. Record order becomes the id order.
Dataset load_cifar10_bin(const std::vector<std::string>& paths);

// Deterministic per-class stratified subset.
Dataset subset_stratified(const Dataset& d, double fraction, uint64_t seed);
// Split off the first n_val examples per class (by id order) as a validation set.
std::pair<Dataset, Dataset> split_train_val(const Dataset& d, int64_t n_val_per_class);

Dataset synth_blobs(int64_t classes, int64_t dim, int64_t n_per_class, double separation, uint64_t seed);

// CIFAR-shaped synthetic classes (smooth per-class textures plus instance
// noise); stands in for real CIFAR-10 where no data files are available.
Dataset synth_textures(int64_t classes, int64_t n_per_class, uint64_t seed, double ambiguity = 0.0);

void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);
void save_cifar10_bin(const Dataset& d, const std::string& path);

enum class AugmentPolicy { None, FlipCrop };

// Zero-padded integer translation / horizontal flip as a linear resampling
// map over a [C,H,W] image; shared by train-time augmentation and by attacks
// that differentiate through the augmentation.
LinMapPtr flip_translate_map(int64_t channels, int64_t height, int64_t width, bool flip, int64_t dy, int64_t dx);

struct AugmentSample {
  bool flip = false;
  int64_t dy = 0;
  int64_t dx = 0;
};
AugmentSample sample_augment(SplitRng& rng);

// Per-image independent flip (p=0.5) and translation in [-4,4]^2.
Batch augment(const Batch& b, AugmentPolicy policy, SplitRng& rng, const Shape& image_shape);

}  // namespace poisonlab
