#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "poisonlab/tensor.hpp"

namespace poisonlab {

enum class NormKind { LInf, PatchL0 };

// Attack constraint set: epsilon in normalized pixel units (the usual 0-255
// epsilon of 16 is stored as 16/255), fraction = share of the training set
// the attacker may touch.
struct PerturbationBudget {
  NormKind norm = NormKind::LInf;
  double epsilon = 16.0 / 255.0;
  int64_t patch_h = 0;
  int64_t patch_w = 0;
  double fraction = 0.01;

  void validate() const {
    if (epsilon < 0) throw std::invalid_argument("budget epsilon must be >= 0");
    if (fraction < 0 || fraction > 1) throw std::invalid_argument("budget fraction must be in [0,1]");
    if (norm == NormKind::PatchL0 && (patch_h <= 0 || patch_w <= 0))
      throw std::invalid_argument("PatchL0 budget requires a patch shape");
  }
};

// Clamp delta to the budget and keep image+delta inside [0,1]. Total and
// idempotent. For PatchL0 the support is restricted to the patch rectangle at
// (patch_row, patch_col); pass -1 to place it at the lower right corner.
inline Tensor project(const Tensor& image, const Tensor& delta, const PerturbationBudget& budget,
                      int64_t channels = 0, int64_t height = 0, int64_t width = 0, int64_t patch_row = -1,
                      int64_t patch_col = -1) {
  if (image.shape != delta.shape) throw ShapeError("project: image/delta shape mismatch");
  budget.validate();
  Tensor out = delta;
  if (budget.norm == NormKind::LInf) {
    for (int64_t i = 0; i < out.size(); ++i) {
      double d = std::clamp(out[i], -budget.epsilon, budget.epsilon);
      out[i] = std::clamp(image[i] + d, 0.0, 1.0) - image[i];
    }
    return out;
  }
  // PatchL0 over a [C,H,W] image (possibly batched as leading dims).
  if (channels <= 0 || height <= 0 || width <= 0)
    throw std::invalid_argument("project(PatchL0) needs channels/height/width");
  int64_t r0 = patch_row >= 0 ? patch_row : height - budget.patch_h;
  int64_t c0 = patch_col >= 0 ? patch_col : width - budget.patch_w;
  int64_t per_image = channels * height * width;
  int64_t images = out.size() / per_image;
  for (int64_t b = 0; b < images; ++b) {
    for (int64_t c = 0; c < channels; ++c) {
      for (int64_t y = 0; y < height; ++y) {
        for (int64_t x = 0; x < width; ++x) {
          int64_t i = b * per_image + (c * height + y) * width + x;
          bool inside = y >= r0 && y < r0 + budget.patch_h && x >= c0 && x < c0 + budget.patch_w;
          if (!inside) {
            out[i] = 0.0;
          } else {
            out[i] = std::clamp(image[i] + out[i], 0.0, 1.0) - image[i];
          }
        }
      }
    }
  }
  return out;
}

// Adam moments with a sign(update) step, the optimizer used by all iterative
// attacks: standard moment updates, then the variable moves by exactly the
// current step size in the direction of the bias-corrected update.
struct SignedAdamState {
  int64_t t = 0;
  Tensor m, v;
  double base_step = 0.1;
  int64_t total_steps = 240;
  std::vector<double> decay_points = {3.0 / 8.0, 5.0 / 8.0, 7.0 / 8.0};
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static SignedAdamState init(const Shape& shape, double step_size, int64_t steps) {
    SignedAdamState s;
    s.m = Tensor::zeros(shape);
    s.v = Tensor::zeros(shape);
    s.base_step = step_size;
    s.total_steps = steps;
    return s;
  }

  double current_step_size() const {
    double lr = base_step;
    for (double p : decay_points)
      if (static_cast<double>(t) > p * static_cast<double>(total_steps)) lr /= 10.0;
    return lr;
  }

  void step(Tensor& var, const Tensor& grad) {
    if (var.shape != m.shape || grad.shape != m.shape)
      throw ShapeError("signed_adam_step: shape mismatch");
    if (!grad.all_finite())
      throw NumericError("signed_adam_step: non-finite gradient at step " + std::to_string(t + 1));
    ++t;
    double lr = current_step_size();
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (int64_t i = 0; i < var.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      double u = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
      double s = u > 0 ? 1.0 : (u < 0 ? -1.0 : 0.0);
      var[i] -= lr * s;
    }
  }
};

// SGD with Nesterov momentum; decay is folded into the gradient by the
// training loop so frozen parameters never see it.
struct SgdNesterovState {
  Tensor velocity;
  double momentum = 0.9;

  static SgdNesterovState init(const Shape& shape, double mu) {
    SgdNesterovState s;
    s.velocity = Tensor::zeros(shape);
    s.momentum = mu;
    return s;
  }

  void step(Tensor& param, const Tensor& grad, double lr) {
    for (int64_t i = 0; i < param.size(); ++i) {
      velocity[i] = momentum * velocity[i] + grad[i];
      param[i] -= lr * (grad[i] + momentum * velocity[i]);
    }
  }
};

}  // namespace poisonlab
