#include "poisonlab/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace poisonlab {

namespace {

// --- shared randomness protocol -------------------------------------------
// The augmentation baselines replay the exact draw order of the
// corresponding surrogate inside adversarial_poisoning_batch; the
// watermark<->mixup and gray-patch<->cutout identities depend on it.

struct Split {
  std::vector<int64_t> poison, target;  // positions within the batch
};

Split split_batch(int64_t n, double p, SplitRng& rng) {
  SplitRng s = rng.derive("split");
  Split out;
  for (int64_t i = 0; i < n; ++i) (s.bernoulli(p) ? out.poison : out.target).push_back(i);
  return out;
}

// One partner per poison example, drawn uniformly from the target partition.
std::vector<int64_t> pair_targets(const Split& sp, SplitRng& rng) {
  SplitRng pr = rng.derive("pair");
  std::vector<int64_t> partner(sp.poison.size());
  for (size_t i = 0; i < sp.poison.size(); ++i)
    partner[i] = sp.target[static_cast<size_t>(pr.uniform_int(static_cast<int64_t>(sp.target.size())))];
  return partner;
}

struct ClassPatch {
  int64_t h, w, y0, x0;
  Tensor pattern;  // [C, h, w]
};

// Random rectangle with per-channel area < 45, random location, per-channel
// checkerboard polarity (or uniform gray).
std::vector<ClassPatch> sample_class_patches(SplitRng& rng, const Shape& img, int64_t classes, bool gray) {
  int64_t C = img[0], H = img[1], W = img[2];
  SplitRng pa = rng.derive("patch");
  std::vector<ClassPatch> out;
  for (int64_t c = 0; c < classes; ++c) {
    SplitRng child = pa.derive(static_cast<uint64_t>(c));
    ClassPatch p;
    p.h = 2 + child.uniform_int(7);  // 2..8
    int64_t wmax = std::min<int64_t>(8, 44 / p.h);
    p.w = 2 + child.uniform_int(wmax - 1);
    p.y0 = child.uniform_int(H - p.h + 1);
    p.x0 = child.uniform_int(W - p.w + 1);
    p.pattern = Tensor::zeros({C, p.h, p.w});
    for (int64_t ch = 0; ch < C; ++ch) {
      int64_t polarity = child.uniform_int(2);  // drawn either way to keep streams aligned
      for (int64_t y = 0; y < p.h; ++y)
        for (int64_t x = 0; x < p.w; ++x)
          p.pattern[(ch * p.h + y) * p.w + x] = gray ? 0.5 : static_cast<double>((y + x + polarity) & 1);
    }
    out.push_back(std::move(p));
  }
  return out;
}

void stamp(double* image, const Shape& img, const ClassPatch& p) {
  int64_t C = img[0], H = img[1], W = img[2];
  for (int64_t ch = 0; ch < C; ++ch)
    for (int64_t y = 0; y < p.h; ++y)
      for (int64_t x = 0; x < p.w; ++x)
        image[(ch * H + p.y0 + y) * W + p.x0 + x] = p.pattern[(ch * p.h + y) * p.w + x];
}

// Patch every image: poison examples get their own class patch, target
// examples the patch of the class paired with theirs.
Batch patch_batch(const Batch& batch, double p, SplitRng& rng, const Shape& img, int64_t classes, bool gray) {
  if (img.size() != 3) throw ConfigError("patch defense requires [C,H,W] images");
  Batch out = batch;
  Split sp = split_batch(batch.size(), p, rng);
  if (sp.poison.empty() || sp.target.empty()) return out;
  auto patches = sample_class_patches(rng, img, classes, gray);
  auto sigma = rng.derive("pairs").permutation(classes);
  std::vector<int64_t> inv(static_cast<size_t>(classes));
  for (int64_t c = 0; c < classes; ++c) inv[static_cast<size_t>(sigma[static_cast<size_t>(c)])] = c;
  int64_t D = batch.dim();
  for (int64_t i : sp.poison)
    stamp(out.images.v.data() + i * D, img, patches[static_cast<size_t>(batch.labels[static_cast<size_t>(i)])]);
  for (int64_t i : sp.target)
    stamp(out.images.v.data() + i * D, img, patches[static_cast<size_t>(inv[static_cast<size_t>(batch.labels[static_cast<size_t>(i)])])]);
  return out;
}

// Blend each poison example toward its partner; keep = weight on the
// original image. Optionally emit mixed soft labels.
Batch blend_batch(const Batch& batch, double keep, double p, SplitRng& rng, int64_t classes, bool soft) {
  Batch out = batch;
  Split sp = split_batch(batch.size(), p, rng);
  if (sp.poison.empty() || sp.target.empty()) return out;
  auto partner = pair_targets(sp, rng);
  int64_t D = batch.dim();
  if (soft) {
    Tensor labels = Tensor::zeros({batch.size(), classes});
    for (int64_t i = 0; i < batch.size(); ++i) labels[i * classes + batch.labels[static_cast<size_t>(i)]] = 1.0;
    out.soft_labels = std::move(labels);
  }
  for (size_t k = 0; k < sp.poison.size(); ++k) {
    int64_t i = sp.poison[k], t = partner[k];
    for (int64_t j = 0; j < D; ++j)
      out.images[i * D + j] = keep * batch.images[i * D + j] + (1.0 - keep) * batch.images[t * D + j];
    if (soft) {
      Tensor& L = *out.soft_labels;
      for (int64_t c = 0; c < classes; ++c) L[i * classes + c] = 0.0;
      L[i * classes + batch.labels[static_cast<size_t>(i)]] += keep;
      L[i * classes + batch.labels[static_cast<size_t>(t)]] += 1.0 - keep;
    }
  }
  return out;
}

int mode_label(const std::vector<int>& labels, const std::vector<int64_t>& subset, int64_t classes) {
  std::vector<int64_t> counts(static_cast<size_t>(classes), 0);
  for (int64_t i : subset) ++counts[static_cast<size_t>(labels[static_cast<size_t>(i)])];
  int best = 0;
  for (int64_t c = 1; c < classes; ++c)
    if (counts[static_cast<size_t>(c)] > counts[static_cast<size_t>(best)]) best = static_cast<int>(c);
  return best;  // ties go to the smallest label
}

Tensor rows(const Tensor& images, const std::vector<int64_t>& idx) {
  int64_t D = images.shape[1];
  Tensor out = Tensor::zeros({static_cast<int64_t>(idx.size()), D});
  for (size_t k = 0; k < idx.size(); ++k)
    std::copy(images.v.begin() + static_cast<size_t>(idx[k] * D), images.v.begin() + static_cast<size_t>((idx[k] + 1) * D),
              out.v.begin() + k * static_cast<size_t>(D));
  return out;
}

std::vector<int> pick(const std::vector<int>& labels, const std::vector<int64_t>& idx) {
  std::vector<int> out;
  for (int64_t i : idx) out.push_back(labels[static_cast<size_t>(i)]);
  return out;
}

Tensor mean_feature_row(const Model& m, const Tensor& images) {
  Batch b;
  b.images = images;
  Tensor f = evaluate(m, b).features;  // [n, F]
  int64_t n = f.shape[0], F = f.shape[1];
  Tensor out = Tensor::zeros({1, F});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < F; ++j) out[j] += f[i * F + j] / static_cast<double>(n);
  return out;
}

// Signed-Adam descent of `build` over the poison deltas, projected into the
// LInf budget every step.
Tensor craft_deltas(const Tensor& px, const std::function<Graph::Id(Graph&, Graph::Id)>& build, double eps,
                    int64_t steps, double step_size) {
  Tensor deltas = Tensor::zeros(px.shape);
  if (eps == 0.0) return deltas;
  PerturbationBudget budget;
  budget.epsilon = eps;
  auto adam = SignedAdamState::init(px.shape, step_size, steps);
  for (int64_t s = 0; s < steps; ++s) {
    Graph g;
    Graph::Id dvar = g.variable(deltas);
    Graph::Id x = g.add(g.constant(px), dvar);
    Graph::Id loss = build(g, x);
    adam.step(deltas, g.val(g.gradient(loss, {dvar})[0]));
    deltas = project(px, deltas, budget);
  }
  return deltas;
}

// Batched signed ascent on the cross entropy, random start inside the ball.
// adversarial_poisoning_batch with a plain-loss surrogate and the standalone
// adversarial-training defense both run through here, which is what the
// recovery identity L_adv = -sum L promises.
Tensor pgd_ascent_deltas(const Model& m, const Tensor& images, const std::vector<int>& labels, double eps,
                         int64_t steps, double step_size, SplitRng& rng) {
  int64_t B = images.shape[0], D = images.shape[1];
  Tensor deltas = Tensor::zeros({B, D});
  if (eps == 0.0) return deltas;
  if (step_size < 0) step_size = eps / 4.0;
  PerturbationBudget budget;
  budget.epsilon = eps;
  SplitRng start = rng.derive("advstart");
  for (int64_t i = 0; i < B; ++i) {
    SplitRng child = start.derive(static_cast<uint64_t>(i));
    for (int64_t j = 0; j < D; ++j) deltas[i * D + j] = child.uniform(-eps, eps);
  }
  deltas = project(images, deltas, budget);
  for (int64_t s = 0; s < steps; ++s) {
    Graph g;
    Graph::Id dvar = g.variable(deltas);
    Graph::Id x = g.add(g.constant(images), dvar);
    auto pids = param_nodes(g, m, false);
    auto fwd = model_forward(g, m, pids, x, B);
    Graph::Id loss = cross_entropy(g, fwd.logits, labels);
    const Tensor& grad = g.val(g.gradient(loss, {dvar})[0]);
    for (int64_t i = 0; i < deltas.size(); ++i)
      deltas[i] += step_size * (grad[i] > 0 ? 1.0 : (grad[i] < 0 ? -1.0 : 0.0));
    deltas = project(images, deltas, budget);
  }
  return deltas;
}

void scatter_rows(Tensor& images, const std::vector<int64_t>& idx, const Tensor& block, const Tensor& deltas) {
  int64_t D = images.shape[1];
  for (size_t k = 0; k < idx.size(); ++k)
    for (int64_t j = 0; j < D; ++j)
      images[idx[k] * D + j] =
          std::clamp(block[static_cast<int64_t>(k) * D + j] + deltas[static_cast<int64_t>(k) * D + j], 0.0, 1.0);
}

}  // namespace

Batch adv_training_perturb(const Model& model, const Batch& batch, double epsilon, int64_t steps, SplitRng& rng,
                           double step_size) {
  if (epsilon < 0) throw ConfigError("adversarial training: epsilon must be >= 0");
  if (epsilon == 0.0) return batch;
  Batch out = batch;
  Tensor deltas = pgd_ascent_deltas(model, batch.images, batch.labels, epsilon, steps, step_size, rng);
  for (int64_t i = 0; i < out.images.size(); ++i)
    out.images[i] = std::clamp(out.images[i] + deltas[i], 0.0, 1.0);
  return out;
}

Batch adversarial_poisoning_batch(const Model& model, const Batch& batch, const DefenseConfig& cfg, SplitRng& rng,
                                  const Shape& image_shape, int64_t classes) {
  cfg.validate();
  if (batch.size() == 0) return batch;

  switch (cfg.surrogate) {
    case AttackKind::None:
      // L_adv = -sum of training losses: every example, both partitions, is
      // perturbed by plain loss ascent; the split is immaterial.
      return adv_training_perturb(model, batch, cfg.epsilon, cfg.inner_steps, rng, cfg.adv_step_size);
    case AttackKind::Watermark:
      return blend_batch(batch, 1.0 - cfg.epsilon, cfg.p, rng, classes, /*soft=*/false);
    case AttackKind::BackdoorPatch:
      return patch_batch(batch, cfg.p, rng, image_shape, classes, cfg.gray_patch);
    default:
      break;
  }

  Split sp = split_batch(batch.size(), cfg.p, rng);
  if (sp.poison.empty() || sp.target.empty()) return batch;
  Tensor px = rows(batch.images, sp.poison);
  std::vector<int> py = pick(batch.labels, sp.poison);
  Tensor tx = rows(batch.images, sp.target);
  int64_t k = static_cast<int64_t>(sp.poison.size());
  int y_adv = mode_label(batch.labels, sp.poison, classes);

  std::function<Graph::Id(Graph&, Graph::Id)> build;
  Batch out = batch;
  switch (cfg.surrogate) {
    case AttackKind::FeatureCollision:
    case AttackKind::Bullseye: {
      Tensor tmean = mean_feature_row(model, tx);
      bool bullseye = cfg.surrogate == AttackKind::Bullseye;
      Tensor tile = Tensor::zeros({bullseye ? 1 : k, tmean.shape[1]});
      for (int64_t i = 0; i < tile.shape[0]; ++i)
        std::copy(tmean.v.begin(), tmean.v.end(), tile.v.begin() + static_cast<size_t>(i * tmean.shape[1]));
      Tensor avg = Tensor::full({1, k}, 1.0 / static_cast<double>(k));
      build = [&model, tile, avg, bullseye, k](Graph& g, Graph::Id x) {
        auto pids = param_nodes(g, model, false);
        auto fwd = model_forward(g, model, pids, x, k);
        Graph::Id f = bullseye ? g.matmul(g.constant(avg), fwd.features) : fwd.features;
        return g.sqnorm(g.sub(f, g.constant(tile)));
      };
      break;
    }
    case AttackKind::HiddenTrigger: {
      // Targets are patched only inside the craft; the emitted batch keeps
      // them clean, mirroring a trigger that appears at evaluation time.
      Tensor patched = tx;
      auto patches = sample_class_patches(rng, image_shape, classes, cfg.gray_patch);
      auto sigma = rng.derive("pairs").permutation(classes);
      std::vector<int64_t> inv(static_cast<size_t>(classes));
      for (int64_t c = 0; c < classes; ++c) inv[static_cast<size_t>(sigma[static_cast<size_t>(c)])] = c;
      int64_t D = batch.dim();
      for (size_t i = 0; i < sp.target.size(); ++i)
        stamp(patched.v.data() + static_cast<int64_t>(i) * D, image_shape,
              patches[static_cast<size_t>(inv[static_cast<size_t>(batch.labels[static_cast<size_t>(sp.target[i])])])]);
      Tensor tmean = mean_feature_row(model, patched);
      Tensor tile = Tensor::zeros({k, tmean.shape[1]});
      for (int64_t i = 0; i < k; ++i)
        std::copy(tmean.v.begin(), tmean.v.end(), tile.v.begin() + static_cast<size_t>(i * tmean.shape[1]));
      build = [&model, tile, k](Graph& g, Graph::Id x) {
        auto pids = param_nodes(g, model, false);
        auto fwd = model_forward(g, model, pids, x, k);
        return g.sqnorm(g.sub(fwd.features, g.constant(tile)));
      };
      break;
    }
    case AttackKind::GradientMatching: {
      std::vector<size_t> match_idx;
      for (size_t i = 0; i < model.params.size(); ++i)
        if (!model.frozen[i]) match_idx.push_back(i);
      std::vector<Tensor> gt;
      {
        Graph g;
        std::vector<Graph::Id> pids, match_ids;
        for (size_t i = 0; i < model.params.size(); ++i) {
          bool mt = !model.frozen[i];
          pids.push_back(mt ? g.variable(model.params[i]) : g.constant(model.params[i]));
          if (mt) match_ids.push_back(pids.back());
        }
        auto fwd = model_forward(g, model, pids, g.constant(tx), static_cast<int64_t>(sp.target.size()));
        std::vector<int> adv(sp.target.size(), y_adv);
        auto grads = g.gradient(cross_entropy(g, fwd.logits, adv), match_ids);
        for (Graph::Id gid : grads) gt.push_back(g.val(gid));
      }
      double gt_sq = 0;
      for (const Tensor& t : gt)
        for (double v : t.v) gt_sq += v * v;
      double gt_norm = std::sqrt(gt_sq);
      if (cfg.surrogate_mode == MatchMode::Cosine && gt_norm < 1e-12) return batch;  // undefined objective: skip
      MatchMode mode = cfg.surrogate_mode;
      build = [&model, gt = std::move(gt), gt_norm, py, mode, k](Graph& g, Graph::Id x) {
        std::vector<Graph::Id> pids, match_ids;
        for (size_t i = 0; i < model.params.size(); ++i) {
          bool mt = !model.frozen[i];
          pids.push_back(mt ? g.variable(model.params[i]) : g.constant(model.params[i]));
          if (mt) match_ids.push_back(pids.back());
        }
        auto fwd = model_forward(g, model, pids, x, k);
        auto gp = g.gradient(cross_entropy(g, fwd.logits, py), match_ids);
        if (mode == MatchMode::SquaredError) {
          Graph::Id acc = g.constant(Tensor::scalar(0.0));
          for (size_t j = 0; j < gp.size(); ++j) acc = g.add(acc, g.sqnorm(g.sub(gp[j], g.constant(gt[j]))));
          return acc;
        }
        Graph::Id dot_total = g.constant(Tensor::scalar(0.0));
        Graph::Id sq_total = g.constant(Tensor::scalar(0.0));
        for (size_t j = 0; j < gp.size(); ++j) {
          dot_total = g.add(dot_total, g.dot(gp[j], g.constant(gt[j])));
          sq_total = g.add(sq_total, g.sqnorm(gp[j]));
        }
        return g.sub(g.constant(Tensor::scalar(1.0)), g.div(dot_total, g.scale(g.sqrt_(sq_total), gt_norm)));
      };
      break;
    }
    case AttackKind::MetaPoisonUnrolled: {
      std::vector<int> adv(sp.target.size(), y_adv);
      int64_t nt = static_cast<int64_t>(sp.target.size());
      build = [&model, &cfg, tx, py, adv, k, nt](Graph& g, Graph::Id x) {
        std::vector<Graph::Id> theta = param_nodes(g, model, true);
        for (int64_t u = 0; u < cfg.unroll; ++u) {
          auto fwd = model_forward(g, model, theta, x, k);
          auto ig = g.gradient(cross_entropy(g, fwd.logits, py), theta);
          for (size_t i = 0; i < theta.size(); ++i)
            theta[i] = model.frozen[i] ? theta[i] : g.sub(theta[i], g.scale(ig[i], cfg.inner_lr));
        }
        auto tf = model_forward(g, model, theta, g.constant(tx), nt);
        return cross_entropy(g, tf.logits, adv);
      };
      break;
    }
    default:
      throw ConfigError("adversarial poisoning: unsupported surrogate attack");
  }

  Tensor deltas;
  try {
    deltas = craft_deltas(px, build, cfg.epsilon, cfg.inner_steps, cfg.inner_step_size);
  } catch (const NoPathError&) {
    return batch;  // degenerate surrogate (e.g. zero unroll) cannot act
  }
  scatter_rows(out.images, sp.poison, px, deltas);
  return out;
}

void dp_sgd_step(std::vector<Tensor>& grads, double clip, double noise_scale, SplitRng& rng) {
  if (clip <= 0) throw ConfigError("dp_sgd_step: clip must be positive");
  if (noise_scale < 0) throw ConfigError("dp_sgd_step: noise scale must be >= 0");
  double sq = 0;
  for (const Tensor& g : grads)
    for (double v : g.v) sq += v * v;
  double norm = std::sqrt(sq);
  double scale = norm > clip ? clip / norm : 1.0;
  for (Tensor& g : grads) {
    for (double& v : g.v) {
      v *= scale;
      if (noise_scale > 0) v += noise_scale * rng.normal();
    }
  }
}

Batch input_noise(const Batch& batch, double epsilon, SplitRng& rng) {
  if (epsilon < 0) throw ConfigError("input_noise: epsilon must be >= 0");
  Batch out = batch;
  if (epsilon == 0.0) return out;
  for (double& v : out.images.v) v = std::clamp(v + (rng.bernoulli(0.5) ? epsilon : -epsilon), 0.0, 1.0);
  return out;
}

Batch mixup(const Batch& batch, double alpha, double p, SplitRng& rng, int64_t classes) {
  return blend_batch(batch, alpha, p, rng, classes, /*soft=*/true);
}

Batch cutout(const Batch& batch, double p, SplitRng& rng, const Shape& image_shape, int64_t classes) {
  return patch_batch(batch, p, rng, image_shape, classes, /*gray=*/true);
}

Batch cutmix(const Batch& batch, double p, SplitRng& rng, const Shape& image_shape, int64_t classes) {
  if (image_shape.size() != 3) throw ConfigError("cutmix requires [C,H,W] images");
  Batch out = batch;
  Split sp = split_batch(batch.size(), p, rng);
  if (sp.poison.empty() || sp.target.empty()) return out;
  auto partner = pair_targets(sp, rng);
  int64_t C = image_shape[0], H = image_shape[1], W = image_shape[2];
  int64_t D = batch.dim();
  Tensor labels = Tensor::zeros({batch.size(), classes});
  for (int64_t i = 0; i < batch.size(); ++i) labels[i * classes + batch.labels[static_cast<size_t>(i)]] = 1.0;
  SplitRng rects = rng.derive("cutrect");
  for (size_t kk = 0; kk < sp.poison.size(); ++kk) {
    int64_t i = sp.poison[kk], t = partner[kk];
    SplitRng child = rects.derive(static_cast<uint64_t>(i));
    int64_t h = 1 + child.uniform_int(H / 2);
    int64_t w = 1 + child.uniform_int(W / 2);
    int64_t y0 = child.uniform_int(H - h + 1);
    int64_t x0 = child.uniform_int(W - w + 1);
    for (int64_t ch = 0; ch < C; ++ch)
      for (int64_t y = y0; y < y0 + h; ++y)
        for (int64_t x = x0; x < x0 + w; ++x)
          out.images[i * D + (ch * H + y) * W + x] = batch.images[t * D + (ch * H + y) * W + x];
    double frac = static_cast<double>(h * w) / static_cast<double>(H * W);
    for (int64_t c = 0; c < classes; ++c) labels[i * classes + c] = 0.0;
    labels[i * classes + batch.labels[static_cast<size_t>(i)]] += 1.0 - frac;
    labels[i * classes + batch.labels[static_cast<size_t>(t)]] += frac;
  }
  out.soft_labels = std::move(labels);
  return out;
}

Batch maxup(const Model& model, const Batch& batch, double p, SplitRng& rng, const Shape& image_shape,
            int64_t classes, int64_t candidates) {
  if (candidates < 1) throw ConfigError("maxup needs at least one candidate");
  SplitRng first = rng.derive(static_cast<uint64_t>(0));
  Batch out = cutout(batch, p, first, image_shape, classes);
  if (candidates == 1) return out;
  int64_t D = batch.dim();
  auto per_example_loss = [&](const Batch& b) {
    Tensor logits = evaluate(model, b).logits;
    Tensor pr = softmax_rows(logits);
    std::vector<double> loss(static_cast<size_t>(b.size()));
    for (int64_t i = 0; i < b.size(); ++i)
      loss[static_cast<size_t>(i)] = -std::log(std::max(pr[i * pr.shape[1] + b.labels[static_cast<size_t>(i)]], 1e-300));
    return loss;
  };
  std::vector<double> best = per_example_loss(out);
  for (int64_t cand = 1; cand < candidates; ++cand) {
    SplitRng crng = rng.derive(static_cast<uint64_t>(cand));
    Batch alt = cutout(batch, p, crng, image_shape, classes);
    std::vector<double> loss = per_example_loss(alt);
    for (int64_t i = 0; i < batch.size(); ++i) {
      if (loss[static_cast<size_t>(i)] > best[static_cast<size_t>(i)]) {
        best[static_cast<size_t>(i)] = loss[static_cast<size_t>(i)];
        std::copy(alt.images.v.begin() + static_cast<size_t>(i * D), alt.images.v.begin() + static_cast<size_t>((i + 1) * D),
                  out.images.v.begin() + static_cast<size_t>(i * D));
      }
    }
  }
  return out;
}

DefenseHook make_defense_hook(const DefenseConfig& cfg, const Shape& image_shape, int64_t classes) {
  cfg.validate();
  switch (cfg.kind) {
    case DefenseKind::AdversarialPoisoning:
      return [cfg, image_shape, classes](const Model& m, const Batch& b, SplitRng& r) {
        return adversarial_poisoning_batch(m, b, cfg, r, image_shape, classes);
      };
    case DefenseKind::AdvTraining:
      return [cfg](const Model& m, const Batch& b, SplitRng& r) {
        return adv_training_perturb(m, b, cfg.epsilon, cfg.inner_steps, r, cfg.adv_step_size);
      };
    case DefenseKind::InputNoise:
      return [cfg](const Model&, const Batch& b, SplitRng& r) { return input_noise(b, cfg.epsilon, r); };
    case DefenseKind::Mixup:
      return [cfg, classes](const Model&, const Batch& b, SplitRng& r) {
        return mixup(b, cfg.mixup_alpha, cfg.p, r, classes);
      };
    case DefenseKind::Cutout:
      return [cfg, image_shape, classes](const Model&, const Batch& b, SplitRng& r) {
        return cutout(b, cfg.p, r, image_shape, classes);
      };
    case DefenseKind::CutMix:
      return [cfg, image_shape, classes](const Model&, const Batch& b, SplitRng& r) {
        return cutmix(b, cfg.p, r, image_shape, classes);
      };
    case DefenseKind::Maxup:
      return [cfg, image_shape, classes](const Model& m, const Batch& b, SplitRng& r) {
        return maxup(m, b, cfg.p, r, image_shape, classes);
      };
    default:
      return {};
  }
}

GradHook make_grad_hook(const DefenseConfig& cfg) {
  if (cfg.kind != DefenseKind::DPSGD) return {};
  cfg.validate();
  return [cfg](std::vector<Tensor>& grads, SplitRng& rng) { dp_sgd_step(grads, cfg.clip, cfg.noise, rng); };
}

}  // namespace poisonlab
