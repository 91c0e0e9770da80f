#include "poisonlab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>

namespace poisonlab {

namespace {

Tensor as_row(const Tensor& image) {
  Tensor r = image;
  r.shape = {1, image.size()};
  return r;
}

Tensor feature_row(const Model& m, const Tensor& image) {
  Batch b;
  b.images = as_row(image);
  return evaluate(m, b).features;  // [1, F]
}

// Independent flip/translate draws per image, concatenated into one map over
// the whole [k, D] block so it enters the tape as a single node.
LinMapPtr batch_flip_translate(const Shape& image_shape, int64_t k, SplitRng& rng) {
  int64_t C = image_shape[0], H = image_shape[1], W = image_shape[2];
  int64_t D = C * H * W;
  auto out = std::make_shared<LinMap>(0, 0);
  for (int64_t i = 0; i < k; ++i) {
    AugmentSample s = sample_augment(rng);
    LinMapPtr per = flip_translate_map(C, H, W, s.flip, s.dy, s.dx);
    for (const auto& e : per->entries) out->add(e.out + i * D, e.in + i * D, e.coeff);
  }
  return out;
}

struct CraftSetup {
  std::vector<int64_t> positions;
  Tensor images;  // [k, D]
  std::vector<int> labels;
};

CraftSetup gather(const Dataset& train, const std::vector<int64_t>& poison_ids) {
  if (poison_ids.empty()) throw ConfigError("attack: empty poison id list");
  CraftSetup s;
  for (int64_t id : poison_ids) {
    int64_t pos = train.position_of(id);
    if (pos < 0) throw ConfigError("attack: poison id " + std::to_string(id) + " not in dataset");
    s.positions.push_back(pos);
  }
  Batch b = train.batch(s.positions);
  s.images = std::move(b.images);
  s.labels = std::move(b.labels);
  return s;
}

// Shared crafting loop: signed-Adam ascent on the perturbations with a
// projection back into the budget after every step. `build` constructs the
// objective from the perturbed image block; a zero budget short-circuits to
// unperturbed poisons. Restarts beyond the first start from a random point in
// the budget; the restart with the lowest final (unaugmented) loss wins.
PoisonSet craft_iterative(const Dataset& train, const std::vector<int64_t>& poison_ids,
                          const PerturbationBudget& budget, const AttackConfig& cfg, AttackKind kind,
                          const std::function<Graph::Id(Graph&, Graph::Id)>& build) {
  cfg.validate();
  budget.validate();
  CraftSetup s = gather(train, poison_ids);
  int64_t k = static_cast<int64_t>(poison_ids.size());
  int64_t D = train.dim();

  PoisonSet ps;
  ps.ids = poison_ids;
  ps.deltas = Tensor::zeros({k, D});
  ps.budget = budget;
  ps.kind = kind;
  ps.seed = cfg.seed;
  if (budget.norm == NormKind::LInf && budget.epsilon == 0.0) return ps;

  bool spatial = train.image_shape.size() == 3;
  int64_t C = spatial ? train.image_shape[0] : 0;
  int64_t H = spatial ? train.image_shape[1] : 0;
  int64_t W = spatial ? train.image_shape[2] : 0;
  bool use_aug = cfg.augment_during_attack && spatial;

  SplitRng root(cfg.seed);
  auto score = [&](const Tensor& deltas) {
    Graph g;
    Graph::Id x = g.add(g.constant(s.images), g.constant(deltas));
    return g.val(build(g, x)).item();
  };

  double best_loss = std::numeric_limits<double>::infinity();
  Tensor best = ps.deltas;
  for (int64_t r = 0; r < cfg.restarts; ++r) {
    Tensor deltas = Tensor::zeros({k, D});
    if (r > 0) {
      SplitRng irng = root.derive("restart-init").derive(static_cast<uint64_t>(r));
      for (int64_t i = 0; i < deltas.size(); ++i) deltas[i] = irng.uniform(-budget.epsilon, budget.epsilon);
      deltas = project(s.images, deltas, budget, C, H, W);
    }
    auto adam = SignedAdamState::init({k, D}, cfg.step_size, cfg.steps);
    for (int64_t step = 0; step < cfg.steps; ++step) {
      Graph g;
      Graph::Id dvar = g.variable(deltas);
      Graph::Id x = g.add(g.constant(s.images), dvar);
      if (use_aug) {
        SplitRng arng = root.derive("augment").derive(static_cast<uint64_t>(r)).derive(static_cast<uint64_t>(step));
        x = g.linmap(x, batch_flip_translate(train.image_shape, k, arng), 1, {k, D});
      }
      Graph::Id loss = build(g, x);
      Graph::Id grad = g.gradient(loss, {dvar})[0];
      adam.step(deltas, g.val(grad));
      deltas = project(s.images, deltas, budget, C, H, W);
    }
    double final_loss = score(deltas);
    if (final_loss < best_loss) {
      best_loss = final_loss;
      best = deltas;
    }
  }
  ps.deltas = std::move(best);
  return ps;
}

Tensor tile_rows(const Tensor& row, int64_t k) {
  int64_t f = row.size();
  Tensor out = Tensor::zeros({k, f});
  for (int64_t i = 0; i < k; ++i)
    std::copy(row.v.begin(), row.v.end(), out.v.begin() + static_cast<size_t>(i * f));
  return out;
}

}  // namespace

Trigger sample_checkerboard_trigger(int64_t channels, int64_t h, int64_t w, SplitRng& rng) {
  Trigger t;
  t.h = h;
  t.w = w;
  t.pattern = Tensor::zeros({channels, h, w});
  for (int64_t c = 0; c < channels; ++c) {
    int64_t polarity = rng.uniform_int(2);
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        t.pattern[(c * h + y) * w + x] = static_cast<double>((y + x + polarity) & 1);
  }
  return t;
}

void imprint_trigger(double* image, const Shape& image_shape, const Trigger& trigger) {
  if (image_shape.size() != 3) throw ShapeError("imprint_trigger expects a [C,H,W] image");
  int64_t C = image_shape[0], H = image_shape[1], W = image_shape[2];
  if (trigger.pattern.shape != Shape{C, trigger.h, trigger.w}) throw ShapeError("trigger pattern/channel mismatch");
  int64_t r0 = trigger.row >= 0 ? trigger.row : H - trigger.h;
  int64_t c0 = trigger.col >= 0 ? trigger.col : W - trigger.w;
  if (r0 < 0 || c0 < 0 || r0 + trigger.h > H || c0 + trigger.w > W)
    throw ShapeError("trigger does not fit inside the image");
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < trigger.h; ++y)
      for (int64_t x = 0; x < trigger.w; ++x)
        image[(c * H + r0 + y) * W + c0 + x] = trigger.pattern[(c * trigger.h + y) * trigger.w + x];
}

Dataset apply_poisons(const Dataset& d, const PoisonSet& ps) {
  Dataset out = d;
  int64_t D = d.dim();
  if (ps.count() > 0 && ps.deltas.shape != Shape{ps.count(), D})
    throw ShapeError("apply_poisons: delta shape does not match dataset");
  for (int64_t i = 0; i < ps.count(); ++i) {
    int64_t pos = out.position_of(ps.ids[static_cast<size_t>(i)]);
    if (pos < 0) throw ConfigError("apply_poisons: id " + std::to_string(ps.ids[static_cast<size_t>(i)]) + " absent");
    double* px = out.pixels.data() + pos * D;
    for (int64_t j = 0; j < D; ++j) px[j] = std::clamp(px[j] + ps.deltas[i * D + j], 0.0, 1.0);
  }
  return out;
}

PoisonSet attack_feature_collision(const Model& surrogate, const Dataset& train, const std::vector<int64_t>& poison_ids,
                                   const Tensor& target_image, const PerturbationBudget& budget,
                                   const AttackConfig& cfg) {
  Tensor tfeat = feature_row(surrogate, target_image);
  Tensor tile = tile_rows(tfeat, static_cast<int64_t>(poison_ids.size()));
  auto build = [&](Graph& g, Graph::Id x) {
    auto pids = param_nodes(g, surrogate, false);
    auto fwd = model_forward(g, surrogate, pids, x, static_cast<int64_t>(poison_ids.size()));
    return g.sqnorm(g.sub(fwd.features, g.constant(tile)));
  };
  return craft_iterative(train, poison_ids, budget, cfg, AttackKind::FeatureCollision, build);
}

PoisonSet attack_bullseye(const Model& surrogate, const Dataset& train, const std::vector<int64_t>& poison_ids,
                          const Tensor& target_image, const PerturbationBudget& budget, const AttackConfig& cfg) {
  Tensor tfeat = feature_row(surrogate, target_image);
  int64_t k = static_cast<int64_t>(poison_ids.size());
  Tensor avg = Tensor::full({1, k}, 1.0 / static_cast<double>(k));
  auto build = [&](Graph& g, Graph::Id x) {
    auto pids = param_nodes(g, surrogate, false);
    auto fwd = model_forward(g, surrogate, pids, x, k);
    Graph::Id mean_feat = g.matmul(g.constant(avg), fwd.features);
    return g.sqnorm(g.sub(mean_feat, g.constant(tfeat)));
  };
  return craft_iterative(train, poison_ids, budget, cfg, AttackKind::Bullseye, build);
}

PoisonSet attack_gradient_matching(const Model& surrogate, const Dataset& train, const std::vector<int64_t>& poison_ids,
                                   const Tensor& target_image, int adversarial_label, const PerturbationBudget& budget,
                                   const AttackConfig& cfg) {
  // Target gradient w.r.t. the trainable parameters, fixed for the whole
  // craft. Under an adaptive gradient-noise defense the attacker sees a noisy
  // draw of it.
  std::vector<size_t> match_idx;
  for (size_t i = 0; i < surrogate.params.size(); ++i)
    if (!surrogate.frozen[i]) match_idx.push_back(i);
  if (match_idx.empty()) throw ConfigError("gradient matching: surrogate has no trainable parameters");

  std::vector<Tensor> gt;
  {
    Graph g;
    std::vector<Graph::Id> pids;
    std::vector<Graph::Id> match_ids;
    for (size_t i = 0; i < surrogate.params.size(); ++i) {
      bool m = !surrogate.frozen[i];
      pids.push_back(m ? g.variable(surrogate.params[i]) : g.constant(surrogate.params[i]));
      if (m) match_ids.push_back(pids.back());
    }
    Graph::Id x = g.constant(as_row(target_image));
    auto fwd = model_forward(g, surrogate, pids, x, 1);
    Graph::Id loss = cross_entropy(g, fwd.logits, {adversarial_label});
    auto grads = g.gradient(loss, match_ids);
    for (Graph::Id gid : grads) gt.push_back(g.val(gid));
  }
  if (cfg.dp_noise > 0) {
    SplitRng nrng = SplitRng(cfg.seed).derive("target-grad-noise");
    for (Tensor& t : gt)
      for (int64_t i = 0; i < t.size(); ++i) t[i] += cfg.dp_noise * nrng.normal();
  }
  double gt_sq = 0;
  for (const Tensor& t : gt)
    for (double v : t.v) gt_sq += v * v;
  double gt_norm = std::sqrt(gt_sq);
  if (cfg.mode == MatchMode::Cosine && gt_norm < 1e-12)
    throw NumericError(
        "gradient matching: target gradient norm vanishes, cosine similarity is undefined; "
        "use squared-error matching instead");

  int64_t k = static_cast<int64_t>(poison_ids.size());
  std::vector<int> labels = gather(train, poison_ids).labels;
  auto build = [&, labels](Graph& g, Graph::Id x) {
    std::vector<Graph::Id> pids;
    std::vector<Graph::Id> match_ids;
    for (size_t i = 0; i < surrogate.params.size(); ++i) {
      bool m = !surrogate.frozen[i];
      pids.push_back(m ? g.variable(surrogate.params[i]) : g.constant(surrogate.params[i]));
      if (m) match_ids.push_back(pids.back());
    }
    auto fwd = model_forward(g, surrogate, pids, x, k);
    Graph::Id poison_loss = cross_entropy(g, fwd.logits, labels);
    auto gp = g.gradient(poison_loss, match_ids);
    if (cfg.mode == MatchMode::SquaredError) {
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
    Graph::Id denom = g.scale(g.sqrt_(sq_total), gt_norm);
    return g.sub(g.constant(Tensor::scalar(1.0)), g.div(dot_total, denom));
  };
  return craft_iterative(train, poison_ids, budget, cfg, AttackKind::GradientMatching, build);
}

PoisonSet attack_metapoison_unrolled(const Model& surrogate, const Dataset& train,
                                     const std::vector<int64_t>& poison_ids, const Tensor& target_image,
                                     int adversarial_label, const PerturbationBudget& budget,
                                     const AttackConfig& cfg) {
  if (cfg.unroll < 0) throw ConfigError("metapoison: unroll must be >= 0");
  int64_t k = static_cast<int64_t>(poison_ids.size());
  std::vector<int> labels = gather(train, poison_ids).labels;
  Tensor xt = as_row(target_image);
  auto build = [&, labels](Graph& g, Graph::Id x) {
    // Simulate `unroll` plain-SGD steps on the poison batch, then score the
    // adversarial loss on the target under the simulated parameters. The
    // whole simulation lives on the tape, so the outer gradient flows through
    // the inner updates.
    std::vector<Graph::Id> theta = param_nodes(g, surrogate, true);
    for (int64_t u = 0; u < cfg.unroll; ++u) {
      auto fwd = model_forward(g, surrogate, theta, x, k);
      Graph::Id inner_loss = cross_entropy(g, fwd.logits, labels);
      auto inner_grads = g.gradient(inner_loss, theta);
      for (size_t i = 0; i < theta.size(); ++i)
        theta[i] = surrogate.frozen[i] ? theta[i] : g.sub(theta[i], g.scale(inner_grads[i], cfg.inner_lr));
    }
    auto tfwd = model_forward(g, surrogate, theta, g.constant(xt), 1);
    return cross_entropy(g, tfwd.logits, {adversarial_label});
  };
  try {
    return craft_iterative(train, poison_ids, budget, cfg, AttackKind::MetaPoisonUnrolled, build);
  } catch (const NoPathError&) {
    // unroll = 0: the adversarial loss never touches the poisons.
    PoisonSet ps;
    ps.ids = poison_ids;
    ps.deltas = Tensor::zeros({k, train.dim()});
    ps.budget = budget;
    ps.kind = AttackKind::MetaPoisonUnrolled;
    ps.seed = cfg.seed;
    return ps;
  }
}

PoisonSet attack_backdoor_patch(const Dataset& train, const Trigger& trigger, const PerturbationBudget& budget,
                                int poison_class, uint64_t seed) {
  budget.validate();
  if (train.image_shape.size() != 3) throw ConfigError("backdoor patch requires [C,H,W] images");
  std::vector<int64_t> cls_positions;
  for (int64_t i = 0; i < train.n(); ++i)
    if (train.labels[static_cast<size_t>(i)] == poison_class) cls_positions.push_back(i);
  if (cls_positions.empty()) throw ConfigError("backdoor patch: poison class has no training examples");
  int64_t want = std::max<int64_t>(
      1, static_cast<int64_t>(std::llround(budget.fraction * static_cast<double>(train.n()))));
  if (want > static_cast<int64_t>(cls_positions.size())) want = static_cast<int64_t>(cls_positions.size());
  auto perm = SplitRng(seed).derive("backdoor-subset").permutation(static_cast<int64_t>(cls_positions.size()));

  int64_t D = train.dim();
  PoisonSet ps;
  ps.deltas = Tensor::zeros({want, D});
  ps.trigger = trigger;
  ps.budget = budget;
  ps.kind = AttackKind::BackdoorPatch;
  ps.seed = seed;
  std::vector<int64_t> chosen(perm.begin(), perm.begin() + want);
  std::sort(chosen.begin(), chosen.end());
  for (int64_t i = 0; i < want; ++i) {
    int64_t pos = cls_positions[static_cast<size_t>(chosen[static_cast<size_t>(i)])];
    ps.ids.push_back(train.ids[static_cast<size_t>(pos)]);
    Tensor patched({D}, std::vector<double>(train.image(pos), train.image(pos) + D));
    imprint_trigger(patched.v.data(), train.image_shape, trigger);
    for (int64_t j = 0; j < D; ++j) ps.deltas[i * D + j] = patched[j] - train.image(pos)[j];
  }
  return ps;
}

PoisonSet attack_hidden_trigger(const Model& surrogate, const Dataset& train, const std::vector<int64_t>& poison_ids,
                                const Trigger& trigger, const std::vector<Tensor>& source_images,
                                const PerturbationBudget& budget, const AttackConfig& cfg) {
  if (source_images.empty()) throw ConfigError("hidden trigger: no source images");
  int64_t k = static_cast<int64_t>(poison_ids.size());
  int64_t f = surrogate.feature_dim;
  // Poison i chases the features of patched source i (cycled).
  Tensor targets = Tensor::zeros({k, f});
  for (int64_t i = 0; i < k; ++i) {
    Tensor patched = source_images[static_cast<size_t>(i) % source_images.size()];
    imprint_trigger(patched.v.data(), train.image_shape, trigger);
    Tensor feat = feature_row(surrogate, patched);
    std::copy(feat.v.begin(), feat.v.end(), targets.v.begin() + static_cast<size_t>(i * f));
  }
  auto build = [&](Graph& g, Graph::Id x) {
    auto pids = param_nodes(g, surrogate, false);
    auto fwd = model_forward(g, surrogate, pids, x, k);
    return g.sqnorm(g.sub(fwd.features, g.constant(targets)));
  };
  PoisonSet ps = craft_iterative(train, poison_ids, budget, cfg, AttackKind::HiddenTrigger, build);
  ps.trigger = trigger;
  return ps;
}

PoisonSet attack_watermark(const Dataset& train, const std::vector<int64_t>& poison_ids, const Tensor& target_image,
                           double opacity) {
  if (opacity < 0 || opacity > 1) throw ConfigError("watermark: opacity must be in [0,1]");
  CraftSetup s = gather(train, poison_ids);
  int64_t k = static_cast<int64_t>(poison_ids.size());
  int64_t D = train.dim();
  if (target_image.size() != D) throw ShapeError("watermark: target image dimension mismatch");
  PoisonSet ps;
  ps.ids = poison_ids;
  ps.deltas = Tensor::zeros({k, D});
  ps.budget.norm = NormKind::LInf;
  ps.budget.epsilon = opacity;
  ps.kind = AttackKind::Watermark;
  // x <- (1-a)x + a*t, i.e. delta = a*(t - x); |delta| <= a for pixels in [0,1].
  for (int64_t i = 0; i < k; ++i)
    for (int64_t j = 0; j < D; ++j) ps.deltas[i * D + j] = opacity * (target_image[j] - s.images[i * D + j]);
  return ps;
}

namespace {

constexpr char kPoisonMagic[8] = {'P', 'L', 'A', 'B', 'P', 'S', 'N', '1'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("poison set file truncated");
  return v;
}

}  // namespace

void save_poisonset(const PoisonSet& ps, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os.write(kPoisonMagic, 8);
  put<int32_t>(os, static_cast<int32_t>(ps.kind));
  put<uint64_t>(os, ps.seed);
  put<int32_t>(os, static_cast<int32_t>(ps.budget.norm));
  put<double>(os, ps.budget.epsilon);
  put<int64_t>(os, ps.budget.patch_h);
  put<int64_t>(os, ps.budget.patch_w);
  put<double>(os, ps.budget.fraction);
  put<int64_t>(os, ps.count());
  put<int64_t>(os, ps.count() > 0 ? ps.deltas.shape[1] : 0);
  for (int64_t id : ps.ids) put<int64_t>(os, id);
  for (double d : ps.deltas.v) put<double>(os, d);
  put<uint8_t>(os, ps.trigger ? 1 : 0);
  if (ps.trigger) {
    const Trigger& t = *ps.trigger;
    put<int64_t>(os, t.pattern.shape[0]);
    put<int64_t>(os, t.h);
    put<int64_t>(os, t.w);
    put<int64_t>(os, t.row);
    put<int64_t>(os, t.col);
    for (double d : t.pattern.v) put<double>(os, d);
  }
  if (!os) throw FormatError("write failure on " + path);
}

PoisonSet load_poisonset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kPoisonMagic, 8) != 0) throw FormatError(path + ": not a poison set file");
  PoisonSet ps;
  ps.kind = static_cast<AttackKind>(get<int32_t>(is));
  ps.seed = get<uint64_t>(is);
  ps.budget.norm = static_cast<NormKind>(get<int32_t>(is));
  ps.budget.epsilon = get<double>(is);
  ps.budget.patch_h = get<int64_t>(is);
  ps.budget.patch_w = get<int64_t>(is);
  ps.budget.fraction = get<double>(is);
  int64_t k = get<int64_t>(is);
  int64_t d = get<int64_t>(is);
  if (k < 0 || d < 0) throw FormatError(path + ": negative poison count or dimension");
  ps.ids.resize(static_cast<size_t>(k));
  for (int64_t& id : ps.ids) id = get<int64_t>(is);
  ps.deltas = Tensor::zeros({k, d});
  for (double& v : ps.deltas.v) v = get<double>(is);
  if (get<uint8_t>(is)) {
    Trigger t;
    int64_t c = get<int64_t>(is);
    t.h = get<int64_t>(is);
    t.w = get<int64_t>(is);
    t.row = get<int64_t>(is);
    t.col = get<int64_t>(is);
    if (c <= 0 || t.h <= 0 || t.w <= 0) throw FormatError(path + ": bad trigger header");
    t.pattern = Tensor::zeros({c, t.h, t.w});
    for (double& v : t.pattern.v) v = get<double>(is);
    ps.trigger = std::move(t);
  }
  return ps;
}

}  // namespace poisonlab
