#include "poisonlab/harness.hpp"

#include <atomic>
#include <chrono>
#include <optional>
#include <cmath>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace poisonlab {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool needs_surrogate(AttackKind k) {
  switch (k) {
    case AttackKind::FeatureCollision:
    case AttackKind::Bullseye:
    case AttackKind::GradientMatching:
    case AttackKind::MetaPoisonUnrolled:
    case AttackKind::HiddenTrigger:
      return true;
    default:
      return false;
  }
}

bool is_backdoor(AttackKind k) { return k == AttackKind::BackdoorPatch || k == AttackKind::HiddenTrigger; }

bool is_filter(DefenseKind k) {
  return k == DefenseKind::SpectralFilter || k == DefenseKind::DeepKNNFilter ||
         k == DefenseKind::ActivationClusterFilter;
}

std::vector<int64_t> positions_of_class(const Dataset& d, int label, bool equal) {
  std::vector<int64_t> out;
  for (int64_t i = 0; i < d.n(); ++i)
    if ((d.labels[static_cast<size_t>(i)] == label) == equal) out.push_back(i);
  return out;
}

std::vector<int64_t> pick_without_replacement(std::vector<int64_t> pool, int64_t count, SplitRng rng) {
  count = std::min<int64_t>(count, static_cast<int64_t>(pool.size()));
  for (int64_t i = 0; i < count; ++i) {
    int64_t j = i + rng.uniform_int(static_cast<int64_t>(pool.size()) - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(static_cast<size_t>(count));
  return pool;
}

}  // namespace

TrialPlan plan_trial(const TrialSpec& spec, const Dataset& train_set, const Dataset& val_set) {
  SplitRng rng(spec.seed);
  TrialPlan m;
  m.adversarial_class = spec.adversarial_class >= 0
                            ? spec.adversarial_class
                            : static_cast<int>(rng.derive("advclass").uniform_int(train_set.classes));
  {
    auto others = positions_of_class(val_set, m.adversarial_class, false);
    if (others.empty()) throw ConfigError("trial: no validation examples outside the adversarial class");
    SplitRng tr = rng.derive("target");
    if (spec.target_id >= 0) {
      m.target_pos = val_set.position_of(spec.target_id);
      if (m.target_pos < 0) throw ConfigError("trial: target id not in the validation split");
    } else {
      m.target_pos = others[static_cast<size_t>(tr.uniform_int(static_cast<int64_t>(others.size())))];
    }
    m.target_image = val_set.image_tensor(m.target_pos);
    m.source_class = val_set.labels[static_cast<size_t>(m.target_pos)];
  }
  if (spec.poison_ids.empty()) {
    auto own = positions_of_class(train_set, m.adversarial_class, true);
    if (own.empty()) throw ConfigError("trial: adversarial class absent from the training split");
    int64_t want = std::max<int64_t>(1, std::llround(spec.budget.fraction * static_cast<double>(train_set.n())));
    auto picked = pick_without_replacement(own, want, rng.derive("poisonids"));
    for (int64_t pos : picked) m.poison_ids.push_back(train_set.ids[static_cast<size_t>(pos)]);
  } else {
    m.poison_ids = spec.poison_ids;
  }
  if (is_backdoor(spec.attack.kind)) {
    int64_t h = spec.budget.patch_h > 0 ? spec.budget.patch_h : 6;
    int64_t w = spec.budget.patch_w > 0 ? spec.budget.patch_w : 6;
    SplitRng tr = rng.derive("trigger");
    m.trigger = sample_checkerboard_trigger(train_set.image_shape.size() == 3 ? train_set.image_shape[0] : 1, h, w, tr);
  }
  return m;
}

PoisonSet craft_for_plan(const TrialSpec& spec, const TrialPlan& m, const Model& surrogate,
                         const Dataset& train_set) {
  AttackConfig cfg = spec.attack;
  cfg.seed = SplitRng(spec.seed).derive("craft").next_u64();
  switch (cfg.kind) {
    case AttackKind::None: {
      PoisonSet ps;
      ps.kind = AttackKind::None;
      ps.budget = spec.budget;
      return ps;
    }
    case AttackKind::FeatureCollision:
      return attack_feature_collision(surrogate, train_set, m.poison_ids, m.target_image, spec.budget, cfg);
    case AttackKind::Bullseye:
      return attack_bullseye(surrogate, train_set, m.poison_ids, m.target_image, spec.budget, cfg);
    case AttackKind::GradientMatching:
      return attack_gradient_matching(surrogate, train_set, m.poison_ids, m.target_image, m.adversarial_class,
                                      spec.budget, cfg);
    case AttackKind::MetaPoisonUnrolled:
      return attack_metapoison_unrolled(surrogate, train_set, m.poison_ids, m.target_image, m.adversarial_class,
                                        spec.budget, cfg);
    case AttackKind::BackdoorPatch: {
      PerturbationBudget b = spec.budget;
      b.norm = NormKind::PatchL0;
      b.patch_h = m.trigger.h;
      b.patch_w = m.trigger.w;
      return attack_backdoor_patch(train_set, m.trigger, b, m.adversarial_class, cfg.seed);
    }
    case AttackKind::HiddenTrigger: {
      auto sources = positions_of_class(train_set, m.source_class, true);
      if (sources.empty()) throw ConfigError("trial: hidden trigger has no source-class images");
      auto picked = pick_without_replacement(sources, 10, SplitRng(spec.seed).derive("sources"));
      std::vector<Tensor> source_images;
      for (int64_t pos : picked) source_images.push_back(train_set.image_tensor(pos));
      return attack_hidden_trigger(surrogate, train_set, m.poison_ids, m.trigger, source_images, spec.budget, cfg);
    }
    case AttackKind::Watermark:
      // The watermark blend is still bound by the declared budget.
      return attack_watermark(train_set, m.poison_ids, m.target_image,
                              spec.budget.norm == NormKind::LInf ? std::min(cfg.opacity, spec.budget.epsilon)
                                                                 : cfg.opacity);
  }
  throw ConfigError("trial: unknown attack kind");
}

namespace {

Dataset remove_positions(const Dataset& d, const std::vector<int64_t>& positions) {
  std::vector<bool> drop(static_cast<size_t>(d.n()), false);
  for (int64_t p : positions) drop[static_cast<size_t>(p)] = true;
  Dataset out;
  out.classes = d.classes;
  out.image_shape = d.image_shape;
  out.split = d.split;
  int64_t D = d.dim();
  for (int64_t i = 0; i < d.n(); ++i) {
    if (drop[static_cast<size_t>(i)]) continue;
    out.pixels.insert(out.pixels.end(), d.image(i), d.image(i) + D);
    out.labels.push_back(d.labels[static_cast<size_t>(i)]);
    out.ids.push_back(d.ids[static_cast<size_t>(i)]);
  }
  return out;
}

Tensor feature_matrix(const Model& m, const Dataset& d) {
  Tensor features = Tensor::zeros({d.n(), m.feature_dim});
  int64_t bs = 256;
  for (int64_t start = 0; start < d.n(); start += bs) {
    std::vector<int64_t> pos;
    for (int64_t i = start; i < std::min(d.n(), start + bs); ++i) pos.push_back(i);
    EvalOut out = evaluate(m, d.batch(pos));
    std::copy(out.features.v.begin(), out.features.v.end(), features.v.begin() + start * m.feature_dim);
  }
  return features;
}

std::vector<int64_t> run_filter(const DefenseConfig& cfg, const Model& victim, const Dataset& poisoned,
                                int64_t budget_count) {
  Tensor features = feature_matrix(victim, poisoned);
  switch (cfg.kind) {
    case DefenseKind::SpectralFilter:
      return filter_spectral(features, poisoned.labels, poisoned.classes, budget_count, cfg.overestimate);
    case DefenseKind::DeepKNNFilter: {
      int64_t k = cfg.knn_k > 0 ? cfg.knn_k : std::max<int64_t>(1, 2 * budget_count / poisoned.classes);
      return filter_deep_knn(features, poisoned.labels, poisoned.classes, k, budget_count, cfg.overestimate);
    }
    case DefenseKind::ActivationClusterFilter:
      return filter_activation_clustering(features, poisoned.labels, poisoned.classes, cfg.cluster_threshold);
    default:
      return {};
  }
}

// The pre-trained feature extractor for the transfer and fine-tuning
// scenarios. It sees only clean data, but any training-time defense applies
// here too: a defended victim pre-trains under the same regimen it retrains
// with. Filters act on poisoned data only, so they never touch this stage.
Model train_base(const TrialSpec& spec, const Dataset& clean, const Dataset& val_set) {
  SplitRng rng(spec.seed);
  DefenseHook dh;
  GradHook gh;
  if (spec.defense.kind != DefenseKind::None && !is_filter(spec.defense.kind)) {
    dh = make_defense_hook(spec.defense, clean.image_shape, clean.classes);
    gh = make_grad_hook(spec.defense);
  }
  TrainConfig tc = spec.train;
  tc.seed = rng.derive("base").next_u64();
  Model base = build_model(spec.model, rng.derive("base-init").next_u64());
  return train(std::move(base), clean, &val_set, tc, dh, nullptr, gh);
}

// Victim training per scenario; `base` is null only for from-scratch.
// robust_base_only strips the defense from the retraining stage.
Model train_victim(const TrialSpec& spec, const Model* base, const Dataset& poisoned, const Dataset& val_set,
                   int64_t poison_count) {
  SplitRng rng(spec.seed);
  DefenseHook dh;
  GradHook gh;
  if (!is_filter(spec.defense.kind)) {
    dh = make_defense_hook(spec.defense, poisoned.image_shape, poisoned.classes);
    gh = make_grad_hook(spec.defense);
  }
  DefenseHook retrain_dh = spec.robust_base_only ? DefenseHook{} : dh;
  GradHook retrain_gh = spec.robust_base_only ? GradHook{} : gh;

  auto fit = [&](const Dataset& data, const DefenseHook& hook, const GradHook& ghook) {
    if (spec.scenario == Scenario::FromScratch) {
      TrainConfig tc = spec.train;
      tc.seed = rng.derive("victim").next_u64();
      Model fresh = build_model(spec.model, rng.derive("victim-init").next_u64());
      return train(std::move(fresh), data, &val_set, tc, hook, nullptr, ghook);
    }
    TrainConfig re_tc = spec.train;
    re_tc.seed = rng.derive("retrain").next_u64();
    return retrain_for_scenario(*base, spec.scenario, data, &val_set, re_tc, hook, nullptr, ghook);
  };

  if (!is_filter(spec.defense.kind)) return fit(poisoned, retrain_dh, retrain_gh);

  // Filtering: fit once on the poisoned data, flag suspicious rows from the
  // feature space, then retrain on what survives.
  Model first = fit(poisoned, {}, {});
  int64_t budget_count = poison_count > 0
                             ? poison_count
                             : std::max<int64_t>(1, std::llround(spec.budget.fraction * static_cast<double>(poisoned.n())));
  auto flagged = run_filter(spec.defense, first, poisoned, budget_count);
  if (flagged.empty()) return first;
  Dataset cleaned = remove_positions(poisoned, flagged);
  return fit(cleaned, {}, {});
}

}  // namespace

void TrialSpec::validate() const {
  train.validate();
  attack.validate();
  defense.validate();
  budget.validate();
  if (backdoor_eval_targets < 1) throw ConfigError("trial: backdoor evaluation needs at least one patched target");
}

bool targeted_success(const Model& m, const Tensor& target_image, int adversarial_class) {
  Batch b;
  b.images = target_image;
  b.images.shape = {1, target_image.size()};
  b.labels = {0};
  b.ids = {0};
  return predict(m, b)[0] == adversarial_class;
}

double backdoor_success(const Model& m, const Dataset& val, const std::vector<int64_t>& target_positions,
                        const Trigger& trigger, int adversarial_class) {
  if (target_positions.empty()) throw ConfigError("backdoor evaluation: no patched targets");
  int64_t D = val.dim();
  Batch b;
  b.images = Tensor::zeros({static_cast<int64_t>(target_positions.size()), D});
  for (size_t i = 0; i < target_positions.size(); ++i) {
    const double* src = val.image(target_positions[i]);
    std::copy(src, src + D, b.images.v.begin() + static_cast<int64_t>(i) * D);
    imprint_trigger(b.images.v.data() + static_cast<int64_t>(i) * D, val.image_shape, trigger);
    b.labels.push_back(val.labels[static_cast<size_t>(target_positions[i])]);
    b.ids.push_back(val.ids[static_cast<size_t>(target_positions[i])]);
  }
  auto preds = predict(m, b);
  int64_t hits = 0;
  for (int p : preds) hits += p == adversarial_class ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

TrialOutcome run_trial(const TrialSpec& spec, const Dataset& train_set, const Dataset& val_set) {
  TrialOutcome out;
  out.seed = spec.seed;
  auto t0 = Clock::now();
  try {
    spec.validate();
    TrialPlan m = plan_trial(spec, train_set, val_set);
    SplitRng rng(spec.seed);

    std::optional<Model> base;
    if (spec.scenario != Scenario::FromScratch) base = train_base(spec, train_set, val_set);

    PoisonSet ps;
    if (!needs_surrogate(spec.attack.kind)) {
      Model unused;
      ps = craft_for_plan(spec, m, unused, train_set);
    } else if (base && !spec.adaptive) {
      // Transfer and fine-tuning attackers hold the victim's own pre-trained
      // feature extractor.
      ps = craft_for_plan(spec, m, *base, train_set);
    } else {
      TrainConfig tc = spec.train;
      tc.seed = rng.derive("surrogate").next_u64();
      DefenseHook dh;
      GradHook gh;
      if (spec.adaptive && !is_filter(spec.defense.kind)) {
        // The adaptive attacker re-trains with exactly the defense it will face.
        dh = make_defense_hook(spec.defense, train_set.image_shape, train_set.classes);
        gh = make_grad_hook(spec.defense);
      }
      Model surrogate;
      if (base) {
        surrogate = retrain_for_scenario(*base, spec.scenario, train_set, nullptr, tc, dh, nullptr, gh);
      } else {
        surrogate = build_model(spec.model, rng.derive("surrogate-init").next_u64());
        surrogate = train(std::move(surrogate), train_set, nullptr, tc, dh, nullptr, gh);
      }
      ps = craft_for_plan(spec, m, surrogate, train_set);
    }
    out.poison_count = ps.count();

    Dataset poisoned = apply_poisons(train_set, ps);
    Model victim = train_victim(spec, base ? &*base : nullptr, poisoned, val_set, ps.count());

    if (is_backdoor(spec.attack.kind)) {
      // Hidden triggers activate on the source class; plain patches on any
      // image that is not already in the adversarial class.
      auto pool = spec.attack.kind == AttackKind::HiddenTrigger
                      ? positions_of_class(val_set, m.source_class, true)
                      : positions_of_class(val_set, m.adversarial_class, false);
      auto targets = pick_without_replacement(pool, spec.backdoor_eval_targets, SplitRng(spec.seed).derive("evaltargets"));
      const Trigger& trig = ps.trigger ? *ps.trigger : m.trigger;
      out.success = backdoor_success(victim, val_set, targets, trig, m.adversarial_class);
    } else {
      out.success = targeted_success(victim, m.target_image, m.adversarial_class) ? 1.0 : 0.0;
    }
    out.val_acc = accuracy(victim, val_set);
  } catch (const std::exception& e) {
    out.errored = true;
    out.error = e.what();
  }
  out.wall_seconds = seconds_since(t0);
  return out;
}

std::vector<TrialOutcome> run_trials(const TrialSpec& spec, const Dataset& train_set, const Dataset& val_set,
                                     int64_t trials, int64_t workers) {
  if (trials < 1) throw ConfigError("run_trials: need at least one trial");
  workers = std::max<int64_t>(1, std::min(workers, trials));
  std::vector<TrialOutcome> outcomes(static_cast<size_t>(trials));
  std::atomic<int64_t> next(0);
  auto worker = [&]() {
    for (;;) {
      int64_t i = next.fetch_add(1);
      if (i >= trials) return;
      TrialSpec s = spec;
      s.seed = spec.seed + static_cast<uint64_t>(i);
      outcomes[static_cast<size_t>(i)] = run_trial(s, train_set, val_set);
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int64_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return outcomes;
}

EvalReport aggregate(const std::vector<TrialOutcome>& outcomes, double worst_case_se) {
  if (outcomes.empty()) throw ConfigError("aggregate: no outcomes");
  EvalReport r;
  r.trials = outcomes;
  double success_sum = 0, acc_sum = 0;
  bool all_equal = true;
  double first = 0;
  for (const auto& o : outcomes) {
    r.wall_seconds += o.wall_seconds;
    if (o.errored) {
      ++r.n_errored;
      continue;
    }
    if (r.n_ok == 0) first = o.success;
    all_equal = all_equal && o.success == first;
    ++r.n_ok;
    success_sum += o.success;
    acc_sum += o.val_acc;
  }
  if (r.n_ok == 0) throw ConfigError("aggregate: every trial errored");
  double p = success_sum / static_cast<double>(r.n_ok);
  r.success_pct = 100.0 * p;
  r.val_acc_pct = 100.0 * acc_sum / static_cast<double>(r.n_ok);
  r.se_pct = all_equal ? worst_case_se : 100.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(r.n_ok));
  return r;
}

const char* attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::None: return "none";
    case AttackKind::FeatureCollision: return "feature-collision";
    case AttackKind::Bullseye: return "bullseye";
    case AttackKind::GradientMatching: return "gradient-matching";
    case AttackKind::MetaPoisonUnrolled: return "metapoison-unrolled";
    case AttackKind::BackdoorPatch: return "backdoor-patch";
    case AttackKind::HiddenTrigger: return "hidden-trigger";
    case AttackKind::Watermark: return "watermark";
  }
  return "unknown";
}

const char* defense_name(DefenseKind kind) {
  switch (kind) {
    case DefenseKind::None: return "none";
    case DefenseKind::AdversarialPoisoning: return "adversarial-poisoning";
    case DefenseKind::DPSGD: return "dp-sgd";
    case DefenseKind::AdvTraining: return "adv-training";
    case DefenseKind::InputNoise: return "input-noise";
    case DefenseKind::Mixup: return "mixup";
    case DefenseKind::Cutout: return "cutout";
    case DefenseKind::CutMix: return "cutmix";
    case DefenseKind::Maxup: return "maxup";
    case DefenseKind::SpectralFilter: return "spectral-filter";
    case DefenseKind::DeepKNNFilter: return "deep-knn-filter";
    case DefenseKind::ActivationClusterFilter: return "activation-cluster-filter";
  }
  return "unknown";
}

const char* scenario_name(Scenario s) {
  switch (s) {
    case Scenario::FromScratch: return "from-scratch";
    case Scenario::FineTuning: return "fine-tuning";
    case Scenario::Transfer: return "transfer";
  }
  return "unknown";
}

// Timing is deliberately absent: the serialized report must be byte-identical
// across replays and worker counts.
std::string report_to_json(const EvalReport& report, const TrialSpec& spec) {
  nlohmann::json j;
  j["config"] = {
      {"seed", spec.seed},
      {"scenario", scenario_name(spec.scenario)},
      {"robust_base_only", spec.robust_base_only},
      {"attack", attack_name(spec.attack.kind)},
      {"defense", defense_name(spec.defense.kind)},
      {"defense_p", spec.defense.p},
      {"epsilon", spec.budget.epsilon},
      {"fraction", spec.budget.fraction},
      {"adaptive", spec.adaptive},
      {"epochs", spec.train.epochs},
  };
  j["aggregate"] = {
      {"trials_ok", report.n_ok},
      {"trials_errored", report.n_errored},
      {"success_pct", report.success_pct},
      {"se_pct", report.se_pct},
      {"val_acc_pct", report.val_acc_pct},
  };
  j["trials"] = nlohmann::json::array();
  for (const auto& o : report.trials) {
    nlohmann::json t = {
        {"seed", o.seed},       {"errored", o.errored},           {"success", o.success},
        {"val_acc", o.val_acc}, {"poison_count", o.poison_count},
    };
    if (o.errored) t["error"] = o.error;
    j["trials"].push_back(t);
  }
  return j.dump(2);
}

std::vector<SweepRow> sweep(const TrialSpec& base, const std::vector<std::pair<std::string, DefenseConfig>>& grid,
                            const Dataset& train_set, const Dataset& val_set, int64_t trials, int64_t workers) {
  std::vector<SweepRow> rows;
  for (const auto& [label, cfg] : grid) {
    TrialSpec s = base;
    s.defense = cfg;
    SweepRow row;
    row.defense = label.empty() ? defense_name(cfg.kind) : label;
    row.param = cfg.kind == DefenseKind::AdversarialPoisoning ? cfg.p
                : cfg.kind == DefenseKind::DPSGD              ? cfg.noise
                                                              : cfg.epsilon;
    row.report = aggregate(run_trials(s, train_set, val_set, trials, workers));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "defense,param,success_pct,se_pct,val_acc_pct\n";
  os.precision(17);
  for (const auto& r : rows)
    os << r.defense << ',' << r.param << ',' << r.report.success_pct << ',' << r.report.se_pct << ','
       << r.report.val_acc_pct << '\n';
  return os.str();
}

}  // namespace poisonlab
