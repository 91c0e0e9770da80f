#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "poisonlab/featviz.hpp"
#include "poisonlab/harness.hpp"

using nlohmann::json;
using namespace poisonlab;

namespace {

constexpr const char* kVersion = "poisonlab 0.1.0";

json default_config() {
  return json{
      {"dataset",
       {{"source", "synthetic-textures"},
        {"path", ""},
        {"classes", 10},
        {"n_per_class", 100},
        {"dim", 16},
        {"separation", 4.0},
        {"ambiguity", 0.0},
        {"subset_fraction", 1.0},
        {"val_per_class", 10},
        {"seed", 0}}},
      {"model", {{"arch", "cnn"}, {"hidden", json::array({64})}, {"channels", json::array({16, 32, 64})}}},
      {"scenario", "from-scratch"},
      {"robust_base_only", false},
      {"train",
       {{"epochs", 40},
        {"batch_size", 128},
        {"lr", 0.1},
        {"momentum", 0.9},
        {"weight_decay", 5e-4},
        {"augment", true},
        {"seed", 0}}},
      {"attack",
       {{"kind", "gradient-matching"},
        {"mode", "cosine"},
        {"steps", 240},
        {"step_size", 0.1},
        {"restarts", 1},
        {"augment_during_attack", true},
        {"unroll", 2},
        {"inner_lr", 0.1},
        {"opacity", 16.0 / 255.0},
        {"dp_noise", 0.0}}},
      {"defense",
       {{"kind", "none"},
        {"p", 0.75},
        {"inner_steps", 5},
        {"surrogate", "gradient-matching"},
        {"surrogate_mode", "cosine"},
        {"epsilon", 16.0 / 255.0},
        {"inner_step_size", 0.1},
        {"adv_step_size", -1.0},
        {"unroll", 2},
        {"inner_lr", 0.1},
        {"clip", 1.0},
        {"noise", 1e-3},
        {"mixup_alpha", 0.8},
        {"gray_patch", false},
        {"overestimate", 1.5},
        {"knn_k", 0},
        {"cluster_threshold", 0.35}}},
      {"budget", {{"norm", "linf"}, {"epsilon", 16.0 / 255.0}, {"patch_h", 0}, {"patch_w", 0}, {"fraction", 0.01}}},
      {"harness", {{"trials", 10}, {"workers", 1}, {"seed", 0}, {"adaptive", false}, {"backdoor_eval_targets", 200}}},
      {"out", "out"},
      {"version", kVersion},
  };
}

void merge(json& base, const json& over, const std::string& where) {
  for (auto it = over.begin(); it != over.end(); ++it) {
    std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (it->is_object() && base.contains(it.key()) && base[it.key()].is_object()) {
      merge(base[it.key()], *it, path);
    } else {
      base[it.key()] = *it;
    }
  }
}

const json& at_path(const json& j, const std::string& path) {
  const json* cur = &j;
  size_t start = 0;
  while (start <= path.size()) {
    size_t dot = path.find('.', start);
    std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!cur->is_object() || !cur->contains(key)) throw ConfigError("config: missing key " + path);
    cur = &(*cur)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return *cur;
}

double num(const json& j, const std::string& path) {
  const json& v = at_path(j, path);
  if (!v.is_number()) throw ConfigError("config: " + path + " expects a number");
  return v.get<double>();
}

int64_t integer(const json& j, const std::string& path) {
  const json& v = at_path(j, path);
  if (!v.is_number_integer()) throw ConfigError("config: " + path + " expects an integer");
  return v.get<int64_t>();
}

std::string str(const json& j, const std::string& path) {
  const json& v = at_path(j, path);
  if (!v.is_string()) throw ConfigError("config: " + path + " expects a string");
  return v.get<std::string>();
}

bool boolean(const json& j, const std::string& path) {
  const json& v = at_path(j, path);
  if (!v.is_boolean()) throw ConfigError("config: " + path + " expects a boolean");
  return v.get<bool>();
}

template <class Enum>
Enum parse_enum(const std::string& value, const std::string& key,
                std::initializer_list<std::pair<const char*, Enum>> table) {
  std::string valid;
  for (const auto& [name, kind] : table) {
    if (value == name) return kind;
    valid += valid.empty() ? name : std::string(", ") + name;
  }
  throw ConfigError("config: " + key + " must be one of {" + valid + "}, got '" + value + "'");
}

AttackKind parse_attack(const std::string& v, const std::string& key) {
  return parse_enum<AttackKind>(v, key,
                                {{"none", AttackKind::None},
                                 {"feature-collision", AttackKind::FeatureCollision},
                                 {"bullseye", AttackKind::Bullseye},
                                 {"gradient-matching", AttackKind::GradientMatching},
                                 {"metapoison-unrolled", AttackKind::MetaPoisonUnrolled},
                                 {"backdoor-patch", AttackKind::BackdoorPatch},
                                 {"hidden-trigger", AttackKind::HiddenTrigger},
                                 {"watermark", AttackKind::Watermark}});
}

DefenseKind parse_defense(const std::string& v) {
  return parse_enum<DefenseKind>(v, "defense.kind",
                                 {{"none", DefenseKind::None},
                                  {"adversarial-poisoning", DefenseKind::AdversarialPoisoning},
                                  {"dp-sgd", DefenseKind::DPSGD},
                                  {"adv-training", DefenseKind::AdvTraining},
                                  {"input-noise", DefenseKind::InputNoise},
                                  {"mixup", DefenseKind::Mixup},
                                  {"cutout", DefenseKind::Cutout},
                                  {"cutmix", DefenseKind::CutMix},
                                  {"maxup", DefenseKind::Maxup},
                                  {"spectral-filter", DefenseKind::SpectralFilter},
                                  {"deep-knn-filter", DefenseKind::DeepKNNFilter},
                                  {"activation-cluster-filter", DefenseKind::ActivationClusterFilter}});
}

// Dataset root comes from POISONLAB_DATA_ROOT when the configured path is
// relative.
std::string resolve_data_path(const std::string& path) {
  if (path.empty() || std::filesystem::path(path).is_absolute()) return path;
  const char* root = std::getenv("POISONLAB_DATA_ROOT");
  return root ? (std::filesystem::path(root) / path).string() : path;
}

std::pair<Dataset, Dataset> make_datasets(const json& cfg) {
  std::string source = str(cfg, "dataset.source");
  int64_t classes = integer(cfg, "dataset.classes");
  uint64_t seed = static_cast<uint64_t>(integer(cfg, "dataset.seed"));
  Dataset all;
  if (source == "synthetic-textures") {
    all = synth_textures(classes, integer(cfg, "dataset.n_per_class"), seed, num(cfg, "dataset.ambiguity"));
  } else if (source == "synthetic-blobs") {
    all = synth_blobs(classes, integer(cfg, "dataset.dim"), integer(cfg, "dataset.n_per_class"),
                      num(cfg, "dataset.separation"), seed);
  } else if (source == "cifar10") {
    std::string dir = resolve_data_path(str(cfg, "dataset.path"));
    std::vector<std::string> paths;
    for (int i = 1; i <= 5; ++i) paths.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
    all = load_cifar10_bin(paths);
  } else {
    throw ConfigError("config: dataset.source must be one of {synthetic-textures, synthetic-blobs, cifar10}");
  }
  double fraction = num(cfg, "dataset.subset_fraction");
  if (fraction < 1.0) all = subset_stratified(all, fraction, seed);
  return split_train_val(all, integer(cfg, "dataset.val_per_class"));
}

ModelSpec make_model_spec(const json& cfg, const Dataset& train_set) {
  std::string arch = str(cfg, "model.arch");
  if (arch == "mlp") {
    std::vector<int64_t> widths = {train_set.dim()};
    for (const auto& w : at_path(cfg, "model.hidden")) widths.push_back(w.get<int64_t>());
    widths.push_back(train_set.classes);
    return MlpSpec{widths};
  }
  if (arch == "cnn") {
    if (train_set.image_shape.size() != 3) throw ConfigError("config: model.arch cnn needs [C,H,W] images");
    CnnSpec s;
    s.in_ch = train_set.image_shape[0];
    s.height = train_set.image_shape[1];
    s.width = train_set.image_shape[2];
    s.channels.clear();
    for (const auto& c : at_path(cfg, "model.channels")) s.channels.push_back(c.get<int64_t>());
    s.classes = train_set.classes;
    return s;
  }
  throw ConfigError("config: model.arch must be one of {mlp, cnn}");
}

TrialSpec make_trial_spec(const json& cfg, const Dataset& train_set) {
  TrialSpec s;
  s.seed = static_cast<uint64_t>(integer(cfg, "harness.seed"));
  s.scenario = parse_enum<Scenario>(str(cfg, "scenario"), "scenario",
                                    {{"from-scratch", Scenario::FromScratch},
                                     {"fine-tuning", Scenario::FineTuning},
                                     {"transfer", Scenario::Transfer}});
  s.robust_base_only = boolean(cfg, "robust_base_only");
  s.model = make_model_spec(cfg, train_set);

  s.train.epochs = integer(cfg, "train.epochs");
  s.train.batch_size = integer(cfg, "train.batch_size");
  s.train.lr = num(cfg, "train.lr");
  s.train.momentum = num(cfg, "train.momentum");
  s.train.weight_decay = num(cfg, "train.weight_decay");
  s.train.augment = boolean(cfg, "train.augment") && train_set.image_shape.size() == 3 ? AugmentPolicy::FlipCrop
                                                                                       : AugmentPolicy::None;
  s.train.seed = static_cast<uint64_t>(integer(cfg, "train.seed"));

  s.attack.kind = parse_attack(str(cfg, "attack.kind"), "attack.kind");
  s.attack.mode = parse_enum<MatchMode>(str(cfg, "attack.mode"), "attack.mode",
                                        {{"cosine", MatchMode::Cosine}, {"squared-error", MatchMode::SquaredError}});
  s.attack.steps = integer(cfg, "attack.steps");
  s.attack.step_size = num(cfg, "attack.step_size");
  s.attack.restarts = integer(cfg, "attack.restarts");
  s.attack.augment_during_attack = boolean(cfg, "attack.augment_during_attack") && train_set.image_shape.size() == 3;
  s.attack.unroll = integer(cfg, "attack.unroll");
  s.attack.inner_lr = num(cfg, "attack.inner_lr");
  s.attack.opacity = num(cfg, "attack.opacity");
  s.attack.dp_noise = num(cfg, "attack.dp_noise");

  s.defense.kind = parse_defense(str(cfg, "defense.kind"));
  s.defense.p = num(cfg, "defense.p");
  s.defense.inner_steps = integer(cfg, "defense.inner_steps");
  s.defense.surrogate = parse_attack(str(cfg, "defense.surrogate"), "defense.surrogate");
  s.defense.surrogate_mode =
      parse_enum<MatchMode>(str(cfg, "defense.surrogate_mode"), "defense.surrogate_mode",
                            {{"cosine", MatchMode::Cosine}, {"squared-error", MatchMode::SquaredError}});
  s.defense.epsilon = num(cfg, "defense.epsilon");
  s.defense.inner_step_size = num(cfg, "defense.inner_step_size");
  s.defense.adv_step_size = num(cfg, "defense.adv_step_size");
  s.defense.unroll = integer(cfg, "defense.unroll");
  s.defense.inner_lr = num(cfg, "defense.inner_lr");
  s.defense.clip = num(cfg, "defense.clip");
  s.defense.noise = num(cfg, "defense.noise");
  s.defense.mixup_alpha = num(cfg, "defense.mixup_alpha");
  s.defense.gray_patch = boolean(cfg, "defense.gray_patch");
  s.defense.overestimate = num(cfg, "defense.overestimate");
  s.defense.knn_k = integer(cfg, "defense.knn_k");
  s.defense.cluster_threshold = num(cfg, "defense.cluster_threshold");

  s.budget.norm = parse_enum<NormKind>(str(cfg, "budget.norm"), "budget.norm",
                                       {{"linf", NormKind::LInf}, {"patch", NormKind::PatchL0}});
  s.budget.epsilon = num(cfg, "budget.epsilon");
  s.budget.patch_h = integer(cfg, "budget.patch_h");
  s.budget.patch_w = integer(cfg, "budget.patch_w");
  s.budget.fraction = num(cfg, "budget.fraction");

  s.adaptive = boolean(cfg, "harness.adaptive");
  s.backdoor_eval_targets = integer(cfg, "harness.backdoor_eval_targets");
  s.validate();
  return s;
}

// Resolved config, seed list, and version: enough to replay the run exactly.
void write_provenance(const json& cfg, const std::string& out_dir, uint64_t seed0, int64_t trials) {
  std::filesystem::create_directories(out_dir);
  save_text_file(cfg.dump(2) + "\n", out_dir + "/config.json");
  std::string seeds;
  for (int64_t i = 0; i < trials; ++i) seeds += std::to_string(seed0 + static_cast<uint64_t>(i)) + "\n";
  save_text_file(seeds, out_dir + "/seeds.txt");
}

Model fit_with_defense(const TrialSpec& spec, const Dataset& train_set, const Dataset& val_set) {
  DefenseHook dh = make_defense_hook(spec.defense, train_set.image_shape, train_set.classes);
  GradHook gh = make_grad_hook(spec.defense);
  Model m = build_model(spec.model, SplitRng(spec.seed).derive("cli-init").next_u64());
  TrainConfig tc = spec.train;
  return train(std::move(m), train_set, &val_set, tc, dh, nullptr, gh);
}

int cmd_train(const json& cfg, const Dataset& train_set, const Dataset& val_set, bool defended,
              const std::string& poisons_path) {
  TrialSpec spec = make_trial_spec(cfg, train_set);
  if (!defended) spec.defense.kind = DefenseKind::None;
  write_provenance(cfg, str(cfg, "out"), spec.seed, 1);
  Dataset data = train_set;
  if (!poisons_path.empty()) data = apply_poisons(train_set, load_poisonset(poisons_path));
  Model m = fit_with_defense(spec, data, val_set);
  std::string out = str(cfg, "out");
  save_checkpoint(m, out + "/model.bin");
  json summary = {{"val_acc", accuracy(m, val_set)}, {"checkpoint", out + "/model.bin"}};
  save_text_file(summary.dump(2) + "\n", out + "/train.json");
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_attack(const json& cfg, const Dataset& train_set, const Dataset& val_set) {
  TrialSpec spec = make_trial_spec(cfg, train_set);
  write_provenance(cfg, str(cfg, "out"), spec.seed, 1);
  TrialPlan plan = plan_trial(spec, train_set, val_set);
  Model surrogate = build_model(spec.model, SplitRng(spec.seed).derive("surrogate-init").next_u64());
  TrainConfig tc = spec.train;
  tc.seed = SplitRng(spec.seed).derive("surrogate").next_u64();
  surrogate = train(std::move(surrogate), train_set, &val_set, tc);
  PoisonSet ps = craft_for_plan(spec, plan, surrogate, train_set);
  std::string out = str(cfg, "out");
  save_poisonset(ps, out + "/poisons.bin");
  json summary = {{"poison_count", ps.count()},
                  {"adversarial_class", plan.adversarial_class},
                  {"target_id", plan.target_pos >= 0 ? val_set.ids[static_cast<size_t>(plan.target_pos)] : -1},
                  {"poisons", out + "/poisons.bin"}};
  save_text_file(summary.dump(2) + "\n", out + "/attack.json");
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_evaluate(const json& cfg, const Dataset& train_set, const Dataset& val_set) {
  TrialSpec spec = make_trial_spec(cfg, train_set);
  int64_t trials = integer(cfg, "harness.trials");
  int64_t workers = integer(cfg, "harness.workers");
  std::string out = str(cfg, "out");
  write_provenance(cfg, out, spec.seed, trials);
  auto outcomes = run_trials(spec, train_set, val_set, trials, workers);
  EvalReport report = aggregate(outcomes);
  std::string js = report_to_json(report, spec);
  save_text_file(js + "\n", out + "/report.json");
  std::cout << js << "\n";
  return 0;
}

int cmd_sweep(const json& cfg, const Dataset& train_set, const Dataset& val_set) {
  TrialSpec spec = make_trial_spec(cfg, train_set);
  std::vector<std::pair<std::string, DefenseConfig>> grid;
  if (cfg.contains("sweep")) {
    if (!cfg["sweep"].is_array()) throw ConfigError("config: sweep expects an array of defense sections");
    for (const auto& entry : cfg["sweep"]) {
      json merged = cfg;
      merge(merged["defense"], entry.contains("defense") ? entry["defense"] : entry, "sweep.defense");
      TrialSpec row = make_trial_spec(merged, train_set);
      grid.emplace_back(entry.contains("label") ? entry["label"].get<std::string>() : "", row.defense);
    }
  } else {
    DefenseConfig none;
    grid.emplace_back("none", none);
    for (double p : {0.25, 0.5, 0.75}) {
      DefenseConfig adv = spec.defense;
      adv.kind = DefenseKind::AdversarialPoisoning;
      adv.p = p;
      grid.emplace_back("adversarial-poisoning", adv);
    }
  }
  int64_t trials = integer(cfg, "harness.trials");
  int64_t workers = integer(cfg, "harness.workers");
  std::string out = str(cfg, "out");
  write_provenance(cfg, out, spec.seed, trials);
  auto rows = sweep(spec, grid, train_set, val_set, trials, workers);
  std::string csv = sweep_to_csv(rows);
  save_text_file(csv, out + "/sweep.csv");
  std::cout << csv;
  return 0;
}

int cmd_visualize(const json& cfg, const Dataset& train_set, const Dataset& val_set) {
  TrialSpec spec = make_trial_spec(cfg, train_set);
  write_provenance(cfg, str(cfg, "out"), spec.seed, 1);
  TrialPlan plan = plan_trial(spec, train_set, val_set);
  Model surrogate = build_model(spec.model, SplitRng(spec.seed).derive("surrogate-init").next_u64());
  TrainConfig tc = spec.train;
  tc.seed = SplitRng(spec.seed).derive("surrogate").next_u64();
  surrogate = train(std::move(surrogate), train_set, &val_set, tc);
  PoisonSet ps = craft_for_plan(spec, plan, surrogate, train_set);
  Dataset poisoned = apply_poisons(train_set, ps);
  Model victim = fit_with_defense(spec, poisoned, val_set);
  FeatureProjection proj =
      project_features(victim, poisoned, plan.adversarial_class, plan.source_class, ps.ids, &plan.target_image);
  std::string out = str(cfg, "out");
  save_text_file(projection_to_csv(proj), out + "/features.csv");
  save_text_file(projection_to_svg(proj), out + "/features.svg");
  std::cout << "wrote " << out << "/features.csv and " << out << "/features.svg (" << proj.points.size()
            << " points)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{std::string(kVersion) + " - training-time poisoning lab"};
  app.fallthrough();
  app.require_subcommand(1);

  std::string config_path, out_dir, scenario, attack, defense, poisons_path;
  int64_t seed = -1, trials = -1, workers = -1;
  double p = -1, eps = -1, budget = -1;
  app.add_option("--config", config_path, "JSON config file layered over the defaults");
  app.add_option("--seed", seed, "base trial seed");
  app.add_option("--trials", trials, "number of trials");
  app.add_option("--workers", workers, "concurrent trial workers");
  app.add_option("--scenario", scenario, "from-scratch | fine-tuning | transfer");
  app.add_option("--attack", attack, "attack kind");
  app.add_option("--defense", defense, "defense kind");
  app.add_option("--p", p, "defense split probability");
  app.add_option("--eps", eps, "perturbation budget in 0-255 pixel units");
  app.add_option("--budget", budget, "poisoned fraction of the training set");
  app.add_option("--out", out_dir, "output directory");

  auto* c_train = app.add_subcommand("train", "train a model, optionally under a defense");
  c_train->add_option("--poisons", poisons_path, "poison set to apply before training");
  auto* c_attack = app.add_subcommand("attack", "craft a poison set against a clean surrogate");
  auto* c_defend = app.add_subcommand("defend", "train under the configured defense");
  c_defend->add_option("--poisons", poisons_path, "poison set to apply before training");
  auto* c_eval = app.add_subcommand("evaluate", "run seeded trials and aggregate a report");
  auto* c_sweep = app.add_subcommand("sweep", "evaluate a grid of defenses against one attack");
  auto* c_viz = app.add_subcommand("visualize", "project features for one attack/defense run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return 1;
  }

  try {
    json cfg = default_config();
    if (!config_path.empty()) {
      std::ifstream f(config_path);
      if (!f) throw ConfigError("config file not found: " + config_path);
      json file_cfg;
      try {
        file_cfg = json::parse(f);
      } catch (const json::parse_error& e) {
        throw ConfigError("config file " + config_path + ": " + e.what());
      }
      merge(cfg, file_cfg, "");
    }
    if (seed >= 0) {
      cfg["harness"]["seed"] = seed;
      cfg["train"]["seed"] = seed;
    }
    if (trials >= 0) cfg["harness"]["trials"] = trials;
    if (workers >= 0) cfg["harness"]["workers"] = workers;
    if (!scenario.empty()) cfg["scenario"] = scenario;
    if (!attack.empty()) cfg["attack"]["kind"] = attack;
    if (!defense.empty()) cfg["defense"]["kind"] = defense;
    if (p >= 0) cfg["defense"]["p"] = p;
    if (eps >= 0) {
      cfg["budget"]["epsilon"] = eps / 255.0;
      cfg["defense"]["epsilon"] = eps / 255.0;
    }
    if (budget >= 0) cfg["budget"]["fraction"] = budget;
    if (!out_dir.empty()) cfg["out"] = out_dir;

    auto [train_set, val_set] = make_datasets(cfg);
    if (c_train->parsed()) return cmd_train(cfg, train_set, val_set, false, poisons_path);
    if (c_defend->parsed()) return cmd_train(cfg, train_set, val_set, true, poisons_path);
    if (c_attack->parsed()) return cmd_attack(cfg, train_set, val_set);
    if (c_eval->parsed()) return cmd_evaluate(cfg, train_set, val_set);
    if (c_sweep->parsed()) return cmd_sweep(cfg, train_set, val_set);
    if (c_viz->parsed()) return cmd_visualize(cfg, train_set, val_set);
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 2;
  }
}
