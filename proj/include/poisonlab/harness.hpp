#pragma once

#include <string>

#include "poisonlab/defenses.hpp"

namespace poisonlab {

// One seeded experiment. Target, adversarial class, and poison subset are
// materialized from the seed when left unset, so a TrialSpec is fully
// reproducible from (seed, configs) alone.
struct TrialSpec {
  uint64_t seed = 0;
  Scenario scenario = Scenario::FromScratch;
  // Train the base model with the defense, then retrain the head without it.
  bool robust_base_only = false;
  ModelSpec model = CnnSpec{};
  TrainConfig train;
  AttackConfig attack;
  DefenseConfig defense;
  PerturbationBudget budget;
  // Materialized from the seed when left at their defaults.
  int64_t target_id = -1;          // targeted attacks: one validation example
  int adversarial_class = -1;      // class the attacker wants predicted
  std::vector<int64_t> poison_ids; // subset of the adversarial class in train
  bool adaptive = false;           // attacker retrains the surrogate under the defense
  int64_t backdoor_eval_targets = 200;

  void validate() const;
};

struct TrialOutcome {
  uint64_t seed = 0;
  bool errored = false;
  std::string error;
  // 0/1 for targeted attacks, a rate in [0,1] for backdoors.
  double success = 0.0;
  double val_acc = 0.0;
  int64_t poison_count = 0;
  double wall_seconds = 0.0;
};

struct EvalReport {
  std::vector<TrialOutcome> trials;
  int64_t n_ok = 0;
  int64_t n_errored = 0;
  double success_pct = 0.0;
  double se_pct = 0.0;
  double val_acc_pct = 0.0;
  double wall_seconds = 0.0;
};

// The seed-materialized ingredients of one trial: adversarial class, target
// example, poison subset, and (for patch attacks) the trigger.
struct TrialPlan {
  int adversarial_class = 0;
  int source_class = 0;  // true class of the target example
  int64_t target_pos = -1;
  Tensor target_image;
  std::vector<int64_t> poison_ids;
  Trigger trigger;
};

TrialPlan plan_trial(const TrialSpec& spec, const Dataset& train_set, const Dataset& val_set);
PoisonSet craft_for_plan(const TrialSpec& spec, const TrialPlan& plan, const Model& surrogate,
                         const Dataset& train_set);

// Exact-label success check: the clean target must be predicted as the
// adversarial class; any third class does not count.
bool targeted_success(const Model& m, const Tensor& target_image, int adversarial_class);
// Fraction of patched images predicted as the adversarial class.
double backdoor_success(const Model& m, const Dataset& val, const std::vector<int64_t>& target_positions,
                        const Trigger& trigger, int adversarial_class);

// Full pipeline: surrogate (adaptive or clean), craft, victim training per
// scenario with the defense active, evaluation. Failures are captured in the
// outcome, not thrown.
TrialOutcome run_trial(const TrialSpec& spec, const Dataset& train_set, const Dataset& val_set);

// Runs `trials` seeds (spec.seed, spec.seed+1, ...) across `workers` threads.
// Outcomes land at their seed's index regardless of scheduling.
std::vector<TrialOutcome> run_trials(const TrialSpec& spec, const Dataset& train_set, const Dataset& val_set,
                                     int64_t trials, int64_t workers = 1);

// successes/N with SE = 100*sqrt(p(1-p)/N); all-equal outcomes report the
// pinned worst-case constant instead of a zero SE. Errored trials are counted
// but excluded from the averages.
EvalReport aggregate(const std::vector<TrialOutcome>& outcomes, double worst_case_se = 5.59);

std::string report_to_json(const EvalReport& report, const TrialSpec& spec);

struct SweepRow {
  std::string defense;
  double param = 0.0;
  EvalReport report;
};

// One report per defense setting against a fixed attack.
std::vector<SweepRow> sweep(const TrialSpec& base, const std::vector<std::pair<std::string, DefenseConfig>>& grid,
                            const Dataset& train_set, const Dataset& val_set, int64_t trials, int64_t workers = 1);

// Columns: defense, param, success_pct, se_pct, val_acc_pct.
std::string sweep_to_csv(const std::vector<SweepRow>& rows);

const char* defense_name(DefenseKind kind);
const char* attack_name(AttackKind kind);
const char* scenario_name(Scenario s);

}  // namespace poisonlab
