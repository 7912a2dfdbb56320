#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pelican/blackbox.hpp"
#include "pelican/inversion.hpp"
#include "pelican/personalize.hpp"
#include "pelican/synth.hpp"

namespace pelican {

// ---------------------------------------------------------------------------
// Experiment configuration.
// ---------------------------------------------------------------------------

struct GeneralConfig {
  Index hidden_size = 128;
  int n_layers = 2;
  double dropout_rate = 0.1;
  double learning_rate = 1e-4;
  double weight_decay = 1e-6;
  int batch_size = 128;
  int max_epochs = 200;
  int patience = 10;
  std::vector<Index> hidden_grid;  // empty -> {hidden_size}
  std::vector<double> lr_grid;     // empty -> {learning_rate}
  int cv_folds = 5;
  double val_fraction = 0.1;  // tail of the pooled train windows held out per user
};

struct AttackGridConfig {
  std::vector<AdversaryKind> adversaries{AdversaryKind::a1};
  std::vector<AttackStrategy> strategies{AttackStrategy::brute_force, AttackStrategy::time_based,
                                         AttackStrategy::gradient};
  /// The flat prior comes first: it puts all strategies on equal footing (the
  /// gradient attack carries no prior term) and headline comparisons read it.
  /// The informed cells quantify what marginal knowledge adds on top.
  std::vector<PriorMode> priors{PriorMode::none, PriorMode::true_marginals};
  double eval_fraction = 0.25;  // trailing share of the training windows under attack
  int max_eval_windows = 40;    // per-user cap keeping desk runs on budget
  double candidate_threshold = 0.01;
  int probe_budget = 200;
  int gradient_steps = 200;
  double gradient_step_size = 0.5;
  double soften_temperature = 1.0;
};

struct DefenseConfig {
  std::vector<double> temperatures{1.0, 0.5, 0.1, 0.05, 0.01};
  int precision = 4;
  std::vector<AdversaryKind> adversaries{AdversaryKind::a1};
  std::vector<AttackStrategy> strategies{AttackStrategy::time_based};
  /// The sweep runs with a flat prior so it isolates what the model itself
  /// leaks; informed-prior cells live in the attack grid.
  std::vector<PriorMode> priors{PriorMode::none};
};

struct Seeds {
  std::uint64_t cohort = 0;
  std::uint64_t training = 0;
  std::uint64_t attack = 0;
};

struct ExperimentConfig {
  CohortSpec cohort;
  PersonalizationMethod method = PersonalizationMethod::tl_fe;
  bool evaluate_reuse = true;  // record the Reuse baseline's accuracy alongside
  double train_fraction = 0.8;
  GeneralConfig general;
  PersonalizeConfig personal;
  AttackGridConfig attack;
  DefenseConfig defense;
  Seeds seeds;
  std::vector<int> k_list{1, 2, 3, 5};
  std::string output_dir;

  static ExperimentConfig desk_default();
  static ExperimentConfig smoke();
};

/// JSON config file round trip. Seeds are mandatory in files; everything else
/// falls back to the desk defaults. Throws ConfigError / ParseError.
ExperimentConfig load_experiment_config(const std::string& path);
std::string experiment_config_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_config_from_json(const std::string& text);

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

struct PhaseStats {
  double wall_seconds = 0.0;
  double cpu_seconds = 0.0;
};

struct GeneralReport {
  std::map<int, double> test_accuracy;  // pooled contributor test windows
  PhaseStats stats;
  TrainHistory history;
  Index hidden_size = 0;
  double learning_rate = 0.0;
  int n_train_windows = 0;
  int n_val_windows = 0;
  int n_test_windows = 0;
};

struct UserReport {
  std::string user;
  std::string method;
  bool fallback = false;  // personalization fell back to reuse
  int mobility_degree = 0;
  double predictability = 0.0;
  int train_windows = 0;
  int test_windows = 0;
  int eval_windows = 0;
  std::map<int, double> train_accuracy;
  std::map<int, double> test_accuracy;
  std::map<int, double> reuse_test_accuracy;
  PhaseStats stats;
  Index chosen_hidden = 0;
  double chosen_lr = 0.0;
};

struct AttackCell {
  std::string user;
  AdversaryKind adversary = AdversaryKind::a1;
  AttackStrategy strategy = AttackStrategy::time_based;
  PriorMode prior = PriorMode::true_marginals;
  double temperature = 1.0;
  std::map<int, double> accuracy;  // k -> %
  int trials = 0;
  std::uint64_t queries = 0;
  std::uint64_t candidates = 0;
  int candidate_set_size = 0;
  bool candidate_fallback = false;
  bool white_box = false;
  double collapse_fraction = 0.0;  // scored candidates whose conf rounded to 0 or 1
  double wall_seconds = 0.0;
  std::vector<WindowAttackResult> windows;  // window detail for attack.csv
};

struct DefenseRow {
  AdversaryKind adversary = AdversaryKind::a1;
  AttackStrategy strategy = AttackStrategy::time_based;
  PriorMode prior = PriorMode::true_marginals;
  double temperature = 1.0;
  int k = 1;
  double attack_accuracy = 0.0;
  double leakage_reduction_pct = 0.0;  // vs the temperature-1 cell
};

struct ServiceRow {
  std::string user;
  double temperature = 1.0;
  int k = 1;
  double accuracy = 0.0;
};

struct CorrelationRow {
  std::string axis;  // "predictability_proxy" or "mobility_degree"
  int k = 1;
  double r = 0.0;
  double p_value = 1.0;
  int n = 0;
};

struct ExperimentReport {
  GeneralReport general;
  std::vector<UserReport> users;
  std::vector<AttackCell> cells;
  std::vector<DefenseRow> defense;
  std::vector<ServiceRow> service;
  std::vector<CorrelationRow> correlations;
  PhaseStats synth_stats;
  double total_wall_seconds = 0.0;

  const AttackCell* find_cell(const std::string& user, AdversaryKind adv, AttackStrategy strat,
                              PriorMode prior, double temperature) const;
  /// Trial-weighted accuracy over all users of one grid cell.
  double aggregate_accuracy(AdversaryKind adv, AttackStrategy strat, PriorMode prior,
                            double temperature, int k) const;
  double aggregate_wall(AdversaryKind adv, AttackStrategy strat, PriorMode prior,
                        double temperature) const;
};

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

double topk_accuracy(const SeqModel& model, std::span<const Window> windows, int k);
double topk_accuracy(const BlackBoxHandle& handle, std::span<const Window> windows, int k);

/// (undefended - defended) / undefended * 100. Undefended must be non-zero.
double leakage_reduction(double undefended_accuracy, double defended_accuracy);

struct Correlation {
  double r = 0.0;
  double p_value = 1.0;
  int n = 0;
};

/// Pearson r with a two-sided permutation test (seeded resampling of y).
Correlation pearson_permutation(std::span<const double> x, std::span<const double> y,
                                int n_resamples, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Pipeline.
// ---------------------------------------------------------------------------

/// Per-target working set kept by the pipeline.
struct TargetState {
  UserProfile profile;
  Trace trace;
  Trace train_trace;
  Trace test_trace;
  std::vector<Window> train_windows;  // encoded over the source vocabulary
  std::vector<Window> test_windows;
  std::vector<Window> eval_windows;         // trailing slice under attack
  std::vector<TargetWindow> eval_targets;   // same slice with raw sessions
  SeqModel model;
  UserReport report;
};

/// In-memory experiment pipeline. Stages may run individually (the CLI wires
/// them through files) or end to end via run().
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg);

  void run_synth();
  void run_general();      // phase 1
  void run_personalize();  // phase 2
  void run_attacks();      // undefended grid at temperature 1
  void run_defense();      // temperature sweep
  void run_update(int extra_weeks);
  void finalize();         // correlations + output files

  ExperimentReport& report() { return report_; }
  const ExperimentConfig& config() const { return cfg_; }
  const DomainVocab& vocab() const { return vocab_; }
  const SeqModel& general_model() const { return general_; }
  const Cohort& cohort() const { return cohort_; }
  std::vector<TargetState>& targets() { return targets_; }

  // Hooks for the CLI to resume from files.
  void set_cohort(Cohort cohort);
  void set_general(SeqModel general, DomainVocab vocab);
  void prepare_targets();  // splits + windows, no training
  void set_target_model(std::size_t i, SeqModel model);

  AttackCell run_attack_cell(const TargetState& target, std::size_t target_index,
                             const BlackBoxHandle& handle, AdversaryKind adv,
                             AttackStrategy strategy, PriorMode prior, double temperature);

 private:
  ExperimentConfig cfg_;
  Cohort cohort_;
  DomainVocab vocab_;
  SeqModel general_;
  std::vector<TargetState> targets_;
  ExperimentReport report_;
  double start_wall_ = 0.0;
};

/// Full pipeline: synth, phase 1, phase 2, attacks, defense sweep, reports.
/// Writes traces, models and reports under cfg.output_dir when set.
ExperimentReport run_experiment(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Output files.
// ---------------------------------------------------------------------------

void write_traces(const Cohort& cohort, const std::string& out_dir);
void write_profiles(const Cohort& cohort, const std::string& out_dir);
Cohort load_cohort(const std::string& out_dir);
void write_vocab(const DomainVocab& vocab, const std::string& out_dir);
DomainVocab load_vocab(const std::string& out_dir);

/// attack.csv, summary.json and the plot tables. CSV output is deterministic:
/// no wall-clock columns, fixed ordering, exact float formatting.
void write_reports(const ExperimentReport& report, const ExperimentConfig& cfg,
                   const DomainVocab& vocab, const std::string& out_dir);

/// reports/state.json lets CLI stages hand partial results to `report`.
void save_state(const ExperimentReport& report, const std::string& out_dir);
ExperimentReport load_state(const std::string& out_dir);

}  // namespace pelican
