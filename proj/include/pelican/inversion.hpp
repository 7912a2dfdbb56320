#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pelican/blackbox.hpp"
#include "pelican/rng.hpp"
#include "pelican/trace.hpp"

namespace pelican {

// ---------------------------------------------------------------------------
// Threat model.
// ---------------------------------------------------------------------------

/// A1 knows x_{t-2} and recovers l_{t-1}; A2 knows x_{t-1} and recovers
/// l_{t-2}; A3 knows neither step and recovers both. Every adversary observes
/// the served label l_t and holds marginal prior knowledge p.
enum class AdversaryKind { a1, a2, a3 };

std::string to_string(AdversaryKind kind);
AdversaryKind adversary_from_string(const std::string& name);

enum class PriorMode { true_marginals, none, predict, estimate };

std::string to_string(PriorMode mode);
PriorMode prior_from_string(const std::string& name);

enum class AttackStrategy { brute_force, time_based, gradient };

std::string to_string(AttackStrategy strategy);
AttackStrategy strategy_from_string(const std::string& name);

struct AdversaryConfig {
  AdversaryKind kind = AdversaryKind::a1;
  PriorMode prior_mode = PriorMode::true_marginals;
  double candidate_threshold = 0.01;  // 1% confidence cut for candidate pruning
  int probe_budget = 200;

  bool knows_prev2() const { return kind == AdversaryKind::a1; }
  bool knows_prev1() const { return kind == AdversaryKind::a2; }
  std::vector<int> unknown_steps() const;  // subset of {2, 1} meaning t-2 / t-1
};

// ---------------------------------------------------------------------------
// Priors and probing.
// ---------------------------------------------------------------------------

struct Prior {
  PriorMode mode = PriorMode::none;
  VecX values;  // over the vocabulary; non-negative, sums to 1

  void validate() const;
  double at(int location) const { return values(location); }
};

/// Probe windows drawn uniformly over (location x slot x duration bin) per
/// step, one shared day of week; used for predict/estimate priors and for
/// candidate pruning.
struct ProbeSet {
  std::vector<Window> windows;
  MatX x_prev2;  // encoded columns
  MatX x_prev1;
};

ProbeSet make_probe_windows(Index n_locations, int budget, Rng& rng);

Prior build_prior_none(Index n_locations);
Prior build_prior_true(const Trace& training_trace, const DomainVocab& vocab);
/// Mean rounded confidence vector over the probes, renormalized.
Prior build_prior_predict(const BlackBoxHandle& handle, const ProbeSet& probes);
/// 0.75 on the modal location of the predict distribution, the remaining
/// 0.25 spread uniformly over the other locations.
Prior build_prior_estimate(const BlackBoxHandle& handle, const ProbeSet& probes);

/// Locations whose reported confidence reaches `threshold` in at least one
/// probe, ordered by descending maximum confidence (ties by index). An empty
/// result falls back to the full vocabulary and sets *fell_back.
std::vector<int> candidate_locations(const BlackBoxHandle& handle, const ProbeSet& probes,
                                     double threshold, bool* fell_back = nullptr);

// ---------------------------------------------------------------------------
// Attack targets and reports.
// ---------------------------------------------------------------------------

/// Ground-truth window with raw sessions; the attack masks whatever the
/// adversary does not know.
struct TargetWindow {
  Session prev2;
  Session prev1;
  int label = 0;  // observed l_t
};

std::vector<TargetWindow> make_target_windows(const Trace& trace, const DomainVocab& vocab);

/// ln conf(l_t | filled window) + sum of ln prior over the filled unknown
/// locations. Zero prior mass excludes the candidate (-inf and skip).
double score_candidate(const BlackBoxHandle& handle, const Window& filled, int observed_label,
                       const Prior& prior, std::span<const int> unknown_locations);

struct RankedLocation {
  int location = 0;
  double score = 0.0;
};

struct StepRecovery {
  int step = 0;  // 2 -> t-2, 1 -> t-1
  int truth = 0;
  std::vector<RankedLocation> ranked;  // deduplicated, covers the vocabulary
  /// Gradient attack only: the argmax-discretized session.
  std::optional<EncodedSession> reconstruction;
};

struct WindowAttackResult {
  int window_index = 0;
  std::vector<StepRecovery> steps;
  bool failed = false;  // gradient attack divergence
  std::uint64_t tie_seed = 0;
  std::uint64_t queries = 0;     // handle queries issued for this window
  std::uint64_t candidates = 0;  // enumeration size before prior exclusion
  std::uint64_t collapsed = 0;   // queried candidates whose confidence rounded to 0 or 1
};

struct AttackParams {
  AdversaryConfig adversary;
  Prior prior;
  std::vector<int> candidates;  // pruned locations for time_based
  std::uint64_t seed = 0;       // tie-break stream
  // Gradient strategy:
  int gradient_steps = 200;
  double gradient_step_size = 0.5;
  double soften_temperature = 1.0;
  std::optional<std::vector<EncodedSession>> gradient_init;  // one per unknown step
};

// ---------------------------------------------------------------------------
// Strategies.
// ---------------------------------------------------------------------------

/// Enumerates the full (location x entry slot x duration bin) cross product
/// per unknown step; day of week derives from entry arithmetic. The optional
/// continuity filter keeps only candidates whose slot matches the
/// continuity-derived entry (oracle mode for validating the time-based
/// shortcut).
WindowAttackResult attack_brute_force(const BlackBoxHandle& handle, const TargetWindow& target,
                                      const AttackParams& params, const DomainVocab& vocab,
                                      int window_index, bool continuity_filter = false);

/// Time-correlation shortcut: entry times of unknown steps derive from the
/// adjacent step through e_{tau+1} = e_tau + d_tau, so only (location x
/// duration bin) is enumerated.
WindowAttackResult attack_time_based(const BlackBoxHandle& handle, const TargetWindow& target,
                                     const AttackParams& params, const DomainVocab& vocab,
                                     int window_index);

/// White-box gradient descent on softened one-hot blocks of the unknown
/// steps. NaN divergence marks the window failed.
WindowAttackResult attack_gradient(const SeqModel& model, const TargetWindow& target,
                                   const AttackParams& params, const DomainVocab& vocab,
                                   int window_index);

/// Percentage of recovery trials whose true location ranks in the top k.
/// A3 contributes two trials per window. Throws InputError on empty input.
double attack_accuracy(std::span<const WindowAttackResult> results, int k);

/// Deduplicates candidate scores per location (keeping the maximum), ranks by
/// score with seeded tie-breaking and pads the tail with the remaining
/// vocabulary so every ranking covers all locations.
std::vector<RankedLocation> rank_candidates(std::span<const std::pair<int, double>> scored,
                                            Index vocab_size, Rng& tie_rng);

}  // namespace pelican
