#include "pelican/inversion.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>

namespace pelican {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr Index kScoreChunk = 8192;
}  // namespace

// ---------------------------------------------------------------------------
// Enums.
// ---------------------------------------------------------------------------

std::string to_string(AdversaryKind kind) {
  switch (kind) {
    case AdversaryKind::a1: return "a1";
    case AdversaryKind::a2: return "a2";
    case AdversaryKind::a3: return "a3";
  }
  throw ContractError("unreachable adversary kind");
}

AdversaryKind adversary_from_string(const std::string& name) {
  if (name == "a1") return AdversaryKind::a1;
  if (name == "a2") return AdversaryKind::a2;
  if (name == "a3") return AdversaryKind::a3;
  throw ConfigError("unknown adversary: " + name);
}

std::string to_string(PriorMode mode) {
  switch (mode) {
    case PriorMode::true_marginals: return "true";
    case PriorMode::none: return "none";
    case PriorMode::predict: return "predict";
    case PriorMode::estimate: return "estimate";
  }
  throw ContractError("unreachable prior mode");
}

PriorMode prior_from_string(const std::string& name) {
  if (name == "true") return PriorMode::true_marginals;
  if (name == "none") return PriorMode::none;
  if (name == "predict") return PriorMode::predict;
  if (name == "estimate") return PriorMode::estimate;
  throw ConfigError("unknown prior mode: " + name);
}

std::string to_string(AttackStrategy strategy) {
  switch (strategy) {
    case AttackStrategy::brute_force: return "brute_force";
    case AttackStrategy::time_based: return "time_based";
    case AttackStrategy::gradient: return "gradient";
  }
  throw ContractError("unreachable attack strategy");
}

AttackStrategy strategy_from_string(const std::string& name) {
  if (name == "brute_force") return AttackStrategy::brute_force;
  if (name == "time_based") return AttackStrategy::time_based;
  if (name == "gradient") return AttackStrategy::gradient;
  throw ConfigError("unknown attack strategy: " + name);
}

std::vector<int> AdversaryConfig::unknown_steps() const {
  switch (kind) {
    case AdversaryKind::a1: return {1};
    case AdversaryKind::a2: return {2};
    case AdversaryKind::a3: return {2, 1};
  }
  throw ContractError("unreachable adversary kind");
}

// ---------------------------------------------------------------------------
// Priors and probing.
// ---------------------------------------------------------------------------

void Prior::validate() const {
  if (values.size() == 0) throw ContractError("prior has no support");
  if ((values.array() < 0.0).any()) throw ContractError("prior has negative mass");
  if (std::abs(values.sum() - 1.0) > 1e-9) throw ContractError("prior mass does not sum to 1");
}

ProbeSet make_probe_windows(Index n_locations, int budget, Rng& rng) {
  if (budget < 1) throw InputError("probe budget must be at least 1");
  if (n_locations < 1) throw InputError("probe windows need a non-empty vocabulary");
  ProbeSet probes;
  probes.windows.reserve(static_cast<std::size_t>(budget));
  for (int i = 0; i < budget; ++i) {
    const int dow = static_cast<int>(rng.below(kDaysOfWeek));
    Window w;
    w.prev2.location = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_locations)));
    w.prev2.entry_slot = static_cast<int>(rng.below(kEntrySlots));
    w.prev2.duration_bin = static_cast<int>(rng.below(kDurationBins));
    w.prev2.day_of_week = dow;
    w.prev1.location = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_locations)));
    w.prev1.entry_slot = static_cast<int>(rng.below(kEntrySlots));
    w.prev1.duration_bin = static_cast<int>(rng.below(kDurationBins));
    w.prev1.day_of_week = dow;
    w.label = 0;
    probes.windows.push_back(w);
  }
  VecXi labels;
  encode_batch(probes.windows, n_locations, probes.x_prev2, probes.x_prev1, labels);
  return probes;
}

Prior build_prior_none(Index n_locations) {
  if (n_locations < 1) throw InputError("prior needs a non-empty vocabulary");
  Prior prior;
  prior.mode = PriorMode::none;
  prior.values = VecX::Constant(n_locations, 1.0 / static_cast<double>(n_locations));
  return prior;
}

Prior build_prior_true(const Trace& training_trace, const DomainVocab& vocab) {
  if (training_trace.sessions.empty()) throw InputError("true prior needs a non-empty trace");
  Prior prior;
  prior.mode = PriorMode::true_marginals;
  prior.values = VecX::Zero(vocab.size());
  for (const Session& s : training_trace.sessions) prior.values(vocab.index_of(s.location)) += 1.0;
  prior.values /= prior.values.sum();
  return prior;
}

Prior build_prior_predict(const BlackBoxHandle& handle, const ProbeSet& probes) {
  if (probes.windows.empty()) throw ConfigError("predict prior needs at least one probe query");
  MatX conf = handle.query_confidences(probes.x_prev2, probes.x_prev1);
  Prior prior;
  prior.mode = PriorMode::predict;
  prior.values = conf.rowwise().mean();
  const double total = prior.values.sum();
  if (total <= 0.0) {
    // every confidence rounded away; nothing to renormalize
    prior.values.setConstant(1.0 / static_cast<double>(prior.values.size()));
  } else {
    prior.values /= total;
  }
  return prior;
}

Prior build_prior_estimate(const BlackBoxHandle& handle, const ProbeSet& probes) {
  Prior predict = build_prior_predict(handle, probes);
  const Index m = predict.values.size();
  Prior prior;
  prior.mode = PriorMode::estimate;
  if (m == 1) {
    prior.values = VecX::Ones(1);
    return prior;
  }
  Index modal = 0;
  predict.values.maxCoeff(&modal);
  prior.values = VecX::Constant(m, 0.25 / static_cast<double>(m - 1));
  prior.values(modal) = 0.75;
  return prior;
}

std::vector<int> candidate_locations(const BlackBoxHandle& handle, const ProbeSet& probes,
                                     double threshold, bool* fell_back) {
  if (probes.windows.empty()) throw InputError("candidate pruning needs at least one probe");
  if (!(threshold > 0.0) || !(threshold < 1.0))
    throw InputError("candidate threshold must lie in (0, 1)");
  if (fell_back) *fell_back = false;
  MatX conf = handle.query_confidences(probes.x_prev2, probes.x_prev1);
  VecX peak = conf.rowwise().maxCoeff();
  std::vector<int> kept;
  for (Index i = 0; i < peak.size(); ++i)
    if (peak(i) >= threshold) kept.push_back(static_cast<int>(i));
  if (kept.empty()) {
    std::cerr << "warning: no location cleared the candidate threshold; "
              << "falling back to the full vocabulary\n";
    if (fell_back) *fell_back = true;
    kept.resize(static_cast<std::size_t>(peak.size()));
    std::iota(kept.begin(), kept.end(), 0);
    return kept;
  }
  std::stable_sort(kept.begin(), kept.end(), [&peak](int a, int b) { return peak(a) > peak(b); });
  return kept;
}

// ---------------------------------------------------------------------------
// Targets and scoring.
// ---------------------------------------------------------------------------

std::vector<TargetWindow> make_target_windows(const Trace& trace, const DomainVocab& vocab) {
  std::vector<TargetWindow> targets;
  if (trace.sessions.size() < 3) return targets;
  for (std::size_t i = 0; i + 2 < trace.sessions.size(); ++i) {
    TargetWindow t;
    t.prev2 = trace.sessions[i];
    t.prev1 = trace.sessions[i + 1];
    t.label = vocab.index_of(trace.sessions[i + 2].location);
    targets.push_back(std::move(t));
  }
  return targets;
}

double score_candidate(const BlackBoxHandle& handle, const Window& filled, int observed_label,
                       const Prior& prior, std::span<const int> unknown_locations) {
  double prior_term = 0.0;
  for (int loc : unknown_locations) {
    const double p = prior.at(loc);
    if (p <= 0.0) return kNegInf;  // excluded outright, no query spent
    prior_term += std::log(p);
  }
  const double conf = handle.query(filled).confidences(observed_label);
  return std::log(conf) + prior_term;
}

std::vector<RankedLocation> rank_candidates(std::span<const std::pair<int, double>> scored,
                                            Index vocab_size, Rng& tie_rng) {
  std::vector<double> best(static_cast<std::size_t>(vocab_size), kNegInf);
  for (const auto& [loc, score] : scored) {
    auto& slot = best[static_cast<std::size_t>(loc)];
    if (score > slot) slot = score;
  }
  // One tie key per location, drawn in location order so the stream is
  // reproducible from the recorded seed alone.
  std::vector<double> key(static_cast<std::size_t>(vocab_size));
  for (auto& k : key) k = tie_rng.uniform();
  std::vector<int> order(static_cast<std::size_t>(vocab_size));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double sa = best[static_cast<std::size_t>(a)];
    const double sb = best[static_cast<std::size_t>(b)];
    if (sa != sb) return sa > sb;
    return key[static_cast<std::size_t>(a)] < key[static_cast<std::size_t>(b)];
  });
  std::vector<RankedLocation> ranked;
  ranked.reserve(order.size());
  for (int loc : order) ranked.push_back({loc, best[static_cast<std::size_t>(loc)]});
  return ranked;
}

// ---------------------------------------------------------------------------
// Shared enumeration scorer.
// ---------------------------------------------------------------------------

namespace {

int euclid_mod(int value, int modulus) {
  int r = value % modulus;
  return r < 0 ? r + modulus : r;
}

/// Wraps an absolute minute offset into a slot and a day carry.
struct DerivedEntry {
  int slot = 0;
  int carry = 0;  // whole days the entry spilled over
};

DerivedEntry derive_entry(long long minutes) {
  DerivedEntry d;
  while (minutes < 0) {
    minutes += kMinutesPerDay;
    --d.carry;
  }
  while (minutes >= kMinutesPerDay) {
    minutes -= kMinutesPerDay;
    ++d.carry;
  }
  d.slot = static_cast<int>(minutes / kEntrySlotMinutes);
  return d;
}

/// Accumulates candidate fillings, flushes them through the handle in chunks
/// and attributes each joint score to the filled location of every unknown
/// step.
class BatchScorer {
 public:
  BatchScorer(const BlackBoxHandle& handle, const VecX& log_prior, int observed_label,
              std::span<const int> unknown_steps)
      : handle_(handle),
        log_prior_(log_prior),
        observed_(observed_label),
        steps_(unknown_steps.begin(), unknown_steps.end()),
        scored_(unknown_steps.size()) {}

  /// locs: filled location per unknown step (same order as unknown_steps).
  void push(const EncodedSession& enc2, const EncodedSession& enc1, std::span<const int> locs) {
    double prior_term = 0.0;
    bool excluded = false;
    for (int loc : locs) {
      const double p = log_prior_(loc);
      if (p == kNegInf) {
        excluded = true;
        break;
      }
      prior_term += p;
    }
    if (excluded) return;  // zero prior mass, never queried
    enc2_.push_back(enc2);
    enc1_.push_back(enc1);
    prior_terms_.push_back(prior_term);
    for (std::size_t s = 0; s < steps_.size(); ++s) fill_locs_.push_back(locs[s]);
    if (static_cast<Index>(enc2_.size()) >= kScoreChunk) flush();
  }

  void finish() { flush(); }

  std::uint64_t queries() const { return queries_; }
  std::uint64_t collapsed() const { return collapsed_; }
  std::vector<std::vector<std::pair<int, double>>>& scored() { return scored_; }

 private:
  void flush() {
    const Index n = static_cast<Index>(enc2_.size());
    if (n == 0) return;
    const Index n_loc = handle_.n_locations();
    MatX xa = MatX::Zero(handle_.input_width(), n);
    MatX xb = MatX::Zero(handle_.input_width(), n);
    for (Index j = 0; j < n; ++j) {
      encode_features_into(enc2_[static_cast<std::size_t>(j)], n_loc, xa, j);
      encode_features_into(enc1_[static_cast<std::size_t>(j)], n_loc, xb, j);
    }
    MatX conf = handle_.query_confidences(xa, xb);
    queries_ += static_cast<std::uint64_t>(n);
    const std::size_t n_steps = steps_.size();
    for (Index j = 0; j < n; ++j) {
      const double c = conf(observed_, j);
      if (c == 0.0 || c == 1.0) ++collapsed_;
      const double score = std::log(c) + prior_terms_[static_cast<std::size_t>(j)];
      for (std::size_t s = 0; s < n_steps; ++s)
        scored_[s].push_back({fill_locs_[static_cast<std::size_t>(j) * n_steps + s], score});
    }
    enc2_.clear();
    enc1_.clear();
    prior_terms_.clear();
    fill_locs_.clear();
  }

  const BlackBoxHandle& handle_;
  const VecX& log_prior_;
  int observed_;
  std::vector<int> steps_;
  std::vector<EncodedSession> enc2_, enc1_;
  std::vector<double> prior_terms_;
  std::vector<int> fill_locs_;
  std::vector<std::vector<std::pair<int, double>>> scored_;
  std::uint64_t queries_ = 0;
  std::uint64_t collapsed_ = 0;
};

VecX log_prior_vector(const Prior& prior) {
  prior.validate();
  VecX lp(prior.values.size());
  for (Index i = 0; i < lp.size(); ++i)
    lp(i) = prior.values(i) > 0.0 ? std::log(prior.values(i)) : kNegInf;
  return lp;
}

WindowAttackResult finish_result(const AttackParams& params, const TargetWindow& target,
                                 const DomainVocab& vocab, int window_index,
                                 std::span<const int> unknown_steps, BatchScorer& scorer,
                                 std::uint64_t n_candidates) {
  scorer.finish();
  WindowAttackResult result;
  result.window_index = window_index;
  result.tie_seed = mix_seed(params.seed, static_cast<std::uint64_t>(window_index));
  result.queries = scorer.queries();
  result.collapsed = scorer.collapsed();
  result.candidates = n_candidates;
  Rng tie_rng(result.tie_seed);
  for (std::size_t s = 0; s < unknown_steps.size(); ++s) {
    StepRecovery rec;
    rec.step = unknown_steps[s];
    const Session& truth_session = unknown_steps[s] == 2 ? target.prev2 : target.prev1;
    rec.truth = vocab.index_of(truth_session.location);
    rec.ranked = rank_candidates(scorer.scored()[s], vocab.size(), tie_rng);
    result.steps.push_back(std::move(rec));
  }
  return result;
}

std::vector<int> full_vocab_candidates(Index n) {
  std::vector<int> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  return all;
}

}  // namespace

// ---------------------------------------------------------------------------
// Brute force.
// ---------------------------------------------------------------------------

WindowAttackResult attack_brute_force(const BlackBoxHandle& handle, const TargetWindow& target,
                                      const AttackParams& params, const DomainVocab& vocab,
                                      int window_index, bool continuity_filter) {
  const auto unknown = params.adversary.unknown_steps();
  const Index n_loc = vocab.size();
  const VecX lp = log_prior_vector(params.prior);
  BatchScorer scorer(handle, lp, target.label, unknown);
  const EncodedSession known2 = encode_session(target.prev2, vocab);
  const EncodedSession known1 = encode_session(target.prev1, vocab);
  std::uint64_t n_candidates = 0;

  auto bf_options = [n_loc](int anchor_slot, int anchor_dow, bool forward,
                            std::vector<EncodedSession>& out) {
    out.clear();
    for (int loc = 0; loc < n_loc; ++loc) {
      for (int slot = 0; slot < kEntrySlots; ++slot) {
        // Day of week follows the adjacent step: moving forward past an
        // earlier slot wraps to the next day, moving backward to a later
        // slot wraps to the previous one.
        int dow;
        if (forward) {
          dow = euclid_mod(anchor_dow + (slot < anchor_slot ? 1 : 0), kDaysOfWeek);
        } else {
          dow = euclid_mod(anchor_dow - (slot > anchor_slot ? 1 : 0), kDaysOfWeek);
        }
        for (int bin = 0; bin < kDurationBins; ++bin)
          out.push_back(EncodedSession{loc, slot, bin, dow});
      }
    }
  };

  if (params.adversary.kind == AdversaryKind::a1) {
    // x_{t-2} known, fill x_{t-1}.
    const long long derived = static_cast<long long>(known2.entry_slot) * kEntrySlotMinutes +
                              duration_bin_representative(known2.duration_bin);
    const DerivedEntry want = derive_entry(derived);
    std::vector<EncodedSession> options;
    bf_options(known2.entry_slot, known2.day_of_week, true, options);
    for (const auto& cand : options) {
      ++n_candidates;
      if (continuity_filter &&
          (cand.entry_slot != want.slot ||
           cand.day_of_week != euclid_mod(known2.day_of_week + want.carry, kDaysOfWeek)))
        continue;
      const int locs[1] = {cand.location};
      scorer.push(known2, cand, locs);
    }
  } else if (params.adversary.kind == AdversaryKind::a2) {
    // x_{t-1} known, fill x_{t-2}.
    std::vector<EncodedSession> options;
    bf_options(known1.entry_slot, known1.day_of_week, false, options);
    for (const auto& cand : options) {
      ++n_candidates;
      if (continuity_filter) {
        const long long derived = static_cast<long long>(known1.entry_slot) * kEntrySlotMinutes -
                                  duration_bin_representative(cand.duration_bin);
        const DerivedEntry want = derive_entry(derived);
        if (cand.entry_slot != want.slot ||
            cand.day_of_week != euclid_mod(known1.day_of_week + want.carry, kDaysOfWeek))
          continue;
      }
      const int locs[1] = {cand.location};
      scorer.push(cand, known1, locs);
    }
  } else {
    // A3: joint cross product; the t-2 day anchors on the observation day.
    std::vector<EncodedSession> outer;
    bf_options(0, known2.day_of_week, true, outer);
    // anchor_slot 0 with forward never wraps, so outer keeps the anchored day
    std::vector<EncodedSession> inner;
    for (const auto& c2 : outer) {
      bf_options(c2.entry_slot, c2.day_of_week, true, inner);
      const long long derived = static_cast<long long>(c2.entry_slot) * kEntrySlotMinutes +
                                duration_bin_representative(c2.duration_bin);
      const DerivedEntry want = derive_entry(derived);
      for (const auto& c1 : inner) {
        ++n_candidates;
        if (continuity_filter &&
            (c1.entry_slot != want.slot ||
             c1.day_of_week != euclid_mod(c2.day_of_week + want.carry, kDaysOfWeek)))
          continue;
        const int locs[2] = {c2.location, c1.location};
        scorer.push(c2, c1, locs);
      }
    }
  }
  return finish_result(params, target, vocab, window_index, unknown, scorer, n_candidates);
}

// ---------------------------------------------------------------------------
// Time-based enumeration.
// ---------------------------------------------------------------------------

WindowAttackResult attack_time_based(const BlackBoxHandle& handle, const TargetWindow& target,
                                     const AttackParams& params, const DomainVocab& vocab,
                                     int window_index) {
  const auto unknown = params.adversary.unknown_steps();
  const VecX lp = log_prior_vector(params.prior);
  BatchScorer scorer(handle, lp, target.label, unknown);
  const EncodedSession known2 = encode_session(target.prev2, vocab);
  const EncodedSession known1 = encode_session(target.prev1, vocab);
  const std::vector<int> cands =
      params.candidates.empty() ? full_vocab_candidates(vocab.size()) : params.candidates;
  std::uint64_t n_candidates = 0;

  if (params.adversary.kind == AdversaryKind::a1) {
    // e_{t-1} = e_{t-2} + d_{t-2}: one derived slot shared by every candidate.
    const long long minutes = static_cast<long long>(known2.entry_slot) * kEntrySlotMinutes +
                              duration_bin_representative(known2.duration_bin);
    const DerivedEntry entry = derive_entry(minutes);
    const int dow = euclid_mod(known2.day_of_week + entry.carry, kDaysOfWeek);
    for (int loc : cands) {
      for (int bin = 0; bin < kDurationBins; ++bin) {
        ++n_candidates;
        const EncodedSession cand{loc, entry.slot, bin, dow};
        const int locs[1] = {loc};
        scorer.push(known2, cand, locs);
      }
    }
  } else if (params.adversary.kind == AdversaryKind::a2) {
    // e_{t-2} = e_{t-1} - d_{t-2}: the slot depends on the enumerated bin.
    for (int bin = 0; bin < kDurationBins; ++bin) {
      const long long minutes = static_cast<long long>(known1.entry_slot) * kEntrySlotMinutes -
                                duration_bin_representative(bin);
      const DerivedEntry entry = derive_entry(minutes);
      const int dow = euclid_mod(known1.day_of_week + entry.carry, kDaysOfWeek);
      for (int loc : cands) {
        ++n_candidates;
        const EncodedSession cand{loc, entry.slot, bin, dow};
        const int locs[1] = {loc};
        scorer.push(cand, known1, locs);
      }
    }
  } else {
    // A3: free slot at t-2 (anchored day), derived entry at t-1.
    for (int loc2 : cands) {
      for (int slot2 = 0; slot2 < kEntrySlots; ++slot2) {
        for (int bin2 = 0; bin2 < kDurationBins; ++bin2) {
          const EncodedSession c2{loc2, slot2, bin2, known2.day_of_week};
          const long long minutes = static_cast<long long>(slot2) * kEntrySlotMinutes +
                                    duration_bin_representative(bin2);
          const DerivedEntry entry = derive_entry(minutes);
          const int dow1 = euclid_mod(c2.day_of_week + entry.carry, kDaysOfWeek);
          for (int loc1 : cands) {
            for (int bin1 = 0; bin1 < kDurationBins; ++bin1) {
              ++n_candidates;
              const EncodedSession c1{loc1, entry.slot, bin1, dow1};
              const int locs[2] = {loc2, loc1};
              scorer.push(c2, c1, locs);
            }
          }
        }
      }
    }
  }
  return finish_result(params, target, vocab, window_index, unknown, scorer, n_candidates);
}

// ---------------------------------------------------------------------------
// Gradient descent.
// ---------------------------------------------------------------------------

namespace {

struct BlockSpec {
  Index offset;
  Index size;
};

std::array<BlockSpec, 4> feature_blocks(Index n_locations) {
  return {BlockSpec{0, n_locations},
          BlockSpec{n_locations, kEntrySlots},
          BlockSpec{n_locations + kEntrySlots, kDurationBins},
          BlockSpec{n_locations + kEntrySlots + kDurationBins, kDaysOfWeek}};
}

/// Blockwise softened softmax of the unconstrained vector.
VecX soften(const VecX& u, Index n_locations, double tau) {
  VecX x(u.size());
  for (const auto& block : feature_blocks(n_locations))
    x.segment(block.offset, block.size) = softmax(u.segment(block.offset, block.size), tau);
  return x;
}

VecX one_hot_init(const EncodedSession& enc, Index n_locations) {
  VecX u = VecX::Zero(encoded_width(n_locations));
  const auto blocks = feature_blocks(n_locations);
  u(blocks[0].offset + enc.location) = 1.0;
  u(blocks[1].offset + enc.entry_slot) = 1.0;
  u(blocks[2].offset + enc.duration_bin) = 1.0;
  u(blocks[3].offset + enc.day_of_week) = 1.0;
  return u;
}

EncodedSession discretize(const VecX& x, Index n_locations) {
  const auto blocks = feature_blocks(n_locations);
  EncodedSession enc;
  Index arg = 0;
  x.segment(blocks[0].offset, blocks[0].size).maxCoeff(&arg);
  enc.location = static_cast<int>(arg);
  x.segment(blocks[1].offset, blocks[1].size).maxCoeff(&arg);
  enc.entry_slot = static_cast<int>(arg);
  x.segment(blocks[2].offset, blocks[2].size).maxCoeff(&arg);
  enc.duration_bin = static_cast<int>(arg);
  x.segment(blocks[3].offset, blocks[3].size).maxCoeff(&arg);
  enc.day_of_week = static_cast<int>(arg);
  return enc;
}

/// d loss / d u for one softened block given d loss / d x on that block.
void chain_softmax(const VecX& soft, const VecX& dx, double tau, VecX& du) {
  const double inner = soft.dot(dx);
  du = soft.cwiseProduct(dx.array().matrix() - VecX::Constant(soft.size(), inner)) / tau;
}

}  // namespace

WindowAttackResult attack_gradient(const SeqModel& model, const TargetWindow& target,
                                   const AttackParams& params, const DomainVocab& vocab,
                                   int window_index) {
  if (params.gradient_steps < 0) throw ConfigError("gradient_steps must be non-negative");
  if (!(params.soften_temperature > 0.0))
    throw ConfigError("soften_temperature must be positive");
  params.prior.validate();
  const auto unknown = params.adversary.unknown_steps();
  if (params.gradient_init && params.gradient_init->size() != unknown.size())
    throw InputError("gradient_init must supply one session per unknown step");
  const Index n_loc = vocab.size();
  const Index width = model.arch.input_width;

  WindowAttackResult result;
  result.window_index = window_index;
  result.tie_seed = mix_seed(params.seed, static_cast<std::uint64_t>(window_index));
  result.queries = 0;  // white-box: no handle involved
  result.candidates = 0;
  Rng rng(result.tie_seed);

  const EncodedSession known2 = encode_session(target.prev2, vocab);
  const EncodedSession known1 = encode_session(target.prev1, vocab);

  // Unconstrained variables per unknown step.
  std::vector<VecX> u(unknown.size());
  for (std::size_t s = 0; s < unknown.size(); ++s) {
    if (params.gradient_init) {
      u[s] = one_hot_init((*params.gradient_init)[s], n_loc);
    } else {
      u[s].resize(width);
      for (Index i = 0; i < width; ++i) u[s](i) = rng.gaussian(0.0, 0.01);
    }
  }

  MatX x2(width, 1), x1(width, 1);
  VecXi label(1);
  label(0) = target.label;
  VecX fixed2 = VecX::Zero(width), fixed1 = VecX::Zero(width);
  {
    MatX tmp2 = MatX::Zero(width, 1), tmp1 = MatX::Zero(width, 1);
    encode_features_into(known2, n_loc, tmp2, 0);
    encode_features_into(known1, n_loc, tmp1, 0);
    fixed2 = tmp2.col(0);
    fixed1 = tmp1.col(0);
  }
  const auto blocks = feature_blocks(n_loc);

  auto assemble = [&](std::vector<VecX>& softened) {
    x2.col(0) = fixed2;
    x1.col(0) = fixed1;
    softened.resize(unknown.size());
    for (std::size_t s = 0; s < unknown.size(); ++s) {
      softened[s] = soften(u[s], n_loc, params.soften_temperature);
      (unknown[s] == 2 ? x2 : x1).col(0) = softened[s];
    }
  };

  bool diverged = false;
  std::vector<VecX> softened;
  for (int it = 0; it < params.gradient_steps && !diverged; ++it) {
    assemble(softened);
    MatX d2, d1;
    const double ce = input_gradients(model, x2, x1, label, d2, d1);
    if (!std::isfinite(ce)) {
      diverged = true;
      break;
    }
    for (std::size_t s = 0; s < unknown.size(); ++s) {
      // Pure descent on the model loss; no prior shaping. The discrete attacks
      // fold the prior in, which is exactly the edge they keep over this one.
      const VecX dx = (unknown[s] == 2 ? d2 : d1).col(0);
      VecX du(width);
      for (const auto& block : blocks) {
        VecX part(block.size);
        chain_softmax(softened[s].segment(block.offset, block.size),
                      dx.segment(block.offset, block.size), params.soften_temperature, part);
        du.segment(block.offset, block.size) = part;
      }
      if (!du.allFinite()) {
        diverged = true;
        break;
      }
      u[s] -= params.gradient_step_size * du;
    }
  }

  assemble(softened);
  result.failed = diverged;
  for (std::size_t s = 0; s < unknown.size(); ++s) {
    StepRecovery rec;
    rec.step = unknown[s];
    const Session& truth_session = unknown[s] == 2 ? target.prev2 : target.prev1;
    rec.truth = vocab.index_of(truth_session.location);
    if (!diverged) {
      // The ranking reads the softened location block alone; its argmax is the
      // discretized answer.
      std::vector<std::pair<int, double>> scored;
      const VecX loc_soft = softened[s].segment(blocks[0].offset, blocks[0].size);
      for (Index i = 0; i < n_loc; ++i)
        scored.push_back({static_cast<int>(i), std::log(std::max(loc_soft(i), 1e-300))});
      Rng tie_rng(mix_seed(result.tie_seed, static_cast<std::uint64_t>(s)));
      rec.ranked = rank_candidates(scored, n_loc, tie_rng);
      rec.reconstruction = discretize(softened[s], n_loc);
    }
    result.steps.push_back(std::move(rec));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Accuracy.
// ---------------------------------------------------------------------------

double attack_accuracy(std::span<const WindowAttackResult> results, int k) {
  if (results.empty()) throw InputError("attack accuracy over an empty report set is undefined");
  if (k < 1) throw InputError("attack accuracy needs k >= 1");
  std::uint64_t trials = 0;
  std::uint64_t hits = 0;
  for (const auto& result : results) {
    for (const auto& step : result.steps) {
      ++trials;
      if (result.failed) continue;
      const std::size_t depth = std::min<std::size_t>(static_cast<std::size_t>(k),
                                                      step.ranked.size());
      for (std::size_t i = 0; i < depth; ++i) {
        if (step.ranked[i].location == step.truth) {
          ++hits;
          break;
        }
      }
    }
  }
  if (trials == 0) throw InputError("attack accuracy: no recovery trials present");
  return 100.0 * static_cast<double>(hits) / static_cast<double>(trials);
}

}  // namespace pelican
