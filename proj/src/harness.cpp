#include "pelican/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <numeric>

#include "pelican/rng.hpp"

namespace pelican {

namespace {

struct PhaseTimer {
  std::chrono::steady_clock::time_point wall0 = std::chrono::steady_clock::now();
  std::clock_t cpu0 = std::clock();

  PhaseStats stop() const {
    PhaseStats s;
    s.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    s.cpu_seconds = static_cast<double>(std::clock() - cpu0) / CLOCKS_PER_SEC;
    return s;
  }
};

double now_wall() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::uint64_t seed_chain(std::uint64_t base, std::initializer_list<std::uint64_t> streams) {
  std::uint64_t s = base;
  for (std::uint64_t v : streams) s = mix_seed(s, v);
  return s;
}

std::uint64_t temperature_bits(double t) {
  std::uint64_t bits;
  static_assert(sizeof(bits) == sizeof(t));
  std::memcpy(&bits, &t, sizeof(bits));
  return bits;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configs.
// ---------------------------------------------------------------------------

ExperimentConfig ExperimentConfig::desk_default() {
  ExperimentConfig cfg;
  cfg.seeds = Seeds{101, 202, 303};
  cfg.cohort.n_contributors = 40;
  cfg.cohort.n_targets = 10;
  cfg.cohort.vocab = make_building_vocab(12);
  cfg.cohort.weeks = 8;
  cfg.cohort.global_seed = cfg.seeds.cohort;
  // Desk budget: a single general candidate at hidden 64 and a singleton
  // personal grid keep the full pipeline within the half-hour envelope.
  cfg.general.hidden_size = 64;
  cfg.general.max_epochs = 120;
  cfg.general.patience = 8;
  cfg.personal.hidden_grid = {32};
  cfg.personal.lr_grid = {1e-3};
  cfg.personal.max_epochs = 60;
  cfg.personal.patience = 8;
  // Prior exclusion already keeps the enumeration tight at this scale, so the
  // probe-based pruning can stay off and the candidate set is the full vocab.
  cfg.attack.candidate_threshold = 0.0;
  return cfg;
}

ExperimentConfig ExperimentConfig::smoke() {
  ExperimentConfig cfg;
  cfg.seeds = Seeds{11, 22, 33};
  cfg.cohort.n_contributors = 3;
  cfg.cohort.n_targets = 2;
  cfg.cohort.vocab = make_building_vocab(6);
  cfg.cohort.weeks = 1;
  cfg.cohort.global_seed = cfg.seeds.cohort;
  cfg.cohort.profiles.degree_min = 3;
  cfg.cohort.profiles.degree_max = 5;
  cfg.general.hidden_size = 16;
  cfg.general.max_epochs = 20;
  cfg.general.patience = 4;
  cfg.personal.hidden_grid = {16};
  cfg.personal.lr_grid = {1e-3};
  cfg.personal.cv_folds = 2;
  cfg.personal.min_windows = 10;
  cfg.personal.max_epochs = 15;
  cfg.personal.patience = 3;
  cfg.attack.max_eval_windows = 8;
  cfg.attack.probe_budget = 60;
  cfg.attack.gradient_steps = 40;
  cfg.defense.temperatures = {1.0, 0.05};
  return cfg;
}

// ---------------------------------------------------------------------------
// Report lookups.
// ---------------------------------------------------------------------------

const AttackCell* ExperimentReport::find_cell(const std::string& user, AdversaryKind adv,
                                              AttackStrategy strat, PriorMode prior,
                                              double temperature) const {
  for (const auto& cell : cells) {
    if (cell.user == user && cell.adversary == adv && cell.strategy == strat &&
        cell.prior == prior && cell.temperature == temperature)
      return &cell;
  }
  return nullptr;
}

double ExperimentReport::aggregate_accuracy(AdversaryKind adv, AttackStrategy strat,
                                            PriorMode prior, double temperature, int k) const {
  double weighted = 0.0;
  double trials = 0.0;
  for (const auto& cell : cells) {
    if (cell.adversary != adv || cell.strategy != strat || cell.prior != prior ||
        cell.temperature != temperature)
      continue;
    const auto it = cell.accuracy.find(k);
    if (it == cell.accuracy.end()) continue;
    weighted += it->second * static_cast<double>(cell.trials);
    trials += static_cast<double>(cell.trials);
  }
  return trials > 0.0 ? weighted / trials : 0.0;
}

double ExperimentReport::aggregate_wall(AdversaryKind adv, AttackStrategy strat, PriorMode prior,
                                        double temperature) const {
  double total = 0.0;
  for (const auto& cell : cells) {
    if (cell.adversary == adv && cell.strategy == strat && cell.prior == prior &&
        cell.temperature == temperature)
      total += cell.wall_seconds;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

double topk_accuracy(const SeqModel& model, std::span<const Window> windows, int k) {
  if (windows.empty()) throw InputError("top-k accuracy needs at least one window");
  MatX xa, xb;
  VecXi labels;
  encode_batch(windows, model.n_locations(), xa, xb, labels);
  MatX probs = forward_batch(model, xa, xb, 1.0);
  int hits = 0;
  for (Index j = 0; j < probs.cols(); ++j) {
    const auto ranked = topk(probs.col(j), k);
    if (std::find(ranked.begin(), ranked.end(), labels(j)) != ranked.end()) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(probs.cols());
}

double topk_accuracy(const BlackBoxHandle& handle, std::span<const Window> windows, int k) {
  if (windows.empty()) throw InputError("top-k accuracy needs at least one window");
  int hits = 0;
  for (const Window& w : windows) {
    const auto ranked = handle.ranked_topk(w, k);
    if (std::find(ranked.begin(), ranked.end(), w.label) != ranked.end()) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(windows.size());
}

double leakage_reduction(double undefended_accuracy, double defended_accuracy) {
  if (!(undefended_accuracy > 0.0))
    throw InputError("leakage reduction is undefined when the undefended attack scores 0");
  return (undefended_accuracy - defended_accuracy) / undefended_accuracy * 100.0;
}

namespace {

double pearson_r(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

Correlation pearson_permutation(std::span<const double> x, std::span<const double> y,
                                int n_resamples, std::uint64_t seed) {
  if (x.size() != y.size()) throw InputError("correlation inputs must have equal length");
  if (x.size() < 3) throw InputError("correlation needs at least 3 points");
  if (n_resamples < 1) throw InputError("permutation test needs at least 1 resample");
  Correlation result;
  result.n = static_cast<int>(x.size());
  result.r = pearson_r(x, y);
  std::vector<double> shuffled(y.begin(), y.end());
  Rng rng(seed);
  int at_least = 0;
  for (int i = 0; i < n_resamples; ++i) {
    rng.shuffle(shuffled);
    if (std::abs(pearson_r(x, shuffled)) >= std::abs(result.r)) ++at_least;
  }
  result.p_value = static_cast<double>(1 + at_least) / static_cast<double>(1 + n_resamples);
  return result;
}

// ---------------------------------------------------------------------------
// Experiment pipeline.
// ---------------------------------------------------------------------------

Experiment::Experiment(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
  start_wall_ = now_wall();
  vocab_ = cfg_.cohort.vocab;
}

void Experiment::set_cohort(Cohort cohort) { cohort_ = std::move(cohort); }

void Experiment::set_general(SeqModel general, DomainVocab vocab) {
  vocab_ = std::move(vocab);
  if (general.vocab_fingerprint != vocab_.fingerprint())
    throw ContractError("general model does not match the vocabulary");
  general_ = std::move(general);
}

void Experiment::set_target_model(std::size_t i, SeqModel model) {
  if (i >= targets_.size()) throw InputError("target index out of range");
  if (model.vocab_fingerprint != vocab_.fingerprint())
    throw ContractError("personal model does not match the vocabulary");
  targets_[i].model = std::move(model);
}

void Experiment::run_synth() {
  PhaseTimer timer;
  cfg_.cohort.global_seed = cfg_.seeds.cohort;
  cohort_ = generate_cohort(cfg_.cohort);
  vocab_ = cfg_.cohort.vocab;
  report_.synth_stats = timer.stop();
}

void Experiment::run_general() {
  if (cohort_.contributors.size() < 2)
    throw InputError("phase 1 needs at least 2 contributor traces");
  PhaseTimer timer;

  std::vector<Window> train_pool, val_pool, test_pool;
  for (const Trace& trace : cohort_.contributors) {
    auto [train_trace, test_trace] = split_train_test(trace, cfg_.train_fraction);
    // The target alphabet always equals the source alphabet here, but run the
    // equalization check anyway so contract violations fail loudly.
    const DomainVocab local = build_vocab({trace}, vocab_.scale());
    equalize_domain(local, vocab_);
    auto train_windows = windowize(train_trace, vocab_);
    auto test_windows = windowize(test_trace, vocab_);
    std::size_t n_val =
        static_cast<std::size_t>(cfg_.general.val_fraction *
                                 static_cast<double>(train_windows.size()));
    if (n_val == 0 && train_windows.size() >= 4) n_val = 1;
    const std::size_t n_train = train_windows.size() - n_val;
    train_pool.insert(train_pool.end(), train_windows.begin(),
                      train_windows.begin() + static_cast<std::ptrdiff_t>(n_train));
    val_pool.insert(val_pool.end(), train_windows.begin() + static_cast<std::ptrdiff_t>(n_train),
                    train_windows.end());
    test_pool.insert(test_pool.end(), test_windows.begin(), test_windows.end());
  }
  if (train_pool.empty()) throw TrainingError("phase 1 has no training windows");

  const std::vector<Index> hiddens =
      cfg_.general.hidden_grid.empty() ? std::vector<Index>{cfg_.general.hidden_size}
                                       : cfg_.general.hidden_grid;
  const std::vector<double> rates = cfg_.general.lr_grid.empty()
                                        ? std::vector<double>{cfg_.general.learning_rate}
                                        : cfg_.general.lr_grid;
  std::vector<GridCandidate> candidates;
  for (Index h : hiddens) {
    for (double lr : rates) {
      GridCandidate cand;
      cand.arch.input_width = encoded_width(vocab_.size());
      cand.arch.output_size = vocab_.size();
      cand.arch.hidden_size = h;
      cand.arch.n_lstm_layers = cfg_.general.n_layers;
      cand.arch.dropout_rate = cfg_.general.dropout_rate;
      cand.train.learning_rate = lr;
      cand.train.weight_decay = cfg_.general.weight_decay;
      cand.train.batch_size = cfg_.general.batch_size;
      cand.train.max_epochs = cfg_.general.max_epochs;
      cand.train.patience = cfg_.general.patience;
      cand.train.seed = cfg_.seeds.training;
      candidates.push_back(std::move(cand));
    }
  }
  GridCandidate chosen = candidates.front();
  if (candidates.size() > 1) {
    std::uint64_t call = 0;
    ModelBuilder build = [this, &call](const GridCandidate& cand, std::span<const Window> tr,
                                       std::span<const Window> va) {
      TrainConfig tc = cand.train;
      tc.seed = mix_seed(tc.seed, ++call);
      SeqModel model = init_model(cand.arch, mix_seed(tc.seed, 0xA0));
      model.vocab_fingerprint = vocab_.fingerprint();
      return train(model, tr, va, tc, nullptr);
    };
    chosen = grid_search_cv(candidates, train_pool, cfg_.general.cv_folds, build).best;
  }

  SeqModel init = init_model(chosen.arch, seed_chain(cfg_.seeds.training, {0xA11}));
  init.vocab_fingerprint = vocab_.fingerprint();
  init.role = ModelRole::general;
  TrainHistory history;
  general_ = train(init, train_pool, val_pool, chosen.train, &history);
  general_.role = ModelRole::general;

  report_.general.stats = timer.stop();
  report_.general.history = history;
  report_.general.hidden_size = chosen.arch.hidden_size;
  report_.general.learning_rate = chosen.train.learning_rate;
  report_.general.n_train_windows = static_cast<int>(train_pool.size());
  report_.general.n_val_windows = static_cast<int>(val_pool.size());
  report_.general.n_test_windows = static_cast<int>(test_pool.size());
  for (int k : cfg_.k_list)
    report_.general.test_accuracy[k] = topk_accuracy(general_, test_pool, k);
}

void Experiment::prepare_targets() {
  if (cohort_.targets.size() != cohort_.target_profiles.size())
    throw ContractError("cohort targets and profiles out of sync");
  targets_.clear();
  targets_.reserve(cohort_.targets.size());
  for (std::size_t i = 0; i < cohort_.targets.size(); ++i) {
    TargetState state;
    state.profile = cohort_.target_profiles[i];
    state.trace = cohort_.targets[i];
    const DomainVocab local = build_vocab({state.trace}, vocab_.scale());
    equalize_domain(local, vocab_);
    auto [train_trace, test_trace] = split_train_test(state.trace, cfg_.train_fraction);
    state.train_trace = std::move(train_trace);
    state.test_trace = std::move(test_trace);
    state.train_windows = windowize(state.train_trace, vocab_);
    state.test_windows = windowize(state.test_trace, vocab_);
    const Index n = static_cast<Index>(state.train_windows.size());
    Index m = static_cast<Index>(cfg_.attack.eval_fraction * static_cast<double>(n));
    m = std::clamp<Index>(m, 1, std::min<Index>(cfg_.attack.max_eval_windows, n));
    const auto targets_all = make_target_windows(state.train_trace, vocab_);
    if (static_cast<Index>(targets_all.size()) != n)
      throw ContractError("window and target enumerations disagree");
    state.eval_windows.assign(state.train_windows.end() - m, state.train_windows.end());
    state.eval_targets.assign(targets_all.end() - m, targets_all.end());
    state.report.user = state.profile.user_id;
    state.report.mobility_degree = state.profile.mobility_degree;
    state.report.predictability = state.profile.predictability;
    state.report.train_windows = static_cast<int>(state.train_windows.size());
    state.report.test_windows = static_cast<int>(state.test_windows.size());
    state.report.eval_windows = static_cast<int>(state.eval_windows.size());
    targets_.push_back(std::move(state));
  }
}

void Experiment::run_personalize() {
  general_.validate();
  if (targets_.empty()) prepare_targets();
  for (std::size_t i = 0; i < targets_.size(); ++i) {
    TargetState& state = targets_[i];
    PhaseTimer timer;
    PersonalizeConfig cfg = cfg_.personal;
    cfg.seed = seed_chain(cfg_.seeds.training, {0xB2, static_cast<std::uint64_t>(i)});
    PersonalizeOutcome outcome =
        personalize_outcome(general_, cfg_.method, state.train_windows, cfg);
    state.model = std::move(outcome.model);
    state.report.stats = timer.stop();
    state.report.method = state.model.method;
    state.report.fallback = outcome.fallback;
    state.report.chosen_hidden =
        outcome.fallback ? state.model.arch.hidden_size : outcome.picked.hidden;
    state.report.chosen_lr = outcome.picked.learning_rate;
    for (int k : cfg_.k_list) {
      state.report.train_accuracy[k] = topk_accuracy(state.model, state.train_windows, k);
      state.report.test_accuracy[k] = topk_accuracy(state.model, state.test_windows, k);
    }
    if (cfg_.evaluate_reuse) {
      const SeqModel reuse = baseline_reuse(general_);
      for (int k : cfg_.k_list)
        state.report.reuse_test_accuracy[k] = topk_accuracy(reuse, state.test_windows, k);
    }
  }
  report_.users.clear();
  for (const auto& state : targets_) report_.users.push_back(state.report);
}

AttackCell Experiment::run_attack_cell(const TargetState& target, std::size_t target_index,
                                       const BlackBoxHandle& handle, AdversaryKind adv,
                                       AttackStrategy strategy, PriorMode prior_mode,
                                       double temperature) {
  PhaseTimer timer;
  AttackCell cell;
  cell.user = target.profile.user_id;
  cell.adversary = adv;
  cell.strategy = strategy;
  cell.prior = prior_mode;
  cell.temperature = temperature;
  cell.white_box = strategy == AttackStrategy::gradient;

  Rng probe_rng(seed_chain(cfg_.seeds.attack, {0x9B, static_cast<std::uint64_t>(target_index)}));
  const ProbeSet probes =
      make_probe_windows(vocab_.size(), cfg_.attack.probe_budget, probe_rng);

  AttackParams params;
  params.adversary.kind = adv;
  params.adversary.prior_mode = prior_mode;
  params.adversary.candidate_threshold = cfg_.attack.candidate_threshold;
  params.adversary.probe_budget = cfg_.attack.probe_budget;
  params.gradient_steps = cfg_.attack.gradient_steps;
  params.gradient_step_size = cfg_.attack.gradient_step_size;
  params.soften_temperature = cfg_.attack.soften_temperature;
  params.seed = seed_chain(cfg_.seeds.attack,
                           {static_cast<std::uint64_t>(target_index),
                            static_cast<std::uint64_t>(adv), static_cast<std::uint64_t>(strategy),
                            static_cast<std::uint64_t>(prior_mode),
                            temperature_bits(temperature)});

  switch (prior_mode) {
    case PriorMode::true_marginals:
      params.prior = build_prior_true(target.train_trace, vocab_);
      break;
    case PriorMode::none:
      params.prior = build_prior_none(vocab_.size());
      break;
    case PriorMode::predict:
      params.prior = build_prior_predict(handle, probes);
      break;
    case PriorMode::estimate:
      params.prior = build_prior_estimate(handle, probes);
      break;
  }

  bool fell_back = false;
  // A non-positive threshold turns probe pruning off; an empty candidate list
  // makes the time-based strategy enumerate the full vocabulary.
  if (strategy == AttackStrategy::time_based && cfg_.attack.candidate_threshold > 0.0) {
    params.candidates =
        candidate_locations(handle, probes, cfg_.attack.candidate_threshold, &fell_back);
  }
  cell.candidate_fallback = fell_back;
  cell.candidate_set_size = params.candidates.empty() ? static_cast<int>(vocab_.size())
                                                      : static_cast<int>(params.candidates.size());

  const Index offset =
      static_cast<Index>(target.train_windows.size()) -
      static_cast<Index>(target.eval_targets.size());
  for (std::size_t j = 0; j < target.eval_targets.size(); ++j) {
    const int window_index = static_cast<int>(offset) + static_cast<int>(j);
    WindowAttackResult result;
    switch (strategy) {
      case AttackStrategy::brute_force:
        result = attack_brute_force(handle, target.eval_targets[j], params, vocab_, window_index);
        break;
      case AttackStrategy::time_based:
        result = attack_time_based(handle, target.eval_targets[j], params, vocab_, window_index);
        break;
      case AttackStrategy::gradient:
        result = attack_gradient(target.model, target.eval_targets[j], params, vocab_,
                                 window_index);
        break;
    }
    cell.queries += result.queries;
    cell.candidates += result.candidates;
    cell.trials += static_cast<int>(result.steps.size());
    cell.windows.push_back(std::move(result));
  }
  for (int k : cfg_.k_list) cell.accuracy[k] = attack_accuracy(cell.windows, k);
  std::uint64_t collapsed = 0;
  for (const auto& w : cell.windows) collapsed += w.collapsed;
  cell.collapse_fraction =
      cell.queries > 0 ? static_cast<double>(collapsed) / static_cast<double>(cell.queries) : 0.0;
  cell.wall_seconds = timer.stop().wall_seconds;
  return cell;
}

void Experiment::run_attacks() {
  for (std::size_t i = 0; i < targets_.size(); ++i) {
    const TargetState& target = targets_[i];
    const BlackBoxHandle handle = deploy(target.model, 1.0, cfg_.defense.precision);
    for (AdversaryKind adv : cfg_.attack.adversaries) {
      for (AttackStrategy strategy : cfg_.attack.strategies) {
        for (PriorMode prior : cfg_.attack.priors) {
          report_.cells.push_back(run_attack_cell(target, i, handle, adv, strategy, prior, 1.0));
        }
      }
    }
  }
}

void Experiment::run_defense() {
  report_.service.clear();
  std::vector<double> temperatures = cfg_.defense.temperatures;
  if (std::find(temperatures.begin(), temperatures.end(), 1.0) == temperatures.end())
    temperatures.insert(temperatures.begin(), 1.0);  // leakage baseline

  for (double t : temperatures) {
    for (std::size_t i = 0; i < targets_.size(); ++i) {
      const TargetState& target = targets_[i];
      const BlackBoxHandle handle = deploy(target.model, t, cfg_.defense.precision);
      for (AdversaryKind adv : cfg_.defense.adversaries) {
        for (AttackStrategy strategy : cfg_.defense.strategies) {
          for (PriorMode prior : cfg_.defense.priors) {
            if (report_.find_cell(target.profile.user_id, adv, strategy, prior, t)) continue;
            report_.cells.push_back(run_attack_cell(target, i, handle, adv, strategy, prior, t));
          }
        }
      }
      for (int k : cfg_.k_list) {
        ServiceRow row;
        row.user = target.profile.user_id;
        row.temperature = t;
        row.k = k;
        row.accuracy = topk_accuracy(handle, target.test_windows, k);
        report_.service.push_back(row);
      }
    }
  }

  report_.defense.clear();
  for (AdversaryKind adv : cfg_.defense.adversaries) {
    for (AttackStrategy strategy : cfg_.defense.strategies) {
      for (PriorMode prior : cfg_.defense.priors) {
        for (double t : temperatures) {
          for (int k : cfg_.k_list) {
            DefenseRow row;
            row.adversary = adv;
            row.strategy = strategy;
            row.prior = prior;
            row.temperature = t;
            row.k = k;
            row.attack_accuracy = report_.aggregate_accuracy(adv, strategy, prior, t, k);
            const double base = report_.aggregate_accuracy(adv, strategy, prior, 1.0, k);
            row.leakage_reduction_pct =
                base > 0.0 ? leakage_reduction(base, row.attack_accuracy) : 0.0;
            report_.defense.push_back(row);
          }
        }
      }
    }
  }
}

void Experiment::run_update(int extra_weeks) {
  if (extra_weeks < 1) throw ConfigError("update needs at least one extra week of data");
  const std::string general_print = param_fingerprint(general_);
  for (std::size_t i = 0; i < targets_.size(); ++i) {
    TargetState& state = targets_[i];
    if (state.model.base_fingerprint != general_print)
      throw ContractError("personal model was derived from a refreshed general model; "
                          "re-personalize instead of updating");
    const Trace extended =
        generate_user(state.profile, cfg_.cohort.weeks + extra_weeks, cfg_.cohort.schedule);
    const std::int64_t cutoff =
        state.trace.sessions.empty() ? 0 : state.trace.sessions.back().end();
    std::vector<Session> sessions = state.train_trace.sessions;
    for (const Session& s : extended.sessions)
      if (s.entry >= cutoff) sessions.push_back(s);
    const Trace accumulated = Trace::create(state.profile.user_id, std::move(sessions));
    const auto windows = windowize(accumulated, vocab_);
    PersonalizeConfig cfg = cfg_.personal;
    cfg.seed = seed_chain(cfg_.seeds.training, {0xDD, static_cast<std::uint64_t>(i)});
    state.model = update_model(state.model, windows, cfg);
    for (int k : cfg_.k_list)
      state.report.test_accuracy[k] = topk_accuracy(state.model, state.test_windows, k);
    for (auto& user : report_.users)
      if (user.user == state.profile.user_id) user.test_accuracy = state.report.test_accuracy;
  }
}

void Experiment::finalize() {
  report_.correlations.clear();
  if (!targets_.empty() && !report_.cells.empty() && targets_.size() >= 3) {
    const AdversaryKind adv = cfg_.attack.adversaries.front();
    AttackStrategy strategy = cfg_.attack.strategies.front();
    if (std::find(cfg_.attack.strategies.begin(), cfg_.attack.strategies.end(),
                  AttackStrategy::time_based) != cfg_.attack.strategies.end())
      strategy = AttackStrategy::time_based;
    const PriorMode prior = cfg_.attack.priors.front();
    for (int k : cfg_.k_list) {
      std::vector<double> model_acc, attack_acc, degrees;
      for (const auto& state : targets_) {
        const AttackCell* cell =
            report_.find_cell(state.profile.user_id, adv, strategy, prior, 1.0);
        if (!cell) continue;
        const auto user = std::find_if(report_.users.begin(), report_.users.end(),
                                       [&](const UserReport& u) {
                                         return u.user == state.profile.user_id;
                                       });
        if (user == report_.users.end()) continue;
        model_acc.push_back(user->test_accuracy.at(k));
        attack_acc.push_back(cell->accuracy.at(k));
        degrees.push_back(static_cast<double>(state.trace.distinct_locations().size()));
      }
      if (attack_acc.size() < 3) continue;
      Correlation pred =
          pearson_permutation(model_acc, attack_acc, 1000,
                              seed_chain(cfg_.seeds.attack, {0xC0, static_cast<std::uint64_t>(k)}));
      report_.correlations.push_back(
          CorrelationRow{"predictability_proxy", k, pred.r, pred.p_value, pred.n});
      Correlation mob =
          pearson_permutation(degrees, attack_acc, 1000,
                              seed_chain(cfg_.seeds.attack, {0xC1, static_cast<std::uint64_t>(k)}));
      report_.correlations.push_back(
          CorrelationRow{"mobility_degree", k, mob.r, mob.p_value, mob.n});
    }
  }
  report_.total_wall_seconds = now_wall() - start_wall_;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  Experiment experiment(cfg);
  const std::string& out = cfg.output_dir;
  try {
    experiment.run_synth();
    if (!out.empty()) {
      write_traces(experiment.cohort(), out);
      write_profiles(experiment.cohort(), out);
      write_vocab(experiment.vocab(), out);
    }
    experiment.run_general();
    if (!out.empty()) {
      std::filesystem::create_directories(out + "/models");
      save_model(experiment.general_model(), out + "/models/general.json");
    }
    experiment.run_personalize();
    if (!out.empty()) {
      for (const auto& target : experiment.targets())
        save_model(target.model, out + "/models/" + target.profile.user_id + ".json");
    }
    experiment.run_attacks();
    experiment.run_defense();
    experiment.finalize();
  } catch (...) {
    // Partial flush keeps whatever completed inspectable.
    experiment.finalize();
    if (!out.empty()) {
      try {
        write_reports(experiment.report(), cfg, experiment.vocab(), out);
      } catch (...) {
      }
    }
    throw;
  }
  if (!out.empty()) write_reports(experiment.report(), cfg, experiment.vocab(), out);
  return experiment.report();
}

}  // namespace pelican
