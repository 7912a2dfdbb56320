#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

using namespace pelican;
namespace ts = pelican::testsupport;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

// Scratch directory under the test working directory, wiped on entry.
std::string fresh_dir(const std::string& name) {
  fs::remove_all(name);
  fs::create_directories(name);
  return name;
}

std::vector<Window> copy_task_windows(Index n_loc, int count, std::uint64_t seed) {
  Rng rng(seed);
  auto windows = ts::random_windows(n_loc, count, rng);
  for (auto& w : windows) w.label = w.prev1.location;
  return windows;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config serialization.
// ---------------------------------------------------------------------------

TEST_CASE("experiment config survives a JSON round trip") {
  ExperimentConfig cfg = ExperimentConfig::desk_default();
  cfg.seeds = Seeds{101, 202, 303};
  cfg.output_dir = "somewhere/out";

  const ExperimentConfig back = experiment_config_from_json(experiment_config_to_json(cfg));

  CHECK(back.seeds.cohort == 101);
  CHECK(back.seeds.training == 202);
  CHECK(back.seeds.attack == 303);
  CHECK(back.cohort.n_contributors == cfg.cohort.n_contributors);
  CHECK(back.cohort.n_targets == cfg.cohort.n_targets);
  CHECK(back.cohort.weeks == cfg.cohort.weeks);
  CHECK(back.cohort.vocab.scale() == cfg.cohort.vocab.scale());
  CHECK(back.cohort.vocab.locations() == cfg.cohort.vocab.locations());
  CHECK(back.cohort.global_seed == 101);  // re-derived from the seeds block
  CHECK(back.cohort.profiles.degree_min == cfg.cohort.profiles.degree_min);
  CHECK(back.cohort.profiles.predictability_max == cfg.cohort.profiles.predictability_max);
  CHECK(back.cohort.schedule.day_start_minute == cfg.cohort.schedule.day_start_minute);
  CHECK(back.cohort.schedule.duration_sigma_frac == cfg.cohort.schedule.duration_sigma_frac);
  CHECK(back.method == cfg.method);
  CHECK(back.evaluate_reuse == cfg.evaluate_reuse);
  CHECK(back.train_fraction == cfg.train_fraction);
  CHECK(back.general.hidden_size == cfg.general.hidden_size);
  CHECK(back.general.learning_rate == cfg.general.learning_rate);
  CHECK(back.general.max_epochs == cfg.general.max_epochs);
  CHECK(back.general.hidden_grid == cfg.general.hidden_grid);
  CHECK(back.general.lr_grid == cfg.general.lr_grid);
  CHECK(back.personal.lr_grid == cfg.personal.lr_grid);
  CHECK(back.personal.hidden_grid == cfg.personal.hidden_grid);
  CHECK(back.personal.cv_folds == cfg.personal.cv_folds);
  CHECK(back.personal.min_windows == cfg.personal.min_windows);
  CHECK(back.attack.adversaries == cfg.attack.adversaries);
  CHECK(back.attack.strategies == cfg.attack.strategies);
  CHECK(back.attack.priors == cfg.attack.priors);
  CHECK(back.attack.eval_fraction == cfg.attack.eval_fraction);
  CHECK(back.attack.max_eval_windows == cfg.attack.max_eval_windows);
  CHECK(back.attack.candidate_threshold == cfg.attack.candidate_threshold);
  CHECK(back.attack.probe_budget == cfg.attack.probe_budget);
  CHECK(back.attack.gradient_steps == cfg.attack.gradient_steps);
  CHECK(back.defense.temperatures == cfg.defense.temperatures);
  CHECK(back.defense.precision == cfg.defense.precision);
  CHECK(back.defense.strategies == cfg.defense.strategies);
  CHECK(back.defense.priors == cfg.defense.priors);
  CHECK(back.k_list == cfg.k_list);
  CHECK(back.output_dir == cfg.output_dir);
}

TEST_CASE("config files fill everything but the seeds from the desk defaults") {
  const std::string path = "test_harness_cfg.json";
  write_file(path, R"({"seeds": {"cohort": 7, "training": 8, "attack": 9}})");
  const ExperimentConfig cfg = load_experiment_config(path);
  const ExperimentConfig desk = ExperimentConfig::desk_default();
  CHECK(cfg.seeds.cohort == 7);
  CHECK(cfg.seeds.training == 8);
  CHECK(cfg.seeds.attack == 9);
  CHECK(cfg.cohort.global_seed == 7);
  CHECK(cfg.cohort.n_contributors == desk.cohort.n_contributors);
  CHECK(cfg.cohort.n_targets == desk.cohort.n_targets);
  CHECK(cfg.defense.temperatures == desk.defense.temperatures);
  CHECK(cfg.k_list == desk.k_list);
  std::remove(path.c_str());

  CHECK_THROWS_AS(load_experiment_config("test_harness_missing.json"), SerializationError);
}

TEST_CASE("config parsing separates syntax, contract and value errors") {
  CHECK_THROWS_AS(experiment_config_from_json("not json at all"), ParseError);
  CHECK_THROWS_AS(experiment_config_from_json("{}"), ConfigError);  // no seeds block

  nlohmann::json doc = nlohmann::json::parse(
      experiment_config_to_json(ExperimentConfig::smoke()));

  auto broken = doc;
  broken["k_list"] = nlohmann::json::array();
  CHECK_THROWS_AS(experiment_config_from_json(broken.dump()), ConfigError);

  broken = doc;
  broken["seeds"]["cohort"] = "not a number";
  CHECK_THROWS_AS(experiment_config_from_json(broken.dump()), ConfigError);

  broken = doc;
  broken["attack"]["strategies"] = {"time_based", "telepathy"};
  CHECK_THROWS_AS(experiment_config_from_json(broken.dump()), ConfigError);

  broken = doc;
  broken["method"] = "osmosis";
  CHECK_THROWS_AS(experiment_config_from_json(broken.dump()), ConfigError);
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

TEST_CASE("top-k accuracy counts ranked hits as percentages") {
  const Index n_loc = 5;
  const SeqModel model = ts::location_copy_model(n_loc);

  auto windows = copy_task_windows(n_loc, 40, 31);
  CHECK(topk_accuracy(model, windows, 1) == 100.0);
  CHECK(topk_accuracy(model, windows, 5) == 100.0);

  // Misdirect every label: top-1 misses everywhere, k = |L| still catches all.
  for (auto& w : windows) w.label = (w.prev1.location + 1) % static_cast<int>(n_loc);
  CHECK(topk_accuracy(model, windows, 1) == 0.0);
  CHECK(topk_accuracy(model, windows, 5) == 100.0);

  // Half right, half wrong.
  for (std::size_t i = 0; i < windows.size() / 2; ++i)
    windows[i].label = windows[i].prev1.location;
  CHECK(topk_accuracy(model, windows, 1) == 50.0);

  CHECK_THROWS_AS(topk_accuracy(model, std::vector<Window>{}, 1), InputError);
}

TEST_CASE("the deployed handle reports the same accuracy as the raw model") {
  const Index n_loc = 5;
  const SeqModel model = ts::location_copy_model(n_loc);
  Rng rng(77);
  const auto windows = ts::random_windows(n_loc, 30, rng);

  // Temperature rescales confidences but never the ranking, so the service
  // accuracy must match the undefended model exactly at any temperature.
  for (double t : {1.0, 0.05}) {
    const BlackBoxHandle handle = deploy(model, t, 4);
    for (int k : {1, 3, 5})
      CHECK(topk_accuracy(handle, windows, k) == topk_accuracy(model, windows, k));
  }
  const BlackBoxHandle handle = deploy(model, 1.0, 4);
  CHECK_THROWS_AS(topk_accuracy(handle, std::vector<Window>{}, 1), InputError);
}

TEST_CASE("leakage reduction is relative to the undefended attack") {
  CHECK(leakage_reduction(40.0, 20.0) == 50.0);
  CHECK(leakage_reduction(40.0, 0.0) == 100.0);
  CHECK(leakage_reduction(40.0, 40.0) == 0.0);
  CHECK(leakage_reduction(40.0, 60.0) == -50.0);  // defense made it worse
  CHECK_THROWS_AS(leakage_reduction(0.0, 10.0), InputError);
  CHECK_THROWS_AS(leakage_reduction(-5.0, 1.0), InputError);
}

TEST_CASE("pearson permutation test recovers exact correlations") {
  const std::vector<double> x{1, 2, 3, 4, 5};
  const std::vector<double> y{3, 5, 7, 9, 11};         // y = 2x + 1
  const std::vector<double> y_neg{11, 9, 7, 5, 3};     // reversed

  const Correlation pos = pearson_permutation(x, y, 999, 4);
  CHECK(pos.r == 1.0);
  CHECK(pos.n == 5);
  CHECK(pos.p_value <= 0.05);
  CHECK(pos.p_value > 0.0);

  const Correlation neg = pearson_permutation(x, y_neg, 999, 4);
  CHECK(neg.r == -1.0);
  CHECK(neg.p_value <= 0.05);

  // Same seed, same resample path, same p-value.
  const Correlation again = pearson_permutation(x, y, 999, 4);
  CHECK(again.p_value == pos.p_value);

  const std::vector<double> flat{2, 2, 2, 2, 2};
  CHECK(pearson_permutation(x, flat, 99, 1).r == 0.0);  // zero variance degrades to 0

  const std::vector<double> two{1, 2};
  CHECK_THROWS_AS(pearson_permutation(two, two, 99, 1), InputError);
  CHECK_THROWS_AS(pearson_permutation(x, two, 99, 1), InputError);
  CHECK_THROWS_AS(pearson_permutation(x, y, 0, 1), InputError);
}

// ---------------------------------------------------------------------------
// The pipeline at smoke scale. One linear case: the smoke run is the
// expensive part, so every invariant, the determinism rerun, the file round
// trips and the update path all share it.
// ---------------------------------------------------------------------------

TEST_CASE("smoke experiment: invariants, determinism, files, update") {
  const ExperimentConfig cfg = ExperimentConfig::smoke();
  Experiment ex(cfg);

  ex.run_synth();
  REQUIRE(ex.cohort().contributors.size() == 3);
  REQUIRE(ex.cohort().targets.size() == 2);
  REQUIRE(ex.cohort().target_profiles.size() == 2);
  CHECK(ex.vocab().size() == 6);

  ex.run_general();
  const GeneralReport& gen = ex.report().general;
  CHECK(gen.hidden_size == 16);
  CHECK(gen.n_train_windows > 0);
  CHECK(gen.n_val_windows > 0);
  CHECK(gen.n_test_windows > 0);
  CHECK(gen.history.epochs_run >= 1);
  CHECK(gen.history.train_loss.size() == static_cast<std::size_t>(gen.history.epochs_run));
  for (int k : cfg.k_list) {
    REQUIRE(gen.test_accuracy.count(k) == 1);
    CHECK(gen.test_accuracy.at(k) >= 0.0);
    CHECK(gen.test_accuracy.at(k) <= 100.0);
  }
  CHECK(ex.general_model().role == ModelRole::general);
  CHECK(ex.general_model().vocab_fingerprint == ex.vocab().fingerprint());

  ex.run_personalize();
  REQUIRE(ex.report().users.size() == 2);
  const std::string general_print = param_fingerprint(ex.general_model());
  for (const UserReport& u : ex.report().users) {
    CHECK(u.method == (u.fallback ? "reuse" : to_string(cfg.method)));
    CHECK(u.train_windows > 0);
    CHECK(u.test_windows > 0);
    CHECK(u.eval_windows > 0);
    CHECK(u.eval_windows <= cfg.attack.max_eval_windows);
    CHECK(u.predictability >= 0.0);
    CHECK(u.predictability <= 1.0);
    CHECK(u.mobility_degree >= cfg.cohort.profiles.degree_min);
    for (int k : cfg.k_list) {
      REQUIRE(u.test_accuracy.count(k) == 1);
      REQUIRE(u.reuse_test_accuracy.count(k) == 1);  // evaluate_reuse is on
    }
  }
  for (const TargetState& state : ex.targets()) {
    CHECK(state.model.role == ModelRole::personalized);
    CHECK(state.model.base_fingerprint == general_print);
    CHECK(state.model.vocab_fingerprint == ex.vocab().fingerprint());
    CHECK(state.eval_windows.size() == state.eval_targets.size());
    CHECK(state.train_windows.size() + 0 >= state.eval_windows.size());
  }

  ex.run_attacks();
  // targets x adversaries x strategies x priors, all at temperature 1.
  const std::size_t grid = ex.cohort().targets.size() * cfg.attack.adversaries.size() *
                           cfg.attack.strategies.size() * cfg.attack.priors.size();
  REQUIRE(ex.report().cells.size() == grid);
  for (const AttackCell& cell : ex.report().cells) {
    CHECK(cell.temperature == 1.0);
    CHECK(cell.trials > 0);
    CHECK(cell.windows.size() > 0);
    double previous = 0.0;
    for (int k : cfg.k_list) {  // hit sets only grow with k
      REQUIRE(cell.accuracy.count(k) == 1);
      CHECK(cell.accuracy.at(k) >= previous);
      CHECK(cell.accuracy.at(k) <= 100.0);
      previous = cell.accuracy.at(k);
    }
    if (cell.strategy == AttackStrategy::gradient) {
      CHECK(cell.white_box);
      CHECK(cell.queries == 0);
    } else {
      CHECK(!cell.white_box);
      CHECK(cell.queries > 0);
      CHECK(cell.candidate_set_size >= 1);
      CHECK(cell.candidate_set_size <= 6);
    }
  }
  const std::string user0 = ex.report().users[0].user;
  for (const TargetState& state : ex.targets()) {
    const auto* bf = ex.report().find_cell(state.profile.user_id, AdversaryKind::a1,
                                           AttackStrategy::brute_force, PriorMode::none, 1.0);
    const auto* tb = ex.report().find_cell(state.profile.user_id, AdversaryKind::a1,
                                           AttackStrategy::time_based, PriorMode::none, 1.0);
    REQUIRE(bf != nullptr);
    REQUIRE(tb != nullptr);
    // Continuity fixes the entry slot, so the restricted enumeration is at
    // least the 48 slots cheaper even before candidate pruning.
    CHECK(tb->queries * 48 <= bf->queries);
    CHECK(bf->candidate_set_size == 6);
  }
  CHECK(ex.report().find_cell(user0, AdversaryKind::a1, AttackStrategy::time_based,
                              PriorMode::predict, 1.0) == nullptr);
  CHECK(ex.report().find_cell("nobody", AdversaryKind::a1, AttackStrategy::time_based,
                              PriorMode::none, 1.0) == nullptr);

  // Trial-weighted aggregation against a hand computation over the two users.
  {
    const auto* c0 = ex.report().find_cell(ex.targets()[0].profile.user_id, AdversaryKind::a1,
                                           AttackStrategy::time_based, PriorMode::none, 1.0);
    const auto* c1 = ex.report().find_cell(ex.targets()[1].profile.user_id, AdversaryKind::a1,
                                           AttackStrategy::time_based, PriorMode::none, 1.0);
    const double expected = (c0->accuracy.at(1) * c0->trials + c1->accuracy.at(1) * c1->trials) /
                            static_cast<double>(c0->trials + c1->trials);
    CHECK(ex.report().aggregate_accuracy(AdversaryKind::a1, AttackStrategy::time_based,
                                         PriorMode::none, 1.0, 1) ==
          doctest::Approx(expected).epsilon(1e-12));
    CHECK(ex.report().aggregate_accuracy(AdversaryKind::a2, AttackStrategy::time_based,
                                         PriorMode::none, 1.0, 1) == 0.0);  // empty slice
  }

  ex.run_defense();
  ex.finalize();

  // The sweep adds one defended cell per target (a1 / time_based / none at
  // T = 0.05); the temperature-1 cells are reused from the attack grid.
  REQUIRE(ex.report().cells.size() == grid + 2);
  const std::size_t n_service =
      ex.cohort().targets.size() * cfg.defense.temperatures.size() * cfg.k_list.size();
  REQUIRE(ex.report().service.size() == n_service);
  // Ranking invariance again, now end to end: service accuracy per user and k
  // must be identical at every temperature.
  for (const ServiceRow& row : ex.report().service) {
    if (row.temperature == 1.0) continue;
    bool matched = false;
    for (const ServiceRow& base : ex.report().service) {
      if (base.user != row.user || base.k != row.k || base.temperature != 1.0) continue;
      CHECK(row.accuracy == base.accuracy);
      matched = true;
    }
    CHECK(matched);
  }
  REQUIRE(ex.report().defense.size() == cfg.defense.temperatures.size() * cfg.k_list.size());
  for (const DefenseRow& row : ex.report().defense) {
    if (row.temperature == 1.0) CHECK(row.leakage_reduction_pct == 0.0);
    const double agg = ex.report().aggregate_accuracy(row.adversary, row.strategy, row.prior,
                                                      row.temperature, row.k);
    CHECK(row.attack_accuracy == agg);
  }
  CHECK(ex.report().correlations.empty());  // two targets are below the n = 3 floor
  CHECK(ex.report().total_wall_seconds > 0.0);

  // A fresh experiment over the same config reproduces every number.
  Experiment ex2(cfg);
  ex2.run_synth();
  ex2.run_general();
  ex2.run_personalize();
  ex2.run_attacks();
  ex2.run_defense();
  ex2.finalize();
  CHECK(param_fingerprint(ex2.general_model()) == general_print);
  REQUIRE(ex2.targets().size() == ex.targets().size());
  for (std::size_t i = 0; i < ex.targets().size(); ++i)
    CHECK(param_fingerprint(ex2.targets()[i].model) ==
          param_fingerprint(ex.targets()[i].model));
  REQUIRE(ex2.report().cells.size() == ex.report().cells.size());
  for (std::size_t i = 0; i < ex.report().cells.size(); ++i) {
    const AttackCell& a = ex.report().cells[i];
    const AttackCell& b = ex2.report().cells[i];
    CHECK(a.user == b.user);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.trials == b.trials);
    CHECK(a.queries == b.queries);
    CHECK(a.candidates == b.candidates);
    CHECK(a.candidate_set_size == b.candidate_set_size);
    CHECK(a.collapse_fraction == b.collapse_fraction);
  }
  REQUIRE(ex2.report().service.size() == ex.report().service.size());
  for (std::size_t i = 0; i < ex.report().service.size(); ++i)
    CHECK(ex.report().service[i].accuracy == ex2.report().service[i].accuracy);

  // Report files from the two runs must agree byte for byte: the CSV writers
  // carry no wall-clock columns and pin their float formatting.
  const std::string dir_a = fresh_dir("test_harness_out_a");
  const std::string dir_b = fresh_dir("test_harness_out_b");
  write_reports(ex.report(), ex.config(), ex.vocab(), dir_a);
  write_reports(ex2.report(), ex2.config(), ex2.vocab(), dir_b);
  const std::vector<std::string> csvs{
      "/reports/attack.csv",           "/reports/plots/attack_grid.csv",
      "/reports/plots/defense_curve.csv", "/reports/plots/service_quality.csv",
      "/reports/plots/personalization.csv", "/reports/plots/correlations.csv",
      "/reports/plots/general_history.csv"};
  for (const std::string& rel : csvs) {
    const std::string a = read_file(dir_a + rel);
    CHECK(!a.empty());
    CHECK(a == read_file(dir_b + rel));
  }

  // state.json carries the full report, ranked scores included.
  save_state(ex.report(), dir_a);
  const ExperimentReport loaded = load_state(dir_a);
  CHECK(loaded.general.test_accuracy == gen.test_accuracy);
  REQUIRE(loaded.users.size() == ex.report().users.size());
  for (std::size_t i = 0; i < loaded.users.size(); ++i) {
    CHECK(loaded.users[i].user == ex.report().users[i].user);
    CHECK(loaded.users[i].method == ex.report().users[i].method);
    CHECK(loaded.users[i].test_accuracy == ex.report().users[i].test_accuracy);
    CHECK(loaded.users[i].reuse_test_accuracy == ex.report().users[i].reuse_test_accuracy);
  }
  REQUIRE(loaded.cells.size() == ex.report().cells.size());
  for (std::size_t i = 0; i < loaded.cells.size(); ++i) {
    const AttackCell& a = ex.report().cells[i];
    const AttackCell& b = loaded.cells[i];
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.queries == b.queries);
    REQUIRE(a.windows.size() == b.windows.size());
    for (std::size_t w = 0; w < a.windows.size(); ++w) {
      CHECK(a.windows[w].tie_seed == b.windows[w].tie_seed);
      REQUIRE(a.windows[w].steps.size() == b.windows[w].steps.size());
      for (std::size_t s = 0; s < a.windows[w].steps.size(); ++s) {
        const auto& sa = a.windows[w].steps[s];
        const auto& sb = b.windows[w].steps[s];
        CHECK(sa.truth == sb.truth);
        REQUIRE(sa.ranked.size() == sb.ranked.size());
        for (std::size_t r = 0; r < sa.ranked.size(); ++r) {
          CHECK(sa.ranked[r].location == sb.ranked[r].location);
          CHECK(sa.ranked[r].score == sb.ranked[r].score);  // decimal round trip is exact
        }
      }
    }
  }
  CHECK(loaded.defense.size() == ex.report().defense.size());
  CHECK(loaded.service.size() == ex.report().service.size());
  CHECK(loaded.correlations.empty());
  CHECK(loaded.total_wall_seconds == ex.report().total_wall_seconds);
  CHECK_THROWS_AS(load_state("test_harness_no_state"), SerializationError);

  // Cohort and vocabulary files.
  write_traces(ex.cohort(), dir_a);
  write_profiles(ex.cohort(), dir_a);
  write_vocab(ex.vocab(), dir_a);
  const DomainVocab vocab_back = load_vocab(dir_a);
  CHECK(vocab_back.fingerprint() == ex.vocab().fingerprint());
  const Cohort cohort_back = load_cohort(dir_a);
  REQUIRE(cohort_back.contributors.size() == 3);
  REQUIRE(cohort_back.targets.size() == 2);
  for (std::size_t u = 0; u < cohort_back.targets.size(); ++u) {
    const Trace& orig = ex.cohort().targets[u];
    const Trace& back = cohort_back.targets[u];
    CHECK(back.user_id == orig.user_id);
    REQUIRE(back.sessions.size() == orig.sessions.size());
    for (std::size_t s = 0; s < back.sessions.size(); ++s) {
      CHECK(back.sessions[s].location == orig.sessions[s].location);
      CHECK(back.sessions[s].entry == orig.sessions[s].entry);
      CHECK(back.sessions[s].duration == orig.sessions[s].duration);
    }
    CHECK(cohort_back.target_profiles[u].user_id == ex.cohort().target_profiles[u].user_id);
    CHECK(cohort_back.target_profiles[u].predictability ==
          ex.cohort().target_profiles[u].predictability);
    CHECK(cohort_back.target_profiles[u].home == ex.cohort().target_profiles[u].home);
  }

  // Weekly update: same base, accumulated windows, refreshed test accuracy.
  CHECK_THROWS_AS(ex.run_update(0), ConfigError);
  ex.run_update(1);
  for (const TargetState& state : ex.targets()) {
    CHECK(state.model.base_fingerprint == general_print);
    CHECK(state.model.role == ModelRole::personalized);
  }
  for (const UserReport& u : ex.report().users)
    for (int k : cfg.k_list) REQUIRE(u.test_accuracy.count(k) == 1);

  // Swapping in a refreshed general model orphans the personal models: the
  // update path must refuse rather than silently mix parameter lineages.
  SeqModel refreshed = init_model(ex.general_model().arch, 987654321);
  refreshed.vocab_fingerprint = ex.vocab().fingerprint();
  refreshed.role = ModelRole::general;
  ex.set_general(std::move(refreshed), ex.vocab());
  CHECK_THROWS_AS(ex.run_update(1), ContractError);

  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}
