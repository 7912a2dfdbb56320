// pelican: synthetic-mobility privacy laboratory.
//
// Stages write their artifacts under --out, so a pipeline can run end to end
// (`pelican run`) or step by step:
//
//   pelican synth --out lab
//   pelican train-general --out lab
//   pelican personalize --out lab
//   pelican attack --out lab
//   pelican defend-eval --out lab
//   pelican report --out lab

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "pelican/harness.hpp"
#include "pelican/rng.hpp"

namespace {

using namespace pelican;

struct CliOptions {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool smoke = false;
};

ExperimentConfig make_config(const CliOptions& opt) {
  ExperimentConfig cfg;
  if (!opt.config_path.empty())
    cfg = load_experiment_config(opt.config_path);
  else
    cfg = opt.smoke ? ExperimentConfig::smoke() : ExperimentConfig::desk_default();
  if (!opt.out_dir.empty()) cfg.output_dir = opt.out_dir;
  if (cfg.output_dir.empty()) cfg.output_dir = "out";
  if (opt.seed_set) {
    cfg.seeds.cohort = opt.seed;
    cfg.seeds.training = mix_seed(opt.seed, 1);
    cfg.seeds.attack = mix_seed(opt.seed, 2);
  }
  cfg.cohort.global_seed = cfg.seeds.cohort;
  return cfg;
}

void check_stored_vocab(const Experiment& ex, const std::string& dir) {
  const DomainVocab stored = load_vocab(dir);
  if (stored.fingerprint() != ex.vocab().fingerprint())
    throw ConfigError("config vocabulary does not match the traces under " + dir);
}

Experiment resume(const ExperimentConfig& cfg, bool with_general, bool with_personal) {
  Experiment ex(cfg);
  const std::string& dir = cfg.output_dir;
  ex.set_cohort(load_cohort(dir));
  if (with_general) {
    ex.set_general(load_model(dir + "/models/general.json"), load_vocab(dir));
    ex.prepare_targets();
  } else {
    check_stored_vocab(ex, dir);
  }
  try {
    ex.report() = load_state(dir);
  } catch (const Error&) {
    // First stage that produces a report; start blank.
  }
  if (with_personal) {
    for (std::size_t i = 0; i < ex.targets().size(); ++i) {
      const std::string path =
          dir + "/models/" + ex.targets()[i].profile.user_id + ".json";
      ex.set_target_model(i, load_model(path));
    }
  }
  return ex;
}

void save_target_models(Experiment& ex, const std::string& dir) {
  std::filesystem::create_directories(dir + "/models");
  for (const auto& target : ex.targets())
    save_model(target.model, dir + "/models/" + target.profile.user_id + ".json");
}

void print_accuracy_map(const std::map<int, double>& acc) {
  for (const auto& [k, v] : acc) std::cout << "  top-" << k << ": " << v << "%\n";
}

int cmd_synth(const CliOptions& opt) {
  const ExperimentConfig cfg = make_config(opt);
  Experiment ex(cfg);
  ex.run_synth();
  write_traces(ex.cohort(), cfg.output_dir);
  write_profiles(ex.cohort(), cfg.output_dir);
  write_vocab(ex.vocab(), cfg.output_dir);
  std::cout << "synth: " << ex.cohort().contributors.size() << " contributors, "
            << ex.cohort().targets.size() << " targets, " << ex.vocab().size()
            << " locations, " << cfg.cohort.weeks << " weeks -> " << cfg.output_dir
            << "/traces\n";
  return 0;
}

int cmd_train_general(const CliOptions& opt) {
  const ExperimentConfig cfg = make_config(opt);
  Experiment ex = resume(cfg, /*with_general=*/false, /*with_personal=*/false);
  ex.run_general();
  std::filesystem::create_directories(cfg.output_dir + "/models");
  save_model(ex.general_model(), cfg.output_dir + "/models/general.json");
  save_state(ex.report(), cfg.output_dir);
  std::cout << "general model: hidden " << ex.report().general.hidden_size << ", "
            << ex.report().general.n_train_windows << " train windows, test accuracy\n";
  print_accuracy_map(ex.report().general.test_accuracy);
  return 0;
}

int cmd_personalize(const CliOptions& opt) {
  const ExperimentConfig cfg = make_config(opt);
  Experiment ex = resume(cfg, /*with_general=*/true, /*with_personal=*/false);
  ex.run_personalize();
  save_target_models(ex, cfg.output_dir);
  save_state(ex.report(), cfg.output_dir);
  for (const auto& user : ex.report().users) {
    std::cout << user.user << " (" << user.method << (user.fallback ? ", fallback" : "")
              << ") test top-1: " << user.test_accuracy.at(cfg.k_list.front()) << "%\n";
  }
  return 0;
}

int cmd_attack(const CliOptions& opt) {
  const ExperimentConfig cfg = make_config(opt);
  Experiment ex = resume(cfg, /*with_general=*/true, /*with_personal=*/true);
  ex.report().cells.clear();
  ex.report().defense.clear();
  ex.report().service.clear();
  ex.run_attacks();
  ex.finalize();
  save_state(ex.report(), cfg.output_dir);
  write_reports(ex.report(), cfg, ex.vocab(), cfg.output_dir);
  for (AdversaryKind adv : cfg.attack.adversaries) {
    for (AttackStrategy strategy : cfg.attack.strategies) {
      for (PriorMode prior : cfg.attack.priors) {
        std::cout << "attack " << to_string(adv) << "/" << to_string(strategy) << "/"
                  << to_string(prior) << " top-1: "
                  << ex.report().aggregate_accuracy(adv, strategy, prior, 1.0,
                                                    cfg.k_list.front())
                  << "%\n";
      }
    }
  }
  return 0;
}

int cmd_defend_eval(const CliOptions& opt) {
  const ExperimentConfig cfg = make_config(opt);
  Experiment ex = resume(cfg, /*with_general=*/true, /*with_personal=*/true);
  ex.run_defense();
  ex.finalize();
  save_state(ex.report(), cfg.output_dir);
  write_reports(ex.report(), cfg, ex.vocab(), cfg.output_dir);
  for (const auto& row : ex.report().defense) {
    if (row.k != cfg.k_list.front()) continue;
    std::cout << "T=" << row.temperature << " " << to_string(row.adversary) << "/"
              << to_string(row.strategy) << "/" << to_string(row.prior)
              << " attack top-" << row.k << ": " << row.attack_accuracy
              << "% (leakage cut " << row.leakage_reduction_pct << "%)\n";
  }
  return 0;
}

int cmd_update(const CliOptions& opt, int weeks) {
  const ExperimentConfig cfg = make_config(opt);
  Experiment ex = resume(cfg, /*with_general=*/true, /*with_personal=*/true);
  ex.run_update(weeks);
  save_target_models(ex, cfg.output_dir);
  save_state(ex.report(), cfg.output_dir);
  std::cout << "updated " << ex.targets().size() << " personal models with " << weeks
            << " extra week(s)\n";
  return 0;
}

int cmd_report(const CliOptions& opt) {
  const ExperimentConfig cfg = make_config(opt);
  Experiment ex(cfg);
  ex.report() = load_state(cfg.output_dir);
  write_reports(ex.report(), cfg, load_vocab(cfg.output_dir), cfg.output_dir);
  std::cout << "reports written under " << cfg.output_dir << "/reports\n";
  return 0;
}

int cmd_run(const CliOptions& opt) {
  ExperimentConfig cfg = make_config(opt);
  const ExperimentReport report = run_experiment(cfg);
  save_state(report, cfg.output_dir);
  std::cout << "general test accuracy\n";
  print_accuracy_map(report.general.test_accuracy);
  double mean_top1 = 0.0;
  for (const auto& user : report.users) mean_top1 += user.test_accuracy.at(cfg.k_list.front());
  if (!report.users.empty()) mean_top1 /= static_cast<double>(report.users.size());
  std::cout << "mean personal test top-" << cfg.k_list.front() << ": " << mean_top1 << "%\n";
  for (const auto& row : report.defense) {
    if (row.k != cfg.k_list.front()) continue;
    std::cout << "T=" << row.temperature << " " << to_string(row.strategy)
              << " attack top-" << row.k << ": " << row.attack_accuracy << "% (leakage cut "
              << row.leakage_reduction_pct << "%)\n";
  }
  std::cout << "total wall: " << report.total_wall_seconds << "s; outputs under "
            << cfg.output_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pelican: location-sequence personalization and inversion laboratory"};
  app.require_subcommand(1);
  app.fallthrough();

  CliOptions opt;
  app.add_option("--config", opt.config_path, "experiment config JSON");
  app.add_option("--out", opt.out_dir, "output directory (default: config value or ./out)");
  auto* seed_opt = app.add_option("--seed", opt.seed, "override all seeds from this one value");
  app.add_flag("--smoke", opt.smoke, "use the tiny smoke-test defaults instead of desk scale");

  auto* synth = app.add_subcommand("synth", "generate the synthetic cohort");
  auto* train_general = app.add_subcommand("train-general", "phase 1: train the general model");
  auto* personalize = app.add_subcommand("personalize", "phase 2: per-target personalization");
  auto* attack = app.add_subcommand("attack", "run the undefended inversion grid");
  auto* defend = app.add_subcommand("defend-eval", "temperature sweep + service quality");
  auto* update = app.add_subcommand("update", "fold fresh weeks into the personal models");
  int extra_weeks = 2;
  update->add_option("--weeks", extra_weeks, "extra weeks of data to simulate")
      ->check(CLI::PositiveNumber);
  auto* report = app.add_subcommand("report", "rewrite report files from saved state");
  auto* run = app.add_subcommand("run", "full pipeline end to end");

  CLI11_PARSE(app, argc, argv);
  opt.seed_set = seed_opt->count() > 0;

  try {
    if (synth->parsed()) return cmd_synth(opt);
    if (train_general->parsed()) return cmd_train_general(opt);
    if (personalize->parsed()) return cmd_personalize(opt);
    if (attack->parsed()) return cmd_attack(opt);
    if (defend->parsed()) return cmd_defend_eval(opt);
    if (update->parsed()) return cmd_update(opt, extra_weeks);
    if (report->parsed()) return cmd_report(opt);
    if (run->parsed()) return cmd_run(opt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
