#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "json.hpp"
#include "pelican/harness.hpp"

namespace pelican {

using json = nlohmann::json;

namespace {

namespace fs = std::filesystem;

void ensure_dir(const std::string& path) {
  std::error_code ec;
  fs::create_directories(path, ec);
  if (ec) throw SerializationError("cannot create directory " + path + ": " + ec.message());
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw SerializationError("cannot write " + path);
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SerializationError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Shortest round-trip decimal form; infinities spelled out so strtod can read
// them back.
std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

json kmap_to_json(const std::map<int, double>& m) {
  json obj = json::object();
  for (const auto& [k, v] : m) obj[std::to_string(k)] = v;
  return obj;
}

std::map<int, double> kmap_from_json(const json& obj) {
  std::map<int, double> m;
  for (auto it = obj.begin(); it != obj.end(); ++it) m[std::stoi(it.key())] = it.value();
  return m;
}

json profile_to_json(const UserProfile& p) {
  json freq = json::array();
  for (const auto& [loc, w] : p.frequent_set) freq.push_back({loc, w});
  json dwell = json::object();
  for (const auto& [loc, mean] : p.dwell_means) dwell[loc] = mean;
  return json{{"user_id", p.user_id},
              {"home", p.home},
              {"frequent_set", std::move(freq)},
              {"predictability", p.predictability},
              {"mobility_degree", p.mobility_degree},
              {"dwell_means", std::move(dwell)},
              {"seed", p.seed}};
}

UserProfile profile_from_json(const json& j) {
  UserProfile p;
  p.user_id = j.at("user_id").get<std::string>();
  p.home = j.at("home").get<std::string>();
  for (const auto& pair : j.at("frequent_set"))
    p.frequent_set.emplace_back(pair.at(0).get<std::string>(), pair.at(1).get<double>());
  p.predictability = j.at("predictability").get<double>();
  p.mobility_degree = j.at("mobility_degree").get<int>();
  for (auto it = j.at("dwell_means").begin(); it != j.at("dwell_means").end(); ++it)
    p.dwell_means[it.key()] = it.value().get<double>();
  p.seed = j.at("seed").get<std::uint64_t>();
  return p;
}

template <typename T>
json names_to_json(const std::vector<T>& values) {
  json arr = json::array();
  for (T v : values) arr.push_back(to_string(v));
  return arr;
}

}  // namespace

// ---------------------------------------------------------------------------
// Experiment config JSON.
// ---------------------------------------------------------------------------

std::string experiment_config_to_json(const ExperimentConfig& cfg) {
  json doc;
  doc["seeds"] = {{"cohort", cfg.seeds.cohort},
                  {"training", cfg.seeds.training},
                  {"attack", cfg.seeds.attack}};
  doc["cohort"] = {
      {"contributors", cfg.cohort.n_contributors},
      {"targets", cfg.cohort.n_targets},
      {"locations", cfg.cohort.vocab.size()},
      {"scale", to_string(cfg.cohort.vocab.scale())},
      {"weeks", cfg.cohort.weeks},
      {"profiles",
       {{"degree_min", cfg.cohort.profiles.degree_min},
        {"degree_max", cfg.cohort.profiles.degree_max},
        {"predictability_min", cfg.cohort.profiles.predictability_min},
        {"predictability_max", cfg.cohort.profiles.predictability_max},
        {"dwell_min", cfg.cohort.profiles.dwell_min},
        {"dwell_max", cfg.cohort.profiles.dwell_max},
        {"weight_min", cfg.cohort.profiles.weight_min},
        {"weight_max", cfg.cohort.profiles.weight_max}}},
      {"schedule",
       {{"day_start_minute", cfg.cohort.schedule.day_start_minute},
        {"day_end_minute", cfg.cohort.schedule.day_end_minute},
        {"gap_minutes", cfg.cohort.schedule.gap_minutes},
        {"duration_sigma_frac", cfg.cohort.schedule.duration_sigma_frac},
        {"min_duration", cfg.cohort.schedule.min_duration},
        {"start_day", cfg.cohort.schedule.start_day}}}};
  doc["method"] = to_string(cfg.method);
  doc["evaluate_reuse"] = cfg.evaluate_reuse;
  doc["train_fraction"] = cfg.train_fraction;
  doc["general"] = {{"hidden_size", cfg.general.hidden_size},
                    {"n_layers", cfg.general.n_layers},
                    {"dropout_rate", cfg.general.dropout_rate},
                    {"learning_rate", cfg.general.learning_rate},
                    {"weight_decay", cfg.general.weight_decay},
                    {"batch_size", cfg.general.batch_size},
                    {"max_epochs", cfg.general.max_epochs},
                    {"patience", cfg.general.patience},
                    {"hidden_grid", cfg.general.hidden_grid},
                    {"lr_grid", cfg.general.lr_grid},
                    {"cv_folds", cfg.general.cv_folds},
                    {"val_fraction", cfg.general.val_fraction}};
  doc["personal"] = {{"lr_grid", cfg.personal.lr_grid},
                     {"hidden_grid", cfg.personal.hidden_grid},
                     {"cv_folds", cfg.personal.cv_folds},
                     {"min_windows", cfg.personal.min_windows},
                     {"final_val_fraction", cfg.personal.final_val_fraction},
                     {"weight_decay", cfg.personal.weight_decay},
                     {"batch_size", cfg.personal.batch_size},
                     {"max_epochs", cfg.personal.max_epochs},
                     {"patience", cfg.personal.patience},
                     {"dropout_rate", cfg.personal.dropout_rate}};
  doc["attack"] = {{"adversaries", names_to_json(cfg.attack.adversaries)},
                   {"strategies", names_to_json(cfg.attack.strategies)},
                   {"priors", names_to_json(cfg.attack.priors)},
                   {"eval_fraction", cfg.attack.eval_fraction},
                   {"max_eval_windows", cfg.attack.max_eval_windows},
                   {"candidate_threshold", cfg.attack.candidate_threshold},
                   {"probe_budget", cfg.attack.probe_budget},
                   {"gradient_steps", cfg.attack.gradient_steps},
                   {"gradient_step_size", cfg.attack.gradient_step_size},
                   {"soften_temperature", cfg.attack.soften_temperature}};
  doc["defense"] = {{"temperatures", cfg.defense.temperatures},
                    {"precision", cfg.defense.precision},
                    {"adversaries", names_to_json(cfg.defense.adversaries)},
                    {"strategies", names_to_json(cfg.defense.strategies)},
                    {"priors", names_to_json(cfg.defense.priors)}};
  doc["k_list"] = cfg.k_list;
  doc["output_dir"] = cfg.output_dir;
  return doc.dump(1);
}

ExperimentConfig experiment_config_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg = ExperimentConfig::desk_default();
  try {
    if (!doc.contains("seeds")) throw ConfigError("config must provide the seeds block");
    const json& seeds = doc.at("seeds");
    cfg.seeds.cohort = seeds.at("cohort").get<std::uint64_t>();
    cfg.seeds.training = seeds.at("training").get<std::uint64_t>();
    cfg.seeds.attack = seeds.at("attack").get<std::uint64_t>();

    if (doc.contains("cohort")) {
      const json& c = doc.at("cohort");
      cfg.cohort.n_contributors = c.value("contributors", cfg.cohort.n_contributors);
      cfg.cohort.n_targets = c.value("targets", cfg.cohort.n_targets);
      const int n_loc = c.value("locations", static_cast<int>(cfg.cohort.vocab.size()));
      const SpatialScale scale =
          scale_from_string(c.value("scale", to_string(cfg.cohort.vocab.scale())));
      cfg.cohort.vocab = scale == SpatialScale::building ? make_building_vocab(n_loc)
                                                         : make_access_point_vocab(n_loc);
      cfg.cohort.weeks = c.value("weeks", cfg.cohort.weeks);
      if (c.contains("profiles")) {
        const json& p = c.at("profiles");
        auto& r = cfg.cohort.profiles;
        r.degree_min = p.value("degree_min", r.degree_min);
        r.degree_max = p.value("degree_max", r.degree_max);
        r.predictability_min = p.value("predictability_min", r.predictability_min);
        r.predictability_max = p.value("predictability_max", r.predictability_max);
        r.dwell_min = p.value("dwell_min", r.dwell_min);
        r.dwell_max = p.value("dwell_max", r.dwell_max);
        r.weight_min = p.value("weight_min", r.weight_min);
        r.weight_max = p.value("weight_max", r.weight_max);
      }
      if (c.contains("schedule")) {
        const json& s = c.at("schedule");
        auto& sp = cfg.cohort.schedule;
        sp.day_start_minute = s.value("day_start_minute", sp.day_start_minute);
        sp.day_end_minute = s.value("day_end_minute", sp.day_end_minute);
        sp.gap_minutes = s.value("gap_minutes", sp.gap_minutes);
        sp.duration_sigma_frac = s.value("duration_sigma_frac", sp.duration_sigma_frac);
        sp.min_duration = s.value("min_duration", sp.min_duration);
        sp.start_day = s.value("start_day", sp.start_day);
      }
    }
    cfg.cohort.global_seed = cfg.seeds.cohort;

    if (doc.contains("method")) cfg.method = method_from_string(doc.at("method"));
    cfg.evaluate_reuse = doc.value("evaluate_reuse", cfg.evaluate_reuse);
    cfg.train_fraction = doc.value("train_fraction", cfg.train_fraction);

    if (doc.contains("general")) {
      const json& g = doc.at("general");
      auto& gc = cfg.general;
      gc.hidden_size = g.value("hidden_size", gc.hidden_size);
      gc.n_layers = g.value("n_layers", gc.n_layers);
      gc.dropout_rate = g.value("dropout_rate", gc.dropout_rate);
      gc.learning_rate = g.value("learning_rate", gc.learning_rate);
      gc.weight_decay = g.value("weight_decay", gc.weight_decay);
      gc.batch_size = g.value("batch_size", gc.batch_size);
      gc.max_epochs = g.value("max_epochs", gc.max_epochs);
      gc.patience = g.value("patience", gc.patience);
      gc.hidden_grid = g.value("hidden_grid", gc.hidden_grid);
      gc.lr_grid = g.value("lr_grid", gc.lr_grid);
      gc.cv_folds = g.value("cv_folds", gc.cv_folds);
      gc.val_fraction = g.value("val_fraction", gc.val_fraction);
    }
    if (doc.contains("personal")) {
      const json& p = doc.at("personal");
      auto& pc = cfg.personal;
      pc.lr_grid = p.value("lr_grid", pc.lr_grid);
      pc.hidden_grid = p.value("hidden_grid", pc.hidden_grid);
      pc.cv_folds = p.value("cv_folds", pc.cv_folds);
      pc.min_windows = p.value("min_windows", pc.min_windows);
      pc.final_val_fraction = p.value("final_val_fraction", pc.final_val_fraction);
      pc.weight_decay = p.value("weight_decay", pc.weight_decay);
      pc.batch_size = p.value("batch_size", pc.batch_size);
      pc.max_epochs = p.value("max_epochs", pc.max_epochs);
      pc.patience = p.value("patience", pc.patience);
      pc.dropout_rate = p.value("dropout_rate", pc.dropout_rate);
    }
    if (doc.contains("attack")) {
      const json& a = doc.at("attack");
      auto& ac = cfg.attack;
      if (a.contains("adversaries")) {
        ac.adversaries.clear();
        for (const auto& name : a.at("adversaries"))
          ac.adversaries.push_back(adversary_from_string(name));
      }
      if (a.contains("strategies")) {
        ac.strategies.clear();
        for (const auto& name : a.at("strategies"))
          ac.strategies.push_back(strategy_from_string(name));
      }
      if (a.contains("priors")) {
        ac.priors.clear();
        for (const auto& name : a.at("priors")) ac.priors.push_back(prior_from_string(name));
      }
      ac.eval_fraction = a.value("eval_fraction", ac.eval_fraction);
      ac.max_eval_windows = a.value("max_eval_windows", ac.max_eval_windows);
      ac.candidate_threshold = a.value("candidate_threshold", ac.candidate_threshold);
      ac.probe_budget = a.value("probe_budget", ac.probe_budget);
      ac.gradient_steps = a.value("gradient_steps", ac.gradient_steps);
      ac.gradient_step_size = a.value("gradient_step_size", ac.gradient_step_size);
      ac.soften_temperature = a.value("soften_temperature", ac.soften_temperature);
    }
    if (doc.contains("defense")) {
      const json& d = doc.at("defense");
      auto& dc = cfg.defense;
      dc.temperatures = d.value("temperatures", dc.temperatures);
      dc.precision = d.value("precision", dc.precision);
      if (d.contains("adversaries")) {
        dc.adversaries.clear();
        for (const auto& name : d.at("adversaries"))
          dc.adversaries.push_back(adversary_from_string(name));
      }
      if (d.contains("strategies")) {
        dc.strategies.clear();
        for (const auto& name : d.at("strategies"))
          dc.strategies.push_back(strategy_from_string(name));
      }
      if (d.contains("priors")) {
        dc.priors.clear();
        for (const auto& name : d.at("priors")) dc.priors.push_back(prior_from_string(name));
      }
    }
    cfg.k_list = doc.value("k_list", cfg.k_list);
    cfg.output_dir = doc.value("output_dir", cfg.output_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  if (cfg.k_list.empty()) throw ConfigError("k_list must not be empty");
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  return experiment_config_from_json(slurp(path));
}

// ---------------------------------------------------------------------------
// Cohort files.
// ---------------------------------------------------------------------------

void write_traces(const Cohort& cohort, const std::string& out_dir) {
  ensure_dir(out_dir + "/traces");
  write_csv(cohort.contributors, out_dir + "/traces/contributors.csv");
  write_csv(cohort.targets, out_dir + "/traces/targets.csv");
}

void write_profiles(const Cohort& cohort, const std::string& out_dir) {
  ensure_dir(out_dir + "/traces");
  json doc;
  json contributors = json::array();
  for (const auto& p : cohort.contributor_profiles) contributors.push_back(profile_to_json(p));
  json targets = json::array();
  for (const auto& p : cohort.target_profiles) targets.push_back(profile_to_json(p));
  doc["contributors"] = std::move(contributors);
  doc["targets"] = std::move(targets);
  auto out = open_out(out_dir + "/traces/profiles.json");
  out << doc.dump(1) << "\n";
}

Cohort load_cohort(const std::string& out_dir) {
  Cohort cohort;
  json doc;
  try {
    doc = json::parse(slurp(out_dir + "/traces/profiles.json"));
    for (const auto& p : doc.at("contributors"))
      cohort.contributor_profiles.push_back(profile_from_json(p));
    for (const auto& p : doc.at("targets"))
      cohort.target_profiles.push_back(profile_from_json(p));
  } catch (const json::exception& e) {
    throw ParseError(std::string("profiles.json: ") + e.what());
  }

  const auto order = [](const std::vector<Trace>& traces,
                        const std::vector<UserProfile>& profiles) {
    std::unordered_map<std::string, const Trace*> by_user;
    for (const Trace& t : traces) by_user[t.user_id] = &t;
    std::vector<Trace> ordered;
    ordered.reserve(profiles.size());
    for (const auto& p : profiles) {
      const auto it = by_user.find(p.user_id);
      if (it == by_user.end())
        throw SerializationError("trace file is missing user " + p.user_id);
      ordered.push_back(*it->second);
    }
    return ordered;
  };
  cohort.contributors =
      order(ingest_csv(out_dir + "/traces/contributors.csv"), cohort.contributor_profiles);
  cohort.targets = order(ingest_csv(out_dir + "/traces/targets.csv"), cohort.target_profiles);
  return cohort;
}

void write_vocab(const DomainVocab& vocab, const std::string& out_dir) {
  ensure_dir(out_dir + "/traces");
  json doc;
  doc["scale"] = to_string(vocab.scale());
  doc["locations"] = vocab.locations();
  doc["fingerprint"] = vocab.fingerprint();
  auto out = open_out(out_dir + "/traces/vocab.json");
  out << doc.dump(1) << "\n";
}

DomainVocab load_vocab(const std::string& out_dir) {
  try {
    const json doc = json::parse(slurp(out_dir + "/traces/vocab.json"));
    DomainVocab vocab(scale_from_string(doc.at("scale").get<std::string>()),
                      doc.at("locations").get<std::vector<std::string>>());
    const std::string want = doc.value("fingerprint", vocab.fingerprint());
    if (want != vocab.fingerprint())
      throw SerializationError("vocab.json fingerprint does not match its location list");
    return vocab;
  } catch (const json::exception& e) {
    throw ParseError(std::string("vocab.json: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

namespace {

void write_attack_csv(const ExperimentReport& report, const DomainVocab& vocab,
                      const std::string& path) {
  auto out = open_out(path);
  out << "user,adversary,strategy,prior,temperature,window,step,truth,failed";
  const int kShown = 5;
  for (int r = 1; r <= kShown; ++r) out << ",top" << r << ",score" << r;
  out << "\n";
  for (const auto& cell : report.cells) {
    for (const auto& window : cell.windows) {
      for (const auto& step : window.steps) {
        out << cell.user << ',' << to_string(cell.adversary) << ',' << to_string(cell.strategy)
            << ',' << to_string(cell.prior) << ',' << fmt(cell.temperature) << ','
            << window.window_index << ',' << step.step << ',' << vocab.location(step.truth)
            << ',' << (window.failed ? 1 : 0);
        for (int r = 0; r < kShown; ++r) {
          if (r < static_cast<int>(step.ranked.size()))
            out << ',' << vocab.location(step.ranked[static_cast<std::size_t>(r)].location)
                << ',' << fmt(step.ranked[static_cast<std::size_t>(r)].score);
          else
            out << ",,";
        }
        out << "\n";
      }
    }
  }
  if (!out) throw SerializationError("write failed: " + path);
}

void write_plots(const ExperimentReport& report, const ExperimentConfig& cfg,
                 const std::string& dir) {
  {
    auto out = open_out(dir + "/attack_grid.csv");
    out << "user,adversary,strategy,prior,temperature,k,accuracy,trials,queries,candidates,"
           "candidate_set_size,collapse_fraction\n";
    for (const auto& cell : report.cells) {
      for (const auto& [k, acc] : cell.accuracy) {
        out << cell.user << ',' << to_string(cell.adversary) << ',' << to_string(cell.strategy)
            << ',' << to_string(cell.prior) << ',' << fmt(cell.temperature) << ',' << k << ','
            << fmt(acc) << ',' << cell.trials << ',' << cell.queries << ',' << cell.candidates
            << ',' << cell.candidate_set_size << ',' << fmt(cell.collapse_fraction) << "\n";
      }
    }
  }
  {
    auto out = open_out(dir + "/defense_curve.csv");
    out << "adversary,strategy,prior,temperature,k,attack_accuracy,leakage_reduction_pct\n";
    for (const auto& row : report.defense) {
      out << to_string(row.adversary) << ',' << to_string(row.strategy) << ','
          << to_string(row.prior) << ',' << fmt(row.temperature) << ',' << row.k << ','
          << fmt(row.attack_accuracy) << ',' << fmt(row.leakage_reduction_pct) << "\n";
    }
  }
  {
    auto out = open_out(dir + "/service_quality.csv");
    out << "user,temperature,k,accuracy\n";
    for (const auto& row : report.service)
      out << row.user << ',' << fmt(row.temperature) << ',' << row.k << ',' << fmt(row.accuracy)
          << "\n";
  }
  {
    auto out = open_out(dir + "/personalization.csv");
    out << "user,method,fallback,mobility_degree,predictability,k,train_accuracy,test_accuracy,"
           "reuse_test_accuracy\n";
    for (const auto& user : report.users) {
      for (int k : cfg.k_list) {
        out << user.user << ',' << user.method << ',' << (user.fallback ? 1 : 0) << ','
            << user.mobility_degree << ',' << fmt(user.predictability) << ',' << k << ','
            << fmt(user.train_accuracy.at(k)) << ',' << fmt(user.test_accuracy.at(k)) << ',';
        const auto it = user.reuse_test_accuracy.find(k);
        if (it != user.reuse_test_accuracy.end()) out << fmt(it->second);
        out << "\n";
      }
    }
  }
  {
    auto out = open_out(dir + "/correlations.csv");
    out << "axis,k,r,p_value,n\n";
    for (const auto& row : report.correlations)
      out << row.axis << ',' << row.k << ',' << fmt(row.r) << ',' << fmt(row.p_value) << ','
          << row.n << "\n";
  }
  {
    auto out = open_out(dir + "/general_history.csv");
    out << "epoch,train_loss,val_loss\n";
    const auto& h = report.general.history;
    for (std::size_t i = 0; i < h.train_loss.size(); ++i) {
      out << (i + 1) << ',' << fmt(h.train_loss[i]) << ',';
      if (i < h.val_loss.size()) out << fmt(h.val_loss[i]);
      out << "\n";
    }
  }
}

json history_to_json(const TrainHistory& h) {
  return json{{"train_loss", h.train_loss},
              {"val_loss", h.val_loss},
              {"best_epoch", h.best_epoch},
              {"epochs_run", h.epochs_run}};
}

TrainHistory history_from_json(const json& j) {
  TrainHistory h;
  h.train_loss = j.at("train_loss").get<std::vector<double>>();
  h.val_loss = j.at("val_loss").get<std::vector<double>>();
  h.best_epoch = j.at("best_epoch").get<int>();
  h.epochs_run = j.at("epochs_run").get<int>();
  return h;
}

json stats_to_json(const PhaseStats& s) {
  return json{{"wall_seconds", s.wall_seconds}, {"cpu_seconds", s.cpu_seconds}};
}

PhaseStats stats_from_json(const json& j) {
  return PhaseStats{j.value("wall_seconds", 0.0), j.value("cpu_seconds", 0.0)};
}

json general_to_json(const GeneralReport& g) {
  return json{{"test_accuracy", kmap_to_json(g.test_accuracy)},
              {"stats", stats_to_json(g.stats)},
              {"history", history_to_json(g.history)},
              {"hidden_size", g.hidden_size},
              {"learning_rate", g.learning_rate},
              {"n_train_windows", g.n_train_windows},
              {"n_val_windows", g.n_val_windows},
              {"n_test_windows", g.n_test_windows}};
}

GeneralReport general_from_json(const json& j) {
  GeneralReport g;
  g.test_accuracy = kmap_from_json(j.at("test_accuracy"));
  g.stats = stats_from_json(j.at("stats"));
  g.history = history_from_json(j.at("history"));
  g.hidden_size = j.at("hidden_size").get<Index>();
  g.learning_rate = j.at("learning_rate").get<double>();
  g.n_train_windows = j.at("n_train_windows").get<int>();
  g.n_val_windows = j.at("n_val_windows").get<int>();
  g.n_test_windows = j.at("n_test_windows").get<int>();
  return g;
}

json user_to_json(const UserReport& u) {
  return json{{"user", u.user},
              {"method", u.method},
              {"fallback", u.fallback},
              {"mobility_degree", u.mobility_degree},
              {"predictability", u.predictability},
              {"train_windows", u.train_windows},
              {"test_windows", u.test_windows},
              {"eval_windows", u.eval_windows},
              {"train_accuracy", kmap_to_json(u.train_accuracy)},
              {"test_accuracy", kmap_to_json(u.test_accuracy)},
              {"reuse_test_accuracy", kmap_to_json(u.reuse_test_accuracy)},
              {"stats", stats_to_json(u.stats)},
              {"chosen_hidden", u.chosen_hidden},
              {"chosen_lr", u.chosen_lr}};
}

UserReport user_from_json(const json& j) {
  UserReport u;
  u.user = j.at("user").get<std::string>();
  u.method = j.at("method").get<std::string>();
  u.fallback = j.at("fallback").get<bool>();
  u.mobility_degree = j.at("mobility_degree").get<int>();
  u.predictability = j.at("predictability").get<double>();
  u.train_windows = j.at("train_windows").get<int>();
  u.test_windows = j.at("test_windows").get<int>();
  u.eval_windows = j.at("eval_windows").get<int>();
  u.train_accuracy = kmap_from_json(j.at("train_accuracy"));
  u.test_accuracy = kmap_from_json(j.at("test_accuracy"));
  u.reuse_test_accuracy = kmap_from_json(j.at("reuse_test_accuracy"));
  u.stats = stats_from_json(j.at("stats"));
  u.chosen_hidden = j.at("chosen_hidden").get<Index>();
  u.chosen_lr = j.at("chosen_lr").get<double>();
  return u;
}

json cell_to_json(const AttackCell& cell, bool with_windows) {
  json j{{"user", cell.user},
         {"adversary", to_string(cell.adversary)},
         {"strategy", to_string(cell.strategy)},
         {"prior", to_string(cell.prior)},
         {"temperature", cell.temperature},
         {"accuracy", kmap_to_json(cell.accuracy)},
         {"trials", cell.trials},
         {"queries", cell.queries},
         {"candidates", cell.candidates},
         {"candidate_set_size", cell.candidate_set_size},
         {"candidate_fallback", cell.candidate_fallback},
         {"white_box", cell.white_box},
         {"collapse_fraction", cell.collapse_fraction},
         {"wall_seconds", cell.wall_seconds}};
  if (!with_windows) {
    j["n_windows"] = cell.windows.size();
    return j;
  }
  json windows = json::array();
  for (const auto& w : cell.windows) {
    json steps = json::array();
    for (const auto& s : w.steps) {
      json ranked = json::array();
      // Scores can be -inf, which JSON numbers cannot carry; freeze them as
      // their exact decimal strings instead.
      for (const auto& r : s.ranked) ranked.push_back({r.location, fmt(r.score)});
      steps.push_back({{"step", s.step}, {"truth", s.truth}, {"ranked", std::move(ranked)}});
    }
    windows.push_back({{"window_index", w.window_index},
                       {"failed", w.failed},
                       {"tie_seed", w.tie_seed},
                       {"queries", w.queries},
                       {"candidates", w.candidates},
                       {"collapsed", w.collapsed},
                       {"steps", std::move(steps)}});
  }
  j["windows"] = std::move(windows);
  return j;
}

AttackCell cell_from_json(const json& j) {
  AttackCell cell;
  cell.user = j.at("user").get<std::string>();
  cell.adversary = adversary_from_string(j.at("adversary"));
  cell.strategy = strategy_from_string(j.at("strategy"));
  cell.prior = prior_from_string(j.at("prior"));
  cell.temperature = j.at("temperature").get<double>();
  cell.accuracy = kmap_from_json(j.at("accuracy"));
  cell.trials = j.at("trials").get<int>();
  cell.queries = j.at("queries").get<std::uint64_t>();
  cell.candidates = j.at("candidates").get<std::uint64_t>();
  cell.candidate_set_size = j.at("candidate_set_size").get<int>();
  cell.candidate_fallback = j.at("candidate_fallback").get<bool>();
  cell.white_box = j.at("white_box").get<bool>();
  cell.collapse_fraction = j.at("collapse_fraction").get<double>();
  cell.wall_seconds = j.at("wall_seconds").get<double>();
  for (const auto& wj : j.value("windows", json::array())) {
    WindowAttackResult w;
    w.window_index = wj.at("window_index").get<int>();
    w.failed = wj.at("failed").get<bool>();
    w.tie_seed = wj.at("tie_seed").get<std::uint64_t>();
    w.queries = wj.at("queries").get<std::uint64_t>();
    w.candidates = wj.at("candidates").get<std::uint64_t>();
    w.collapsed = wj.at("collapsed").get<std::uint64_t>();
    for (const auto& sj : wj.at("steps")) {
      StepRecovery s;
      s.step = sj.at("step").get<int>();
      s.truth = sj.at("truth").get<int>();
      for (const auto& rj : sj.at("ranked")) {
        RankedLocation r;
        r.location = rj.at(0).get<int>();
        r.score = std::strtod(rj.at(1).get<std::string>().c_str(), nullptr);
        s.ranked.push_back(r);
      }
      w.steps.push_back(std::move(s));
    }
    cell.windows.push_back(std::move(w));
  }
  return cell;
}

json report_to_json(const ExperimentReport& report, bool with_windows) {
  json doc;
  doc["general"] = general_to_json(report.general);
  json users = json::array();
  for (const auto& u : report.users) users.push_back(user_to_json(u));
  doc["users"] = std::move(users);
  json cells = json::array();
  for (const auto& c : report.cells) cells.push_back(cell_to_json(c, with_windows));
  doc["attack_cells"] = std::move(cells);
  json defense = json::array();
  for (const auto& d : report.defense) {
    defense.push_back({{"adversary", to_string(d.adversary)},
                       {"strategy", to_string(d.strategy)},
                       {"prior", to_string(d.prior)},
                       {"temperature", d.temperature},
                       {"k", d.k},
                       {"attack_accuracy", d.attack_accuracy},
                       {"leakage_reduction_pct", d.leakage_reduction_pct}});
  }
  doc["defense"] = std::move(defense);
  json service = json::array();
  for (const auto& s : report.service) {
    service.push_back({{"user", s.user},
                       {"temperature", s.temperature},
                       {"k", s.k},
                       {"accuracy", s.accuracy}});
  }
  doc["service"] = std::move(service);
  json correlations = json::array();
  for (const auto& c : report.correlations) {
    correlations.push_back(
        {{"axis", c.axis}, {"k", c.k}, {"r", c.r}, {"p_value", c.p_value}, {"n", c.n}});
  }
  doc["correlations"] = std::move(correlations);
  doc["synth_stats"] = stats_to_json(report.synth_stats);
  doc["total_wall_seconds"] = report.total_wall_seconds;
  return doc;
}

ExperimentReport report_from_json(const json& doc) {
  ExperimentReport report;
  if (doc.contains("general")) report.general = general_from_json(doc.at("general"));
  for (const auto& u : doc.value("users", json::array()))
    report.users.push_back(user_from_json(u));
  for (const auto& c : doc.value("attack_cells", json::array()))
    report.cells.push_back(cell_from_json(c));
  for (const auto& d : doc.value("defense", json::array())) {
    DefenseRow row;
    row.adversary = adversary_from_string(d.at("adversary"));
    row.strategy = strategy_from_string(d.at("strategy"));
    row.prior = prior_from_string(d.at("prior"));
    row.temperature = d.at("temperature").get<double>();
    row.k = d.at("k").get<int>();
    row.attack_accuracy = d.at("attack_accuracy").get<double>();
    row.leakage_reduction_pct = d.at("leakage_reduction_pct").get<double>();
    report.defense.push_back(row);
  }
  for (const auto& s : doc.value("service", json::array())) {
    ServiceRow row;
    row.user = s.at("user").get<std::string>();
    row.temperature = s.at("temperature").get<double>();
    row.k = s.at("k").get<int>();
    row.accuracy = s.at("accuracy").get<double>();
    report.service.push_back(row);
  }
  for (const auto& c : doc.value("correlations", json::array())) {
    CorrelationRow row;
    row.axis = c.at("axis").get<std::string>();
    row.k = c.at("k").get<int>();
    row.r = c.at("r").get<double>();
    row.p_value = c.at("p_value").get<double>();
    row.n = c.at("n").get<int>();
    report.correlations.push_back(row);
  }
  report.synth_stats = stats_from_json(doc.value("synth_stats", json::object()));
  report.total_wall_seconds = doc.value("total_wall_seconds", 0.0);
  return report;
}

}  // namespace

void write_reports(const ExperimentReport& report, const ExperimentConfig& cfg,
                   const DomainVocab& vocab, const std::string& out_dir) {
  ensure_dir(out_dir + "/reports/plots");
  write_attack_csv(report, vocab, out_dir + "/reports/attack.csv");
  write_plots(report, cfg, out_dir + "/reports/plots");
  json summary = report_to_json(report, /*with_windows=*/false);
  summary["config"] = json::parse(experiment_config_to_json(cfg));
  auto out = open_out(out_dir + "/reports/summary.json");
  out << summary.dump(1) << "\n";
  if (!out) throw SerializationError("write failed: summary.json");
}

void save_state(const ExperimentReport& report, const std::string& out_dir) {
  ensure_dir(out_dir + "/reports");
  auto out = open_out(out_dir + "/reports/state.json");
  out << report_to_json(report, /*with_windows=*/true).dump() << "\n";
  if (!out) throw SerializationError("write failed: state.json");
}

ExperimentReport load_state(const std::string& out_dir) {
  try {
    return report_from_json(json::parse(slurp(out_dir + "/reports/state.json")));
  } catch (const json::exception& e) {
    throw ParseError(std::string("state.json: ") + e.what());
  }
}

}  // namespace pelican
