#include "pelican/personalize.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <memory>

#include "pelican/rng.hpp"

namespace pelican {

std::string to_string(PersonalizationMethod m) {
  switch (m) {
    case PersonalizationMethod::reuse: return "reuse";
    case PersonalizationMethod::personal_lstm: return "personal_lstm";
    case PersonalizationMethod::tl_fe: return "tl_fe";
    case PersonalizationMethod::tl_ft: return "tl_ft";
  }
  throw ContractError("unreachable personalization method");
}

PersonalizationMethod method_from_string(const std::string& name) {
  if (name == "reuse") return PersonalizationMethod::reuse;
  if (name == "personal_lstm") return PersonalizationMethod::personal_lstm;
  if (name == "tl_fe") return PersonalizationMethod::tl_fe;
  if (name == "tl_ft") return PersonalizationMethod::tl_ft;
  throw ConfigError("unknown personalization method: " + name);
}

namespace {

TrainConfig base_train_config(const PersonalizeConfig& cfg, double lr,
                              std::vector<bool> freeze_mask, std::uint64_t seed) {
  TrainConfig tc;
  tc.learning_rate = lr;
  tc.weight_decay = cfg.weight_decay;
  tc.batch_size = cfg.batch_size;
  tc.max_epochs = cfg.max_epochs;
  tc.patience = cfg.patience;
  tc.freeze_mask = std::move(freeze_mask);
  tc.seed = seed;
  return tc;
}

/// Chronological tail of the fit set held out so early stopping has a signal.
std::pair<std::span<const Window>, std::span<const Window>> final_split(
    std::span<const Window> windows, double val_fraction) {
  const std::size_t n = windows.size();
  std::size_t n_val = static_cast<std::size_t>(static_cast<double>(n) * val_fraction);
  if (n_val == 0 && n >= 4) n_val = 1;
  if (n_val >= n) n_val = n > 1 ? n - 1 : 0;
  return {windows.subspan(0, n - n_val), windows.subspan(n - n_val)};
}

SeqModel make_fresh_personal(Index input_width, Index output_size, Index hidden,
                             const std::string& vocab_fingerprint, double dropout,
                             std::uint64_t init_seed) {
  ArchConfig arch;
  arch.input_width = input_width;
  arch.output_size = output_size;
  arch.hidden_size = hidden;
  arch.n_lstm_layers = 1;
  arch.dropout_rate = dropout;  // inert with a single layer, kept for the record
  SeqModel model = init_model(arch, init_seed);
  model.vocab_fingerprint = vocab_fingerprint;
  model.role = ModelRole::personalized;
  model.method = to_string(PersonalizationMethod::personal_lstm);
  return model;
}

SeqModel make_fe_init(const SeqModel& general, Index hidden, double dropout,
                      std::uint64_t init_seed) {
  SeqModel model;
  model.arch = general.arch;
  model.arch.n_lstm_layers = general.arch.n_lstm_layers + 1;
  model.arch.hidden_size = hidden;
  model.arch.dropout_rate = dropout;
  model.layers = general.layers;
  Rng rng(init_seed);
  const Index in = general.arch.hidden_size;
  LstmLayer fresh;
  fresh.w_input.resize(4 * hidden, in);
  fresh.w_recur.resize(4 * hidden, hidden);
  fresh.bias.resize(4 * hidden);
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  auto fill = [&rng](double* data, Index n, double b) {
    for (Index i = 0; i < n; ++i) data[i] = rng.uniform(-b, b);
  };
  fill(fresh.w_input.data(), fresh.w_input.size(), bound);
  fill(fresh.w_recur.data(), fresh.w_recur.size(), bound);
  fill(fresh.bias.data(), fresh.bias.size(), bound);
  model.layers.push_back(std::move(fresh));
  model.head.weight.resize(general.arch.output_size, hidden);
  model.head.bias.resize(general.arch.output_size);
  fill(model.head.weight.data(), model.head.weight.size(), bound);
  fill(model.head.bias.data(), model.head.bias.size(), bound);
  model.vocab_fingerprint = general.vocab_fingerprint;
  model.base_fingerprint = param_fingerprint(general);
  model.role = ModelRole::personalized;
  model.method = to_string(PersonalizationMethod::tl_fe);
  model.validate();
  return model;
}

std::vector<bool> fe_freeze_mask(int n_general_layers) {
  std::vector<bool> mask(static_cast<std::size_t>(n_general_layers), true);
  mask.push_back(false);  // appended LSTM layer
  mask.push_back(false);  // head
  return mask;
}

std::vector<bool> ft_freeze_mask(int n_layers) {
  std::vector<bool> mask(static_cast<std::size_t>(n_layers) + 1, false);
  mask[0] = true;  // first LSTM layer carries the generic dynamics
  return mask;
}

std::vector<bool> freeze_mask_for(const SeqModel& model) {
  if (model.method == "tl_fe") return fe_freeze_mask(static_cast<int>(model.layers.size()) - 1);
  if (model.method == "tl_ft") return ft_freeze_mask(static_cast<int>(model.layers.size()));
  return {};
}

using GridChoice = GridPick;

/// Runs expanding-window CV over the caller's candidate list. The builder is
/// invoked once per candidate per fold with a deterministic per-call seed.
GridChoice select_by_cv(const std::vector<GridCandidate>& candidates,
                        std::span<const Window> windows, int k_folds) {
  std::uint64_t call = 0;
  ModelBuilder build = [&call](const GridCandidate& cand, std::span<const Window> tr,
                               std::span<const Window> va) {
    TrainConfig tc = cand.train;
    tc.seed = mix_seed(tc.seed, ++call);
    SeqModel model = cand.warm_start ? *cand.warm_start
                                     : init_model(cand.arch, mix_seed(tc.seed, 0x11));
    if (cand.warm_start) {
      // warm-started candidates carry their role/fingerprints already
    } else {
      model.vocab_fingerprint = cand.vocab_fingerprint;
      model.role = ModelRole::personalized;
      model.method = cand.method;
    }
    return train(model, tr, va, tc, nullptr);
  };
  GridSearchResult res = grid_search_cv(candidates, windows, k_folds, build);
  return GridChoice{res.best.arch.hidden_size, res.best.train.learning_rate};
}

}  // namespace

SeqModel baseline_reuse(const SeqModel& general) {
  SeqModel model = general;
  model.role = ModelRole::personalized;
  model.method = to_string(PersonalizationMethod::reuse);
  model.base_fingerprint = param_fingerprint(general);
  return model;
}

SeqModel baseline_personal_lstm(std::span<const Window> windows, Index input_width,
                                Index output_size, const std::string& vocab_fingerprint,
                                const PersonalizeConfig& cfg, GridPick* picked) {
  if (windows.empty()) throw TrainingError("no windows to fit a personal model on");
  std::vector<GridCandidate> candidates;
  for (Index hidden : cfg.hidden_grid) {
    for (double lr : cfg.lr_grid) {
      GridCandidate cand;
      cand.arch.input_width = input_width;
      cand.arch.output_size = output_size;
      cand.arch.hidden_size = hidden;
      cand.arch.n_lstm_layers = 1;
      cand.arch.dropout_rate = cfg.dropout_rate;
      cand.train = base_train_config(cfg, lr, {}, cfg.seed);
      cand.vocab_fingerprint = vocab_fingerprint;
      cand.method = to_string(PersonalizationMethod::personal_lstm);
      candidates.push_back(std::move(cand));
    }
  }
  const GridChoice pick = candidates.size() == 1
                              ? GridChoice{candidates[0].arch.hidden_size,
                                           candidates[0].train.learning_rate}
                              : select_by_cv(candidates, windows, cfg.cv_folds);
  if (picked) *picked = pick;
  SeqModel init = make_fresh_personal(input_width, output_size, pick.hidden, vocab_fingerprint,
                                      cfg.dropout_rate, mix_seed(cfg.seed, 0xF17));
  auto [fit, val] = final_split(windows, cfg.final_val_fraction);
  TrainConfig tc = base_train_config(cfg, pick.learning_rate, {}, mix_seed(cfg.seed, 0xF18));
  return train(init, fit, val, tc, nullptr);
}

SeqModel personalize_fe(const SeqModel& general, std::span<const Window> windows,
                        const PersonalizeConfig& cfg, GridPick* picked) {
  general.validate();
  if (windows.empty()) throw TrainingError("no windows to personalize on");
  const auto mask = fe_freeze_mask(general.arch.n_lstm_layers);
  std::vector<GridCandidate> candidates;
  for (Index hidden : cfg.hidden_grid) {
    for (double lr : cfg.lr_grid) {
      GridCandidate cand;
      cand.arch = general.arch;
      cand.arch.n_lstm_layers = general.arch.n_lstm_layers + 1;
      cand.arch.hidden_size = hidden;
      cand.arch.dropout_rate = cfg.dropout_rate;
      cand.train = base_train_config(cfg, lr, mask, cfg.seed);
      cand.warm_start = std::make_shared<SeqModel>(
          make_fe_init(general, hidden, cfg.dropout_rate,
                       mix_seed(cfg.seed, static_cast<std::uint64_t>(hidden))));
      candidates.push_back(std::move(cand));
    }
  }
  const GridChoice pick = candidates.size() == 1
                              ? GridChoice{candidates[0].arch.hidden_size,
                                           candidates[0].train.learning_rate}
                              : select_by_cv(candidates, windows, cfg.cv_folds);
  if (picked) *picked = pick;
  SeqModel init = make_fe_init(general, pick.hidden, cfg.dropout_rate,
                               mix_seed(cfg.seed, static_cast<std::uint64_t>(pick.hidden)));
  auto [fit, val] = final_split(windows, cfg.final_val_fraction);
  TrainConfig tc = base_train_config(cfg, pick.learning_rate, mask, mix_seed(cfg.seed, 0xFE));
  return train(init, fit, val, tc, nullptr);
}

SeqModel personalize_ft(const SeqModel& general, std::span<const Window> windows,
                        const PersonalizeConfig& cfg, GridPick* picked) {
  general.validate();
  if (windows.empty()) throw TrainingError("no windows to personalize on");
  const auto mask = ft_freeze_mask(general.arch.n_lstm_layers);
  auto make_init = [&general]() {
    SeqModel model = general;
    model.role = ModelRole::personalized;
    model.method = to_string(PersonalizationMethod::tl_ft);
    model.base_fingerprint = param_fingerprint(general);
    return model;
  };
  // The architecture is inherited, so only the learning rate is searched.
  std::vector<GridCandidate> candidates;
  for (double lr : cfg.lr_grid) {
    GridCandidate cand;
    cand.arch = general.arch;
    cand.train = base_train_config(cfg, lr, mask, cfg.seed);
    cand.warm_start = std::make_shared<SeqModel>(make_init());
    candidates.push_back(std::move(cand));
  }
  const GridChoice pick = candidates.size() == 1
                              ? GridChoice{candidates[0].arch.hidden_size,
                                           candidates[0].train.learning_rate}
                              : select_by_cv(candidates, windows, cfg.cv_folds);
  if (picked) *picked = pick;
  auto [fit, val] = final_split(windows, cfg.final_val_fraction);
  TrainConfig tc = base_train_config(cfg, pick.learning_rate, mask, mix_seed(cfg.seed, 0xF7));
  return train(make_init(), fit, val, tc, nullptr);
}

SeqModel personalize(const SeqModel& general, PersonalizationMethod method,
                     std::span<const Window> windows, const PersonalizeConfig& cfg) {
  return personalize_outcome(general, method, windows, cfg).model;
}

PersonalizeOutcome personalize_outcome(const SeqModel& general, PersonalizationMethod method,
                                       std::span<const Window> windows,
                                       const PersonalizeConfig& cfg) {
  PersonalizeOutcome out;
  if (method != PersonalizationMethod::reuse &&
      static_cast<int>(windows.size()) < cfg.min_windows) {
    std::cerr << "warning: " << windows.size() << " windows < minimum " << cfg.min_windows
              << ", falling back to reuse\n";
    out.model = baseline_reuse(general);
    out.fallback = true;
    return out;
  }
  switch (method) {
    case PersonalizationMethod::reuse:
      out.model = baseline_reuse(general);
      return out;
    case PersonalizationMethod::personal_lstm:
      out.model =
          baseline_personal_lstm(windows, general.arch.input_width, general.arch.output_size,
                                 general.vocab_fingerprint, cfg, &out.picked);
      return out;
    case PersonalizationMethod::tl_fe:
      out.model = personalize_fe(general, windows, cfg, &out.picked);
      return out;
    case PersonalizationMethod::tl_ft:
      out.model = personalize_ft(general, windows, cfg, &out.picked);
      return out;
  }
  throw ContractError("unreachable personalization method");
}

SeqModel update_model(const SeqModel& personal, std::span<const Window> accumulated,
                      const PersonalizeConfig& cfg) {
  if (personal.method != "tl_fe" && personal.method != "tl_ft")
    throw ConfigError("only transfer-learned models support incremental updates (got '" +
                      personal.method + "')");
  if (accumulated.empty()) throw TrainingError("no windows to update on");
  auto [fit, val] = final_split(accumulated, cfg.final_val_fraction);
  // Warm start keeps the frozen pattern; the smallest grid rate is gentle
  // enough not to wash out the previous fit.
  const double lr = *std::min_element(cfg.lr_grid.begin(), cfg.lr_grid.end());
  TrainConfig tc = base_train_config(cfg, lr, freeze_mask_for(personal), mix_seed(cfg.seed, 0xD0));
  return train(personal, fit, val, tc, nullptr);
}

}  // namespace pelican
