#pragma once

#include <span>
#include <string>
#include <vector>

#include "pelican/seqnet.hpp"

namespace pelican {

enum class PersonalizationMethod { reuse, personal_lstm, tl_fe, tl_ft };

std::string to_string(PersonalizationMethod m);
PersonalizationMethod method_from_string(const std::string& name);

struct PersonalizeConfig {
  std::vector<double> lr_grid{1e-3, 1e-4};
  std::vector<Index> hidden_grid{32, 64};  // appended/fresh layer widths
  int cv_folds = 3;
  int min_windows = 30;  // below this, personalization falls back to reuse
  double final_val_fraction = 0.15;  // tail share held out for the final fit's early stop
  double weight_decay = 1e-6;
  int batch_size = 128;
  int max_epochs = 60;
  int patience = 8;
  double dropout_rate = 0.1;
  std::uint64_t seed = 0;
};

/// Grid pick reported back to callers that track chosen hyperparameters.
struct GridPick {
  Index hidden = 0;
  double learning_rate = 0.0;
};

/// The general model relabelled for the target; no training, shared parameters.
SeqModel baseline_reuse(const SeqModel& general);

/// Fresh 1-layer LSTM + linear head trained from scratch on the target's
/// windows; never reads the general model.
SeqModel baseline_personal_lstm(std::span<const Window> windows, Index input_width,
                                Index output_size, const std::string& vocab_fingerprint,
                                const PersonalizeConfig& cfg, GridPick* picked = nullptr);

/// Transfer learning, feature extraction: the general LSTM stack is frozen,
/// one new LSTM layer and a fresh head are appended and trained.
SeqModel personalize_fe(const SeqModel& general, std::span<const Window> windows,
                        const PersonalizeConfig& cfg, GridPick* picked = nullptr);

/// Transfer learning, fine tuning: architecture unchanged, layer 1 frozen,
/// the remaining LSTM layers and the head are updated from their general
/// values.
SeqModel personalize_ft(const SeqModel& general, std::span<const Window> windows,
                        const PersonalizeConfig& cfg, GridPick* picked = nullptr);

/// Dispatch plus the minimum-data guard: fewer than cfg.min_windows windows
/// returns baseline_reuse and records a warning on stderr.
SeqModel personalize(const SeqModel& general, PersonalizationMethod method,
                     std::span<const Window> windows, const PersonalizeConfig& cfg);

struct PersonalizeOutcome {
  SeqModel model;
  bool fallback = false;  // fell back to reuse for lack of data
  GridPick picked;
};

/// Same dispatch, with the fallback flag and the grid pick surfaced.
PersonalizeOutcome personalize_outcome(const SeqModel& general, PersonalizationMethod method,
                                       std::span<const Window> windows,
                                       const PersonalizeConfig& cfg);

/// Periodic refresh: warm-starts from the personal model's parameters, keeps
/// its freeze pattern and retrains on the accumulated windows. Only TL-based
/// models support updates.
SeqModel update_model(const SeqModel& personal, std::span<const Window> accumulated,
                      const PersonalizeConfig& cfg);

}  // namespace pelican
