#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pelican/seqnet.hpp"

namespace pelican {

/// Deployment surface of a personalized model. Callers obtain ranked labels
/// and confidence scores; parameters and the privacy temperature stay sealed
/// inside. Ranked labels are computed at full precision (temperature scaling
/// preserves the ordering), reported confidences are temperature-scaled and
/// rounded to `precision` decimals.
class BlackBoxHandle {
 public:
  struct QueryResult {
    std::vector<int> ranked;  // all labels, most confident first
    VecX confidences;         // rounded, indexed by label
  };

  QueryResult query(const Window& window) const;

  /// Batched query: columns are encoded steps. Returns rounded confidences
  /// (output_size x batch).
  MatX query_confidences(const MatX& x_prev2, const MatX& x_prev1) const;

  /// Top-k labels at full precision (service path).
  std::vector<int> ranked_topk(const Window& window, int k) const;

  Index output_size() const { return model_.output_size(); }
  Index input_width() const { return model_.input_width(); }
  Index n_locations() const { return model_.n_locations(); }
  const std::string& vocab_fingerprint() const { return model_.vocab_fingerprint; }
  int precision() const { return precision_; }

  /// Total encoded steps answered so far (each window counts once).
  std::uint64_t query_count() const { return counter_->load(); }

  /// Handles are intentionally not serializable; always throws ContractError.
  std::string serialize() const;

 private:
  friend BlackBoxHandle deploy(const SeqModel& model, double temperature, int precision);
  BlackBoxHandle(SeqModel model, double temperature, int precision);

  SeqModel model_;
  double temperature_;
  int precision_;
  std::shared_ptr<std::atomic<std::uint64_t>> counter_;
};

/// Wraps a personalized model for serving. Throws ConfigError unless
/// temperature > 0 and precision >= 1. Precision of 16 or more reports raw
/// confidences (doubles carry no more decimal signal than that).
BlackBoxHandle deploy(const SeqModel& model, double temperature, int precision = 4);

/// round(x, precision) half away from zero.
double round_confidence(double x, int precision);

}  // namespace pelican
