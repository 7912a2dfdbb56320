#include "pelican/blackbox.hpp"

#include <cmath>

namespace pelican {

double round_confidence(double x, int precision) {
  if (precision >= 16) return x;
  const double scale = std::pow(10.0, precision);
  return std::round(x * scale) / scale;
}

BlackBoxHandle::BlackBoxHandle(SeqModel model, double temperature, int precision)
    : model_(std::move(model)),
      temperature_(temperature),
      precision_(precision),
      counter_(std::make_shared<std::atomic<std::uint64_t>>(0)) {}

BlackBoxHandle deploy(const SeqModel& model, double temperature, int precision) {
  model.validate();
  if (!(temperature > 0.0)) throw ConfigError("deploy: temperature must be > 0");
  if (precision < 1) throw ConfigError("deploy: precision must be at least 1");
  SeqModel sealed = model;
  sealed.temperature = temperature;
  return BlackBoxHandle(std::move(sealed), temperature, precision);
}

BlackBoxHandle::QueryResult BlackBoxHandle::query(const Window& window) const {
  counter_->fetch_add(1);
  MatX xa, xb;
  VecXi labels;
  encode_batch(std::span<const Window>(&window, 1), model_.n_locations(), xa, xb, labels);
  MatX logits = logits_batch(model_, xa, xb);
  QueryResult result;
  result.ranked = topk(softmax_columns(logits, 1.0).col(0), static_cast<int>(output_size()));
  result.confidences = softmax_columns(logits, temperature_).col(0);
  for (Index i = 0; i < result.confidences.size(); ++i)
    result.confidences(i) = round_confidence(result.confidences(i), precision_);
  return result;
}

MatX BlackBoxHandle::query_confidences(const MatX& x_prev2, const MatX& x_prev1) const {
  counter_->fetch_add(static_cast<std::uint64_t>(x_prev2.cols()));
  MatX probs = forward_batch(model_, x_prev2, x_prev1, temperature_);
  if (precision_ < 16) {
    const double scale = std::pow(10.0, precision_);
    probs = ((probs.array() * scale).round() / scale).matrix();
  }
  return probs;
}

std::vector<int> BlackBoxHandle::ranked_topk(const Window& window, int k) const {
  counter_->fetch_add(1);
  // Service path: rankings come from the raw distribution, so the privacy
  // temperature cannot perturb what the user sees.
  VecX probs = forward(model_, window, 1.0);
  return topk(probs, k);
}

std::string BlackBoxHandle::serialize() const {
  throw ContractError("black-box handles cannot be serialized; parameters stay sealed");
}

}  // namespace pelican
