#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pelican/errors.hpp"
#include "pelican/trace.hpp"
#include "pelican/types.hpp"

namespace pelican {

// ---------------------------------------------------------------------------
// Numerics: expression-friendly free functions.
// ---------------------------------------------------------------------------

/// Temperature softmax p_i = exp(z_i / tau) / sum_j exp(z_j / tau),
/// evaluated stably by subtracting the max. Requires tau > 0.
template <typename Derived>
VecX softmax(const Eigen::MatrixBase<Derived>& logits, double tau = 1.0) {
  if (!(tau > 0.0)) throw InputError("softmax: temperature must be > 0");
  ArrX z = logits.derived().template cast<Scalar>().array();
  z = (z - z.maxCoeff()) / tau;
  ArrX e = z.exp();
  return (e / e.sum()).matrix();
}

/// Column-wise temperature softmax for batches.
MatX softmax_columns(const MatX& logits, double tau = 1.0);

/// Indices of the k largest probabilities, ties resolved toward the lower index.
std::vector<int> topk(const VecX& probs, int k);

/// Vectorized logistic / tanh on array expressions; written via exp so Eigen
/// can use packet math for doubles.
template <typename Derived>
auto sigmoid_expr(const Eigen::ArrayBase<Derived>& a) {
  return ((-a).exp() + 1.0).inverse();
}
template <typename Derived>
auto tanh_expr(const Eigen::ArrayBase<Derived>& a) {
  return 1.0 - 2.0 * ((2.0 * a).exp() + 1.0).inverse();
}

// ---------------------------------------------------------------------------
// Model types.
// ---------------------------------------------------------------------------

struct ArchConfig {
  Index input_width = 0;
  Index hidden_size = 128;
  int n_lstm_layers = 2;
  double dropout_rate = 0.1;
  Index output_size = 0;

  void validate() const;  // throws ConfigError
};

/// One LSTM layer. Gate rows are stacked [input; forget; cell; output],
/// each block `hidden` rows tall.
struct LstmLayer {
  MatX w_input;  // 4H x D_in
  MatX w_recur;  // 4H x H
  VecX bias;     // 4H

  Index input_size() const { return w_input.cols(); }
  Index hidden_size() const { return w_recur.cols(); }
};

struct LinearLayer {
  MatX weight;  // out x in
  VecX bias;    // out
};

enum class ModelRole { general, personalized };

std::string to_string(ModelRole role);
ModelRole role_from_string(const std::string& name);

/// Stacked LSTM + linear head over fixed-length-2 windows. Parameters are
/// value types; training never mutates its input model.
struct SeqModel {
  ArchConfig arch;
  std::vector<LstmLayer> layers;
  LinearLayer head;
  std::string vocab_fingerprint;
  std::string base_fingerprint;  // parameter hash of the general parent, personalized models only
  ModelRole role = ModelRole::general;
  std::string method;            // personalization method tag; empty for general models
  double temperature = 1.0;      // inference temperature, > 0

  Index input_width() const { return arch.input_width; }
  Index output_size() const { return arch.output_size; }
  Index n_locations() const { return locations_from_width(arch.input_width); }

  void validate() const;  // shape consistency; throws ContractError
  bool same_parameters(const SeqModel& other) const;
};

/// Hash of the raw parameter bytes; changes whenever any weight changes.
std::string param_fingerprint(const SeqModel& model);

/// All parameters drawn uniformly from [-1/sqrt(H), +1/sqrt(H)] where H is
/// the owning layer's hidden size. Deterministic under `seed`.
SeqModel init_model(const ArchConfig& arch, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Forward / backward.
// ---------------------------------------------------------------------------

/// Batched forward pass: columns of x_prev2 / x_prev1 are encoded steps.
/// Returns class probabilities (output_size x batch) at temperature tau.
MatX forward_batch(const SeqModel& model, const MatX& x_prev2, const MatX& x_prev1, double tau);
MatX logits_batch(const SeqModel& model, const MatX& x_prev2, const MatX& x_prev1);

/// Single-window convenience wrapper; tau <= 0 means "use model.temperature".
VecX forward(const SeqModel& model, const Window& window, double tau = 0.0);

/// Fills per-column one-hot feature matrices for a span of windows.
void encode_batch(std::span<const Window> windows, Index n_locations, MatX& x_prev2, MatX& x_prev1,
                  VecXi& labels);

enum class GradWrt { parameters, inputs };

struct Gradients {
  std::vector<LstmLayer> layers;  // d loss / d parameters, same shapes as the model
  LinearLayer head;
  MatX x_prev2;  // d loss / d inputs (input_width x batch), inputs mode only
  MatX x_prev1;
};

/// Mean cross-entropy at temperature 1 over the batch plus analytic gradients
/// with respect to either all parameters or the encoded input vectors.
/// Dropout is inactive here; it only applies inside train().
double loss_and_grads(const SeqModel& model, std::span<const Window> batch, GradWrt wrt,
                      Gradients& out);

/// Matrix-input variant used by the gradient attack: inputs may be arbitrary
/// real vectors (softened one-hots). Returns mean cross-entropy; fills input
/// gradients.
double input_gradients(const SeqModel& model, const MatX& x_prev2, const MatX& x_prev1,
                       const VecXi& labels, MatX& d_prev2, MatX& d_prev1);

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-6;
  int batch_size = 128;
  int max_epochs = 200;
  int patience = 10;  // early-stop patience on validation loss
  /// Per-layer freeze flags: one per LSTM layer plus a final entry for the
  /// head. Empty means nothing is frozen.
  std::vector<bool> freeze_mask;
  std::uint64_t seed = 0;
};

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  int best_epoch = 0;   // 1-based; 0 when no epoch ran
  int epochs_run = 0;
};

/// AdamW (decoupled weight decay) with inverted dropout between LSTM layers,
/// early stopping on validation loss, and exact preservation of frozen
/// layers. Returns the parameters of the best validation epoch.
SeqModel train(const SeqModel& init, std::span<const Window> train_windows,
               std::span<const Window> val_windows, const TrainConfig& cfg,
               TrainHistory* history = nullptr);

// ---------------------------------------------------------------------------
// Model selection.
// ---------------------------------------------------------------------------

struct GridCandidate {
  ArchConfig arch;
  TrainConfig train;
  std::string vocab_fingerprint;  // stamped onto fresh inits
  std::string method;             // method tag for fresh inits
  /// When set, fold models start from these parameters instead of a fresh init.
  std::shared_ptr<const SeqModel> warm_start;
};

struct FoldSpec {
  Index train_end = 0;  // train on [0, train_end)
  Index val_begin = 0;  // validate on [val_begin, val_end)
  Index val_end = 0;
};

/// Expanding-window temporal folds: the initial training prefix holds
/// ceil(n / (k+1)) windows and the remainder splits into k contiguous
/// validation blocks (the last absorbs the remainder).
std::vector<FoldSpec> expanding_folds(Index n_windows, int k_folds);

struct GridSearchResult {
  GridCandidate best;
  std::vector<std::vector<double>> fold_accuracy;  // [candidate][fold], top-1 %
  std::vector<double> mean_accuracy;               // [candidate]
};

using ModelBuilder =
    std::function<SeqModel(const GridCandidate&, std::span<const Window>, std::span<const Window>)>;

/// Time-series grid search: trains every candidate on each expanding fold and
/// picks the best mean validation top-1 accuracy. Ties prefer the smaller
/// hidden size, then the smaller learning rate, then the earlier candidate.
/// A single candidate is returned unconditionally without training.
GridSearchResult grid_search_cv(const std::vector<GridCandidate>& candidates,
                                std::span<const Window> windows, int k_folds,
                                const ModelBuilder& build);

// ---------------------------------------------------------------------------
// Serialization. Versioned JSON, full round-trip precision.
// ---------------------------------------------------------------------------

inline constexpr int kModelFormatVersion = 1;

void save_model(const SeqModel& model, const std::string& path);
SeqModel load_model(const std::string& path);
/// Loads and verifies the vocabulary binding; throws ContractError on mismatch.
SeqModel load_model(const std::string& path, const DomainVocab& expected_vocab);

}  // namespace pelican
