#include "pelican/seqnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "pelican/rng.hpp"

namespace pelican {

using nlohmann::json;

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr Index kEvalChunk = 4096;

inline MatX sigmoid_mat(const MatX& a) {
  return (((-a.array()).exp() + 1.0).inverse()).matrix();
}

inline MatX tanh_mat(const MatX& a) {
  return (1.0 - 2.0 * (((2.0 * a.array()).exp() + 1.0).inverse())).matrix();
}

}  // namespace

// ---------------------------------------------------------------------------
// Types.
// ---------------------------------------------------------------------------

void ArchConfig::validate() const {
  if (input_width <= 0 || output_size <= 0) throw ConfigError("arch sizes must be positive");
  if (hidden_size <= 0) throw ConfigError("hidden size must be positive");
  if (n_lstm_layers <= 0) throw ConfigError("need at least one LSTM layer");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  if (locations_from_width(input_width) <= 0)
    throw ConfigError("input width leaves no room for the location block");
}

std::string to_string(ModelRole role) {
  return role == ModelRole::general ? "general" : "personalized";
}

ModelRole role_from_string(const std::string& name) {
  if (name == "general") return ModelRole::general;
  if (name == "personalized") return ModelRole::personalized;
  throw SerializationError("unknown model role: " + name);
}

void SeqModel::validate() const {
  arch.validate();
  if (!(temperature > 0.0)) throw ContractError("model temperature must be > 0");
  if (static_cast<int>(layers.size()) != arch.n_lstm_layers)
    throw ContractError("layer count does not match the architecture");
  Index in = arch.input_width;
  for (const auto& layer : layers) {
    const Index h = layer.hidden_size();
    if (layer.w_input.cols() != in || layer.w_input.rows() != 4 * h ||
        layer.w_recur.rows() != 4 * h || layer.bias.size() != 4 * h)
      throw ContractError("LSTM layer shapes are inconsistent");
    in = h;
  }
  if (layers.back().hidden_size() != arch.hidden_size)
    throw ContractError("top layer width does not match arch.hidden_size");
  if (head.weight.rows() != arch.output_size || head.weight.cols() != in ||
      head.bias.size() != arch.output_size)
    throw ContractError("head shapes are inconsistent");
}

bool SeqModel::same_parameters(const SeqModel& other) const {
  if (layers.size() != other.layers.size()) return false;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].w_input != other.layers[l].w_input) return false;
    if (layers[l].w_recur != other.layers[l].w_recur) return false;
    if (layers[l].bias != other.layers[l].bias) return false;
  }
  return head.weight == other.head.weight && head.bias == other.head.bias;
}

std::string param_fingerprint(const SeqModel& model) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const double* data, Index n) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(data);
    for (Index i = 0; i < n * static_cast<Index>(sizeof(double)); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& layer : model.layers) {
    mix(layer.w_input.data(), layer.w_input.size());
    mix(layer.w_recur.data(), layer.w_recur.size());
    mix(layer.bias.data(), layer.bias.size());
  }
  mix(model.head.weight.data(), model.head.weight.size());
  mix(model.head.bias.data(), model.head.bias.size());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

SeqModel init_model(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  auto fill = [&rng](double* data, Index n, double bound) {
    for (Index i = 0; i < n; ++i) data[i] = rng.uniform(-bound, bound);
  };
  SeqModel model;
  model.arch = arch;
  Index in = arch.input_width;
  for (int l = 0; l < arch.n_lstm_layers; ++l) {
    const Index h = arch.hidden_size;
    LstmLayer layer;
    layer.w_input.resize(4 * h, in);
    layer.w_recur.resize(4 * h, h);
    layer.bias.resize(4 * h);
    const double bound = 1.0 / std::sqrt(static_cast<double>(h));
    fill(layer.w_input.data(), layer.w_input.size(), bound);
    fill(layer.w_recur.data(), layer.w_recur.size(), bound);
    fill(layer.bias.data(), layer.bias.size(), bound);
    model.layers.push_back(std::move(layer));
    in = h;
  }
  model.head.weight.resize(arch.output_size, in);
  model.head.bias.resize(arch.output_size);
  const double head_bound = 1.0 / std::sqrt(static_cast<double>(in));
  fill(model.head.weight.data(), model.head.weight.size(), head_bound);
  fill(model.head.bias.data(), model.head.bias.size(), head_bound);
  model.validate();
  return model;
}

// ---------------------------------------------------------------------------
// Numerics.
// ---------------------------------------------------------------------------

MatX softmax_columns(const MatX& logits, double tau) {
  if (!(tau > 0.0)) throw InputError("softmax: temperature must be > 0");
  ArrXX z = logits.array();
  z.rowwise() -= logits.colwise().maxCoeff().array();
  z /= tau;
  ArrXX e = z.exp();
  e.rowwise() /= e.colwise().sum();
  return e.matrix();
}

std::vector<int> topk(const VecX& probs, int k) {
  if (k < 1 || k > probs.size())
    throw InputError("topk: k must lie in [1, " + std::to_string(probs.size()) + "]");
  std::vector<int> order(static_cast<std::size_t>(probs.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&probs](int a, int b) { return probs(a) > probs(b); });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

void encode_batch(std::span<const Window> windows, Index n_locations, MatX& x_prev2, MatX& x_prev1,
                  VecXi& labels) {
  const Index n = static_cast<Index>(windows.size());
  const Index width = encoded_width(n_locations);
  x_prev2.setZero(width, n);
  x_prev1.setZero(width, n);
  labels.resize(n);
  for (Index j = 0; j < n; ++j) {
    encode_features_into(windows[static_cast<std::size_t>(j)].prev2, n_locations, x_prev2, j);
    encode_features_into(windows[static_cast<std::size_t>(j)].prev1, n_locations, x_prev1, j);
    labels(j) = windows[static_cast<std::size_t>(j)].label;
  }
}

// ---------------------------------------------------------------------------
// Forward / backward core.
// ---------------------------------------------------------------------------

namespace {

struct StepState {
  MatX x;  // layer input (post-dropout of the layer below)
  MatX i, f, g, o, c, tc, h;
};

struct LayerCache {
  StepState step[2];
  MatX mask[2];  // inverted-dropout masks on this layer's outputs (empty when inactive)
};

void lstm_step(const LstmLayer& layer, MatX x, const StepState* prev, StepState& out,
               bool keep_input) {
  const Index h = layer.hidden_size();
  MatX a = layer.w_input * x;
  if (prev) a.noalias() += layer.w_recur * prev->h;
  a.colwise() += layer.bias;
  out.i = sigmoid_mat(a.topRows(h));
  out.f = sigmoid_mat(a.middleRows(h, h));
  out.g = tanh_mat(a.middleRows(2 * h, h));
  out.o = sigmoid_mat(a.bottomRows(h));
  out.c = out.i.cwiseProduct(out.g);
  if (prev) out.c.noalias() += out.f.cwiseProduct(prev->c);
  out.tc = tanh_mat(out.c);
  out.h = out.o.cwiseProduct(out.tc);
  if (keep_input) out.x = std::move(x);
}

/// Full cached forward; dropout_rng == nullptr disables dropout.
MatX forward_cached(const SeqModel& model, const MatX& xa, const MatX& xb,
                    std::vector<LayerCache>& caches, Rng* dropout_rng) {
  const std::size_t n_layers = model.layers.size();
  caches.assign(n_layers, {});
  MatX ina = xa, inb = xb;
  for (std::size_t l = 0; l < n_layers; ++l) {
    LayerCache& cache = caches[l];
    lstm_step(model.layers[l], std::move(ina), nullptr, cache.step[0], true);
    lstm_step(model.layers[l], std::move(inb), &cache.step[0], cache.step[1], true);
    ina = cache.step[0].h;
    inb = cache.step[1].h;
    const bool drop = dropout_rng != nullptr && model.arch.dropout_rate > 0.0 &&
                      l + 1 < n_layers;  // between LSTM layers only
    if (drop) {
      const double rate = model.arch.dropout_rate;
      const double scale = 1.0 / (1.0 - rate);
      for (int t = 0; t < 2; ++t) {
        MatX& m = cache.mask[t];
        m.resize(ina.rows(), ina.cols());
        for (Index j = 0; j < m.cols(); ++j)
          for (Index i = 0; i < m.rows(); ++i)
            m(i, j) = dropout_rng->uniform() < rate ? 0.0 : scale;
      }
      ina = ina.cwiseProduct(cache.mask[0]);
      inb = inb.cwiseProduct(cache.mask[1]);
    }
  }
  MatX logits = model.head.weight * inb;
  logits.colwise() += model.head.bias;
  return logits;
}

double mean_cross_entropy(const MatX& probs, const VecXi& labels) {
  double loss = 0.0;
  for (Index j = 0; j < probs.cols(); ++j)
    loss -= std::log(std::max(probs(labels(j), j), std::numeric_limits<double>::min()));
  return loss / static_cast<double>(probs.cols());
}

/// Backward through the cached forward. dZ is d loss / d logits.
void backward_core(const SeqModel& model, std::vector<LayerCache>& caches, const MatX& dz,
                   Gradients* param_grads, MatX* dxa, MatX* dxb) {
  const std::size_t n_layers = model.layers.size();
  const Index batch = dz.cols();
  if (param_grads) {
    param_grads->layers.clear();
    param_grads->layers.resize(n_layers);
    const StepState& top = caches[n_layers - 1].step[1];
    param_grads->head.weight.noalias() = dz * top.h.transpose();
    param_grads->head.bias = dz.rowwise().sum();
  }
  MatX dh_b = model.head.weight.transpose() * dz;
  MatX dh_a = MatX::Zero(dh_b.rows(), batch);

  for (std::size_t l = n_layers; l-- > 0;) {
    LayerCache& cache = caches[l];
    const LstmLayer& layer = model.layers[l];
    const StepState& sa = cache.step[0];
    const StepState& sb = cache.step[1];
    const Index h = layer.hidden_size();

    // Step b (second time step).
    MatX dc_b = dh_b.cwiseProduct(sb.o).cwiseProduct(
        (1.0 - sb.tc.array().square()).matrix());
    MatX da(4 * h, batch);
    da.topRows(h) = dc_b.cwiseProduct(sb.g).cwiseProduct(
        sb.i.cwiseProduct((1.0 - sb.i.array()).matrix()));
    da.middleRows(h, h) = dc_b.cwiseProduct(sa.c).cwiseProduct(
        sb.f.cwiseProduct((1.0 - sb.f.array()).matrix()));
    da.middleRows(2 * h, h) =
        dc_b.cwiseProduct(sb.i).cwiseProduct((1.0 - sb.g.array().square()).matrix());
    da.bottomRows(h) = dh_b.cwiseProduct(sb.tc).cwiseProduct(
        sb.o.cwiseProduct((1.0 - sb.o.array()).matrix()));

    if (param_grads) {
      LstmLayer& g = param_grads->layers[l];
      g.w_input.noalias() = da * sb.x.transpose();
      g.w_recur.noalias() = da * sa.h.transpose();
      g.bias = da.rowwise().sum();
    }
    MatX dx_b = layer.w_input.transpose() * da;
    dh_a.noalias() += layer.w_recur.transpose() * da;
    MatX dc_a = dc_b.cwiseProduct(sb.f);

    // Step a (first time step; zero initial state, so the forget path ends here).
    dc_a.noalias() += dh_a.cwiseProduct(sa.o).cwiseProduct(
        (1.0 - sa.tc.array().square()).matrix());
    da.topRows(h) = dc_a.cwiseProduct(sa.g).cwiseProduct(
        sa.i.cwiseProduct((1.0 - sa.i.array()).matrix()));
    da.middleRows(h, h).setZero();
    da.middleRows(2 * h, h) =
        dc_a.cwiseProduct(sa.i).cwiseProduct((1.0 - sa.g.array().square()).matrix());
    da.bottomRows(h) = dh_a.cwiseProduct(sa.tc).cwiseProduct(
        sa.o.cwiseProduct((1.0 - sa.o.array()).matrix()));

    if (param_grads) {
      LstmLayer& g = param_grads->layers[l];
      g.w_input.noalias() += da * sa.x.transpose();
      g.bias += da.rowwise().sum();
    }
    MatX dx_a = layer.w_input.transpose() * da;

    if (l > 0) {
      // Route through the lower junction's dropout mask.
      const LayerCache& below = caches[l - 1];
      if (below.mask[0].size() > 0) {
        dh_a = dx_a.cwiseProduct(below.mask[0]);
        dh_b = dx_b.cwiseProduct(below.mask[1]);
      } else {
        dh_a = std::move(dx_a);
        dh_b = std::move(dx_b);
      }
    } else {
      if (dxa) *dxa = std::move(dx_a);
      if (dxb) *dxb = std::move(dx_b);
    }
  }
}

}  // namespace

MatX logits_batch(const SeqModel& model, const MatX& x_prev2, const MatX& x_prev1) {
  if (x_prev2.rows() != model.arch.input_width || x_prev1.rows() != model.arch.input_width ||
      x_prev2.cols() != x_prev1.cols())
    throw ContractError("input width does not match the model architecture");
  MatX ina = x_prev2, inb = x_prev1;
  StepState sa, sb;
  for (const auto& layer : model.layers) {
    lstm_step(layer, std::move(ina), nullptr, sa, false);
    lstm_step(layer, std::move(inb), &sa, sb, false);
    ina = std::move(sa.h);
    inb = std::move(sb.h);
    sa = StepState{};
    sb = StepState{};
  }
  MatX logits = model.head.weight * inb;
  logits.colwise() += model.head.bias;
  return logits;
}

MatX forward_batch(const SeqModel& model, const MatX& x_prev2, const MatX& x_prev1, double tau) {
  return softmax_columns(logits_batch(model, x_prev2, x_prev1), tau);
}

VecX forward(const SeqModel& model, const Window& window, double tau) {
  const double temperature = tau > 0.0 ? tau : model.temperature;
  MatX xa, xb;
  VecXi labels;
  encode_batch(std::span<const Window>(&window, 1), model.n_locations(), xa, xb, labels);
  return forward_batch(model, xa, xb, temperature).col(0);
}

double loss_and_grads(const SeqModel& model, std::span<const Window> batch, GradWrt wrt,
                      Gradients& out) {
  if (batch.empty()) throw InputError("loss_and_grads needs at least one window");
  MatX xa, xb;
  VecXi labels;
  encode_batch(batch, model.n_locations(), xa, xb, labels);
  std::vector<LayerCache> caches;
  MatX logits = forward_cached(model, xa, xb, caches, nullptr);
  MatX probs = softmax_columns(logits, 1.0);
  const double loss = mean_cross_entropy(probs, labels);
  MatX dz = probs;
  for (Index j = 0; j < dz.cols(); ++j) dz(labels(j), j) -= 1.0;
  dz /= static_cast<double>(dz.cols());
  if (wrt == GradWrt::parameters) {
    backward_core(model, caches, dz, &out, nullptr, nullptr);
  } else {
    backward_core(model, caches, dz, nullptr, &out.x_prev2, &out.x_prev1);
  }
  return loss;
}

double input_gradients(const SeqModel& model, const MatX& x_prev2, const MatX& x_prev1,
                       const VecXi& labels, MatX& d_prev2, MatX& d_prev1) {
  std::vector<LayerCache> caches;
  MatX logits = forward_cached(model, x_prev2, x_prev1, caches, nullptr);
  MatX probs = softmax_columns(logits, 1.0);
  const double loss = mean_cross_entropy(probs, labels);
  MatX dz = probs;
  for (Index j = 0; j < dz.cols(); ++j) dz(labels(j), j) -= 1.0;
  dz /= static_cast<double>(dz.cols());
  backward_core(model, caches, dz, nullptr, &d_prev2, &d_prev1);
  return loss;
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

namespace {

struct AdamTensors {
  MatX m_w_input, v_w_input, m_w_recur, v_w_recur;
  VecX m_bias, v_bias;
};

template <typename T>
void adamw_step(T& param, const T& grad, T& m, T& v, double lr, double wd, double bc1, double bc2) {
  m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * grad;
  v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * grad.cwiseProduct(grad);
  param.array() -=
      lr * ((m.array() / bc1) / ((v.array() / bc2).sqrt() + kAdamEps) + wd * param.array());
}

double eval_loss(const SeqModel& model, const MatX& xa, const MatX& xb, const VecXi& labels) {
  double total = 0.0;
  const Index n = xa.cols();
  for (Index start = 0; start < n; start += kEvalChunk) {
    const Index len = std::min(kEvalChunk, n - start);
    MatX probs = softmax_columns(
        logits_batch(model, xa.middleCols(start, len), xb.middleCols(start, len)), 1.0);
    for (Index j = 0; j < len; ++j)
      total -= std::log(std::max(probs(labels(start + j), j), std::numeric_limits<double>::min()));
  }
  return total / static_cast<double>(n);
}

}  // namespace

SeqModel train(const SeqModel& init, std::span<const Window> train_windows,
               std::span<const Window> val_windows, const TrainConfig& cfg,
               TrainHistory* history) {
  init.validate();
  if (cfg.max_epochs < 0) throw ConfigError("max_epochs must be non-negative");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (cfg.patience < 0) throw ConfigError("patience must be non-negative");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");

  const std::size_t n_layers = init.layers.size();
  std::vector<bool> freeze = cfg.freeze_mask;
  if (freeze.empty()) freeze.assign(n_layers + 1, false);
  if (freeze.size() != n_layers + 1)
    throw ConfigError("freeze_mask must cover every LSTM layer plus the head");
  if (std::all_of(freeze.begin(), freeze.end(), [](bool b) { return b; }))
    throw ConfigError("all layers frozen: nothing to train");

  if (history) *history = TrainHistory{};
  SeqModel model = init;
  if (cfg.max_epochs == 0) return model;
  if (train_windows.empty()) throw TrainingError("no training windows");

  const Index n_loc = model.n_locations();
  MatX train_xa, train_xb, val_xa, val_xb;
  VecXi train_labels, val_labels;
  encode_batch(train_windows, n_loc, train_xa, train_xb, train_labels);
  if (!val_windows.empty()) encode_batch(val_windows, n_loc, val_xa, val_xb, val_labels);

  Rng rng(cfg.seed);
  std::vector<Index> order(train_windows.size());
  std::iota(order.begin(), order.end(), Index{0});

  std::vector<AdamTensors> adam(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (freeze[l]) continue;
    const auto& layer = model.layers[l];
    adam[l].m_w_input = MatX::Zero(layer.w_input.rows(), layer.w_input.cols());
    adam[l].v_w_input = adam[l].m_w_input;
    adam[l].m_w_recur = MatX::Zero(layer.w_recur.rows(), layer.w_recur.cols());
    adam[l].v_w_recur = adam[l].m_w_recur;
    adam[l].m_bias = VecX::Zero(layer.bias.size());
    adam[l].v_bias = adam[l].m_bias;
  }
  MatX head_mw, head_vw;
  VecX head_mb, head_vb;
  const bool train_head = !freeze.back();
  if (train_head) {
    head_mw = MatX::Zero(model.head.weight.rows(), model.head.weight.cols());
    head_vw = head_mw;
    head_mb = VecX::Zero(model.head.bias.size());
    head_vb = head_mb;
  }

  const Index width = model.arch.input_width;
  const Index batch_cap = std::min<Index>(cfg.batch_size, static_cast<Index>(order.size()));
  MatX batch_xa(width, batch_cap), batch_xb(width, batch_cap);
  VecXi batch_labels(batch_cap);

  SeqModel best = model;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int bad_epochs = 0;
  long long adam_t = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_cap)) {
      const Index len =
          std::min<Index>(batch_cap, static_cast<Index>(order.size() - start));
      for (Index j = 0; j < len; ++j) {
        const Index src = order[start + static_cast<std::size_t>(j)];
        batch_xa.col(j) = train_xa.col(src);
        batch_xb.col(j) = train_xb.col(src);
        batch_labels(j) = train_labels(src);
      }
      std::vector<LayerCache> caches;
      const bool want_dropout = model.arch.dropout_rate > 0.0 && n_layers > 1;
      MatX logits = forward_cached(model, batch_xa.leftCols(len), batch_xb.leftCols(len), caches,
                                   want_dropout ? &rng : nullptr);
      MatX probs = softmax_columns(logits, 1.0);
      double batch_loss = 0.0;
      MatX dz = probs;
      for (Index j = 0; j < len; ++j) {
        batch_loss -= std::log(std::max(probs(batch_labels(j), j),
                                        std::numeric_limits<double>::min()));
        dz(batch_labels(j), j) -= 1.0;
      }
      batch_loss /= static_cast<double>(len);
      dz /= static_cast<double>(len);
      Gradients grads;
      backward_core(model, caches, dz, &grads, nullptr, nullptr);

      ++adam_t;
      const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(adam_t));
      const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(adam_t));
      for (std::size_t l = 0; l < n_layers; ++l) {
        if (freeze[l]) continue;
        adamw_step(model.layers[l].w_input, grads.layers[l].w_input, adam[l].m_w_input,
                   adam[l].v_w_input, cfg.learning_rate, cfg.weight_decay, bc1, bc2);
        adamw_step(model.layers[l].w_recur, grads.layers[l].w_recur, adam[l].m_w_recur,
                   adam[l].v_w_recur, cfg.learning_rate, cfg.weight_decay, bc1, bc2);
        adamw_step(model.layers[l].bias, grads.layers[l].bias, adam[l].m_bias, adam[l].v_bias,
                   cfg.learning_rate, cfg.weight_decay, bc1, bc2);
      }
      if (train_head) {
        adamw_step(model.head.weight, grads.head.weight, head_mw, head_vw, cfg.learning_rate,
                   cfg.weight_decay, bc1, bc2);
        adamw_step(model.head.bias, grads.head.bias, head_mb, head_vb, cfg.learning_rate,
                   cfg.weight_decay, bc1, bc2);
      }
      epoch_loss += batch_loss * static_cast<double>(len);
      seen += static_cast<std::size_t>(len);
    }
    epoch_loss /= static_cast<double>(seen);
    if (history) {
      history->train_loss.push_back(epoch_loss);
      history->epochs_run = epoch;
    }

    if (val_windows.empty()) continue;
    const double val = eval_loss(model, val_xa, val_xb, val_labels);
    if (history) history->val_loss.push_back(val);
    if (val < best_val) {
      best_val = val;
      best = model;
      best_epoch = epoch;
      bad_epochs = 0;
    } else if (++bad_epochs > cfg.patience) {
      break;
    }
  }

  if (!val_windows.empty() && best_epoch > 0) {
    if (history) history->best_epoch = best_epoch;
    return best;
  }
  if (history) history->best_epoch = history->epochs_run;
  return model;
}

// ---------------------------------------------------------------------------
// Model selection.
// ---------------------------------------------------------------------------

std::vector<FoldSpec> expanding_folds(Index n_windows, int k_folds) {
  if (k_folds < 1) throw FoldError("need at least one fold");
  if (n_windows < k_folds + 1)
    throw FoldError("too few windows (" + std::to_string(n_windows) + ") for " +
                    std::to_string(k_folds) + " expanding folds");
  const Index prefix = (n_windows + k_folds) / (k_folds + 1);  // ceil(n / (k+1))
  const Index block = (n_windows - prefix) / k_folds;
  std::vector<FoldSpec> folds;
  for (int i = 0; i < k_folds; ++i) {
    FoldSpec f;
    f.val_begin = prefix + block * i;
    f.val_end = (i + 1 == k_folds) ? n_windows : prefix + block * (i + 1);
    f.train_end = f.val_begin;
    folds.push_back(f);
  }
  return folds;
}

namespace {

double top1_accuracy(const SeqModel& model, std::span<const Window> windows) {
  if (windows.empty()) return 0.0;
  MatX xa, xb;
  VecXi labels;
  encode_batch(windows, model.n_locations(), xa, xb, labels);
  MatX logits = logits_batch(model, xa, xb);
  int hits = 0;
  for (Index j = 0; j < logits.cols(); ++j) {
    Index arg = 0;
    logits.col(j).maxCoeff(&arg);  // Eigen returns the lowest tied index
    if (static_cast<int>(arg) == labels(j)) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(logits.cols());
}

}  // namespace

GridSearchResult grid_search_cv(const std::vector<GridCandidate>& candidates,
                                std::span<const Window> windows, int k_folds,
                                const ModelBuilder& build) {
  if (candidates.empty()) throw ConfigError("grid search needs at least one candidate");
  GridSearchResult result;
  if (candidates.size() == 1) {
    result.best = candidates.front();
    result.mean_accuracy.assign(1, 0.0);
    return result;
  }
  const auto folds = expanding_folds(static_cast<Index>(windows.size()), k_folds);
  result.fold_accuracy.assign(candidates.size(), {});
  result.mean_accuracy.assign(candidates.size(), 0.0);
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    double sum = 0.0;
    for (const auto& fold : folds) {
      auto train_span = windows.subspan(0, static_cast<std::size_t>(fold.train_end));
      auto val_span = windows.subspan(static_cast<std::size_t>(fold.val_begin),
                                      static_cast<std::size_t>(fold.val_end - fold.val_begin));
      SeqModel model = build(candidates[c], train_span, val_span);
      const double acc = top1_accuracy(model, val_span);
      result.fold_accuracy[c].push_back(acc);
      sum += acc;
    }
    result.mean_accuracy[c] = sum / static_cast<double>(folds.size());
  }
  std::size_t best = 0;
  for (std::size_t c = 1; c < candidates.size(); ++c) {
    const double delta = result.mean_accuracy[c] - result.mean_accuracy[best];
    if (delta > 0.0) {
      best = c;
    } else if (delta == 0.0) {
      const auto& a = candidates[c];
      const auto& b = candidates[best];
      if (a.arch.hidden_size < b.arch.hidden_size ||
          (a.arch.hidden_size == b.arch.hidden_size &&
           a.train.learning_rate < b.train.learning_rate))
        best = c;
    }
  }
  result.best = candidates[best];
  return result;
}

// ---------------------------------------------------------------------------
// Serialization.
// ---------------------------------------------------------------------------

namespace {

json matrix_to_json(const MatX& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

json vector_to_json(const VecX& v) {
  json arr = json::array();
  for (Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

MatX matrix_from_json(const json& rows, Index expect_rows, Index expect_cols) {
  if (!rows.is_array() || static_cast<Index>(rows.size()) != expect_rows)
    throw SerializationError("matrix row count mismatch in model file");
  MatX m(expect_rows, expect_cols);
  for (Index i = 0; i < expect_rows; ++i) {
    const json& row = rows[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Index>(row.size()) != expect_cols)
      throw SerializationError("matrix column count mismatch in model file");
    for (Index j = 0; j < expect_cols; ++j) m(i, j) = row[static_cast<std::size_t>(j)].get<double>();
  }
  return m;
}

VecX vector_from_json(const json& arr, Index expect) {
  if (!arr.is_array() || static_cast<Index>(arr.size()) != expect)
    throw SerializationError("vector length mismatch in model file");
  VecX v(expect);
  for (Index i = 0; i < expect; ++i) v(i) = arr[static_cast<std::size_t>(i)].get<double>();
  return v;
}

}  // namespace

void save_model(const SeqModel& model, const std::string& path) {
  model.validate();
  json doc;
  doc["format"] = "pelican-seqmodel";
  doc["version"] = kModelFormatVersion;
  doc["arch"] = {{"input_width", model.arch.input_width},
                 {"hidden_size", model.arch.hidden_size},
                 {"n_lstm_layers", model.arch.n_lstm_layers},
                 {"dropout_rate", model.arch.dropout_rate},
                 {"output_size", model.arch.output_size}};
  doc["vocab_fingerprint"] = model.vocab_fingerprint;
  doc["base_fingerprint"] = model.base_fingerprint;
  doc["role"] = to_string(model.role);
  doc["method"] = model.method;
  doc["temperature"] = model.temperature;
  json layers = json::array();
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    layers.push_back({{"hidden_size", model.layers[l].hidden_size()},
                      {"w_input", matrix_to_json(model.layers[l].w_input)},
                      {"w_recur", matrix_to_json(model.layers[l].w_recur)},
                      {"bias", vector_to_json(model.layers[l].bias)}});
  }
  doc["params"] = {{"lstm", std::move(layers)},
                   {"head",
                    {{"weight", matrix_to_json(model.head.weight)},
                     {"bias", vector_to_json(model.head.bias)}}}};
  std::ofstream out(path);
  if (!out) throw SerializationError("cannot write model file: " + path);
  out << doc.dump(1) << "\n";
  if (!out) throw SerializationError("write failed: " + path);
}

SeqModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SerializationError("cannot open model file: " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw SerializationError("model file is not valid JSON: " + std::string(e.what()));
  }
  try {
    if (doc.value("format", "") != "pelican-seqmodel")
      throw SerializationError("not a model file: " + path);
    if (doc.at("version").get<int>() != kModelFormatVersion)
      throw SerializationError("unsupported model file version " +
                               doc.at("version").dump());
    SeqModel model;
    const json& arch = doc.at("arch");
    model.arch.input_width = arch.at("input_width").get<Index>();
    model.arch.hidden_size = arch.at("hidden_size").get<Index>();
    model.arch.n_lstm_layers = arch.at("n_lstm_layers").get<int>();
    model.arch.dropout_rate = arch.at("dropout_rate").get<double>();
    model.arch.output_size = arch.at("output_size").get<Index>();
    model.vocab_fingerprint = doc.at("vocab_fingerprint").get<std::string>();
    model.base_fingerprint = doc.value("base_fingerprint", "");
    model.role = role_from_string(doc.at("role").get<std::string>());
    model.method = doc.value("method", "");
    model.temperature = doc.at("temperature").get<double>();
    const json& lstm = doc.at("params").at("lstm");
    Index in_width = model.arch.input_width;
    for (const json& entry : lstm) {
      LstmLayer layer;
      const Index h = entry.at("hidden_size").get<Index>();
      layer.w_input = matrix_from_json(entry.at("w_input"), 4 * h, in_width);
      layer.w_recur = matrix_from_json(entry.at("w_recur"), 4 * h, h);
      layer.bias = vector_from_json(entry.at("bias"), 4 * h);
      model.layers.push_back(std::move(layer));
      in_width = h;
    }
    const json& head = doc.at("params").at("head");
    model.head.weight = matrix_from_json(head.at("weight"), model.arch.output_size, in_width);
    model.head.bias = vector_from_json(head.at("bias"), model.arch.output_size);
    model.validate();
    return model;
  } catch (const json::exception& e) {
    throw SerializationError("model file is missing fields: " + std::string(e.what()));
  } catch (const ContractError& e) {
    throw SerializationError(std::string("model file inconsistent: ") + e.what());
  }
}

SeqModel load_model(const std::string& path, const DomainVocab& expected_vocab) {
  SeqModel model = load_model(path);
  if (model.vocab_fingerprint != expected_vocab.fingerprint())
    throw ContractError("model was trained against a different vocabulary");
  return model;
}

}  // namespace pelican
