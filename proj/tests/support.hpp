#pragma once

// Shared fixtures for the test binaries: finite-difference oracles, a crafted
// location-copy LSTM, and small deterministic traces.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "pelican/harness.hpp"
#include "pelican/rng.hpp"

namespace pelican::testsupport {

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

/// Loss-only path used by the finite-difference oracles: mean cross-entropy
/// at temperature 1, computed through the public forward pass.
inline double xent(const SeqModel& m, const MatX& xa, const MatX& xb, const VecXi& labels) {
  const MatX p = forward_batch(m, xa, xb, 1.0);
  double total = 0.0;
  for (Index j = 0; j < p.cols(); ++j)
    total -= std::log(std::max(p(labels(j), j), 1e-300));
  return total / static_cast<double>(p.cols());
}

/// Visits every parameter scalar in a fixed order (per layer: w_input,
/// w_recur, bias; then head weight, bias). flatten() uses the same order.
template <typename F>
void for_each_param(SeqModel& m, F&& f) {
  for (auto& layer : m.layers) {
    for (Index j = 0; j < layer.w_input.cols(); ++j)
      for (Index i = 0; i < layer.w_input.rows(); ++i) f(layer.w_input(i, j));
    for (Index j = 0; j < layer.w_recur.cols(); ++j)
      for (Index i = 0; i < layer.w_recur.rows(); ++i) f(layer.w_recur(i, j));
    for (Index i = 0; i < layer.bias.size(); ++i) f(layer.bias(i));
  }
  for (Index j = 0; j < m.head.weight.cols(); ++j)
    for (Index i = 0; i < m.head.weight.rows(); ++i) f(m.head.weight(i, j));
  for (Index i = 0; i < m.head.bias.size(); ++i) f(m.head.bias(i));
}

inline std::vector<double> flatten(const Gradients& g) {
  std::vector<double> out;
  for (const auto& layer : g.layers) {
    out.insert(out.end(), layer.w_input.data(), layer.w_input.data() + layer.w_input.size());
    out.insert(out.end(), layer.w_recur.data(), layer.w_recur.data() + layer.w_recur.size());
    out.insert(out.end(), layer.bias.data(), layer.bias.data() + layer.bias.size());
  }
  out.insert(out.end(), g.head.weight.data(), g.head.weight.data() + g.head.weight.size());
  out.insert(out.end(), g.head.bias.data(), g.head.bias.data() + g.head.bias.size());
  return out;
}

/// Central finite differences over every parameter.
inline std::vector<double> fd_param_grads(SeqModel m, std::span<const Window> batch, double eps) {
  MatX xa, xb;
  VecXi labels;
  encode_batch(batch, m.n_locations(), xa, xb, labels);
  std::vector<double> out;
  for_each_param(m, [&](Scalar& p) {
    const double keep = p;
    p = keep + eps;
    const double lp = xent(m, xa, xb, labels);
    p = keep - eps;
    const double lm = xent(m, xa, xb, labels);
    p = keep;
    out.push_back((lp - lm) / (2.0 * eps));
  });
  return out;
}

/// Central finite differences over both encoded input matrices.
inline void fd_input_grads(const SeqModel& m, MatX xa, MatX xb, const VecXi& labels, double eps,
                           MatX& d2, MatX& d1) {
  d2.resize(xa.rows(), xa.cols());
  d1.resize(xb.rows(), xb.cols());
  for (MatX* x : {&xa, &xb}) {
    MatX& d = (x == &xa) ? d2 : d1;
    for (Index j = 0; j < x->cols(); ++j) {
      for (Index i = 0; i < x->rows(); ++i) {
        const double keep = (*x)(i, j);
        (*x)(i, j) = keep + eps;
        const double lp = xent(m, xa, xb, labels);
        (*x)(i, j) = keep - eps;
        const double lm = xent(m, xa, xb, labels);
        (*x)(i, j) = keep;
        d(i, j) = (lp - lm) / (2.0 * eps);
      }
    }
  }
}

/// A hand-built single-layer model that copies the previous location: the
/// input gate saturates open, the forget gate shut, and the cell rows read
/// the location one-hot, so logits are ~7.6 on prev1's location and ~0
/// elsewhere. Ideal black box for inversion tests on self-transition data.
inline SeqModel location_copy_model(Index n_loc) {
  ArchConfig arch;
  arch.input_width = encoded_width(n_loc);
  arch.hidden_size = n_loc;
  arch.n_lstm_layers = 1;
  arch.dropout_rate = 0.0;
  arch.output_size = n_loc;
  SeqModel m = init_model(arch, 1);
  auto& layer = m.layers[0];
  const Index h = n_loc;
  layer.w_input.setZero();
  layer.w_recur.setZero();
  layer.bias.setZero();
  layer.bias.segment(0, h).setConstant(10.0);       // input gate ~ 1
  layer.bias.segment(h, h).setConstant(-10.0);      // forget gate ~ 0
  layer.bias.segment(3 * h, h).setConstant(10.0);   // output gate ~ 1
  for (Index j = 0; j < h; ++j) layer.w_input(2 * h + j, j) = 10.0;
  m.head.weight.setZero();
  m.head.bias.setZero();
  for (Index j = 0; j < n_loc; ++j) m.head.weight(j, j) = 10.0;
  return m;
}

inline Session make_session(const std::string& loc, std::int64_t entry, int duration) {
  Session s;
  s.location = loc;
  s.entry = entry;
  s.duration = duration;
  return s;
}

/// Continuity chain: each session starts where the previous one ended.
/// `plan` holds (location, duration) pairs; entry0 is absolute minutes.
inline Trace chain_trace(const std::string& user,
                         const std::vector<std::pair<std::string, int>>& plan,
                         std::int64_t entry0) {
  std::vector<Session> sessions;
  std::int64_t t = entry0;
  for (const auto& [loc, dur] : plan) {
    sessions.push_back(make_session(loc, t, dur));
    t += dur;
  }
  return Trace::create(user, std::move(sessions));
}

/// Random-but-valid windows over n locations, for shape/numeric tests.
inline std::vector<Window> random_windows(Index n_loc, int count, Rng& rng) {
  std::vector<Window> windows;
  for (int i = 0; i < count; ++i) {
    Window w;
    for (EncodedSession* e : {&w.prev2, &w.prev1}) {
      e->location = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_loc)));
      e->entry_slot = static_cast<int>(rng.below(48));
      e->duration_bin = static_cast<int>(rng.below(24));
      e->day_of_week = static_cast<int>(rng.below(7));
    }
    w.label = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_loc)));
    windows.push_back(w);
  }
  return windows;
}

}  // namespace pelican::testsupport
