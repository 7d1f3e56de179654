#pragma once

// Losses, the warm-up + cosine learning-rate schedule, and AdamW.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "ethodec/checkpoint.hpp"
#include "ethodec/tensor.hpp"

namespace ethodec {

// Mean softmax cross-entropy. logits is [C] with one id, or [B, C] with B ids.
inline Tensor softmax_ce_loss(Tape& tape, const Tensor& logits,
                              const std::vector<std::size_t>& ids) {
  const bool batched = logits.rank() == 2;
  if (logits.rank() != 1 && !batched) {
    throw DimensionError("softmax_ce_loss: logits must be [C] or [B,C], got " +
                         shape_str(logits.shape()));
  }
  const std::size_t rows = batched ? logits.dim(0) : 1;
  const std::size_t classes = batched ? logits.dim(1) : logits.dim(0);
  if (ids.size() != rows) {
    throw DimensionError("softmax_ce_loss: " + std::to_string(ids.size()) +
                         " targets for " + std::to_string(rows) + " rows");
  }
  std::vector<double> probs(rows * classes);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (ids[r] >= classes) {
      throw ContractError("softmax_ce_loss: class id " +
                          std::to_string(ids[r]) + " outside [0, " +
                          std::to_string(classes) + ")");
    }
    const double* row = logits.data().data() + r * classes;
    const double hi = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[r * classes + c] = std::exp(row[c] - hi);
      z += probs[r * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] /= z;
    total += hi + std::log(z) - row[ids[r]];
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return detail::finish(
      tape, "softmax_ce_loss", {logits}, Tensor::scalar(total * inv_rows),
      [logits, ids, probs = std::move(probs), classes,
       inv_rows](std::span<const double> dy) mutable {
        std::vector<double> dx(probs.size());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = probs[i];
        for (std::size_t r = 0; r < ids.size(); ++r) dx[r * classes + ids[r]] -= 1.0;
        for (double& v : dx) v *= dy[0] * inv_rows;
        logits.add_to_grad(dx);
      });
}

// Mean binary cross-entropy with logits over every entry, in the stable form
//   max(l, 0) - l*y + log(1 + exp(-|l|)).
inline Tensor bce_loss(Tape& tape, const Tensor& logits,
                       const std::vector<double>& labels) {
  if (labels.size() != logits.numel()) {
    throw DimensionError("bce_loss: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_str(logits.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = labels[i];
    if (y != 0.0 && y != 1.0) {
      throw ContractError("bce_loss: labels must be 0 or 1");
    }
    const double l = logits[i];
    total += std::max(l, 0.0) - l * y + std::log1p(std::exp(-std::abs(l)));
  }
  const double inv_n = 1.0 / static_cast<double>(labels.size());
  return detail::finish(tape, "bce_loss", {logits},
                        Tensor::scalar(total * inv_n),
                        [logits, labels, inv_n](std::span<const double> dy) mutable {
                          std::vector<double> dx(labels.size());
                          for (std::size_t i = 0; i < dx.size(); ++i) {
                            const double l = logits[i];
                            const double sig =
                                l >= 0 ? 1.0 / (1.0 + std::exp(-l))
                                       : std::exp(l) / (1.0 + std::exp(l));
                            dx[i] = (sig - labels[i]) * inv_n * dy[0];
                          }
                          logits.add_to_grad(dx);
                        });
}

// Linear warm-up from start_lr to peak_lr over warmup_epochs, then cosine
// annealing to floor_lr, reached at the last step of total_epochs.
struct LrSchedule {
  double start_lr = 1e-5;
  double peak_lr = 1e-4;
  double floor_lr = 0.0;
  std::size_t warmup_epochs = 10;
  std::size_t total_epochs = 100;
  std::size_t steps_per_epoch = 1;

  void validate() const {
    if (!(start_lr <= peak_lr)) throw ConfigError("schedule: start lr exceeds peak lr");
    if (warmup_epochs > total_epochs)
      throw ConfigError("schedule: warm-up longer than training");
    if (steps_per_epoch == 0) throw ConfigError("schedule: zero steps per epoch");
    if (start_lr < 0 || floor_lr < 0) throw ConfigError("schedule: negative lr");
  }

  std::size_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }
  std::size_t total_steps() const { return total_epochs * steps_per_epoch; }
};

inline double lr_at(std::size_t step, const LrSchedule& s) {
  const std::size_t warm = s.warmup_steps();
  const std::size_t total = s.total_steps();
  if (step < warm) {
    return s.start_lr + (s.peak_lr - s.start_lr) * static_cast<double>(step) /
                            static_cast<double>(warm);
  }
  if (step >= total) return s.floor_lr;
  const double progress =
      static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return s.floor_lr + (s.peak_lr - s.floor_lr) *
                          (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Moment buffers mirror the parameter list passed to adamw_step; the list must
// keep the same order and shapes across calls.
struct OptimizerState {
  AdamWConfig config;
  std::size_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// One bias-corrected AdamW update. Decay is decoupled: p <- p - lr*wd*p, then
// p <- p - lr * mhat / (sqrt(vhat) + eps). A parameter without a gradient
// buffer is treated as having a zero gradient.
inline void adamw_step(const NamedTensors& params, OptimizerState& state,
                       double lr) {
  if (state.first_moment.empty()) {
    for (const auto& [name, p] : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ContractError("adamw_step: parameter list changed between steps");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& [name, p] = params[k];
    if (state.first_moment[k].size() != p.numel()) {
      throw DimensionError("adamw_step: moment buffer for \"" + name +
                           "\" does not match " + shape_str(p.shape()));
    }
    if (p.has_grad()) {
      for (double g : p.grad()) {
        if (!std::isfinite(g)) {
          throw TrainingError("non-finite gradient in \"" + name + "\"",
                              state.step);
        }
      }
    }
  }

  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k].second;
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    const bool has_grad = p.has_grad();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double g = has_grad ? p.grad()[i] : 0.0;
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double mhat = m[i] / correct1;
      const double vhat = v[i] / correct2;
      p[i] -= lr * c.weight_decay * p[i];
      p[i] -= lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

inline void zero_grads(const NamedTensors& params) {
  for (const auto& [name, p] : params) {
    Tensor t = p;
    t.zero_grad();
  }
}

}  // namespace ethodec
