#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "tracedet/autodiff.hpp"
#include "tracedet/errors.hpp"
#include "tracedet/mask.hpp"

namespace tracedet {

struct LossConfig {
  double beta = 1.0;  // weight on the extraction regularizer
  double tau = 0.25;  // Bernoulli prior selection ratio

  void validate() const {
    if (beta < 0.0) throw validation_error("LossConfig: beta must be non-negative");
    if (!(tau > 0.0 && tau < 1.0))
      throw validation_error("LossConfig: tau must lie strictly in (0,1)");
  }
};

struct LossBreakdown {
  double cls = 0.0;
  double ext = 0.0;
  double total = 0.0;
};

// Mean binary cross-entropy over the batch.
inline double cls_loss(std::span<const double> y_hat, std::span<const int> labels) {
  if (y_hat.size() != labels.size())
    throw validation_error("cls_loss: " + std::to_string(y_hat.size()) + " predictions for " +
                           std::to_string(labels.size()) + " labels");
  if (y_hat.empty()) throw validation_error("cls_loss: empty batch");
  double total = 0.0;
  for (std::size_t b = 0; b < y_hat.size(); ++b) {
    const double y = y_hat[b];
    if (!(y > 0.0 && y < 1.0))
      throw validation_error("cls_loss: prediction must lie strictly in (0,1)");
    if (labels[b] != 0 && labels[b] != 1)
      throw validation_error("cls_loss: labels must be binary");
    total -= labels[b] == 1 ? std::log(y) : std::log(1.0 - y);
  }
  return total / static_cast<double>(y_hat.size());
}

// Mean over the batch of the summed per-step Bernoulli KL to Bernoulli(tau).
// Zero exactly when every probability equals tau.
inline double ext_loss(const MaskProbs& m_hat, double tau) {
  if (!(tau > 0.0 && tau < 1.0))
    throw validation_error("ext_loss: tau must lie strictly in (0,1)");
  m_hat.validate();
  const std::size_t batch = m_hat.batch();
  double total = 0.0;
  for (double p : m_hat.values.values()) {
    const double q = 1.0 - p;
    total += p * std::log(p / tau) + q * std::log(q / (1.0 - tau));
  }
  return total / static_cast<double>(batch);
}

inline LossBreakdown total_loss(std::span<const double> y_hat, std::span<const int> labels,
                                const MaskProbs& m_hat, const LossConfig& config) {
  config.validate();
  LossBreakdown out;
  out.cls = cls_loss(y_hat, labels);
  out.ext = ext_loss(m_hat, config.tau);
  out.total = out.cls + config.beta * out.ext;
  return out;
}

// ---- tape builders (same math, differentiable) ----------------------------

inline Var cls_loss_node(Tape& tape, Var y_hat, const std::vector<int>& labels) {
  const Tensor& y = tape.value(y_hat);
  if (y.size() != labels.size())
    throw validation_error("cls_loss: prediction/label length mismatch");
  Tensor pos(y.shape()), neg(y.shape());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    pos[i] = labels[i] == 1 ? 1.0 : 0.0;
    neg[i] = 1.0 - pos[i];
  }
  Var one_minus = tape.scalar_add(tape.scalar_mul(y_hat, -1.0), 1.0);
  Var ll = tape.add(tape.mul(tape.log(y_hat), tape.constant(std::move(pos))),
                    tape.mul(tape.log(one_minus), tape.constant(std::move(neg))));
  return tape.scalar_mul(tape.mean(ll, 0), -1.0);
}

inline Var ext_loss_node(Tape& tape, Var m_hat, double tau) {
  if (!(tau > 0.0 && tau < 1.0))
    throw validation_error("ext_loss: tau must lie strictly in (0,1)");
  const Tensor& m = tape.value(m_hat);
  if (m.rank() != 2) throw shape_error("ext_loss: mask probabilities must be [T,B]");
  const double batch = static_cast<double>(m.dim(1));
  Var q = tape.scalar_add(tape.scalar_mul(m_hat, -1.0), 1.0);
  Var picked = tape.add(tape.mul(m_hat, tape.log(m_hat)), tape.scalar_mul(m_hat, -std::log(tau)));
  Var dropped = tape.add(tape.mul(q, tape.log(q)), tape.scalar_mul(q, -std::log(1.0 - tau)));
  Var per_entry = tape.add(picked, dropped);
  return tape.scalar_mul(tape.sum_all(per_entry), 1.0 / batch);
}

inline Var total_loss_node(Tape& tape, Var cls, Var ext, double beta) {
  return tape.add(cls, tape.scalar_mul(ext, beta));
}

}  // namespace tracedet
