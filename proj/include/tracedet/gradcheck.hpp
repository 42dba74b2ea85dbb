#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tracedet/autodiff.hpp"
#include "tracedet/losses.hpp"
#include "tracedet/net.hpp"
#include "tracedet/rng.hpp"
#include "tracedet/trace.hpp"

namespace tracedet {

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t param_count = 0;
};

namespace detail {

inline std::string param_name_at(const ModelParams& params, std::size_t flat_index) {
  std::string found = "?";
  std::size_t offset = 0;
  visit_params(const_cast<ModelParams&>(params), [&](const std::string& name, Tensor& t) {
    if (flat_index >= offset && flat_index < offset + t.size())
      found = name + "[" + std::to_string(flat_index - offset) + "]";
    offset += t.size();
  });
  return found;
}

}  // namespace detail

// Compares the tape gradient of the full training loss against central
// differences on a small seeded model, deterministic mask and dropout off.
// The mask head bias is lifted away from the 0.5 threshold so the hard mask
// cannot flip under the probe perturbations. corrupt_adjoint deliberately
// damages one gradient coordinate as a negative control.
inline GradcheckReport gradcheck(std::size_t t_steps, std::size_t positions, std::size_t batch,
                                 const ModelConfig& model, std::uint64_t seed, double eps,
                                 bool corrupt_adjoint = false) {
  model.validate();
  ModelConfig cfg = model;
  cfg.mask_mode = MaskMode::deterministic;
  cfg.dropout_rate = 0.0;

  Rng data_rng = Rng::stream(seed, "gradcheck-data");
  TraceBatch batch_data;
  batch_data.steps = t_steps;
  batch_data.batch = batch;
  batch_data.dim = positions;
  batch_data.data = Tensor({t_steps, batch, positions});
  for (auto& v : batch_data.data.values()) v = data_rng.uniform(0.0, 1.0);
  batch_data.labels.resize(batch);
  batch_data.ids.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    batch_data.labels[b] = static_cast<int>(b % 2);
    batch_data.ids[b] = "gc-" + std::to_string(b);
  }

  Rng init_rng = Rng::stream(seed, "gradcheck-init");
  ModelParams params = init_params(cfg, positions, init_rng);
  params.mask_b[0] = 1.0;  // keep mask probabilities clear of the threshold

  const LossConfig loss_cfg{1.0, 0.25};
  Rng dummy(0);
  auto loss_value = [&](const std::vector<real_t>& flat) -> real_t {
    ModelParams p = make_params(cfg, positions);
    unpack_params(p, flat);
    Tape tape;
    const ParamVarSet pv = leaf_params(tape, p);
    const ForwardVars fw = forward_on_tape(tape, batch_data, pv, cfg, true, dummy, dummy);
    const Var cls = cls_loss_node(tape, fw.y_hat, batch_data.labels);
    const Var ext = ext_loss_node(tape, fw.m_hat, loss_cfg.tau);
    return tape.value(total_loss_node(tape, cls, ext, loss_cfg.beta)).item();
  };

  std::vector<real_t> theta = pack_params(params);
  std::vector<real_t> analytic;
  {
    Tape tape;
    const ParamVarSet pv = leaf_params(tape, params);
    const ForwardVars fw = forward_on_tape(tape, batch_data, pv, cfg, true, dummy, dummy);
    const Var cls = cls_loss_node(tape, fw.y_hat, batch_data.labels);
    const Var ext = ext_loss_node(tape, fw.m_hat, loss_cfg.tau);
    const Var total = total_loss_node(tape, cls, ext, loss_cfg.beta);
    tape.backward(total);
    analytic = collect_grads(tape, pv);
  }
  if (corrupt_adjoint) {
    std::size_t worst = 0;
    for (std::size_t i = 1; i < analytic.size(); ++i)
      if (std::abs(analytic[i]) > std::abs(analytic[worst])) worst = i;
    analytic[worst] += 0.01 + 0.1 * std::abs(analytic[worst]);
  }

  const FdCheckResult fd = finite_diff_check(loss_value, analytic, theta, eps);
  GradcheckReport report;
  report.max_rel_error = fd.max_rel_error;
  report.worst_param = detail::param_name_at(params, fd.worst_index);
  report.analytic_at_worst = fd.analytic_at_worst;
  report.numeric_at_worst = fd.numeric_at_worst;
  report.param_count = theta.size();
  return report;
}

// The two stock sizes exposed on the command line.
inline GradcheckReport gradcheck_tiny(double eps = 1e-5, bool corrupt = false,
                                      std::uint64_t seed = 7) {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.n_layers = 2;
  cfg.d_pe = 8;
  cfg.d_ff = 16;
  cfg.gumbel_temp = 0.5;
  return gradcheck(8, 6, 4, cfg, seed, eps, corrupt);
}

inline GradcheckReport gradcheck_small(double eps = 1e-5, bool corrupt = false,
                                       std::uint64_t seed = 7) {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.n_layers = 2;
  cfg.d_pe = 16;
  cfg.d_ff = 32;
  cfg.gumbel_temp = 0.5;
  return gradcheck(16, 12, 6, cfg, seed, eps, corrupt);
}

}  // namespace tracedet
