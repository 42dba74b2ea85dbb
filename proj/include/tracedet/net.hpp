#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tracedet/autodiff.hpp"
#include "tracedet/errors.hpp"
#include "tracedet/mask.hpp"
#include "tracedet/rng.hpp"
#include "tracedet/trace.hpp"

namespace tracedet {

inline constexpr const char* kCheckpointFormat = "tracedet-ckpt-v1";

enum class MaskMode { sampled, deterministic, forced_on };

inline std::string to_string(MaskMode m) {
  switch (m) {
    case MaskMode::sampled: return "sampled";
    case MaskMode::deterministic: return "deterministic";
    case MaskMode::forced_on: return "forced_on";
  }
  throw validation_error("unknown mask mode");
}

inline MaskMode parse_mask_mode(const std::string& s) {
  if (s == "sampled") return MaskMode::sampled;
  if (s == "deterministic") return MaskMode::deterministic;
  if (s == "forced_on") return MaskMode::forced_on;
  throw validation_error("unknown mask mode '" + s + "'");
}

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_pe = 16;  // sinusoidal time-embedding width
  std::size_t d_ff = 64;
  double dropout_rate = 0.0;
  double gumbel_temp = 0.5;
  MaskMode mask_mode = MaskMode::sampled;
  bool hard_mask = true;  // straight-through rounding of the relaxed mask

  // Encoder width after the time embedding is appended.
  std::size_t d_enc() const { return d_model + d_pe; }

  void validate() const {
    if (d_model < 1 || n_heads < 1 || d_pe < 1 || d_ff < 1)
      throw validation_error("ModelConfig: all dims must be >= 1");
    if (n_layers < 2 || n_layers > 4)
      throw validation_error("ModelConfig: n_layers must be 2, 3 or 4");
    if (d_pe % 2 != 0) throw validation_error("ModelConfig: d_pe must be even");
    if (d_model % n_heads != 0)
      throw validation_error("ModelConfig: d_model must be divisible by n_heads");
    if (d_enc() % n_heads != 0)
      throw validation_error("ModelConfig: d_model + d_pe must be divisible by n_heads");
    if (dropout_rate < 0.0 || dropout_rate > 0.4)
      throw validation_error("ModelConfig: dropout_rate must lie in [0, 0.4]");
    if (!(gumbel_temp > 0.0)) throw validation_error("ModelConfig: gumbel_temp must be positive");
  }
};

struct EncoderLayerParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Tensor ln2_gamma, ln2_beta;
  Tensor w_ff1, b_ff1, w_ff2, b_ff2;
};

struct EncoderLayerVars {
  Var ln1_gamma, ln1_beta;
  Var w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Var ln2_gamma, ln2_beta;
  Var w_ff1, b_ff1, w_ff2, b_ff2;
};

// All learnable weights of the extractor and predictor.
struct ModelParams {
  std::size_t input_dim = 0;  // D, the per-step feature width
  Tensor w_in, b_in;
  std::vector<EncoderLayerParams> layers;
  Tensor ln_out_gamma, ln_out_beta;
  Tensor w_emb, b_emb;
  Tensor ca_w_q, ca_w_k, ca_w_v;  // cross-attention projections
  Tensor mask_w, mask_b;          // mask head
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // predictor
};

// Tape handles mirroring ModelParams, produced by leaf_params().
struct ParamVarSet {
  std::size_t input_dim = 0;
  Var w_in, b_in;
  std::vector<EncoderLayerVars> layers;
  Var ln_out_gamma, ln_out_beta;
  Var w_emb, b_emb;
  Var ca_w_q, ca_w_k, ca_w_v;
  Var mask_w, mask_b;
  Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// Canonical parameter order. Everything that must iterate parameters
// (init, Adam, packing, checkpoints) goes through this single visitor.
template <typename P, typename Fn>
void visit_params(P& p, Fn&& fn) {
  fn("w_in", p.w_in);
  fn("b_in", p.b_in);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    const std::string prefix = "layers." + std::to_string(l) + ".";
    fn(prefix + "ln1_gamma", layer.ln1_gamma);
    fn(prefix + "ln1_beta", layer.ln1_beta);
    fn(prefix + "w_q", layer.w_q);
    fn(prefix + "b_q", layer.b_q);
    fn(prefix + "w_k", layer.w_k);
    fn(prefix + "b_k", layer.b_k);
    fn(prefix + "w_v", layer.w_v);
    fn(prefix + "b_v", layer.b_v);
    fn(prefix + "w_o", layer.w_o);
    fn(prefix + "b_o", layer.b_o);
    fn(prefix + "ln2_gamma", layer.ln2_gamma);
    fn(prefix + "ln2_beta", layer.ln2_beta);
    fn(prefix + "w_ff1", layer.w_ff1);
    fn(prefix + "b_ff1", layer.b_ff1);
    fn(prefix + "w_ff2", layer.w_ff2);
    fn(prefix + "b_ff2", layer.b_ff2);
  }
  fn("ln_out_gamma", p.ln_out_gamma);
  fn("ln_out_beta", p.ln_out_beta);
  fn("w_emb", p.w_emb);
  fn("b_emb", p.b_emb);
  fn("ca_w_q", p.ca_w_q);
  fn("ca_w_k", p.ca_w_k);
  fn("ca_w_v", p.ca_w_v);
  fn("mask_w", p.mask_w);
  fn("mask_b", p.mask_b);
  fn("mlp_w1", p.mlp_w1);
  fn("mlp_b1", p.mlp_b1);
  fn("mlp_w2", p.mlp_w2);
  fn("mlp_b2", p.mlp_b2);
}

// Allocates zero-filled parameters with the shapes implied by the config.
inline ModelParams make_params(const ModelConfig& config, std::size_t input_dim) {
  config.validate();
  if (input_dim < 1) throw validation_error("make_params: input_dim must be >= 1");
  const std::size_t dm = config.d_model, de = config.d_enc(), dff = config.d_ff;
  ModelParams p;
  p.input_dim = input_dim;
  p.w_in = Tensor({input_dim, dm});
  p.b_in = Tensor({dm});
  p.layers.resize(config.n_layers);
  for (auto& layer : p.layers) {
    layer.ln1_gamma = Tensor({de});
    layer.ln1_beta = Tensor({de});
    layer.w_q = Tensor({de, de});
    layer.b_q = Tensor({de});
    layer.w_k = Tensor({de, de});
    layer.b_k = Tensor({de});
    layer.w_v = Tensor({de, de});
    layer.b_v = Tensor({de});
    layer.w_o = Tensor({de, de});
    layer.b_o = Tensor({de});
    layer.ln2_gamma = Tensor({de});
    layer.ln2_beta = Tensor({de});
    layer.w_ff1 = Tensor({de, dff});
    layer.b_ff1 = Tensor({dff});
    layer.w_ff2 = Tensor({dff, de});
    layer.b_ff2 = Tensor({de});
  }
  p.ln_out_gamma = Tensor({de});
  p.ln_out_beta = Tensor({de});
  p.w_emb = Tensor({de, dff});
  p.b_emb = Tensor({dff});
  p.ca_w_q = Tensor({dff, dm});
  p.ca_w_k = Tensor({input_dim, dm});
  p.ca_w_v = Tensor({input_dim, dm});
  p.mask_w = Tensor({dm, 1});
  p.mask_b = Tensor({1});
  p.mlp_w1 = Tensor({input_dim, dff});
  p.mlp_b1 = Tensor({dff});
  p.mlp_w2 = Tensor({dff, 1});
  p.mlp_b2 = Tensor({1});
  return p;
}

// Xavier-uniform matrices, zero biases, unit layer-norm gains.
inline ModelParams init_params(const ModelConfig& config, std::size_t input_dim, Rng& rng) {
  ModelParams p = make_params(config, input_dim);
  visit_params(p, [&](const std::string& name, Tensor& t) {
    if (t.rank() == 2) {
      const double limit = std::sqrt(6.0 / static_cast<double>(t.dim(0) + t.dim(1)));
      for (auto& v : t.values()) v = rng.uniform(-limit, limit);
    } else if (name.find("gamma") != std::string::npos) {
      for (auto& v : t.values()) v = 1.0;
    }
  });
  return p;
}

inline std::size_t param_count(const ModelParams& p) {
  std::size_t total = 0;
  visit_params(p, [&](const std::string&, const Tensor& t) { total += t.size(); });
  return total;
}

inline std::vector<real_t> pack_params(const ModelParams& p) {
  std::vector<real_t> flat;
  flat.reserve(param_count(p));
  visit_params(p, [&](const std::string&, const Tensor& t) {
    flat.insert(flat.end(), t.values().begin(), t.values().end());
  });
  return flat;
}

inline void unpack_params(ModelParams& p, std::span<const real_t> flat) {
  std::size_t offset = 0;
  visit_params(p, [&](const std::string&, Tensor& t) {
    if (offset + t.size() > flat.size())
      throw validation_error("unpack_params: flat vector too short");
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(offset),
              flat.begin() + static_cast<std::ptrdiff_t>(offset + t.size()),
              t.values().begin());
    offset += t.size();
  });
  if (offset != flat.size()) throw validation_error("unpack_params: flat vector too long");
}

inline ParamVarSet leaf_params(Tape& tape, const ModelParams& p) {
  ParamVarSet vs;
  vs.input_dim = p.input_dim;
  vs.layers.resize(p.layers.size());
  std::vector<const Tensor*> tensors;
  visit_params(p, [&](const std::string&, const Tensor& t) { tensors.push_back(&t); });
  std::vector<Var*> vars;
  visit_params(vs, [&](const std::string&, Var& v) { vars.push_back(&v); });
  for (std::size_t i = 0; i < tensors.size(); ++i) *vars[i] = tape.leaf(*tensors[i]);
  return vs;
}

// Gradients after backward(), flattened in canonical parameter order.
inline std::vector<real_t> collect_grads(const Tape& tape, const ParamVarSet& vs) {
  std::vector<real_t> flat;
  visit_params(const_cast<ParamVarSet&>(vs), [&](const std::string&, Var& v) {
    const Tensor g = tape.grad(v);
    flat.insert(flat.end(), g.values().begin(), g.values().end());
  });
  return flat;
}

// entry[t][2k] = sin(t / 10000^(2k/d_pe)), entry[t][2k+1] = cos(same).
inline Tensor time_embedding(std::size_t steps, std::size_t d_pe) {
  if (d_pe == 0 || d_pe % 2 != 0)
    throw validation_error("time_embedding: d_pe must be positive and even");
  Tensor out({steps, d_pe});
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t k = 0; k < d_pe / 2; ++k) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) /
                                                static_cast<double>(d_pe));
      const double angle = static_cast<double>(t) * freq;
      out.at(t, 2 * k) = std::sin(angle);
      out.at(t, 2 * k + 1) = std::cos(angle);
    }
  return out;
}

namespace detail {

inline Var affine_layer_norm(Tape& tape, Var x, Var gamma, Var beta) {
  return tape.add(tape.mul(tape.layer_norm(x, 1e-5), gamma), beta);
}

// Multi-head self-attention across the step axis, independent per batch item.
inline Var self_attention(Tape& tape, Var x, const EncoderLayerVars& lv, std::size_t n_heads) {
  const auto& shape = tape.value(x).shape();
  const std::size_t t = shape[0], b = shape[1], e = shape[2];
  const std::size_t hd = e / n_heads;
  auto split_heads = [&](Var m) {
    Var r = tape.reshape(m, {t, b, n_heads, hd});
    r = tape.permute(r, {1, 2, 0, 3});  // [B, H, T, hd]
    return tape.reshape(r, {b * n_heads, t, hd});
  };
  Var qh = split_heads(tape.add(tape.matmul(x, lv.w_q), lv.b_q));
  Var kh = split_heads(tape.add(tape.matmul(x, lv.w_k), lv.b_k));
  Var vh = split_heads(tape.add(tape.matmul(x, lv.w_v), lv.b_v));
  Var scores = tape.scalar_mul(tape.matmul(qh, kh, false, true),
                               1.0 / std::sqrt(static_cast<double>(hd)));
  Var weights = tape.softmax(scores, 2);
  Var ctx = tape.matmul(weights, vh);  // [B*H, T, hd]
  ctx = tape.reshape(ctx, {b, n_heads, t, hd});
  ctx = tape.permute(ctx, {2, 0, 1, 3});  // [T, B, H, hd]
  ctx = tape.reshape(ctx, {t, b, e});
  return tape.add(tape.matmul(ctx, lv.w_o), lv.b_o);
}

}  // namespace detail

// Projects the trace features, appends time embeddings, and runs the
// pre-norm encoder stack followed by the output projection. Output shape
// [T, B, d_ff]; deterministic when train is off.
inline Var encode(Tape& tape, Var a, const ParamVarSet& pv, const ModelConfig& config,
                  bool train, Rng& dropout_rng) {
  const auto& shape = tape.value(a).shape();
  if (shape.size() != 3) throw shape_error("encode: input must be [T,B,D]");
  const std::size_t t = shape[0], b = shape[1];
  Var h = tape.add(tape.matmul(a, pv.w_in), pv.b_in);
  const Tensor te = time_embedding(t, config.d_pe);
  Tensor tiled({t, b, config.d_pe});
  for (std::size_t step = 0; step < t; ++step)
    for (std::size_t item = 0; item < b; ++item)
      for (std::size_t k = 0; k < config.d_pe; ++k)
        tiled.at(step, item, k) = te.at(step, k);
  h = tape.concat_last(h, tape.constant(std::move(tiled)));
  for (const auto& lv : pv.layers) {
    Var x1 = detail::affine_layer_norm(tape, h, lv.ln1_gamma, lv.ln1_beta);
    Var attn = detail::self_attention(tape, x1, lv, config.n_heads);
    h = tape.add(h, tape.dropout(attn, config.dropout_rate, train, dropout_rng));
    Var x2 = detail::affine_layer_norm(tape, h, lv.ln2_gamma, lv.ln2_beta);
    Var ff = tape.add(
        tape.matmul(tape.relu(tape.add(tape.matmul(x2, lv.w_ff1), lv.b_ff1)), lv.w_ff2),
        lv.b_ff2);
    h = tape.add(h, tape.dropout(ff, config.dropout_rate, train, dropout_rng));
  }
  h = detail::affine_layer_norm(tape, h, pv.ln_out_gamma, pv.ln_out_beta);
  return tape.add(tape.matmul(h, pv.w_emb), pv.b_emb);
}

// Cross-attention with the contextual embeddings as query and a linear
// projection of the raw trace as key/value, then a linear head squashed to
// (0,1). Output shape [T, B].
inline Var extract_mask_probs(Tape& tape, Var emb, Var a, const ParamVarSet& pv) {
  const auto& eshape = tape.value(emb).shape();
  const auto& ashape = tape.value(a).shape();
  if (eshape.size() != 3 || ashape.size() != 3 || eshape[0] != ashape[0] ||
      eshape[1] != ashape[1])
    throw shape_error("extract_mask_probs: emb " + Tensor::shape_string(eshape) +
                      " does not align with trace " + Tensor::shape_string(ashape));
  const std::size_t t = eshape[0], b = eshape[1];
  const std::size_t dm = tape.value(pv.ca_w_q).dim(1);
  Var q = tape.matmul(tape.permute(emb, {1, 0, 2}), pv.ca_w_q);  // [B, T, dm]
  Var ap = tape.permute(a, {1, 0, 2});                           // [B, T, D]
  Var k = tape.matmul(ap, pv.ca_w_k);
  Var v = tape.matmul(ap, pv.ca_w_v);
  Var scores =
      tape.scalar_mul(tape.matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dm)));
  Var weights = tape.softmax(scores, 2);
  Var ctx = tape.matmul(weights, v);                             // [B, T, dm]
  Var logits = tape.add(tape.matmul(ctx, pv.mask_w), pv.mask_b); // [B, T, 1]
  Var m = tape.sigmoid(tape.reshape(logits, {b, t}));
  m = tape.permute(m, {1, 0});  // [T, B]
  return tape.clamp(m, kProbClamp, 1.0 - kProbClamp);
}

// Turns selection probabilities into the temporal mask. In sampled training
// mode this is the binary-concrete relaxation with logistic noise; hard_mask
// rounds the forward value and routes the gradient through the relaxed one.
// Evaluation and deterministic mode threshold at 0.5 with no gradient path;
// forced_on yields the all-ones mask of the no-masking ablation.
inline Var sample_mask(Tape& tape, Var m_hat, const ModelConfig& config, Rng& gumbel_rng,
                       bool train) {
  if (!(config.gumbel_temp > 0.0))
    throw validation_error("sample_mask: gumbel_temp must be positive");
  const Tensor& m = tape.value(m_hat);
  if (config.mask_mode == MaskMode::forced_on)
    return tape.constant(Tensor::full(m.shape(), 1.0));
  if (config.mask_mode == MaskMode::deterministic || !train) {
    Tensor hard(m.shape());
    for (std::size_t i = 0; i < m.size(); ++i) hard[i] = m[i] > 0.5 ? 1.0 : 0.0;
    return tape.constant(std::move(hard));
  }
  Tensor noise(m.shape());
  for (std::size_t i = 0; i < noise.size(); ++i) {
    double u = gumbel_rng.uniform01();
    while (u <= 0.0 || u >= 1.0) u = gumbel_rng.uniform01();
    noise[i] = std::log(u) - std::log(1.0 - u);
  }
  Var one_minus = tape.scalar_add(tape.scalar_mul(m_hat, -1.0), 1.0);
  Var logit = tape.add(tape.log(m_hat), tape.scalar_mul(tape.log(one_minus), -1.0));
  Var z = tape.scalar_mul(tape.add(logit, tape.constant(std::move(noise))),
                          1.0 / config.gumbel_temp);
  Var relaxed = tape.sigmoid(z);
  return config.hard_mask ? tape.round_ste(relaxed) : relaxed;
}

// A_sub[t][b][d] = M[t][b] * A[t][b][d]
inline Var apply_mask(Tape& tape, Var a, Var mask) { return tape.scale_last(a, mask); }

// Temporal mean then a two-layer MLP; probabilities clamped into (0,1).
inline Var predict(Tape& tape, Var a_sub, const ParamVarSet& pv) {
  if (tape.value(a_sub).rank() != 3) throw shape_error("predict: input must be [T,B,D]");
  Var pooled = tape.mean(a_sub, 0);  // [B, D]
  Var h = tape.relu(tape.add(tape.matmul(pooled, pv.mlp_w1), pv.mlp_b1));
  Var out = tape.add(tape.matmul(h, pv.mlp_w2), pv.mlp_b2);  // [B, 1]
  const std::size_t b = tape.value(out).dim(0);
  Var y = tape.sigmoid(tape.reshape(out, {b}));
  return tape.clamp(y, kProbClamp, 1.0 - kProbClamp);
}

struct ForwardVars {
  Var y_hat;  // [B]
  Var m_hat;  // [T, B]
  Var mask;   // [T, B]
  Var emb;    // [T, B, d_ff]
  Var a_sub;  // [T, B, D]
  Var input;  // [T, B, D]
};

inline ForwardVars forward_on_tape(Tape& tape, const TraceBatch& batch, const ParamVarSet& pv,
                                   const ModelConfig& config, bool train, Rng& gumbel_rng,
                                   Rng& dropout_rng) {
  config.validate();
  if (batch.dim != pv.input_dim)
    throw shape_error("forward: batch feature dim " + std::to_string(batch.dim) +
                      " does not match model input dim " + std::to_string(pv.input_dim));
  ForwardVars fw;
  fw.input = tape.constant(batch.data);
  fw.emb = encode(tape, fw.input, pv, config, train, dropout_rng);
  fw.m_hat = extract_mask_probs(tape, fw.emb, fw.input, pv);
  fw.mask = sample_mask(tape, fw.m_hat, config, gumbel_rng, train);
  fw.a_sub = apply_mask(tape, fw.input, fw.mask);
  fw.y_hat = predict(tape, fw.a_sub, pv);
  return fw;
}

struct ForwardResult {
  std::vector<double> y_hat;
  MaskProbs mask_probs;
  HardMask mask;
};

inline ForwardResult forward(const TraceBatch& batch, const ModelParams& params,
                             const ModelConfig& config, bool train, Rng& gumbel_rng,
                             Rng& dropout_rng) {
  Tape tape;
  const ParamVarSet pv = leaf_params(tape, params);
  const ForwardVars fw = forward_on_tape(tape, batch, pv, config, train, gumbel_rng, dropout_rng);
  ForwardResult out;
  out.y_hat = tape.value(fw.y_hat).values();
  out.mask_probs.values = tape.value(fw.m_hat);
  out.mask.values = tape.value(fw.mask);
  return out;
}

// Evaluation-mode forward; consumes no randomness.
inline ForwardResult forward_eval(const TraceBatch& batch, const ModelParams& params,
                                  const ModelConfig& config) {
  Rng dummy_a(0), dummy_b(0);
  return forward(batch, params, config, false, dummy_a, dummy_b);
}

// ---- checkpoints -----------------------------------------------------------

inline nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["n_layers"] = c.n_layers;
  j["d_pe"] = c.d_pe;
  j["d_ff"] = c.d_ff;
  j["dropout_rate"] = c.dropout_rate;
  j["gumbel_temp"] = c.gumbel_temp;
  j["mask_mode"] = to_string(c.mask_mode);
  j["hard_mask"] = c.hard_mask;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_pe = j.at("d_pe").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.gumbel_temp = j.at("gumbel_temp").get<double>();
  c.mask_mode = parse_mask_mode(j.at("mask_mode").get<std::string>());
  c.hard_mask = j.at("hard_mask").get<bool>();
  c.validate();
  return c;
}

struct Checkpoint {
  ModelParams params;
  ModelConfig config;
  bool normalize_inputs = true;
};

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                            const ModelConfig& config, bool normalize_inputs) {
  nlohmann::ordered_json j;
  j["format"] = kCheckpointFormat;
  j["config"] = config_to_json(config);
  j["input_dim"] = params.input_dim;
  j["normalize_inputs"] = normalize_inputs;
  nlohmann::ordered_json arrays;
  visit_params(const_cast<ModelParams&>(params), [&](const std::string& name, Tensor& t) {
    arrays[name] = t.values();
  });
  j["params"] = std::move(arrays);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("save_checkpoint: cannot open '" + path.string() + "'");
  out << j.dump();
  if (!out) throw io_error("save_checkpoint: write failed for '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("load_checkpoint: cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw artifact_error("load_checkpoint: invalid JSON in '" + path.string() + "': " + e.what());
  }
  if (!j.contains("format") || j["format"] != kCheckpointFormat)
    throw artifact_error("load_checkpoint: '" + path.string() + "' is not a " +
                         std::string(kCheckpointFormat) + " checkpoint");
  Checkpoint ckpt;
  try {
    ckpt.config = config_from_json(j.at("config"));
    ckpt.normalize_inputs = j.at("normalize_inputs").get<bool>();
    const std::size_t input_dim = j.at("input_dim").get<std::size_t>();
    ckpt.params = make_params(ckpt.config, input_dim);
    const auto& arrays = j.at("params");
    visit_params(ckpt.params, [&](const std::string& name, Tensor& t) {
      const auto& arr = arrays.at(name);
      if (!arr.is_array() || arr.size() != t.size())
        throw artifact_error("load_checkpoint: parameter '" + name + "' has wrong size");
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = arr[i].get<double>();
    });
  } catch (const nlohmann::json::exception& e) {
    throw artifact_error("load_checkpoint: malformed checkpoint: " + std::string(e.what()));
  }
  return ckpt;
}

}  // namespace tracedet
