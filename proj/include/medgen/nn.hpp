#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "medgen/autograd.hpp"
#include "medgen/tensor.hpp"

namespace medgen {

using Rng = std::mt19937_64;
using Mask = std::vector<std::vector<bool>>;

inline Mask full_mask(std::size_t rows, std::size_t cols) {
  return Mask(rows, std::vector<bool>(cols, true));
}

inline Mask causal_mask(std::size_t n) {
  Mask m(n, std::vector<bool>(n, false));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m[i][j] = true;
  return m;
}

// Causal mask further limited to the last `window` positions.
inline Mask window_mask(std::size_t n, std::size_t window) {
  Mask m(n, std::vector<bool>(n, false));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i + 1 > window ? i + 1 - window : 0;
    for (std::size_t j = lo; j <= i; ++j) m[i][j] = true;
  }
  return m;
}

struct OptimizerConfig {
  double base_lr = 0.05;
  double layer_decay = 0.95;  // effective lr at depth d is base_lr * layer_decay^d
  double ema_decay = 0.999;
  double fgm_epsilon = 1.0;

  void validate() const {
    if (base_lr <= 0.0) throw std::invalid_argument("base_lr must be positive");
    if (layer_decay <= 0.0 || layer_decay > 1.0)
      throw std::invalid_argument("layer_decay must be in (0,1]");
    if (ema_decay < 0.0 || ema_decay >= 1.0)
      throw std::invalid_argument("ema_decay must be in [0,1)");
    if (fgm_epsilon < 0.0) throw std::invalid_argument("fgm_epsilon must be >= 0");
  }
};

// Named parameters with layer-depth tags and EMA shadows. Iteration order
// is the (deterministic) lexicographic name order.
class ParamStore {
 public:
  struct Entry {
    ag::Var var;
    int depth = 0;
    Tensor shadow;
  };

  ag::Var add(const std::string& name, Tensor init, int depth = 0) {
    if (depth < 0) throw std::invalid_argument("param depth must be >= 0");
    if (entries_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    auto var = ag::leaf(std::move(init));
    entries_[name] = Entry{var, depth, var->value};
    return var;
  }

  ag::Var get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second.var;
  }

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }

  void zero_grad() {
    for (auto& [name, e] : entries_)
      std::fill(e.var->grad.data.begin(), e.var->grad.data.end(), 0.0);
  }

  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  // Copies the EMA shadows into the live parameters.
  void adopt_shadow() {
    for (auto& [name, e] : entries_) e.var->value = e.shadow;
  }

  void reset_shadow() {
    for (auto& [name, e] : entries_) e.shadow = e.var->value;
  }

 private:
  std::map<std::string, Entry> entries_;
};

// One SGD step with stratified per-depth learning rates, then the EMA update.
inline void optimizer_step(ParamStore& params, const OptimizerConfig& cfg) {
  cfg.validate();
  for (auto& [name, e] : params.entries()) {
    if (!e.var->grad.all_finite())
      throw std::runtime_error("optimizer_step: non-finite gradient in " + name);
    const double lr = cfg.base_lr * std::pow(cfg.layer_decay, e.depth);
    for (std::size_t i = 0; i < e.var->value.size(); ++i)
      e.var->value[i] -= lr * e.var->grad[i];
  }
  for (auto& [name, e] : params.entries())
    for (std::size_t i = 0; i < e.shadow.size(); ++i)
      e.shadow[i] = cfg.ema_decay * e.shadow[i] + (1.0 - cfg.ema_decay) * e.var->value[i];
}

// embedding + epsilon * grad / ||grad||2; unchanged when the norm is zero.
inline Tensor fgm_perturb(const Tensor& embedding, const Tensor& grad, double epsilon) {
  if (!embedding.same_shape(grad)) throw std::invalid_argument("fgm_perturb: shape mismatch");
  if (epsilon < 0.0) throw std::invalid_argument("fgm_perturb: negative epsilon");
  const double norm = grad.l2_norm();
  if (epsilon == 0.0 || norm == 0.0) return embedding;
  Tensor out = embedding;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += epsilon * grad[i] / norm;
  return out;
}

inline Tensor gaussian_init(std::vector<std::size_t> shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data) v = dist(rng);
  return t;
}

// Scaled dot-product attention with a boolean visibility mask.
inline ag::Var scaled_dot_attention(const ag::Var& q, const ag::Var& k, const ag::Var& v,
                                    const Mask& mask) {
  if (q->value.cols() != k->value.cols())
    throw std::invalid_argument("attention: query/key width mismatch");
  if (k->value.rows() != v->value.rows())
    throw std::invalid_argument("attention: key/value count mismatch");
  const double inv_sqrt = 1.0 / std::sqrt(double(k->value.cols()));
  auto scores = ag::scale(ag::matmul(q, ag::transpose(k)), inv_sqrt);
  auto weights = ag::masked_softmax_rows(scores, mask);
  return ag::matmul(weights, v);
}

// Masked multi-head cross attention: per-head projections, scaled dot
// attention, concatenation, output projection.
struct MmcaLayer {
  ag::Var wq, wk, wv, wo;
  std::size_t heads = 2;

  static MmcaLayer create(ParamStore& ps, const std::string& prefix, std::size_t dim,
                          std::size_t heads, int depth, Rng& rng) {
    if (heads == 0 || dim % heads != 0)
      throw std::invalid_argument("mmca: head count must divide model dim");
    const double s = 1.0 / std::sqrt(double(dim));
    MmcaLayer l;
    l.heads = heads;
    l.wq = ps.add(prefix + ".wq", gaussian_init({dim, dim}, s, rng), depth);
    l.wk = ps.add(prefix + ".wk", gaussian_init({dim, dim}, s, rng), depth);
    l.wv = ps.add(prefix + ".wv", gaussian_init({dim, dim}, s, rng), depth);
    l.wo = ps.add(prefix + ".wo", gaussian_init({dim, dim}, s, rng), depth);
    return l;
  }

  static MmcaLayer from_store(const ParamStore& ps, const std::string& prefix,
                              std::size_t heads) {
    MmcaLayer l;
    l.heads = heads;
    l.wq = ps.get(prefix + ".wq");
    l.wk = ps.get(prefix + ".wk");
    l.wv = ps.get(prefix + ".wv");
    l.wo = ps.get(prefix + ".wo");
    return l;
  }

  ag::Var apply(const ag::Var& queries, const ag::Var& keys, const ag::Var& values,
                const Mask& mask) const {
    auto q = ag::matmul(queries, wq);
    auto k = ag::matmul(keys, wk);
    auto v = ag::matmul(values, wv);
    const std::size_t dim = q->value.cols();
    const std::size_t hd = dim / heads;
    std::vector<ag::Var> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h)
      outs.push_back(scaled_dot_attention(ag::slice_cols(q, h * hd, hd),
                                          ag::slice_cols(k, h * hd, hd),
                                          ag::slice_cols(v, h * hd, hd), mask));
    return ag::matmul(ag::concat_cols(outs), wo);
  }
};

enum class RunMode { train, eval };

// Average of head(dropout_i(h)) over n_samples inverted-scaling masks.
// Eval mode bypasses dropout entirely.
inline ag::Var multi_sample_dropout(const ag::Var& h, std::size_t n_samples, double p,
                                    const std::function<ag::Var(const ag::Var&)>& head,
                                    RunMode mode, Rng& rng) {
  if (n_samples < 1) throw std::invalid_argument("multi_sample_dropout: n_samples >= 1");
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("multi_sample_dropout: p in [0,1)");
  if (mode == RunMode::eval || p == 0.0) return head(h);
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<ag::Var> outs;
  outs.reserve(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    Tensor mask(h->value.shape);
    for (auto& v : mask.data) v = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
    outs.push_back(head(ag::mul(h, ag::constant(std::move(mask)))));
  }
  auto acc = outs[0];
  for (std::size_t s = 1; s < outs.size(); ++s) acc = ag::add(acc, outs[s]);
  return ag::scale(acc, 1.0 / double(n_samples));
}

// Central finite differences against the analytic gradient; returns the max
// over coordinates of |analytic - numeric| / max(floor, |numeric|). The
// floor guards near-zero gradients against finite-difference roundoff.
inline double grad_check(const std::function<ag::Var(ParamStore&)>& loss_fn, ParamStore& params,
                         double eps = 1e-5, double floor = 1e-8) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be > 0");
  params.zero_grad();
  auto loss = loss_fn(params);
  if (!loss->value.all_finite()) throw std::runtime_error("grad_check: non-finite loss");
  ag::backward(loss);
  double max_rel = 0.0;
  for (auto& [name, e] : params.entries()) {
    for (std::size_t i = 0; i < e.var->value.size(); ++i) {
      const double orig = e.var->value[i];
      e.var->value[i] = orig + eps;
      const double fp = loss_fn(params)->value[0];
      e.var->value[i] = orig - eps;
      const double fm = loss_fn(params)->value[0];
      e.var->value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double rel =
          std::abs(e.var->grad[i] - numeric) / std::max(floor, std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

// ---- checkpoint I/O (JSON map: name -> {shape, depth, data}) ----

inline nlohmann::json params_to_json(const ParamStore& params) {
  nlohmann::json j;
  for (const auto& [name, e] : params.entries()) {
    j[name] = {{"shape", e.var->value.shape},
               {"depth", e.depth},
               {"data", e.var->value.data}};
  }
  return j;
}

inline void params_from_json(ParamStore& params, const nlohmann::json& j) {
  for (auto& [name, item] : j.items()) {
    Tensor t(item.at("shape").get<std::vector<std::size_t>>(),
             item.at("data").get<std::vector<double>>());
    if (params.contains(name)) {
      auto& e = params.entries().at(name);
      if (!e.var->value.same_shape(t))
        throw std::runtime_error("checkpoint shape mismatch for " + name);
      e.var->value = t;
      e.shadow = t;
    } else {
      params.add(name, std::move(t), item.at("depth").get<int>());
    }
  }
}

inline void save_checkpoint(const ParamStore& params, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << params_to_json(params).dump() << "\n";
}

inline void load_checkpoint(ParamStore& params, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  nlohmann::json j;
  in >> j;
  params_from_json(params, j);
}

}  // namespace medgen
