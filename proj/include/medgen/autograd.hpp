#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "medgen/tensor.hpp"

namespace medgen::ag {

struct Node;
using Var = std::shared_ptr<Node>;

// One value in the computation graph. Gradients are accumulated into
// `grad` by the producing op's adjoint when backward() runs.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> adjoint;  // reads this->grad, accumulates into parents

  explicit Node(Tensor v, bool rg = false)
      : value(std::move(v)), grad(value.shape), requires_grad(rg) {}
};

inline Var constant(Tensor v) { return std::make_shared<Node>(std::move(v)); }
inline Var leaf(Tensor v) { return std::make_shared<Node>(std::move(v), true); }

inline Var make_op(Tensor v, std::vector<Var> parents, std::function<void(Node&)> adj) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  auto n = std::make_shared<Node>(std::move(v), rg);
  if (rg) {
    n->parents = std::move(parents);
    n->adjoint = std::move(adj);
  }
  return n;
}

inline void backward(const Var& root) {
  if (root->value.size() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!root->value.all_finite()) throw std::runtime_error("backward: non-finite loss");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // iterative post-order
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root->grad.data[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->adjoint) (*it)->adjoint(**it);
}

// ---- elementwise / linear ops ----

inline Var add(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("add: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      n.parents[0]->grad[i] += n.grad[i];
      n.parents[1]->grad[i] += n.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("sub: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      n.parents[0]->grad[i] += n.grad[i];
      n.parents[1]->grad[i] -= n.grad[i];
    }
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a->value;
  for (auto& v : out.data) v *= c;
  return make_op(std::move(out), {a}, [c](Node& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) n.parents[0]->grad[i] += c * n.grad[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("mul: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      n.parents[0]->grad[i] += n.parents[1]->value[i] * n.grad[i];
      n.parents[1]->grad[i] += n.parents[0]->value[i] * n.grad[i];
    }
  });
}

inline Var tanh(const Var& a) {
  Tensor out = a->value;
  for (auto& v : out.data) v = std::tanh(v);
  return make_op(std::move(out), {a}, [](Node& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      n.parents[0]->grad[i] += (1.0 - n.value[i] * n.value[i]) * n.grad[i];
  });
}

inline Var matmul(const Var& a, const Var& b) {
  Tensor out = medgen::matmul(a->value, b->value);
  return make_op(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    Tensor& ga = n.parents[0]->grad;
    Tensor& gb = n.parents[1]->grad;
    const std::size_t N = av.rows(), K = av.cols(), M = bv.cols();
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < M; ++j) {
        const double g = n.grad.at(i, j);
        if (g == 0.0) continue;
        for (std::size_t p = 0; p < K; ++p) {
          ga.at(i, p) += g * bv.at(p, j);
          gb.at(p, j) += g * av.at(i, p);
        }
      }
  });
}

inline Var transpose(const Var& a) {
  return make_op(medgen::transpose(a->value), {a}, [](Node& n) {
    for (std::size_t i = 0; i < n.value.rows(); ++i)
      for (std::size_t j = 0; j < n.value.cols(); ++j)
        n.parents[0]->grad.at(j, i) += n.grad.at(i, j);
  });
}

// Broadcast-add a 1 x d row vector to every row of a matrix.
inline Var add_row(const Var& a, const Var& row) {
  if (a->value.cols() != row->value.size())
    throw std::invalid_argument("add_row: width mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out.at(i, j) += row->value[j];
  return make_op(std::move(out), {a, row}, [](Node& n) {
    for (std::size_t i = 0; i < n.grad.rows(); ++i)
      for (std::size_t j = 0; j < n.grad.cols(); ++j) {
        n.parents[0]->grad.at(i, j) += n.grad.at(i, j);
        n.parents[1]->grad[j] += n.grad.at(i, j);
      }
  });
}

// Select rows of an embedding table; backward scatters into the table.
inline Var gather_rows(const Var& table, std::vector<std::size_t> ids) {
  const std::size_t d = table->value.cols();
  Tensor out = Tensor::matrix(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table->value.rows()) throw std::out_of_range("gather_rows: id out of range");
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = table->value.at(ids[i], j);
  }
  return make_op(std::move(out), {table}, [ids = std::move(ids), d](Node& n) {
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j)
        n.parents[0]->grad.at(ids[i], j) += n.grad.at(i, j);
  });
}

inline Var slice_rows(const Var& a, std::size_t start, std::size_t count) {
  const std::size_t d = a->value.cols();
  if (start + count > a->value.rows()) throw std::out_of_range("slice_rows");
  Tensor out = Tensor::matrix(count, d);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = a->value.at(start + i, j);
  return make_op(std::move(out), {a}, [start, count, d](Node& n) {
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t j = 0; j < d; ++j)
        n.parents[0]->grad.at(start + i, j) += n.grad.at(i, j);
  });
}

inline Var slice_cols(const Var& a, std::size_t start, std::size_t count) {
  if (start + count > a->value.cols()) throw std::out_of_range("slice_cols");
  Tensor out = Tensor::matrix(a->value.rows(), count);
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out.at(i, j) = a->value.at(i, start + j);
  return make_op(std::move(out), {a}, [start, count](Node& n) {
    for (std::size_t i = 0; i < n.grad.rows(); ++i)
      for (std::size_t j = 0; j < count; ++j)
        n.parents[0]->grad.at(i, start + j) += n.grad.at(i, j);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  const std::size_t rows = parts[0]->value.rows();
  std::size_t width = 0;
  for (const auto& p : parts) {
    if (p->value.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    width += p->value.cols();
  }
  Tensor out = Tensor::matrix(rows, width);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < p->value.cols(); ++j) out.at(i, off + j) = p->value.at(i, j);
    off += p->value.cols();
  }
  return make_op(std::move(out), parts, [](Node& n) {
    std::size_t off = 0;
    for (auto& p : n.parents) {
      for (std::size_t i = 0; i < n.grad.rows(); ++i)
        for (std::size_t j = 0; j < p->value.cols(); ++j)
          p->grad.at(i, j) += n.grad.at(i, off + j);
      off += p->value.cols();
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const std::size_t d = parts[0]->value.cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p->value.cols() != d) throw std::invalid_argument("concat_rows: width mismatch");
    rows += p->value.rows();
  }
  Tensor out = Tensor::matrix(rows, d);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p->value.rows(); ++i)
      for (std::size_t j = 0; j < d; ++j) out.at(off + i, j) = p->value.at(i, j);
    off += p->value.rows();
  }
  return make_op(std::move(out), parts, [d](Node& n) {
    std::size_t off = 0;
    for (auto& p : n.parents) {
      for (std::size_t i = 0; i < p->value.rows(); ++i)
        for (std::size_t j = 0; j < d; ++j) p->grad.at(i, j) += n.grad.at(off + i, j);
      off += p->value.rows();
    }
  });
}

inline Var mean_rows(const Var& a) {
  const std::size_t rows = a->value.rows(), d = a->value.cols();
  if (rows == 0) throw std::invalid_argument("mean_rows: empty matrix");
  Tensor out = Tensor::matrix(1, d);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(0, j) += a->value.at(i, j) / double(rows);
  return make_op(std::move(out), {a}, [rows, d](Node& n) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < d; ++j)
        n.parents[0]->grad.at(i, j) += n.grad.at(0, j) / double(rows);
  });
}

// Row-wise softmax with an additive {0, -inf} style boolean mask.
// mask.at(i, j) == false means key j is invisible to query i.
inline Var masked_softmax_rows(const Var& scores, const std::vector<std::vector<bool>>& mask) {
  const std::size_t n = scores->value.rows(), m = scores->value.cols();
  if (mask.size() != n || (n > 0 && mask[0].size() != m))
    throw std::invalid_argument("masked_softmax_rows: mask shape mismatch");
  Tensor out = Tensor::matrix(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    bool any = false;
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i][j]) {
        any = true;
        mx = std::max(mx, scores->value.at(i, j));
      }
    if (!any) throw std::domain_error("masked_softmax_rows: all keys masked for a query");
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i][j]) z += std::exp(scores->value.at(i, j) - mx);
    for (std::size_t j = 0; j < m; ++j)
      out.at(i, j) = mask[i][j] ? std::exp(scores->value.at(i, j) - mx) / z : 0.0;
  }
  return make_op(std::move(out), {scores}, [n, m](Node& node) {
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += node.grad.at(i, j) * node.value.at(i, j);
      for (std::size_t j = 0; j < m; ++j)
        node.parents[0]->grad.at(i, j) +=
            node.value.at(i, j) * (node.grad.at(i, j) - dot);
    }
  });
}

// Sum of negative log-softmax picks: -sum_i log softmax(logits_i)[target_i].
inline Var nll_from_logits(const Var& logits, const std::vector<std::size_t>& targets) {
  const std::size_t n = logits->value.rows(), v = logits->value.cols();
  if (targets.size() != n) throw std::invalid_argument("nll_from_logits: length mismatch");
  Tensor probs = Tensor::matrix(n, v);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= v) throw std::out_of_range("nll_from_logits: target out of vocabulary");
    double mx = -1e300;
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, logits->value.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(logits->value.at(i, j) - mx);
    for (std::size_t j = 0; j < v; ++j)
      probs.at(i, j) = std::exp(logits->value.at(i, j) - mx) / z;
    loss -= std::log(std::max(probs.at(i, targets[i]), 1e-300));
  }
  return make_op(Tensor({1}, {loss}), {logits},
                 [probs = std::move(probs), targets](Node& node) {
                   const double g = node.grad[0];
                   for (std::size_t i = 0; i < probs.rows(); ++i)
                     for (std::size_t j = 0; j < probs.cols(); ++j)
                       node.parents[0]->grad.at(i, j) +=
                           g * (probs.at(i, j) - (j == targets[i] ? 1.0 : 0.0));
                 });
}

// Weighted multi-label BCE over pre-sigmoid logits, normalized by class count.
// sigma(x) is clamped to [1e-12, 1 - 1e-12] before the log.
inline Var weighted_bce_from_logits(const Var& logits, const std::vector<double>& targets,
                                    const std::vector<double>& weights) {
  const std::size_t k = logits->value.size();
  if (targets.size() != k || weights.size() != k)
    throw std::invalid_argument("weighted_bce: length mismatch");
  double loss = 0.0;
  std::vector<double> sig(k);
  for (std::size_t i = 0; i < k; ++i) {
    if (weights[i] <= 0.0) throw std::invalid_argument("weighted_bce: non-positive weight");
    sig[i] = 1.0 / (1.0 + std::exp(-logits->value[i]));
    const double s = std::clamp(sig[i], 1e-12, 1.0 - 1e-12);
    loss -= weights[i] * (targets[i] * std::log(s) + (1.0 - targets[i]) * std::log(1.0 - s));
  }
  loss /= double(k);
  return make_op(Tensor({1}, {loss}), {logits},
                 [sig = std::move(sig), targets, weights, k](Node& node) {
                   const double g = node.grad[0] / double(k);
                   for (std::size_t i = 0; i < k; ++i)
                     node.parents[0]->grad[i] += g * weights[i] * (sig[i] - targets[i]);
                 });
}

inline Var sum(const std::vector<Var>& scalars) {
  double s = 0.0;
  for (const auto& v : scalars) {
    if (v->value.size() != 1) throw std::invalid_argument("sum: non-scalar term");
    s += v->value[0];
  }
  return make_op(Tensor({1}, {s}), scalars, [](Node& n) {
    for (auto& p : n.parents) p->grad[0] += n.grad[0];
  });
}

}  // namespace medgen::ag
