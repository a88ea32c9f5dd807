#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "medgen/generator.hpp"

namespace medgen {

// Next-token scorer interface consumed by the decoder engine. `logits` are
// pre-softmax; log_probs() is their log-softmax.
struct TokenScorer {
  virtual ~TokenScorer() = default;
  virtual std::vector<double> logits(const std::vector<int>& prefix) const = 0;
  virtual std::size_t vocab_size() const = 0;
};

inline std::vector<double> log_softmax(const std::vector<double>& logits) {
  double mx = -1e300;
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double log_z = std::log(z) + mx;
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - log_z;
  return out;
}

inline std::vector<double> score_next_token(const TokenScorer& scorer,
                                            const std::vector<int>& prefix) {
  return log_softmax(scorer.logits(prefix));
}

// Frozen fusion model bound to one (context, predicted entities) pair.
// Encoder outputs are computed once and reused across decode steps.
class GeneratorScorer : public TokenScorer {
 public:
  GeneratorScorer(const FusionModel& model, const LinearizedInput& context,
                  const std::vector<std::string>& entities)
      : model_(model),
        e_c_(model.encode_context(context)->value),
        e_ent_(model.encode_entities(entities)->value) {}

  std::vector<double> logits(const std::vector<int>& prefix) const override {
    auto dec = model_.fusion_decode(ag::constant(e_c_), ag::constant(e_ent_), prefix);
    const std::size_t last = dec.logits->value.rows() - 1;
    std::vector<double> out(dec.logits->value.cols());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = dec.logits->value.at(last, j);
    return out;
  }

  std::size_t vocab_size() const override { return model_.tok.size(); }

 private:
  const FusionModel& model_;
  Tensor e_c_, e_ent_;
};

// Bagging logit ensemble: arithmetic mean of member logits per step.
class EnsembleScorer : public TokenScorer {
 public:
  explicit EnsembleScorer(std::vector<std::shared_ptr<TokenScorer>> members)
      : members_(std::move(members)) {
    if (members_.empty()) throw std::invalid_argument("ensemble: needs at least one scorer");
    for (const auto& m : members_)
      if (m->vocab_size() != members_[0]->vocab_size())
        throw std::invalid_argument("ensemble: vocabulary mismatch");
  }

  std::vector<double> logits(const std::vector<int>& prefix) const override {
    std::vector<double> acc = members_[0]->logits(prefix);
    for (std::size_t m = 1; m < members_.size(); ++m) {
      const auto l = members_[m]->logits(prefix);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += l[i];
    }
    for (auto& v : acc) v /= double(members_.size());
    return acc;
  }

  std::size_t vocab_size() const override { return members_[0]->vocab_size(); }

 private:
  std::vector<std::shared_ptr<TokenScorer>> members_;
};

}  // namespace medgen
