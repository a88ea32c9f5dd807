#include <catch_amalgamated.hpp>

#include <cmath>

#include "medgen/entity_predictor.hpp"

using namespace medgen;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

TEST_CASE("search_thresholds: three-sample contract example") {
  // one class: scores 0.35/0.45/0.55 with labels 0/1/1. Any threshold in
  // [0.35, 0.45) yields perfect F1; the grid's smallest such value is 0.350.
  const std::vector<std::vector<double>> scores = {{0.35}, {0.45}, {0.55}};
  const std::vector<std::vector<int>> labels = {{0}, {1}, {1}};
  const auto th = search_thresholds(scores, labels);
  REQUIRE(th.thresholds.size() == 1);
  CHECK_THAT(th.thresholds[0], WithinAbs(0.350, 1e-9));
}

TEST_CASE("search_thresholds: exhaustive-grid oracle per class") {
  Rng rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n = 40, k = 6;
  std::vector<std::vector<double>> scores(n, std::vector<double>(k));
  std::vector<std::vector<int>> labels(n, std::vector<int>(k));
  for (auto& row : scores)
    for (auto& v : row) v = u(rng);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) labels[i][c] = scores[i][c] + 0.2 * u(rng) > 0.6;
  // keep class 5 all-negative to exercise the fallback
  for (std::size_t i = 0; i < n; ++i) labels[i][5] = 0;

  const auto th = search_thresholds(scores, labels);
  CHECK_THAT(th.thresholds[5], WithinAbs(0.6, 1e-12));

  for (std::size_t c = 0; c + 1 < k; ++c) {
    std::vector<double> col(n);
    std::vector<int> lab(n);
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = scores[i][c];
      lab[i] = labels[i][c];
    }
    // independent oracle: brute force over the same grid, tracking best-first
    double best_f1 = -1.0, best_th = 0.3;
    for (int g = 0; g <= 300; ++g) {
      const double t = 0.3 + g * 0.001;
      const double f1 = class_f1_at_threshold(col, lab, t);
      if (f1 > best_f1 + 1e-15) {
        best_f1 = f1;
        best_th = t;
      }
    }
    CHECK_THAT(th.thresholds[c], WithinAbs(best_th, 1e-9));
    CHECK_THAT(class_f1_at_threshold(col, lab, th.thresholds[c]), WithinRel(best_f1, 1e-12));
  }
}

TEST_CASE("apply_thresholds: strict inequality") {
  ThresholdVector th;
  th.thresholds = {0.5, 0.5, 0.5};
  CHECK(apply_thresholds({0.5, 0.51, 0.49}, th) == std::vector<std::size_t>{1});
  CHECK(apply_thresholds({0.5, 0.5, 0.5}, th).empty());
  CHECK_THROWS(apply_thresholds({0.5}, th));
}

TEST_CASE("multilabel_f1: micro vs macro on a worked example") {
  // ex0: pred {0,1} gold {0}; ex1: pred {} gold {1}
  const std::vector<std::vector<std::size_t>> pred = {{0, 1}, {}};
  const std::vector<std::vector<std::size_t>> gold = {{0}, {1}};
  // class 0: tp=1; class 1: fp=1, fn=1; class 2: nothing
  const auto micro = multilabel_f1(pred, gold, 3, F1Mode::micro);
  CHECK_THAT(micro.precision, WithinAbs(0.5, 1e-12));
  CHECK_THAT(micro.recall, WithinAbs(0.5, 1e-12));
  CHECK_THAT(micro.f1, WithinAbs(0.5, 1e-12));
  const auto macro = multilabel_f1(pred, gold, 3, F1Mode::macro);
  CHECK_THAT(macro.f1, WithinAbs((1.0 + 0.0 + 0.0) / 3.0, 1e-12));
  CHECK_THROWS(multilabel_f1(pred, {{0}}, 3, F1Mode::micro));
}

TEST_CASE("inverse_frequency_weights: mean-one normalization") {
  // class counts: 3, 1, 0 -> raw 1/3, 1, 1 -> normalized to mean 1
  const std::vector<std::vector<int>> labels = {{1, 1, 0}, {1, 0, 0}, {1, 0, 0}};
  const auto w = inverse_frequency_weights(labels, 3);
  const double raw_sum = 1.0 / 3.0 + 1.0 + 1.0;
  CHECK_THAT(w[0], WithinRel((1.0 / 3.0) * 3.0 / raw_sum, 1e-12));
  CHECK_THAT(w[1], WithinRel(1.0 * 3.0 / raw_sum, 1e-12));
  CHECK_THAT(w[2], WithinRel(1.0 * 3.0 / raw_sum, 1e-12));
  CHECK_THAT((w[0] + w[1] + w[2]) / 3.0, WithinRel(1.0, 1e-12));
  // rarer class gets the strictly larger weight
  CHECK(w[1] > w[0]);
}

TEST_CASE("entity scorer: deterministic eval, msd-off equivalence, grad check") {
  SynthSpec spec;
  spec.dialogues = 12;
  spec.entity_count = 6;
  spec.seed = 3;
  auto [corpus, vocab] = generate_synthetic_corpus(spec);
  const Tokenizer tok = build_tokenizer(corpus, vocab);
  const auto examples = build_entity_examples(corpus, vocab, tok, true);
  REQUIRE(!examples.empty());

  EntityScorerConfig mc;
  mc.dim = 8;
  mc.heads = 2;
  mc.blocks = 2;
  Rng rng(5);
  auto scorer = EntityScorer::create(mc, tok.size(), vocab.size(), rng);

  const auto s1 = scorer.predict_scores(examples[0].input);
  const auto s2 = scorer.predict_scores(examples[0].input);
  CHECK(s1 == s2);
  REQUIRE(s1.size() == vocab.size());
  for (double v : s1) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }

  // eval forward equals train forward with dropout probability zero
  EntityScorerConfig nodrop = mc;
  nodrop.msd_p = 0.0;
  Rng r2(5);
  auto scorer2 = EntityScorer::create(nodrop, tok.size(), vocab.size(), r2);
  Rng dummy(0);
  const auto train_logits =
      scorer2.forward_logits(examples[0].input, RunMode::train, dummy)->value;
  const auto eval_logits =
      scorer2.forward_logits(examples[0].input, RunMode::eval, dummy)->value;
  CHECK(train_logits.data == eval_logits.data);

  // analytic gradients of the full scorer + weighted bce
  std::vector<double> weights(vocab.size(), 1.0);
  auto loss_fn = [&](ParamStore&) {
    Rng r(0);
    return ag::weighted_bce_from_logits(
        scorer2.forward_logits(examples[0].input, RunMode::eval, r), examples[0].targets,
        weights);
  };
  CHECK(grad_check(loss_fn, scorer2.params, 1e-5) < 1e-4);
}

TEST_CASE("train_entity_predictor: loss decreases and search beats uniform") {
  SynthSpec spec;
  spec.dialogues = 30;
  spec.entity_count = 6;
  spec.max_turns = 4;
  spec.seed = 11;
  auto [corpus, vocab] = generate_synthetic_corpus(spec);
  const Tokenizer tok = build_tokenizer(corpus, vocab);

  EntityTrainConfig cfg;
  cfg.model.dim = 8;
  cfg.model.heads = 2;
  cfg.model.blocks = 2;
  cfg.model.msd_samples = 2;
  cfg.epochs = 4;
  cfg.use_fgm = false;
  cfg.use_ema = false;
  cfg.opt.base_lr = 0.1;
  cfg.seed = 7;
  const auto res = train_entity_predictor(corpus, vocab, tok, cfg);

  REQUIRE(res.report.epoch_losses.size() == 4);
  CHECK(res.report.epoch_losses.back() < res.report.epoch_losses.front());
  for (double th : res.thresholds.thresholds) {
    CHECK(th >= 0.3);
    CHECK(th <= 0.6);
  }
  CHECK(res.report.val_searched.f1 >= res.report.val_uniform_half.f1);

  // training twice with the same seed is bit-identical
  const auto res2 = train_entity_predictor(corpus, vocab, tok, cfg);
  CHECK(res.report.epoch_losses == res2.report.epoch_losses);
  CHECK(res.thresholds.thresholds == res2.thresholds.thresholds);
}

TEST_CASE("train_entity_predictor: fgm epsilon zero matches fgm disabled") {
  SynthSpec spec;
  spec.dialogues = 14;
  spec.entity_count = 5;
  spec.seed = 2;
  auto [corpus, vocab] = generate_synthetic_corpus(spec);
  const Tokenizer tok = build_tokenizer(corpus, vocab);

  EntityTrainConfig off;
  off.model.dim = 8;
  off.model.blocks = 1;
  off.model.msd_p = 0.0;
  off.epochs = 2;
  off.use_fgm = false;
  off.use_ema = false;
  off.seed = 4;
  EntityTrainConfig zero = off;
  zero.use_fgm = true;
  zero.opt.fgm_epsilon = 0.0;

  const auto a = train_entity_predictor(corpus, vocab, tok, off);
  const auto b = train_entity_predictor(corpus, vocab, tok, zero);
  CHECK(a.report.epoch_losses == b.report.epoch_losses);
  for (const auto& [name, e] : a.scorer.params.entries())
    CHECK(e.var->value.data == b.scorer.params.get(name)->value.data);
}
