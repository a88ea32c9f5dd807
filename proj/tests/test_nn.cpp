#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <limits>

#include "medgen/nn.hpp"

using namespace medgen;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

TEST_CASE("autograd: add/mul/tanh/matmul gradients match finite differences") {
  Rng rng(11);
  ParamStore ps;
  ps.add("a", gaussian_init({3, 4}, 0.5, rng));
  ps.add("b", gaussian_init({4, 2}, 0.5, rng));
  ps.add("r", gaussian_init({1, 2}, 0.5, rng));
  auto loss_fn = [](ParamStore& p) {
    auto h = ag::tanh(ag::add_row(ag::matmul(p.get("a"), p.get("b")), p.get("r")));
    auto sq = ag::mul(h, h);
    return ag::scale(ag::matmul(ag::matmul(ag::constant(Tensor::matrix(1, 3, 1.0)), sq),
                                ag::constant(Tensor::matrix(2, 1, 1.0))),
                     0.5);
  };
  CHECK(grad_check(loss_fn, ps) < 1e-5);
}

TEST_CASE("autograd: gather/slice/concat/mean/softmax gradients") {
  Rng rng(12);
  ParamStore ps;
  ps.add("table", gaussian_init({5, 4}, 0.7, rng));
  auto loss_fn = [](ParamStore& p) {
    auto rows = ag::gather_rows(p.get("table"), {0, 3, 3, 1});
    auto left = ag::slice_cols(rows, 0, 2);
    auto right = ag::slice_cols(rows, 2, 2);
    auto cat = ag::concat_rows({left, right});
    Mask m = full_mask(8, 2);
    m[0][0] = false;  // exercise the masked branch
    auto sm = ag::masked_softmax_rows(cat, m);
    auto pooled = ag::mean_rows(ag::mul(sm, cat));
    return ag::matmul(pooled, ag::constant(Tensor::matrix(2, 1, 1.0)));
  };
  CHECK(grad_check(loss_fn, ps) < 1e-5);
}

TEST_CASE("autograd: nll and weighted bce closed forms") {
  // two rows of logits, targets 0 and 2; oracle by direct log-softmax
  Tensor logits({2, 3}, {1.0, 2.0, 3.0, 0.5, -0.5, 0.25});
  auto v = ag::leaf(logits);
  auto loss = ag::nll_from_logits(v, {0, 2});
  double expect = 0.0;
  for (std::size_t i : {0, 1}) {
    double z = 0.0;
    for (std::size_t j = 0; j < 3; ++j) z += std::exp(logits.at(i, j));
    expect -= logits.at(i, i == 0 ? 0 : 2) - std::log(z);
  }
  CHECK_THAT(loss->value[0], WithinRel(expect, 1e-12));
  ag::backward(loss);
  // gradient at (0,0) is softmax - 1
  const double p00 = std::exp(1.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  CHECK_THAT(v->grad.at(0, 0), WithinAbs(p00 - 1.0, 1e-12));

  // weighted bce closed form, k = 2
  auto l2 = ag::leaf(Tensor({2}, {0.0, 2.0}));
  auto bce = ag::weighted_bce_from_logits(l2, {1.0, 0.0}, {2.0, 0.5});
  const double s0 = 0.5, s1 = 1.0 / (1.0 + std::exp(-2.0));
  const double want = -(2.0 * std::log(s0) + 0.5 * std::log(1.0 - s1)) / 2.0;
  CHECK_THAT(bce->value[0], WithinRel(want, 1e-12));
  ag::backward(bce);
  CHECK_THAT(l2->grad[0], WithinAbs(2.0 * (s0 - 1.0) / 2.0, 1e-12));
  CHECK_THAT(l2->grad[1], WithinAbs(0.5 * (s1 - 0.0) / 2.0, 1e-12));

  CHECK_THROWS(ag::weighted_bce_from_logits(l2, {1.0, 0.0}, {0.0, 1.0}));
  // extreme logits stay finite thanks to the sigma clamp
  auto big = ag::leaf(Tensor({1}, {1000.0}));
  auto bl = ag::weighted_bce_from_logits(big, {0.0}, {1.0});
  CHECK(std::isfinite(bl->value[0]));
}

TEST_CASE("masks: shapes and visibility patterns") {
  const auto c = causal_mask(4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(c[i][j] == (j <= i));
  const auto w = window_mask(5, 2);
  CHECK(w[4][4]);
  CHECK(w[4][3]);
  CHECK_FALSE(w[4][2]);
  CHECK(w[0][0]);
  CHECK_FALSE(w[0][1]);
  Mask none(1, std::vector<bool>(2, false));
  auto s = ag::constant(Tensor::matrix(1, 2));
  CHECK_THROWS_AS(ag::masked_softmax_rows(s, none), std::domain_error);
}

TEST_CASE("scaled_dot_attention: scalar hand oracle") {
  // one query, two keys of width 1: weights = softmax(q*k/sqrt(1))
  auto q = ag::constant(Tensor({1, 1}, {2.0}));
  auto k = ag::constant(Tensor({2, 1}, {1.0, -1.0}));
  auto v = ag::constant(Tensor({2, 1}, {10.0, 20.0}));
  auto out = scaled_dot_attention(q, k, v, full_mask(1, 2));
  const double w0 = std::exp(2.0) / (std::exp(2.0) + std::exp(-2.0));
  CHECK_THAT(out->value[0], WithinRel(10.0 * w0 + 20.0 * (1.0 - w0), 1e-12));

  // masking the second key makes the output exactly v[0]
  Mask m = full_mask(1, 2);
  m[0][1] = false;
  auto masked = scaled_dot_attention(q, k, v, m);
  CHECK_THAT(masked->value[0], WithinAbs(10.0, 1e-12));
}

TEST_CASE("mmca: masked rows ignore future values; gradients check out") {
  Rng rng(13);
  ParamStore ps;
  auto layer = MmcaLayer::create(ps, "mmca", 4, 2, 1, rng);
  Tensor x = gaussian_init({3, 4}, 1.0, rng);
  auto run = [&](const Tensor& inp) {
    auto v = ag::constant(inp);
    return layer.apply(v, v, v, causal_mask(3))->value;
  };
  const Tensor base = run(x);
  Tensor x2 = x;
  x2.at(2, 0) += 5.0;  // perturb the last position only
  const Tensor pert = run(x2);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK_THAT(pert.at(0, j), WithinAbs(base.at(0, j), 1e-12));
    CHECK_THAT(pert.at(1, j), WithinAbs(base.at(1, j), 1e-12));
  }

  auto loss_fn = [&x](ParamStore& p) {
    auto layer2 = MmcaLayer::from_store(p, "mmca", 2);
    auto v = ag::constant(x);
    auto out = layer2.apply(v, v, v, causal_mask(3));
    return ag::matmul(ag::matmul(ag::constant(Tensor::matrix(1, 3, 1.0)), ag::tanh(out)),
                      ag::constant(Tensor::matrix(4, 1, 1.0)));
  };
  CHECK(grad_check(loss_fn, ps) < 1e-5);

  CHECK_THROWS(MmcaLayer::create(ps, "bad", 5, 2, 0, rng));
}

TEST_CASE("optimizer_step: depth-stratified lr and EMA oracle") {
  ParamStore ps;
  auto a = ps.add("a", Tensor({1}, {1.0}), 0);
  auto b = ps.add("b", Tensor({1}, {1.0}), 2);
  a->grad[0] = 0.5;
  b->grad[0] = 0.5;
  OptimizerConfig cfg;
  cfg.base_lr = 0.1;
  cfg.layer_decay = 0.5;
  cfg.ema_decay = 0.9;
  optimizer_step(ps, cfg);
  CHECK_THAT(a->value[0], WithinAbs(1.0 - 0.1 * 0.5, 1e-15));
  CHECK_THAT(b->value[0], WithinAbs(1.0 - 0.1 * 0.25 * 0.5, 1e-15));
  // shadow starts at init value 1.0
  CHECK_THAT(ps.entries().at("a").shadow[0], WithinAbs(0.9 * 1.0 + 0.1 * 0.95, 1e-15));

  a->grad[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS(optimizer_step(ps, cfg));

  OptimizerConfig bad;
  bad.base_lr = 0.0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("fgm_perturb: unit oracle and degenerate cases") {
  Tensor e({2}, {1.0, 2.0});
  Tensor g({2}, {3.0, 4.0});  // norm 5
  const Tensor out = fgm_perturb(e, g, 0.5);
  CHECK_THAT(out[0], WithinAbs(1.0 + 0.5 * 3.0 / 5.0, 1e-15));
  CHECK_THAT(out[1], WithinAbs(2.0 + 0.5 * 4.0 / 5.0, 1e-15));

  const Tensor zero_eps = fgm_perturb(e, g, 0.0);
  CHECK(zero_eps.data == e.data);
  Tensor g0({2}, {0.0, 0.0});
  CHECK(fgm_perturb(e, g0, 1.0).data == e.data);
  CHECK_THROWS(fgm_perturb(e, Tensor({3}), 1.0));
}

TEST_CASE("multi_sample_dropout: eval bypass and expectation property") {
  Rng rng(21);
  auto h = ag::constant(Tensor({1, 8}, {1, 2, 3, 4, 5, 6, 7, 8}));
  auto head = [](const ag::Var& x) {
    return ag::matmul(x, ag::constant(Tensor::matrix(8, 1, 1.0)));
  };
  const double plain = head(h)->value[0];
  CHECK(multi_sample_dropout(h, 4, 0.3, head, RunMode::eval, rng)->value[0] == plain);
  CHECK(multi_sample_dropout(h, 4, 0.0, head, RunMode::train, rng)->value[0] == plain);

  // with a linear head, the mean over many samples approaches the plain value
  double acc = 0.0;
  const int reps = 4000;
  for (int r = 0; r < reps; ++r)
    acc += multi_sample_dropout(h, 2, 0.3, head, RunMode::train, rng)->value[0];
  CHECK_THAT(acc / reps, WithinAbs(plain, plain * 0.05));

  CHECK_THROWS(multi_sample_dropout(h, 0, 0.1, head, RunMode::train, rng));
  CHECK_THROWS(multi_sample_dropout(h, 2, 1.0, head, RunMode::train, rng));
}

TEST_CASE("checkpoint: round-trip preserves values, depths, shapes") {
  Rng rng(31);
  ParamStore ps;
  ps.add("w", gaussian_init({2, 3}, 1.0, rng), 2);
  ps.add("b", gaussian_init({1, 3}, 1.0, rng), 0);
  const auto path =
      (std::filesystem::temp_directory_path() / "medgen_ckpt.json").string();
  save_checkpoint(ps, path);

  ParamStore fresh;
  load_checkpoint(fresh, path);
  CHECK(fresh.entries().at("w").depth == 2);
  CHECK(fresh.get("w")->value.data == ps.get("w")->value.data);
  CHECK(fresh.get("b")->value.shape == std::vector<std::size_t>{1, 3});

  // loading into an existing store with wrong shapes is rejected
  ParamStore wrong;
  wrong.add("w", Tensor::matrix(3, 3));
  CHECK_THROWS(load_checkpoint(wrong, path));
}
