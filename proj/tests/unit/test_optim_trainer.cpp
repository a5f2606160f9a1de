#include <doctest.h>

#include <cmath>
#include <sstream>

#include "cmcl/errors.hpp"
#include "cmcl/optim.hpp"
#include "cmcl/trainer.hpp"
#include "test_util.hpp"

using namespace cmcl;

namespace {

std::vector<DomainDataset> toy_domains(std::size_t n, std::uint64_t seed, std::size_t m = 120) {
  ScenarioSpec s;
  s.name = "toy";
  s.kind = GeneratorKind::RotatedGaussians;
  s.class_count = 3;
  s.samples_per_domain = m;
  for (std::size_t i = 0; i < n; ++i) s.source_params.push_back(15.0 * static_cast<double>(i));
  s.unseen_param = 7.0;
  s.input_dim = 3;
  s.seed = seed;
  auto all = generate(s);
  all.pop_back();
  return all;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.outer_iters = 4;
  cfg.stage_b_iters = 3;
  cfg.stage_c_iters = 2;
  cfg.batch_size = 16;
  cfg.model = {{6}, 4, true};
  cfg.classifier_optimizer = OptimizerSpec::sgd(0.1, 0.9, 5e-4);
  cfg.probe_rows = 20;
  return cfg;
}

std::vector<DomainBatch> batches_from(const std::vector<DomainDataset>& sets, std::size_t b) {
  BatchSampler s(sets, b, Rng(77));
  return s.next();
}

}  // namespace

TEST_CASE("optimizer_step") {
  Rng rng(40);
  const Tensor p0 = test::random_matrix(3, 2, rng);
  const Tensor g = test::random_matrix(3, 2, rng);

  for (OptimizerSpec spec : {OptimizerSpec::sgd(0.0, 0.9, 0.0), OptimizerSpec::adamw(0.0, 0.0),
                             OptimizerSpec::sgd(0.0, 0.9, 0.1), OptimizerSpec::adamw(0.0, 0.1)}) {
    Tensor p = p0;
    ParamState st = ParamState::zeros_like(p);
    optimizer_step(spec, st, p, g, true);
    CHECK(bit_equal(p, p0));
  }
  {
    Tensor p = p0;
    ParamState st = ParamState::zeros_like(p);
    optimizer_step(OptimizerSpec::sgd(0.1), st, p, g, true);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] == doctest::Approx(p0[i] - 0.1 * g[i]).epsilon(1e-15));
  }
  {
    // Weight decay shrinks unless decay is disabled for the slot.
    Tensor p = p0, q = p0;
    ParamState s1 = ParamState::zeros_like(p), s2 = ParamState::zeros_like(q);
    const Tensor zero({3, 2});
    optimizer_step(OptimizerSpec::sgd(0.1, 0.0, 0.5), s1, p, zero, true);
    optimizer_step(OptimizerSpec::sgd(0.1, 0.0, 0.5), s2, q, zero, false);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] == doctest::Approx(p0[i] * 0.95).epsilon(1e-15));
    CHECK(bit_equal(q, p0));
  }
  {
    // First AdamW step moves each coordinate by about lr * sign(g).
    Tensor p = p0;
    ParamState st = ParamState::zeros_like(p);
    optimizer_step(OptimizerSpec::adamw(0.01), st, p, g, true);
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(p[i] == doctest::Approx(p0[i] - 0.01 * (g[i] > 0 ? 1 : -1)).epsilon(1e-6));
    }
    CHECK(st.step == 1);
  }
  for (OptimizerSpec spec : {OptimizerSpec::sgd(0.1, 0.9), OptimizerSpec::adamw(0.05)}) {
    Tensor theta = Tensor::vector({1.0});
    ParamState st = ParamState::zeros_like(theta);
    // Heavy-ball overshoots, so only the endpoint is checked.
    for (int t = 0; t < 200; ++t) optimizer_step(spec, st, theta, Tensor::vector({2 * theta[0]}), true);
    CHECK(theta[0] * theta[0] < 1e-3);
  }
  Tensor p = p0;
  ParamState st = ParamState::zeros_like(p);
  CHECK_THROWS_AS(optimizer_step(OptimizerSpec::sgd(0.1), st, p, Tensor({2, 3}), true), DimensionError);
  CHECK_THROWS_AS(OptimizerSpec::sgd(-1.0).validate("opt"), ValidationError);
}

TEST_CASE("stage A") {
  const auto sets = toy_domains(3, 1);
  const auto batches = batches_from(sets, 8);
  TrainConfig cfg = small_config();

  SUBCASE("zero lambdas reduce to loss_ce") {
    cfg.lambda_mean = cfg.lambda_cov = 0.0;
    TrainState st = TrainState::create(cfg, 3, 3, 3);
    const double ce = loss_ce(st.model, batches);
    const StageALosses l = stage_a_step(st, batches, cfg);
    CHECK(l.total == ce);
    CHECK(l.ce == ce);
  }
  SUBCASE("every parameter moves and the EMA follows by alpha") {
    cfg.ema_alpha = 0.25;
    cfg.extractor_optimizer.weight_decay = 0.0;
    TrainState st = TrainState::create(cfg, 3, 3, 3);
    // Non-zero heads so every parameter sees gradient.
    Rng rng(3);
    for (auto& c : st.model.domain_classifiers) c.weight = test::random_matrix(3, 4, rng);
    st.model.global_classifier.weight = test::random_matrix(3, 4, rng);
    st.ema = EmaState::from_online(st.model, cfg.ema_alpha);
    const CmclModel before = st.model;
    const EmaState ema_before = st.ema;
    stage_a_step(st, batches, cfg);
    CmclModel b = before, a = st.model;
    auto pb = parameters(b), pa = parameters(a);
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK_FALSE(*pa[i].value == *pb[i].value);
    const Tensor& tw = st.ema.global_classifier().weight;
    for (std::size_t i = 0; i < tw.size(); ++i) {
      const double t0 = ema_before.global_classifier().weight[i];
      CHECK(tw[i] == doctest::Approx(t0 + 0.25 * (a.global_classifier.weight[i] - t0)).epsilon(1e-14));
    }
  }
}

TEST_CASE("stage B") {
  const auto sets = toy_domains(3, 2);
  const auto batches = batches_from(sets, 12);
  TrainConfig cfg = small_config();
  TrainState st = TrainState::create(cfg, 3, 3, 3);
  const FeatureExtractor fx = st.model.extractor;
  const EmaState ema = st.ema;
  const double before = loss_dsc(st.model, batches);
  const double reported = stage_b_step(st, batches, cfg);
  CHECK(reported == before);
  CHECK(st.model.extractor == fx);
  CHECK(st.ema == ema);
  CHECK(bit_equal(st.model.global_classifier.weight, average_classifiers(st.model).weight));
  // Convex in W with frozen features: a small step does not increase the loss.
  CHECK(loss_dsc(st.model, batches) <= before);
}

TEST_CASE("stage C") {
  const auto sets = toy_domains(3, 3);
  const auto batches = batches_from(sets, 12);
  TrainConfig cfg = small_config();
  TrainState st = TrainState::create(cfg, 3, 3, 3);
  Rng rng(5);
  for (auto& c : st.model.domain_classifiers) c.weight = test::random_matrix(3, 4, rng);
  const auto heads = st.model.domain_classifiers;
  const Tensor g0 = st.model.global_classifier.weight;
  stage_c_step(st, batches, cfg);
  CHECK(st.model.domain_classifiers == heads);
  CHECK_FALSE(st.model.global_classifier.weight == g0);

  // N = 1: no cross-domain terms, only the global head's likelihood remains.
  const auto one = toy_domains(1, 4);
  const auto b1 = batches_from(one, 10);
  TrainState s1 = TrainState::create(cfg, 3, 3, 1);
  s1.model.domain_classifiers[0].weight = test::random_matrix(3, 4, rng);
  CmclModel global_only = s1.model;
  global_only.domain_classifiers[0].weight = Tensor({3, 4});
  const double l = stage_c_step(s1, b1, cfg);
  double oracle = 0;
  const Tensor lp = posterior(global_only.global_classifier, extract_features(global_only.extractor, b1[0].x));
  for (std::size_t r = 0; r < b1[0].size(); ++r) oracle -= lp(r, static_cast<std::size_t>(b1[0].y[r]));
  CHECK(l == doctest::Approx(oracle / 10.0).epsilon(1e-13));
}

TEST_CASE("train") {
  const auto sets = toy_domains(2, 6);
  std::vector<DomainDataset> tr, va;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    auto [a, b] = split_train_val(sets[i], 0.2, 10 + i);
    tr.push_back(a);
    va.push_back(b);
  }
  TrainConfig cfg = small_config();

  SUBCASE("zero outer iterations") {
    cfg.outer_iters = 0;
    const TrainResult r = train(cfg, tr, va);
    CHECK(r.metrics.empty());
    CHECK(r.model == TrainState::create(cfg, 3, 3, 2).model);
    std::ostringstream csv;
    write_metrics_csv(csv, r.metrics);
    CHECK(csv.str() == std::string(kMetricsHeader) + "\n");
  }
  SUBCASE("deterministic") {
    const TrainResult a = train(cfg, tr, va), b = train(cfg, tr, va);
    std::ostringstream ca, cb;
    write_metrics_csv(ca, a.metrics);
    write_metrics_csv(cb, b.metrics);
    CHECK(ca.str() == cb.str());
    CHECK(a.metrics.size() == cfg.outer_iters * (1 + 3 + 2));
    CHECK(a.model == b.model);
    cfg.seed = 1;
    std::ostringstream cc;
    write_metrics_csv(cc, train(cfg, tr, va).metrics);
    CHECK(cc.str() != ca.str());
  }
  SUBCASE("validation rows") {
    cfg.eval_every = 3;
    const TrainResult r = train(cfg, tr, va);
    std::size_t evaluated = 0;
    for (const auto& row : r.metrics) evaluated += row.val_acc_target.has_value();
    CHECK(evaluated == 2);  // outer 3 and the last one
    CHECK(r.best_val_acc.has_value());
  }
  SUBCASE("invalid config is rejected before any step") {
    cfg.ema_alpha = 0.0;
    CHECK_THROWS_AS(train(cfg, tr, va), ValidationError);
    cfg.ema_alpha = 0.5;
    CHECK_THROWS_AS(train(cfg, {tr[0]}, {va[0]}), ValidationError);
  }
  SUBCASE("divergence is reported with the step") {
    cfg.extractor_optimizer.lr = 1e300;
    try {
      train(cfg, tr, va);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("outer iteration 1") != std::string::npos);
    }
  }
  SUBCASE("default stage counts") {
    const TrainConfig d;
    CHECK(d.stage_a_iters == 1);
    CHECK(d.stage_b_iters == 8);
    CHECK(d.stage_c_iters == 6);
    CHECK(d.ema_alpha == 0.001);
    CHECK(d.lambda_mean == 0.001);
    CHECK(d.lambda_cov == 0.01);
  }
}

TEST_CASE("accuracy") {
  const auto sets = toy_domains(2, 7);
  Rng rng(1);
  const CmclModel m = test::random_model(rng, 2, 3, 3, 4);
  const DomainDataset& ds = sets[0];
  const Tensor lp = posterior(m.global_classifier, extract_features(m.extractor, ds.x));
  std::size_t correct = 0;
  for (std::size_t r = 0; r < ds.size(); ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 3; ++k)
      if (lp(r, k) > lp(r, best)) best = k;
    correct += best == static_cast<std::size_t>(ds.y[r]);
  }
  CHECK(accuracy(m.extractor, m.global_classifier, ds) == static_cast<double>(correct) / ds.size());
  CHECK_THROWS_AS(accuracy(m.extractor, SoftmaxClassifier::zeros(2, 4), ds), DimensionError);
}

TEST_CASE("metrics csv formatting") {
  MetricsRow row;
  row.outer_iter = 2;
  row.stage = 'B';
  row.inner_iter = 3;
  row.loss_dsc = 0.5;
  row.align_symkl = 0.1;
  std::ostringstream out;
  write_metrics_csv(out, std::vector<MetricsRow>{row});
  CHECK(out.str() == std::string(kMetricsHeader) + "\n2,B,3,,,,0.5,,0.1,,\n");
  CHECK(format_metric(1.0 / 3.0) == "0.3333333333333333");
}
