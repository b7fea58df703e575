#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "masklab/checkpoint.hpp"
#include "masklab/model.hpp"
#include "masklab/tasks.hpp"
#include "masklab/training.hpp"

using namespace masklab;

namespace {

std::vector<std::pair<std::string, Tensor>> one_param(double value,
                                                      double grad) {
  Tensor p = Tensor::from_values({1}, {value});
  p.set_requires_grad(true);
  p.ensure_grad();
  p.add_grad(0, grad);
  return {{"p", p}};
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 10;
  cfg.model_dim = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.ffn_mult = 2;
  cfg.max_len = 8;
  cfg.gamma = 0.5;
  return cfg;
}

TrainConfig tiny_train(int steps) {
  TrainConfig tc;
  tc.peak_lr = 5e-3;
  tc.warmup_steps = 5;
  tc.total_steps = steps;
  tc.batch_size = 2;
  tc.seq_len = 4;
  tc.seed = 7;
  return tc;
}

SampleFn mapping_sampler() {
  TaskSpec spec;
  spec.kind = TaskKind::pos_mapping;
  spec.min_len = 4;
  spec.max_len = 4;
  spec.n_max = 8;
  return task_sampler(spec);
}

}  // namespace

TEST_CASE("lr schedule") {
  TrainConfig cfg;
  cfg.peak_lr = 1e-3;
  cfg.begin_lr = 1e-4;
  cfg.warmup_steps = 10;
  cfg.total_steps = 110;

  SUBCASE("warmup endpoints and interior") {
    CHECK(lr_at(0, cfg) == 1e-4);
    CHECK(lr_at(10, cfg) == 1e-3);
    CHECK(lr_at(5, cfg) == doctest::Approx(1e-4 + 9e-4 * 0.5).epsilon(1e-14));
  }
  SUBCASE("cosine midpoint is half the peak") {
    cfg.decay = DecayKind::cosine;
    CHECK(lr_at(60, cfg) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(lr_at(110, cfg) == 0.0);
    CHECK(lr_at(200, cfg) == 0.0);
  }
  SUBCASE("linear midpoint and endpoint") {
    cfg.decay = DecayKind::linear;
    CHECK(lr_at(60, cfg) == doctest::Approx(5e-4).epsilon(1e-14));
    CHECK(lr_at(110, cfg) == 0.0);
  }
  SUBCASE("continuous at the junction") {
    for (DecayKind k : {DecayKind::linear, DecayKind::cosine}) {
      cfg.decay = k;
      double gap = std::abs(lr_at(11, cfg) - lr_at(10, cfg));
      CHECK(gap < 2.0 * cfg.peak_lr / (cfg.total_steps - cfg.warmup_steps));
    }
  }
  SUBCASE("monotone up then down") {
    cfg.decay = DecayKind::cosine;
    for (int s = 1; s <= 10; ++s) CHECK(lr_at(s, cfg) > lr_at(s - 1, cfg));
    for (int s = 11; s <= 110; ++s) CHECK(lr_at(s, cfg) < lr_at(s - 1, cfg));
  }
  SUBCASE("validation") {
    TrainConfig bad = cfg;
    bad.warmup_steps = 200;
    CHECK_THROWS_AS(lr_at(0, bad), std::invalid_argument);
    bad = cfg;
    bad.peak_lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.beta2 = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    CHECK_THROWS_AS(lr_at(-1, cfg), std::invalid_argument);
  }
  SUBCASE("decay names round trip") {
    CHECK(decay_kind_from_name("linear") == DecayKind::linear);
    CHECK(decay_kind_from_name(decay_kind_name(DecayKind::cosine)) ==
          DecayKind::cosine);
    CHECK_THROWS_AS(decay_kind_from_name("step"), std::invalid_argument);
  }
}

TEST_CASE("gradient clipping") {
  SUBCASE("norm below max leaves grads untouched") {
    auto params = one_param(1.0, 0.25);
    double norm = -1.0;
    double factor = clip_global_norm(params, 1.0, &norm);
    CHECK(factor == 1.0);
    CHECK(norm == 0.25);
    CHECK(params[0].second.grad_at(0) == 0.25);
  }
  SUBCASE("norm 2 against max 1 rescales to unit norm") {
    Tensor p = Tensor::from_values({2}, {0.0, 0.0});
    p.set_requires_grad(true);
    p.ensure_grad();
    p.add_grad(0, 2.0 * std::sqrt(0.5));
    p.add_grad(1, 2.0 * std::sqrt(0.5));
    std::vector<std::pair<std::string, Tensor>> params = {{"p", p}};
    double norm = 0.0;
    double factor = clip_global_norm(params, 1.0, &norm);
    CHECK(norm == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(factor == doctest::Approx(0.5).epsilon(1e-12));
    double post = std::sqrt(p.grad_at(0) * p.grad_at(0) +
                            p.grad_at(1) * p.grad_at(1));
    CHECK(post == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("random grads end at or below the cap") {
    std::mt19937_64 rng(3);
    for (int rep = 0; rep < 10; ++rep) {
      Tensor p = Tensor::zeros({17});
      p.set_requires_grad(true);
      p.ensure_grad();
      for (int i = 0; i < 17; ++i) {
        p.add_grad(i, 4.0 * (static_cast<double>(rng() % 1000) / 500.0 - 1.0));
      }
      std::vector<std::pair<std::string, Tensor>> params = {{"p", p}};
      clip_global_norm(params, 0.7, nullptr);
      double sq = 0.0;
      for (int i = 0; i < 17; ++i) sq += p.grad_at(i) * p.grad_at(i);
      CHECK(std::sqrt(sq) <= 0.7 + 1e-12);
    }
  }
  SUBCASE("non-finite gradients abort") {
    auto nan_params = one_param(0.0, std::numeric_limits<double>::quiet_NaN());
    CHECK_THROWS_AS(clip_global_norm(nan_params, 1.0, nullptr),
                    std::runtime_error);
    auto inf_params = one_param(0.0, std::numeric_limits<double>::infinity());
    CHECK_THROWS_AS(clip_global_norm(inf_params, 1.0, nullptr),
                    std::runtime_error);
  }
}

TEST_CASE("AdamW updates") {
  TrainConfig cfg;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.98;
  cfg.eps = 1e-8;

  SUBCASE("zero grad, zero decay leaves the param alone") {
    auto params = one_param(1.5, 0.0);
    AdamW opt(params, cfg);
    opt.step(0.1);
    CHECK(params[0].second.at(0) == 1.5);
  }
  SUBCASE("single scalar step matches the closed form") {
    auto params = one_param(2.0, 0.5);
    AdamW opt(params, cfg);
    opt.step(0.1);
    double m = (1.0 - 0.9) * 0.5;
    double v = (1.0 - 0.98) * 0.25;
    double mhat = m / (1.0 - 0.9);
    double vhat = v / (1.0 - 0.98);
    double want = 2.0 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(params[0].second.at(0) == doctest::Approx(want).epsilon(1e-15));
  }
  SUBCASE("two steps with constant grad match the recurrence") {
    auto params = one_param(1.0, -0.3);
    AdamW opt(params, cfg);
    opt.step(0.05);
    params[0].second.zero_grad();
    params[0].second.add_grad(0, -0.3);
    opt.step(0.05);
    CHECK(opt.t() == 2);

    double m = 0.0, v = 0.0, p = 1.0;
    for (int t = 1; t <= 2; ++t) {
      m = 0.9 * m + 0.1 * (-0.3);
      v = 0.98 * v + 0.02 * 0.09;
      double mhat = m / (1.0 - std::pow(0.9, t));
      double vhat = v / (1.0 - std::pow(0.98, t));
      p -= 0.05 * mhat / (std::sqrt(vhat) + 1e-8);
    }
    CHECK(params[0].second.at(0) == doctest::Approx(p).epsilon(1e-14));
  }
  SUBCASE("decay-only step shrinks by lr * wd") {
    cfg.weight_decay = 0.1;
    auto params = one_param(3.0, 0.0);
    AdamW opt(params, cfg);
    opt.step(0.2);
    CHECK(params[0].second.at(0) == doctest::Approx(3.0 * (1.0 - 0.2 * 0.1)).epsilon(1e-14));
  }
  SUBCASE("non-finite grad aborts") {
    auto params = one_param(0.0, std::numeric_limits<double>::quiet_NaN());
    AdamW opt(params, cfg);
    CHECK_THROWS_AS(opt.step(0.1), std::runtime_error);
  }
  SUBCASE("state export and import") {
    Model a(tiny_config(), 3);
    Model b(tiny_config(), 4);
    TrainConfig tc = tiny_train(6);
    AdamW oa(a.named_params(), tc);
    AdamW ob(b.named_params(), tc);

    Graph g;
    Tensor loss = a.loss_lm(g, {1, 2, 3, 4});
    g.backward(loss);
    oa.step(1e-3);

    OptStateBlob blob = oa.state();
    CHECK(blob.t == 1);
    ob.load_state(blob);
    CHECK(ob.t() == 1);
    OptStateBlob back = ob.state();
    for (std::size_t pi = 0; pi < blob.m.size(); ++pi) {
      const Tensor& want = blob.m[pi].second;
      const Tensor& got = back.m[pi].second;
      for (std::int64_t i = 0; i < want.numel(); ++i) {
        CHECK(got.at(i) == want.at(i));
      }
    }

    OptStateBlob bad = blob;
    bad.m.pop_back();
    bad.v.pop_back();
    CHECK_THROWS_AS(ob.load_state(bad), std::runtime_error);
  }
}

TEST_CASE("train loop") {
  SUBCASE("metrics stream is consistent and deterministic") {
    TrainConfig tc = tiny_train(5);
    SampleFn fn = mapping_sampler();

    Model a(tiny_config(), 1);
    std::vector<StepMetrics> seen;
    TrainOptions opts;
    opts.sink = [&seen](const StepMetrics& m) { seen.push_back(m); };
    TrainResult ra = train_model(a, fn, tc, opts);

    REQUIRE(ra.history.size() == 5);
    REQUIRE(seen.size() == 5);
    for (int s = 0; s < 5; ++s) {
      CHECK(ra.history[s].step == s);
      CHECK(ra.history[s].lr == lr_at(s, tc));
      CHECK(std::isfinite(ra.history[s].loss));
      CHECK(ra.history[s].grad_norm >= 0.0);
      CHECK(seen[s].loss == ra.history[s].loss);
    }

    Model b(tiny_config(), 1);
    TrainResult rb = train_model(b, fn, tc, {});
    for (int s = 0; s < 5; ++s) {
      CHECK(ra.history[s].loss == rb.history[s].loss);
      CHECK(ra.history[s].grad_norm == rb.history[s].grad_norm);
    }
    for (const auto& [name, pa] : a.named_params()) {
      Tensor pb = b.param(name);
      for (std::int64_t i = 0; i < pa.numel(); ++i) {
        CHECK(pa.at(i) == pb.at(i));
      }
    }
  }
  SUBCASE("loss trends down on the mapping task") {
    TrainConfig tc = tiny_train(60);
    tc.peak_lr = 8e-3;
    Model model(tiny_config(), 2);
    TrainResult r = train_model(model, mapping_sampler(), tc, {});
    double early = 0.0, late = 0.0;
    for (int s = 0; s < 20; ++s) early += r.history[s].loss;
    for (int s = 40; s < 60; ++s) late += r.history[s].loss;
    CHECK(late < early);
  }
  SUBCASE("eval hook can stop early") {
    TrainConfig tc = tiny_train(50);
    Model model(tiny_config(), 1);
    TrainOptions opts;
    std::vector<int> eval_steps;
    opts.eval_every = 2;
    opts.eval = [&eval_steps](int step, const Model&) {
      eval_steps.push_back(step);
      return step >= 6;
    };
    TrainResult r = train_model(model, mapping_sampler(), tc, opts);
    CHECK(r.stopped_early);
    CHECK(r.steps_run == 6);
    CHECK(eval_steps == std::vector<int>{2, 4, 6});
  }
  SUBCASE("metrics serialize to JSON lines") {
    StepMetrics m;
    m.step = 3;
    m.loss = 1.5;
    m.lr = 1e-3;
    m.grad_norm = 0.25;
    m.wall_ms = 12.5;
    std::string line = step_metrics_to_json(m);
    CHECK(line.find("\"step\":3") != std::string::npos);
    CHECK(line.find("\"loss\":1.5") != std::string::npos);
    CHECK(line.find("\"grad_norm\":0.25") != std::string::npos);
  }
}
