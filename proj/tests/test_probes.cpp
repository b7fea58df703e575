#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>
#include <vector>

#include "masklab/masking.hpp"
#include "masklab/model.hpp"
#include "masklab/probes.hpp"
#include "masklab/tasks.hpp"

using namespace masklab;

namespace {

ModelConfig probe_config(MaskKind kind) {
  ModelConfig cfg;
  cfg.vocab_size = 12;
  cfg.model_dim = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.ffn_mult = 2;
  cfg.max_len = 16;
  cfg.mask_kind = kind;
  cfg.gamma = 0.5;
  return cfg;
}

// Zeroing every query projection makes all attention scores constant, so
// each row's visible weights are uniform.
void zero_queries(Model& model) {
  for (const auto& [name, p] : model.named_params()) {
    if (name.find(".wq") != std::string::npos) {
      Tensor t = p;
      t.fill(0.0);
    }
  }
}

TaskSample fixed_sample(int n, int token = 1) {
  TaskSample s;
  s.input.assign(static_cast<std::size_t>(n), token);
  s.target.assign(static_cast<std::size_t>(n), 0);
  s.scored.assign(static_cast<std::size_t>(n), 1);
  return s;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/masklab_probe_") + name;
}

}  // namespace

TEST_CASE("da_scan flag logic on uniform attention") {
  Model model(probe_config(MaskKind::vanilla), 5);
  zero_queries(model);
  const int n = 8;
  std::vector<TaskSample> samples = {fixed_sample(n)};

  // Uniform visible attention: the final row puts 1/n on each position,
  // so prefix mass at i is exactly i/n.
  SUBCASE("uniform attention never beats the analytic information share") {
    // The chain is close to deterministic, so even a one-token prefix
    // predicts the continuation nearly as well as the whole sequence and
    // its information share exceeds the uniform mass i/n everywhere.
    int vocab = model.config().vocab_size;
    for (int i = 1; i < n; ++i) {
      CHECK(static_cast<double>(i) / n < mutual_info_ratio(i, n, vocab));
    }
    DAReport report = da_scan(model, samples, 0.0);
    CHECK(report.union_flag_rate == 0.0);
  }
  SUBCASE("flag flips with eps around a fixed threshold") {
    // Prefix mass at i = 4 is exactly 0.5; against ratio 0.4 the flag
    // fires iff 0.5 > 0.4 + eps.
    MIRatioFn fixed = [](int, int) { return 0.4; };
    DAReport flagged = da_scan(model, samples, 0.05, fixed);
    CHECK(flagged.pair_flag_rate[3] == 1.0);
    CHECK(flagged.union_flag_rate == 1.0);

    DAReport clean = da_scan(model, samples, 0.2, fixed);
    CHECK(clean.pair_flag_rate[3] == 0.0);
  }
  SUBCASE("eps = 1 never flags") {
    DAReport report = da_scan(model, samples, 1.0);
    CHECK(report.union_flag_rate == 0.0);
    for (double r : report.pair_flag_rate) CHECK(r == 0.0);
    for (const DAHeadReport& hr : report.heads) CHECK(hr.flag_rate == 0.0);
  }
  SUBCASE("ratio = 1 threshold cannot be exceeded") {
    MIRatioFn unit = [](int, int) { return 1.0; };
    DAReport report = da_scan(model, samples, 1e-9, unit);
    CHECK(report.union_flag_rate == 0.0);
  }
  SUBCASE("ratio = 0 flags every nonempty prefix") {
    MIRatioFn zero = [](int, int) { return 0.0; };
    DAReport report = da_scan(model, samples, 1e-6, zero);
    CHECK(report.union_flag_rate == 1.0);
    for (double r : report.pair_flag_rate) CHECK(r == 1.0);
  }
  SUBCASE("token-class masses partition the final row") {
    DAReport report = da_scan(model, samples, 1.0, {}, 1);
    for (const DAHeadReport& hr : report.heads) {
      CHECK(hr.mass_initial == doctest::Approx(1.0 / n).epsilon(1e-12));
      // Every non-initial token is the sentinel id here.
      CHECK(hr.mass_other == 0.0);
      double total = hr.mass_initial + hr.mass_sentinel + hr.mass_other;
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(hr.mass_initial >= 0.0);
      CHECK(hr.mass_initial <= 1.0);
    }
  }
}

TEST_CASE("da_scan bookkeeping") {
  Model model(probe_config(MaskKind::stablemask), 6);
  std::mt19937_64 rng(11);
  std::vector<TaskSample> samples;
  for (int i = 0; i < 4; ++i) {
    samples.push_back(gen_soft_copy_last(8, model.config().vocab_size, rng));
  }

  SUBCASE("deterministic and serializable") {
    DAReport a = da_scan(model, samples, 0.05);
    DAReport b = da_scan(model, samples, 0.05);
    CHECK(da_report_to_json(a) == da_report_to_json(b));
    CHECK(a.samples == 4);
    CHECK(static_cast<int>(a.heads.size()) ==
          model.config().n_layers * model.config().n_heads);
    std::string json = da_report_to_json(a);
    CHECK(json.find("union_flag_rate") != std::string::npos);
    CHECK(json.find("pair_flag_rate") != std::string::npos);
  }
  SUBCASE("rates are probabilities") {
    DAReport report = da_scan(model, samples, 0.0);
    CHECK(report.union_flag_rate >= 0.0);
    CHECK(report.union_flag_rate <= 1.0);
    for (double r : report.pair_flag_rate) {
      CHECK(r >= 0.0);
      CHECK(r <= 1.0);
    }
  }
  SUBCASE("empty dataset rejected") {
    CHECK_THROWS_AS(da_scan(model, {}, 0.05), std::invalid_argument);
  }
}

TEST_CASE("mask_ratio_curve") {
  SUBCASE("stablemask curve ends at 1 and matches xi under constant scores") {
    Model model(probe_config(MaskKind::stablemask), 7);
    zero_queries(model);
    const int n = 10;
    std::vector<int> input(n, 2);
    std::vector<double> curve = mask_ratio_curve(model, input);
    REQUIRE(static_cast<int>(curve.size()) == n);
    CHECK(curve[n - 1] == doctest::Approx(1.0).epsilon(1e-12));
    for (int i = 1; i <= n; ++i) {
      CHECK(curve[i - 1] ==
            doctest::Approx(xi_position(i, n, 0.5)).epsilon(1e-12));
      CHECK(curve[i - 1] > 0.0);
      CHECK(curve[i - 1] <= 1.0 + 1e-15);
    }
  }
  SUBCASE("vanilla curve is identically 1") {
    Model model(probe_config(MaskKind::vanilla), 7);
    std::vector<double> curve = mask_ratio_curve(model, {1, 2, 3, 4, 5});
    for (double a : curve) CHECK(a == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("first_token_trend") {
  const int n = 9;
  std::vector<TaskSample> samples = {fixed_sample(n, 1), fixed_sample(n, 3)};

  SUBCASE("uniform vanilla attention gives the 1/i curve") {
    Model model(probe_config(MaskKind::vanilla), 8);
    zero_queries(model);
    std::vector<TrendPoint> series = first_token_trend(model, samples);
    REQUIRE(static_cast<int>(series.size()) == n);
    for (int t = 0; t < n; ++t) {
      CHECK(series[static_cast<std::size_t>(t)].position == t + 1);
      CHECK(series[static_cast<std::size_t>(t)].mean_first_mass ==
            doctest::Approx(1.0 / (t + 1)).epsilon(1e-12));
    }
    CHECK(series[0].mean_first_mass == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("stablemask uniform rows follow xi_i / i") {
    Model model(probe_config(MaskKind::stablemask), 8);
    zero_queries(model);
    std::vector<TrendPoint> series = first_token_trend(model, samples);
    for (int i = 1; i <= n; ++i) {
      CHECK(series[static_cast<std::size_t>(i) - 1].mean_first_mass ==
            doctest::Approx(xi_position(i, n, 0.5) / i).epsilon(1e-12));
    }
    CHECK(series[0].mean_first_mass < 1.0);
  }
  SUBCASE("ragged lengths pool only the samples that reach a position") {
    Model model(probe_config(MaskKind::vanilla), 8);
    zero_queries(model);
    std::vector<TaskSample> ragged = {fixed_sample(4), fixed_sample(6)};
    std::vector<TrendPoint> series = first_token_trend(model, ragged);
    REQUIRE(series.size() == 6);
    CHECK(series[5].mean_first_mass == doctest::Approx(1.0 / 6).epsilon(1e-12));
  }
}

TEST_CASE("attention CSV dump") {
  Model model(probe_config(MaskKind::stablemask), 9);
  Graph g(Graph::Mode::no_grad);
  AttnTrace trace;
  ForwardOptions opts;
  opts.trace = &trace;
  model.forward_logits(g, {1, 2}, opts);
  std::string path = temp_path("attn.csv");

  SUBCASE("upper-right zero and row sums equal alpha") {
    dump_attention(trace, path);
    AttnTrace back = load_attention_csv(path);
    REQUIRE(back.heads.size() == trace.heads.size());
    const AttnHeadTrace& head = back.heads.front();
    CHECK(head.attn.at(1) == 0.0);
    for (int i = 0; i < 2; ++i) {
      double row_sum = head.attn.at(2 * i) + head.attn.at(2 * i + 1);
      CHECK(row_sum == doctest::Approx(head.alpha[static_cast<std::size_t>(i)])
                           .epsilon(1e-15));
    }
    std::remove(path.c_str());
  }
  SUBCASE("round trip is bit-exact") {
    dump_attention(trace, path);
    AttnTrace back = load_attention_csv(path);
    for (std::size_t h = 0; h < trace.heads.size(); ++h) {
      const AttnHeadTrace& a = trace.heads[h];
      const AttnHeadTrace& b = back.heads[h];
      CHECK(a.layer == b.layer);
      CHECK(a.head == b.head);
      for (std::int64_t i = 0; i < a.attn.numel(); ++i) {
        CHECK(a.attn.at(i) == b.attn.at(i));
      }
      for (std::size_t i = 0; i < a.alpha.size(); ++i) {
        CHECK(a.alpha[i] == b.alpha[i]);
      }
    }
    std::remove(path.c_str());
  }
  SUBCASE("error paths") {
    CHECK_THROWS_AS(dump_attention(AttnTrace{}, path), std::invalid_argument);
    CHECK_THROWS_AS(load_attention_csv(temp_path("missing.csv")),
                    std::runtime_error);
  }
}
