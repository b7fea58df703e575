// masklab command line: train, eval, probe, bench, generate, verify, and
// defaults. Every command reads the same config format (see run_config.hpp),
// flags override file keys, and outputs are deterministic under a fixed
// seed (wall-clock timings sit in their own fields).
//
// Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure.
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "masklab/checkpoint.hpp"
#include "masklab/inference.hpp"
#include "masklab/probes.hpp"
#include "masklab/rng.hpp"
#include "masklab/run_config.hpp"
#include "masklab/streamed.hpp"
#include "masklab/tasks.hpp"
#include "masklab/training.hpp"

namespace {

using namespace masklab;

struct CommonFlags {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  std::string mask;
  std::string pe;
  double gamma = 0.0;
  bool headwise_gamma = false;
  bool json = false;
  std::vector<std::string> sets;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* gamma_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "run config file");
  cmd->add_option("--out", f.out, "output directory (or file for probe)");
  f.seed_opt = cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--mask", f.mask, "vanilla|stablemask");
  cmd->add_option("--pe", f.pe, "rope|alibi|ape-learn|ape-sin|none");
  f.gamma_opt = cmd->add_option("--gamma", f.gamma, "pseudo mask decay rate");
  cmd->add_flag("--headwise-gamma", f.headwise_gamma,
                "per-head geometric gamma schedule");
  cmd->add_flag("--json", f.json, "machine-readable output");
  cmd->add_option("--set", f.sets, "extra section.key=value override")
      ->expected(-1);
}

// Defaults, then MASKLAB_OUT_DIR, then the config file, then flags.
RunConfig build_config(const CommonFlags& f) {
  RunConfig cfg;
  if (const char* env = std::getenv("MASKLAB_OUT_DIR")) cfg.out_dir = env;
  if (!f.config.empty()) {
    std::ifstream in(f.config, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config " + f.config);
    std::ostringstream buf;
    buf << in.rdbuf();
    for (const auto& [section, kv] : parse_kv_text(buf.str())) {
      for (const auto& [key, value] : kv) {
        apply_override(cfg, section + "." + key, value);
      }
    }
  }
  if (f.seed_opt->count() > 0) cfg.seed = f.seed;
  if (!f.mask.empty()) cfg.model.mask_kind = mask_kind_from_name(f.mask);
  if (!f.pe.empty()) cfg.model.pe.kind = pe_kind_from_name(f.pe);
  if (f.gamma_opt->count() > 0) cfg.model.gamma = f.gamma;
  if (f.headwise_gamma) cfg.model.headwise_gamma = true;
  for (const std::string& s : f.sets) {
    std::size_t eq = s.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("--set wants section.key=value, got '" + s +
                                  "'");
    }
    apply_override(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  if (!f.out.empty()) cfg.out_dir = f.out;
  return cfg;
}

std::vector<TaskSample> eval_samples_for(const RunConfig& cfg, int count,
                                         std::uint64_t stream) {
  if (cfg.task.kind == TaskKind::char_lm) {
    std::vector<TaskSample> chunks =
        ingest_char_corpus(cfg.corpus_path, cfg.train.seq_len);
    if (static_cast<int>(chunks.size()) > count) chunks.resize(count);
    return chunks;
  }
  return make_eval_samples(cfg.task, count, derive_seed(cfg.seed, stream));
}

// ----- train -----

int cmd_train(const CommonFlags& f) {
  RunConfig cfg = build_config(f);
  cfg.resolve();
  cfg.validate(true);
  std::filesystem::path dir(cfg.out_dir);
  std::filesystem::create_directories(dir);

  Model model(cfg.model, cfg.seed);
  SampleFn sampler =
      cfg.task.kind == TaskKind::char_lm
          ? corpus_sampler(ingest_char_corpus(cfg.corpus_path, cfg.train.seq_len))
          : task_sampler(cfg.task);

  {
    std::ofstream out(dir / "run.cfg", std::ios::trunc);
    out << run_config_to_text(cfg);
  }
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write to " + cfg.out_dir);

  TrainOptions opts;
  opts.sink = [&metrics](const StepMetrics& m) {
    metrics << step_metrics_to_json(m) << "\n";
  };
  TrainResult res = train_model(model, sampler, cfg.train, opts);
  save_checkpoint(snapshot(model, res.steps_run),
                  (dir / "checkpoint.json").string());

  double final_loss =
      res.history.empty() ? 0.0 : res.history.back().loss;
  if (f.json) {
    nlohmann::json j;
    j["steps"] = res.steps_run;
    j["final_loss"] = final_loss;
    j["out_dir"] = cfg.out_dir;
    std::cout << j.dump() << "\n";
  } else {
    std::printf("trained %d steps, final loss %.6f\n", res.steps_run,
                final_loss);
    std::printf("wrote %s/{run.cfg,metrics.jsonl,checkpoint.json}\n",
                cfg.out_dir.c_str());
  }
  return 0;
}

// ----- eval -----

int cmd_eval(const CommonFlags& f, const std::string& ckpt_path,
             const std::string& task_name, int count, int window) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  Model model = restore_model(ck);
  RunConfig cfg = build_config(f);
  if (!task_name.empty()) cfg.task.kind = task_kind_from_name(task_name);
  cfg.model = ck.config;
  cfg.resolve();
  cfg.validate(false);
  if (window < 0) throw std::invalid_argument("--window must be >= 0");
  if (window > 0 && cfg.task.kind != TaskKind::char_lm) {
    throw std::invalid_argument("--window only applies to char-lm eval");
  }

  std::vector<TaskSample> samples = eval_samples_for(cfg, count, 2);
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double loss = 0.0;
  if (window > 0) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const TaskSample& s : samples) {
      std::vector<int> seq = s.input;
      seq.push_back(s.target.back());
      for (double l : windowed_ppl(model, seq, window)) {
        sum += l;
        ++n;
      }
    }
    loss = sum / static_cast<double>(n);
  } else {
    accuracy = eval_accuracy(model, samples, cfg.mode);
    loss = eval_loss(model, samples);
  }
  double ppl = std::exp(loss);

  if (f.json) {
    nlohmann::json j;
    j["task"] = task_kind_name(cfg.task.kind);
    j["mode"] = mask_mode_name(cfg.mode);
    j["samples"] = static_cast<int>(samples.size());
    if (std::isfinite(accuracy)) j["accuracy"] = accuracy;
    j["loss"] = loss;
    j["ppl"] = ppl;
    if (window > 0) j["window"] = window;
    std::cout << j.dump() << "\n";
  } else {
    std::printf("%-16s %-12s %8s %10s %10s\n", "task", "mode", "samples",
                "accuracy", "ppl");
    std::printf("%-16s %-12s %8zu %10s %10.4f\n", task_kind_name(cfg.task.kind),
                mask_mode_name(cfg.mode), samples.size(),
                std::isfinite(accuracy)
                    ? (std::to_string(accuracy).substr(0, 6)).c_str()
                    : "-",
                ppl);
  }
  return 0;
}

// ----- probe -----

int cmd_probe(const CommonFlags& f, const std::string& ckpt_path,
              const std::string& kind, int count, double eps) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  Model model = restore_model(ck);
  RunConfig cfg = build_config(f);
  cfg.model = ck.config;
  cfg.resolve();
  cfg.validate(false);

  std::filesystem::path out(f.out.empty() ? std::string() : f.out);
  auto default_out = [&](const char* name) {
    if (!out.empty()) return out;
    return std::filesystem::path(cfg.out_dir) / name;
  };

  std::vector<TaskSample> samples = eval_samples_for(cfg, count, 3);
  if (samples.empty()) throw std::invalid_argument("probe: no samples");

  std::filesystem::path path;
  if (kind == "da") {
    path = default_out("probe-da.json");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    DAReport report = da_scan(model, samples, eps);
    std::ofstream o(path, std::ios::trunc);
    o << da_report_to_json(report) << "\n";
    if (f.json) {
      std::cout << da_report_to_json(report) << "\n";
    } else {
      std::printf("da scan: %d samples, union flag rate %.4f -> %s\n",
                  report.samples, report.union_flag_rate, path.c_str());
    }
  } else if (kind == "ratio-curve") {
    path = default_out("probe-ratio-curve.csv");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::vector<double> curve = mask_ratio_curve(model, samples[0].input);
    std::ofstream o(path, std::ios::trunc);
    o << "position,ratio\n";
    char line[64];
    for (std::size_t i = 0; i < curve.size(); ++i) {
      std::snprintf(line, sizeof(line), "%zu,%.17g\n", i + 1, curve[i]);
      o << line;
    }
    if (!f.json) std::printf("mask ratio curve (%zu rows) -> %s\n",
                             curve.size(), path.c_str());
  } else if (kind == "first-token") {
    path = default_out("probe-first-token.csv");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::vector<TrendPoint> trend = first_token_trend(model, samples);
    std::ofstream o(path, std::ios::trunc);
    o << "position,mean_first_mass\n";
    char line[64];
    for (const TrendPoint& p : trend) {
      std::snprintf(line, sizeof(line), "%d,%.17g\n", p.position,
                    p.mean_first_mass);
      o << line;
    }
    if (!f.json) std::printf("first-token trend (%zu rows) -> %s\n",
                             trend.size(), path.c_str());
  } else if (kind == "dump-attn") {
    path = default_out("probe-attn.csv");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    Graph g(Graph::Mode::no_grad);
    AttnTrace trace;
    ForwardOptions opts;
    opts.mode = cfg.mode;
    opts.trace = &trace;
    model.forward_logits(g, samples[0].input, opts);
    dump_attention(trace, path.string());
    if (!f.json) std::printf("attention dump -> %s\n", path.c_str());
  } else {
    throw std::invalid_argument(
        "unknown probe '" + kind +
        "' (want da, ratio-curve, first-token, dump-attn)");
  }
  if (f.json && kind != "da") {
    nlohmann::json j;
    j["probe"] = kind;
    j["out"] = path.string();
    std::cout << j.dump() << "\n";
  }
  return 0;
}

// ----- bench -----

Tensor random_matrix(int n, int d, std::mt19937_64& rng) {
  Tensor t = Tensor::zeros({n, d});
  for (double& x : t.raw_f64()) x = normal(rng);
  return t;
}

int cmd_bench(const CommonFlags& f, std::vector<int> ns, int head_dim,
              int br, int bc, int reps, int threads) {
  RunConfig cfg = build_config(f);
  double gamma = cfg.model.gamma;
  BlockPlan plan{br, bc};
  plan.validate();
  if (ns.empty()) ns = {64, 128, 256};
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!f.out.empty()) {
    std::filesystem::path path(f.out);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    file.open(path, std::ios::trunc);
    if (!file) throw std::runtime_error("cannot write " + f.out);
    out = &file;
  }

  *out << "n,head_dim,br,bc,threads,streamed_ms,naive_ms,max_abs_diff\n";
  for (int n : ns) {
    std::mt19937_64 rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(n)));
    Tensor q = random_matrix(n, head_dim, rng);
    Tensor k = random_matrix(n, head_dim, rng);
    Tensor v = random_matrix(n, head_dim, rng);

    double best_stream = 0.0, best_naive = 0.0;
    StreamedResult rs, rn;
    for (int r = 0; r < reps; ++r) {
      auto t0 = std::chrono::steady_clock::now();
      rs = streamed_attention(q, k, v, MaskKind::stablemask, gamma, scale,
                              plan, nullptr, threads);
      auto t1 = std::chrono::steady_clock::now();
      rn = naive_head_attention(q, k, v, MaskKind::stablemask, gamma, scale);
      auto t2 = std::chrono::steady_clock::now();
      double ms_s = std::chrono::duration<double, std::milli>(t1 - t0).count();
      double ms_n = std::chrono::duration<double, std::milli>(t2 - t1).count();
      if (r == 0 || ms_s < best_stream) best_stream = ms_s;
      if (r == 0 || ms_n < best_naive) best_naive = ms_n;
    }
    double diff = 0.0;
    const auto& a = rs.o.raw_f64();
    const auto& b = rn.o.raw_f64();
    for (std::size_t i = 0; i < a.size(); ++i) {
      diff = std::max(diff, std::abs(a[i] - b[i]));
    }
    char line[160];
    std::snprintf(line, sizeof(line), "%d,%d,%d,%d,%d,%.3f,%.3f,%.3g\n", n,
                  head_dim, br, bc, threads, best_stream, best_naive, diff);
    *out << line;
  }
  return 0;
}

// ----- generate -----

std::vector<int> parse_prompt(const std::string& text, int vocab) {
  std::vector<int> out;
  std::string token;
  std::istringstream in(text);
  while (in >> token) {
    if (!token.empty() && token.back() == ',') token.pop_back();
    if (token.empty()) continue;
    std::size_t used = 0;
    int id = 0;
    try {
      id = std::stoi(token, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != token.size()) {
      throw std::invalid_argument("prompt token '" + token +
                                  "' is not an integer");
    }
    if (id < 0 || id >= vocab) {
      throw std::invalid_argument("prompt token " + std::to_string(id) +
                                  " outside vocab [0, " +
                                  std::to_string(vocab) + ")");
    }
    out.push_back(id);
  }
  if (out.empty()) throw std::invalid_argument("empty prompt");
  return out;
}

int cmd_generate(const CommonFlags& f, const std::string& ckpt_path,
                 const std::string& prompt_text, int max_new,
                 double temperature, bool have_temp, int window) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  Model model = restore_model(ck);

  DecodeConfig dc;
  dc.max_new_tokens = max_new;
  dc.window = window;
  dc.seed = f.seed_opt->count() > 0 ? f.seed : 0;
  if (have_temp) {
    dc.sampling = Sampling::temperature;
    dc.temperature = temperature;
  }
  dc.validate();

  std::vector<int> prompt = parse_prompt(prompt_text, ck.config.vocab_size);
  std::vector<int> tokens = generate(model, prompt, dc);

  if (f.json) {
    nlohmann::json j;
    j["prompt_len"] = static_cast<int>(prompt.size());
    j["tokens"] = tokens;
    std::cout << j.dump() << "\n";
  } else {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i > 0) std::cout << ' ';
      std::cout << tokens[i];
    }
    std::cout << "\n";
  }
  return 0;
}

// ----- verify -----

struct CheckResult {
  std::string name;
  bool ok = false;
  double err = 0.0;
};

CheckResult check_mask_algebra() {
  double worst = 0.0;
  for (int n : {1, 2, 3, 5, 8, 16, 32}) {
    for (double gamma : {0.1, 0.5, 1.0}) {
      MaskPair mp = build_masks(n, gamma);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          std::int64_t idx = static_cast<std::int64_t>(i) * n + j;
          double want_c = j <= i ? 1.0 : 0.0;
          double want_p = j > i ? -gamma * j : 0.0;
          worst = std::max(worst, std::abs(mp.c.at(idx) - want_c));
          worst = std::max(worst, std::abs(mp.p.at(idx) - want_p));
        }
      }
    }
  }
  return {"mask-algebra", worst == 0.0, worst};
}

CheckResult check_xi_construction() {
  double worst = 0.0;
  for (int n : {1, 2, 3, 5, 8, 16, 32}) {
    for (double gamma : {0.1, 0.5, 1.0}) {
      Tensor a = Tensor::zeros({n, n});
      StableMaskResult r = apply_stablemask(a, build_masks(n, gamma));
      for (int i = 1; i <= n; ++i) {
        worst = std::max(worst, std::abs(r.alpha[static_cast<std::size_t>(i) - 1] -
                                         xi_position(i, n, gamma)));
      }
    }
  }
  return {"xi-construction", worst < 1e-12, worst};
}

CheckResult check_suffix_equivalence() {
  double worst = 0.0;
  std::mt19937_64 rng(7);
  for (int n : {1, 2, 3, 5, 8, 16, 32}) {
    for (double gamma : {0.1, 0.5, 1.0}) {
      Tensor a = Tensor::zeros({n, n});
      for (double& x : a.raw_f64()) x = normal(rng);
      StableMaskResult full = apply_stablemask(a, build_masks(n, gamma));
      for (int i = 1; i <= n; ++i) {
        std::vector<double> logits(static_cast<std::size_t>(i));
        for (int j = 0; j < i; ++j) {
          logits[static_cast<std::size_t>(j)] =
              a.at(static_cast<std::int64_t>(i - 1) * n + j);
        }
        InferRow row = build_infer_row(logits, i, n, gamma);
        for (int j = 0; j < i; ++j) {
          worst = std::max(
              worst, std::abs(row.attn[static_cast<std::size_t>(j)] -
                              full.attn.at(static_cast<std::int64_t>(i - 1) * n + j)));
        }
        worst = std::max(worst, std::abs(row.alpha -
                                         full.alpha[static_cast<std::size_t>(i) - 1]));
      }
    }
  }
  return {"suffix-equivalence", worst < 1e-12, worst};
}

CheckResult check_streamed_naive() {
  double worst = 0.0;
  std::mt19937_64 rng(8);
  for (int n : {1, 2, 3, 16, 33, 64}) {
    for (double gamma : {0.1, 1.0}) {
      for (const BlockPlan& plan : {BlockPlan{16, 16}, BlockPlan{8, 32}}) {
        Tensor q = random_matrix(n, 16, rng);
        Tensor k = random_matrix(n, 16, rng);
        Tensor v = random_matrix(n, 16, rng);
        StreamedResult s = streamed_attention(q, k, v, MaskKind::stablemask,
                                              gamma, 0.25, plan);
        StreamedResult r =
            naive_head_attention(q, k, v, MaskKind::stablemask, gamma, 0.25);
        const auto& sa = s.o.raw_f64();
        const auto& ra = r.o.raw_f64();
        for (std::size_t i = 0; i < sa.size(); ++i) {
          worst = std::max(worst, std::abs(sa[i] - ra[i]));
        }
      }
    }
  }
  return {"streamed-naive", worst < 1e-10, worst};
}

ModelConfig verify_model_config() {
  ModelConfig cfg;
  cfg.vocab_size = 7;
  cfg.model_dim = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.ffn_mult = 2;
  cfg.max_len = 6;
  cfg.gamma = 0.5;
  return cfg;
}

CheckResult check_gradients() {
  Model model(verify_model_config(), 31);
  std::vector<int> tokens = {1, 4, 2, 6, 0};
  const double h = 1e-5;
  double worst = 0.0;

  Graph g;
  Tensor loss = model.loss_lm(g, tokens);
  g.backward(loss);

  auto loss_value = [&]() {
    Graph eg(Graph::Mode::no_grad);
    return model.loss_lm(eg, tokens).at(0);
  };
  for (const auto& [name, p] : model.named_params()) {
    Tensor t = p;
    const std::int64_t count = t.numel();
    for (std::int64_t i : {std::int64_t{0}, count / 2, count - 1}) {
      double saved = t.at(i);
      t.set(i, saved + h);
      double up = loss_value();
      t.set(i, saved - h);
      double down = loss_value();
      t.set(i, saved);
      double fd = (up - down) / (2.0 * h);
      double an = t.grad_at(i);
      double rel =
          std::abs(fd - an) / std::max(1.0, std::abs(fd) + std::abs(an));
      worst = std::max(worst, rel);
    }
  }
  return {"gradient-check", worst < 1e-5, worst};
}

CheckResult check_decode_consistency() {
  Model model(verify_model_config(), 32);
  DecoderRuntime runtime(model);
  KVCache cache = runtime.make_cache();
  std::vector<int> tokens = {2, 5, 1, 3, 0, 6};
  double worst = 0.0;
  std::vector<std::vector<double>> decoded;
  for (int t : tokens) decoded.push_back(runtime.step(cache, t));

  Graph g(Graph::Mode::no_grad);
  ForwardOptions opts;
  opts.mode = MaskMode::infer;
  Tensor batch = model.forward_logits(g, tokens, opts);
  const int vocab = model.config().vocab_size;
  for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
    for (int t = 0; t < vocab; ++t) {
      worst = std::max(
          worst, std::abs(batch.at(static_cast<std::int64_t>(i) * vocab + t) -
                          decoded[static_cast<std::size_t>(i)]
                                 [static_cast<std::size_t>(t)]));
    }
  }
  return {"decode-consistency", worst < 1e-12, worst};
}

int cmd_verify(bool json) {
  std::vector<CheckResult> results = {
      check_mask_algebra(),      check_xi_construction(),
      check_suffix_equivalence(), check_streamed_naive(),
      check_gradients(),         check_decode_consistency(),
  };
  bool all_ok = true;
  if (json) {
    nlohmann::json j = nlohmann::json::array();
    for (const CheckResult& r : results) {
      j.push_back({{"name", r.name}, {"ok", r.ok}, {"max_err", r.err}});
      all_ok = all_ok && r.ok;
    }
    std::cout << nlohmann::json{{"ok", all_ok}, {"checks", j}}.dump() << "\n";
  } else {
    for (const CheckResult& r : results) {
      std::printf("[%s] %-20s max err %.3g\n", r.ok ? " ok " : "FAIL",
                  r.name.c_str(), r.err);
      all_ok = all_ok && r.ok;
    }
  }
  return all_ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"StableMask transformer laboratory"};
  app.require_subcommand(1);

  CommonFlags train_f, eval_f, probe_f, bench_f, gen_f, verify_f, defaults_f;

  CLI::App* train = app.add_subcommand("train", "train a model per config");
  add_common(train, train_f);

  CLI::App* eval = app.add_subcommand("eval", "accuracy / PPL of a checkpoint");
  add_common(eval, eval_f);
  std::string eval_ckpt, eval_task;
  int eval_count = 200, eval_window = 0;
  eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--task", eval_task, "task kind override");
  eval->add_option("--samples", eval_count, "eval set size");
  eval->add_option("--window", eval_window, "sliding-window PPL (char-lm)");

  CLI::App* probe = app.add_subcommand("probe", "attention diagnostics");
  add_common(probe, probe_f);
  std::string probe_ckpt, probe_kind = "da";
  int probe_count = 64;
  double probe_eps = 0.1;
  probe->add_option("--ckpt", probe_ckpt, "checkpoint file")->required();
  probe->add_option("--probe", probe_kind,
                    "da|ratio-curve|first-token|dump-attn");
  probe->add_option("--samples", probe_count, "probe set size");
  probe->add_option("--eps", probe_eps, "flag slack");

  CLI::App* bench = app.add_subcommand("bench", "streamed vs naive attention");
  add_common(bench, bench_f);
  std::vector<int> bench_ns;
  int bench_hd = 32, bench_br = 16, bench_bc = 16, bench_reps = 3,
      bench_threads = 1;
  bench->add_option("--n", bench_ns, "sequence lengths")->expected(-1);
  bench->add_option("--head-dim", bench_hd, "head dimension");
  bench->add_option("--br", bench_br, "row tile");
  bench->add_option("--bc", bench_bc, "column tile");
  bench->add_option("--reps", bench_reps, "repetitions, best kept");
  bench->add_option("--threads", bench_threads, "row-block threads");

  CLI::App* gen = app.add_subcommand("generate", "incremental decoding");
  add_common(gen, gen_f);
  std::string gen_ckpt, gen_prompt;
  int gen_max_new = 16, gen_window = 0;
  double gen_temp = 1.0;
  gen->add_option("--ckpt", gen_ckpt, "checkpoint file")->required();
  gen->add_option("--prompt", gen_prompt, "token ids, e.g. \"1 2 3\"")
      ->required();
  gen->add_option("--max-new", gen_max_new, "tokens to decode");
  CLI::Option* temp_opt =
      gen->add_option("--temperature", gen_temp, "sample instead of argmax");
  gen->add_option("--window", gen_window, "KV cache window (0 = full)");

  CLI::App* verify =
      app.add_subcommand("verify", "run the invariant suite");
  add_common(verify, verify_f);

  CLI::App* defaults =
      app.add_subcommand("defaults", "print the default config");
  add_common(defaults, defaults_f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) return cmd_train(train_f);
    if (eval->parsed())
      return cmd_eval(eval_f, eval_ckpt, eval_task, eval_count, eval_window);
    if (probe->parsed())
      return cmd_probe(probe_f, probe_ckpt, probe_kind, probe_count, probe_eps);
    if (bench->parsed())
      return cmd_bench(bench_f, bench_ns, bench_hd, bench_br, bench_bc,
                       bench_reps, bench_threads);
    if (gen->parsed())
      return cmd_generate(gen_f, gen_ckpt, gen_prompt, gen_max_new, gen_temp,
                          temp_opt->count() > 0, gen_window);
    if (verify->parsed()) return cmd_verify(verify_f.json);
    if (defaults->parsed()) {
      std::cout << run_config_to_text(build_config(defaults_f));
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
