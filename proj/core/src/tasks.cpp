#include "masklab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "masklab/rng.hpp"

namespace masklab {

const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::pos_mapping: return "pos-mapping";
    case TaskKind::pos_identify: return "pos-identify";
    case TaskKind::odd_even: return "odd-even";
    case TaskKind::soft_copy_last: return "soft-copy-last";
    case TaskKind::char_lm: return "char-lm";
  }
  throw std::invalid_argument("task_kind_name: bad kind");
}

TaskKind task_kind_from_name(const std::string& name) {
  for (TaskKind k : {TaskKind::pos_mapping, TaskKind::pos_identify,
                     TaskKind::odd_even, TaskKind::soft_copy_last,
                     TaskKind::char_lm}) {
    if (name == task_kind_name(k)) return k;
  }
  throw std::invalid_argument("task_kind_from_name: unknown task '" + name + "'");
}

void TaskSample::validate() const {
  if (input.size() != target.size() || input.size() != scored.size()) {
    throw std::invalid_argument("TaskSample: input/target/scored lengths differ");
  }
  if (input.empty()) throw std::invalid_argument("TaskSample: empty");
  if (std::count(scored.begin(), scored.end(), std::uint8_t{1}) == 0) {
    throw std::invalid_argument("TaskSample: no scored positions");
  }
}

void TaskSpec::validate() const {
  if (n_max < 1) throw std::invalid_argument("TaskSpec: n_max must be >= 1");
  if (min_len < 1 || max_len < min_len) {
    throw std::invalid_argument("TaskSpec: need 1 <= min_len <= max_len");
  }
  if (max_len > n_max && kind != TaskKind::soft_copy_last &&
      kind != TaskKind::char_lm) {
    throw std::invalid_argument("TaskSpec: position tasks need max_len <= n_max");
  }
}

TaskSample gen_pos_mapping(int n, const TaskSpec& spec) {
  if (n < 1) throw std::invalid_argument("gen_pos_mapping: n must be >= 1");
  if (n > spec.n_max) {
    throw std::invalid_argument("gen_pos_mapping: n exceeds the value vocab");
  }
  TaskSample s;
  s.input.assign(n, 0);
  s.target.resize(n);
  for (int i = 0; i < n; ++i) s.target[i] = i + 1;
  s.scored.assign(n, 1);
  return s;
}

TaskSample gen_pos_identify(int n, int k, const TaskSpec& spec, bool score_all) {
  if (n < 1 || n > spec.n_max) {
    throw std::invalid_argument("gen_pos_identify: n out of range");
  }
  if (k < 1 || k > n) {
    throw std::invalid_argument("gen_pos_identify: need 1 <= k <= n");
  }
  TaskSample s;
  s.input.assign(n, 0);
  s.input[k - 1] = spec.abe_token();
  s.target.assign(n, 0);
  s.target[k - 1] = k;
  s.scored.assign(n, score_all ? 1 : 0);
  s.scored[k - 1] = 1;
  return s;
}

TaskSample gen_odd_even(int n, const TaskSpec& spec) {
  if (n < 1) throw std::invalid_argument("gen_odd_even: n must be >= 1");
  if (spec.n_max < 2) throw std::invalid_argument("gen_odd_even: vocab too small");
  TaskSample s;
  s.input.assign(n, 0);
  s.target.resize(n);
  for (int i = 0; i < n; ++i) s.target[i] = 1 + (i % 2);
  s.scored.assign(n, 1);
  return s;
}

double soft_copy_prob(int k) {
  if (k < 0) throw std::invalid_argument("soft_copy_prob: k must be >= 0");
  return 1.0 - std::exp(-static_cast<double>(k));
}

TaskSample gen_soft_copy_last(int n, int vocab, std::mt19937_64& rng) {
  if (n < 2) throw std::invalid_argument("gen_soft_copy_last: n must be >= 2");
  if (vocab < 2) throw std::invalid_argument("gen_soft_copy_last: vocab must be >= 2");
  std::vector<int> x(n);
  x[0] = uniform_int(rng, 0, vocab - 1);
  for (int k = 1; k < n; ++k) {
    if (uniform01(rng) < soft_copy_prob(k)) {
      x[k] = x[k - 1];
    } else {
      x[k] = uniform_int(rng, 0, vocab - 1);
    }
  }
  TaskSample s;
  s.input = x;
  s.target.resize(n);
  s.scored.assign(n, 1);
  for (int i = 0; i + 1 < n; ++i) s.target[i] = x[i + 1];
  s.target[n - 1] = 0;
  s.scored[n - 1] = 0;
  return s;
}

namespace {

// Mutual information between a uniform symbol and its image under the
// channel c*Id + (1-c)*Uniform over v symbols, in nats.
double lazy_channel_mi(double c, int v) {
  if (c <= 0.0) return 0.0;
  double diag = c + (1.0 - c) / v;
  double mi = diag * std::log1p(c * (v - 1));
  if (c < 1.0) {
    mi += (v - 1) * ((1.0 - c) / v) * std::log(1.0 - c);
  }
  return mi;
}

}  // namespace

double soft_copy_mutual_info(int i, int n, int vocab) {
  if (n < 1) throw std::invalid_argument("soft_copy_mutual_info: n must be >= 1");
  if (i < 1 || i > n) {
    throw std::invalid_argument("soft_copy_mutual_info: need 1 <= i <= n");
  }
  if (vocab < 2) {
    throw std::invalid_argument("soft_copy_mutual_info: vocab must be >= 2");
  }
  double c = 1.0;
  for (int k = i; k <= n; ++k) c *= soft_copy_prob(k);
  return lazy_channel_mi(c, vocab);
}

double mutual_info_ratio(int i, int n, int vocab) {
  double denom = soft_copy_mutual_info(n, n, vocab);
  if (!(denom > 0.0)) {
    throw std::runtime_error("mutual_info_ratio: denominator is not positive");
  }
  return soft_copy_mutual_info(i, n, vocab) / denom;
}

std::vector<TaskSample> chunk_bytes(const std::vector<int>& bytes, int chunk_len) {
  if (chunk_len < 2) throw std::invalid_argument("chunk_bytes: chunk_len must be >= 2");
  std::vector<TaskSample> out;
  int chunks = static_cast<int>(bytes.size()) / chunk_len;
  out.reserve(chunks);
  for (int c = 0; c < chunks; ++c) {
    TaskSample s;
    s.input.assign(bytes.begin() + static_cast<std::size_t>(c) * chunk_len,
                   bytes.begin() + static_cast<std::size_t>(c + 1) * chunk_len);
    s.target.resize(chunk_len);
    s.scored.assign(chunk_len, 1);
    for (int i = 0; i + 1 < chunk_len; ++i) s.target[i] = s.input[i + 1];
    s.target[chunk_len - 1] = 0;
    s.scored[chunk_len - 1] = 0;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TaskSample> ingest_char_corpus(const std::string& path, int chunk_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("ingest_char_corpus: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string text = buf.str();
  if (text.empty()) throw std::runtime_error("ingest_char_corpus: empty file " + path);
  std::vector<TaskSample> out = chunk_bytes(encode_bytes(text), chunk_len);
  if (out.empty()) {
    throw std::runtime_error("ingest_char_corpus: file shorter than one chunk");
  }
  return out;
}

std::vector<int> encode_bytes(const std::string& text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char ch : text) out.push_back(static_cast<int>(ch));
  return out;
}

std::string decode_bytes(const std::vector<int>& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int t : tokens) {
    if (t < 0 || t > 255) throw std::invalid_argument("decode_bytes: token out of byte range");
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

namespace {

int argmax_row(const Tensor& logits, int row) {
  int vocab = logits.shape()[1];
  std::int64_t base = static_cast<std::int64_t>(row) * vocab;
  int best = 0;
  double best_v = logits.at(base);
  for (int t = 1; t < vocab; ++t) {
    double v = logits.at(base + t);
    if (v > best_v) {
      best_v = v;
      best = t;
    }
  }
  return best;
}

}  // namespace

double eval_accuracy(const Model& model, const std::vector<TaskSample>& samples,
                     MaskMode mode) {
  long hits = 0;
  long total = 0;
  for (const TaskSample& s : samples) {
    s.validate();
    Graph g(Graph::Mode::no_grad);
    ForwardOptions opts;
    opts.mode = mode;
    Tensor logits = model.forward_logits(g, s.input, opts);
    for (int i = 0; i < s.length(); ++i) {
      if (!s.scored[i]) continue;
      ++total;
      if (argmax_row(logits, i) == s.target[i]) ++hits;
    }
  }
  if (total == 0) throw std::invalid_argument("eval_accuracy: nothing scored");
  return static_cast<double>(hits) / static_cast<double>(total);
}

double eval_loss(const Model& model, const std::vector<TaskSample>& samples) {
  double sum = 0.0;
  long total = 0;
  for (const TaskSample& s : samples) {
    Graph g(Graph::Mode::no_grad);
    Model::MapLoss ml = model.loss_map(g, s.input, s.target, s.scored);
    sum += ml.sum.at(0);
    total += ml.count;
  }
  if (total == 0) throw std::invalid_argument("eval_loss: nothing scored");
  return sum / static_cast<double>(total);
}

TaskSample gen_at_baseline(const TaskSample& sample, int k_tokens, int at_token) {
  if (k_tokens < 0) throw std::invalid_argument("gen_at_baseline: k must be >= 0");
  sample.validate();
  if (k_tokens == 0) return sample;
  TaskSample s;
  s.input.assign(k_tokens, at_token);
  s.target.assign(k_tokens, 0);
  s.scored.assign(k_tokens, 0);
  s.input.insert(s.input.end(), sample.input.begin(), sample.input.end());
  s.target.insert(s.target.end(), sample.target.begin(), sample.target.end());
  s.scored.insert(s.scored.end(), sample.scored.begin(), sample.scored.end());
  return s;
}

SampleFn task_sampler(const TaskSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case TaskKind::pos_mapping:
      return [spec](std::mt19937_64& rng) {
        return gen_pos_mapping(uniform_int(rng, spec.min_len, spec.max_len), spec);
      };
    case TaskKind::pos_identify:
      return [spec](std::mt19937_64& rng) {
        int n = uniform_int(rng, spec.min_len, spec.max_len);
        int k = uniform_int(rng, 1, n);
        return gen_pos_identify(n, k, spec);
      };
    case TaskKind::odd_even:
      return [spec](std::mt19937_64& rng) {
        return gen_odd_even(uniform_int(rng, spec.min_len, spec.max_len), spec);
      };
    case TaskKind::soft_copy_last:
      return [spec](std::mt19937_64& rng) {
        int n = uniform_int(rng, spec.min_len, spec.max_len);
        return gen_soft_copy_last(n, spec.vocab(), rng);
      };
    case TaskKind::char_lm:
      throw std::invalid_argument("task_sampler: char_lm needs a corpus, use corpus_sampler");
  }
  throw std::invalid_argument("task_sampler: bad kind");
}

SampleFn corpus_sampler(std::vector<TaskSample> chunks) {
  if (chunks.empty()) throw std::invalid_argument("corpus_sampler: no chunks");
  auto shared = std::make_shared<std::vector<TaskSample>>(std::move(chunks));
  return [shared](std::mt19937_64& rng) {
    return (*shared)[static_cast<std::size_t>(
        uniform_int(rng, 0, static_cast<int>(shared->size()) - 1))];
  };
}

std::vector<TaskSample> make_eval_samples(const TaskSpec& spec, int count,
                                          std::uint64_t seed) {
  spec.validate();
  if (count < 1) throw std::invalid_argument("make_eval_samples: count must be >= 1");
  std::vector<TaskSample> out;
  out.reserve(count);
  if (spec.kind == TaskKind::pos_mapping || spec.kind == TaskKind::odd_even) {
    for (int i = 0; i < count; ++i) {
      int n = spec.min_len + i % (spec.max_len - spec.min_len + 1);
      out.push_back(spec.kind == TaskKind::pos_mapping ? gen_pos_mapping(n, spec)
                                                       : gen_odd_even(n, spec));
    }
    return out;
  }
  std::mt19937_64 rng(seed);
  SampleFn fn = task_sampler(spec);
  for (int i = 0; i < count; ++i) out.push_back(fn(rng));
  return out;
}

std::string task_sample_to_json(const TaskSample& s) {
  nlohmann::json j;
  j["input"] = s.input;
  j["target"] = s.target;
  j["scored"] = s.scored;
  return j.dump();
}

TaskSample task_sample_from_json(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);
  TaskSample s;
  s.input = j.at("input").get<std::vector<int>>();
  s.target = j.at("target").get<std::vector<int>>();
  s.scored = j.at("scored").get<std::vector<std::uint8_t>>();
  s.validate();
  return s;
}

void dump_task_samples(const std::vector<TaskSample>& samples,
                       const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("dump_task_samples: cannot open " + path);
  for (const TaskSample& s : samples) out << task_sample_to_json(s) << "\n";
}

}  // namespace masklab
