#include "masklab/probes.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace masklab {

namespace {

AttnTrace traced_forward(const Model& model, const std::vector<int>& input) {
  Graph g(Graph::Mode::no_grad);
  AttnTrace trace;
  ForwardOptions opts;
  opts.trace = &trace;
  model.forward_logits(g, input, opts);
  return trace;
}

}  // namespace

DAReport da_scan(const Model& model, const std::vector<TaskSample>& samples,
                 double eps, MIRatioFn ratio, int sentinel_token) {
  if (samples.empty()) throw std::invalid_argument("da_scan: no samples");
  if (!ratio) {
    int vocab = model.config().vocab_size;
    ratio = [vocab](int i, int n) { return mutual_info_ratio(i, n, vocab); };
  }

  int head_count = model.config().n_layers * model.config().n_heads;
  DAReport report;
  report.eps = eps;
  report.samples = static_cast<int>(samples.size());
  report.heads.resize(static_cast<std::size_t>(head_count));

  std::vector<long> pair_flags;
  std::vector<long> pair_total;
  int flagged_inputs = 0;

  for (const TaskSample& sample : samples) {
    sample.validate();
    int n = sample.length();
    AttnTrace trace = traced_forward(model, sample.input);
    if (static_cast<int>(trace.heads.size()) != head_count) {
      throw std::runtime_error("da_scan: trace head count mismatch");
    }
    if (n - 1 > static_cast<int>(pair_flags.size())) {
      pair_flags.resize(static_cast<std::size_t>(n) - 1, 0);
      pair_total.resize(static_cast<std::size_t>(n) - 1, 0);
    }
    bool input_flagged = false;
    for (int hidx = 0; hidx < head_count; ++hidx) {
      const AttnHeadTrace& head = trace.heads[static_cast<std::size_t>(hidx)];
      DAHeadReport& hr = report.heads[static_cast<std::size_t>(hidx)];
      hr.layer = head.layer;
      hr.head = head.head;

      std::int64_t base = static_cast<std::int64_t>(n - 1) * n;
      double prefix = 0.0;
      double total = head.alpha[static_cast<std::size_t>(n) - 1];
      bool head_flagged = false;
      for (int i = 1; i <= n; ++i) {
        double w = head.attn.at(base + i - 1);
        prefix += w;
        if (i == 1) {
          hr.mass_initial += w;
        } else if (sentinel_token >= 0 &&
                   sample.input[static_cast<std::size_t>(i) - 1] == sentinel_token) {
          hr.mass_sentinel += w;
        } else {
          hr.mass_other += w;
        }
        if (i < n) {
          bool flag = prefix > ratio(i, n) * total + eps;
          ++pair_total[static_cast<std::size_t>(i) - 1];
          if (flag) {
            ++pair_flags[static_cast<std::size_t>(i) - 1];
            head_flagged = true;
          }
        }
      }
      if (head_flagged) {
        hr.flag_rate += 1.0;
        input_flagged = true;
      }
    }
    if (input_flagged) ++flagged_inputs;
  }

  double inv = 1.0 / report.samples;
  for (DAHeadReport& hr : report.heads) {
    hr.mass_initial *= inv;
    hr.mass_sentinel *= inv;
    hr.mass_other *= inv;
    hr.flag_rate *= inv;
  }
  report.pair_flag_rate.resize(pair_flags.size());
  for (std::size_t i = 0; i < pair_flags.size(); ++i) {
    report.pair_flag_rate[i] =
        pair_total[i] > 0
            ? static_cast<double>(pair_flags[i]) / static_cast<double>(pair_total[i])
            : 0.0;
  }
  report.union_flag_rate = static_cast<double>(flagged_inputs) * inv;
  return report;
}

std::string da_report_to_json(const DAReport& report) {
  nlohmann::json j;
  j["eps"] = report.eps;
  j["samples"] = report.samples;
  j["union_flag_rate"] = report.union_flag_rate;
  j["pair_flag_rate"] = report.pair_flag_rate;
  j["heads"] = nlohmann::json::array();
  for (const DAHeadReport& hr : report.heads) {
    j["heads"].push_back({{"layer", hr.layer},
                          {"head", hr.head},
                          {"mass_initial", hr.mass_initial},
                          {"mass_sentinel", hr.mass_sentinel},
                          {"mass_other", hr.mass_other},
                          {"flag_rate", hr.flag_rate}});
  }
  return j.dump(2);
}

std::vector<double> mask_ratio_curve(const Model& model,
                                     const std::vector<int>& input) {
  AttnTrace trace = traced_forward(model, input);
  if (trace.heads.empty()) throw std::runtime_error("mask_ratio_curve: empty trace");
  std::vector<double> curve(input.size(), 0.0);
  for (const AttnHeadTrace& head : trace.heads) {
    for (std::size_t i = 0; i < curve.size(); ++i) curve[i] += head.alpha[i];
  }
  for (double& a : curve) a /= static_cast<double>(trace.heads.size());
  return curve;
}

std::vector<TrendPoint> first_token_trend(const Model& model,
                                          const std::vector<TaskSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("first_token_trend: no samples");
  std::vector<double> sums;
  std::vector<long> counts;
  for (const TaskSample& sample : samples) {
    int n = sample.length();
    if (n > static_cast<int>(sums.size())) {
      sums.resize(static_cast<std::size_t>(n), 0.0);
      counts.resize(static_cast<std::size_t>(n), 0);
    }
    AttnTrace trace = traced_forward(model, sample.input);
    for (const AttnHeadTrace& head : trace.heads) {
      for (int t = 0; t < n; ++t) {
        sums[static_cast<std::size_t>(t)] +=
            head.attn.at(static_cast<std::int64_t>(t) * n);
      }
    }
    for (int t = 0; t < n; ++t) {
      counts[static_cast<std::size_t>(t)] +=
          static_cast<long>(trace.heads.size());
    }
  }
  std::vector<TrendPoint> series(sums.size());
  for (std::size_t t = 0; t < sums.size(); ++t) {
    series[t].position = static_cast<int>(t) + 1;
    series[t].mean_first_mass = sums[t] / static_cast<double>(counts[t]);
  }
  return series;
}

void dump_attention(const AttnTrace& trace, const std::string& path) {
  if (trace.heads.empty()) throw std::invalid_argument("dump_attention: empty trace");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("dump_attention: cannot open " + path);
  int n = trace.heads.front().attn.shape()[0];
  out << "layer,head,row";
  for (int j = 0; j < n; ++j) out << ",c" << j;
  out << ",alpha\n";
  char buf[40];
  for (const AttnHeadTrace& head : trace.heads) {
    if (head.attn.shape()[0] != n) {
      throw std::invalid_argument("dump_attention: mixed trace sizes");
    }
    for (int i = 0; i < n; ++i) {
      out << head.layer << "," << head.head << "," << i;
      for (int j = 0; j < n; ++j) {
        std::snprintf(buf, sizeof buf, "%.17g",
                      head.attn.at(static_cast<std::int64_t>(i) * n + j));
        out << "," << buf;
      }
      std::snprintf(buf, sizeof buf, "%.17g", head.alpha[static_cast<std::size_t>(i)]);
      out << "," << buf << "\n";
    }
  }
}

AttnTrace load_attention_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_attention_csv: cannot open " + path);
  std::string header;
  if (!std::getline(in, header)) {
    throw std::runtime_error("load_attention_csv: empty file " + path);
  }
  int n = 0;
  {
    std::stringstream ss(header);
    std::string field;
    while (std::getline(ss, field, ',')) {
      if (field.size() > 1 && field[0] == 'c') ++n;
    }
  }
  if (n < 1) throw std::runtime_error("load_attention_csv: bad header");

  AttnTrace trace;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (static_cast<int>(fields.size()) != n + 4) {
      throw std::runtime_error("load_attention_csv: bad row width");
    }
    int layer = std::stoi(fields[0]);
    int head = std::stoi(fields[1]);
    int row = std::stoi(fields[2]);
    if (trace.heads.empty() || trace.heads.back().layer != layer ||
        trace.heads.back().head != head) {
      AttnHeadTrace t;
      t.layer = layer;
      t.head = head;
      t.attn = Tensor::zeros({n, n});
      t.alpha.assign(static_cast<std::size_t>(n), 0.0);
      trace.heads.push_back(std::move(t));
    }
    AttnHeadTrace& t = trace.heads.back();
    for (int j = 0; j < n; ++j) {
      t.attn.set(static_cast<std::int64_t>(row) * n + j,
                 std::stod(fields[static_cast<std::size_t>(j) + 3]));
    }
    t.alpha[static_cast<std::size_t>(row)] = std::stod(fields.back());
  }
  return trace;
}

}  // namespace masklab
