// Attention diagnostics over a frozen model.
//
// The disproportional-attention scan compares the final query row's prefix
// attention mass against the share justified by the data's mutual
// information: prefix i is flagged when
//   sum_{j<=i} A~[n][j] > ratio(i, n) * sum_{j<=n} A~[n][j] + eps.
// With softCopyLast data the ratio is analytic (tasks.mutual_info_ratio);
// any other distribution must supply its own.
#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "masklab/attention.hpp"
#include "masklab/model.hpp"
#include "masklab/tasks.hpp"

namespace masklab {

using MIRatioFn = std::function<double(int i, int n)>;

struct DAHeadReport {
  int layer = 0;
  int head = 0;
  // Mean final-row attention mass on the first token, the sentinel token
  // (when one is given), and everything else.
  double mass_initial = 0.0;
  double mass_sentinel = 0.0;
  double mass_other = 0.0;
  // Fraction of inputs with at least one flagged prefix in this head.
  double flag_rate = 0.0;
};

struct DAReport {
  double eps = 0.0;
  int samples = 0;
  std::vector<DAHeadReport> heads;
  // pair_flag_rate[i-1]: fraction of (sample, head) final rows whose
  // prefix i was flagged. Lengths vary per sample, so entry i pools every
  // sample long enough to have that prefix.
  std::vector<double> pair_flag_rate;
  // Fraction of inputs flagged anywhere: the union over heads and
  // prefixes, the scan's headline number.
  double union_flag_rate = 0.0;
};

std::string da_report_to_json(const DAReport& report);

// Runs the model over each sample and evaluates the flag inequality on
// the last attention row of every layer/head. ratio defaults to the
// analytic softCopyLast value for the model's vocab; sentinel_token < 0
// means no sentinel class.
DAReport da_scan(const Model& model, const std::vector<TaskSample>& samples,
                 double eps, MIRatioFn ratio = {}, int sentinel_token = -1);

// Per-position mask ratio averaged over layers and heads for one input.
std::vector<double> mask_ratio_curve(const Model& model,
                                     const std::vector<int>& input);

struct TrendPoint {
  int position = 0;  // 1-based query position
  double mean_first_mass = 0.0;
};

// Mean attention on the first token by query position, averaged over
// layers, heads, and every sample long enough to reach that position.
std::vector<TrendPoint> first_token_trend(const Model& model,
                                          const std::vector<TaskSample>& samples);

// CSV dump, one line per (layer, head, row): the full post-softmax row
// (zeros above the diagonal) followed by its mask ratio. %.17g fields, so
// a reparse is bit-exact.
void dump_attention(const AttnTrace& trace, const std::string& path);
AttnTrace load_attention_csv(const std::string& path);

}  // namespace masklab
