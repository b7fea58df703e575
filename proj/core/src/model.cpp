#include "masklab/model.hpp"

#include <cmath>
#include <stdexcept>

#include "masklab/rng.hpp"

namespace masklab {

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

MaskSpec ModelConfig::mask_spec(MaskMode mode) const {
  return headwise_gamma ? MaskSpec::headwise(n_heads, gamma, max_len, mode)
                        : MaskSpec::uniform(n_heads, gamma, max_len, mode);
}

void ModelConfig::validate() const {
  check(vocab_size >= 2, "ModelConfig: vocab_size must be >= 2");
  check(model_dim >= 1, "ModelConfig: model_dim must be >= 1");
  check(n_layers >= 1, "ModelConfig: n_layers must be >= 1");
  check(n_heads >= 1, "ModelConfig: n_heads must be >= 1");
  check(model_dim % n_heads == 0,
        "ModelConfig: model_dim must divide evenly into heads");
  check(ffn_mult >= 1, "ModelConfig: ffn_mult must be >= 1");
  check(max_len >= 1, "ModelConfig: max_len must be >= 1");
  check(norm_eps > 0.0, "ModelConfig: norm_eps must be > 0");
  check(init_std >= 0.0, "ModelConfig: init_std must be >= 0");
  pe.validate();
  if (pe.kind == PEKind::rope)
    check(head_dim() % 2 == 0, "ModelConfig: rope needs an even head_dim");
  if (mask_kind == MaskKind::stablemask)
    (void)mask_spec(MaskMode::train);  // validates gamma > 0 per head
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  init_weights(seed);
}

void Model::init_weights(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0));
  const int d = cfg_.model_dim;
  const int dh = cfg_.head_dim();
  const int f = cfg_.ffn_mult * d;
  const Dtype dt = cfg_.dtype;

  auto gauss = [&](Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape), dt);
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t.set(i, cfg_.init_std * normal(rng));
    t.set_requires_grad(true);
    return t;
  };
  auto ones = [&](int len) {
    Tensor t = Tensor::full({len}, 1.0, dt);
    t.set_requires_grad(true);
    return t;
  };

  embed_ = gauss({cfg_.vocab_size, d});
  if (cfg_.pe.kind == PEKind::ape_learn) pos_table_ = gauss({cfg_.max_len, d});
  layers_.clear();
  for (int l = 0; l < cfg_.n_layers; ++l) {
    LayerWeights lw;
    lw.attn_norm = ones(d);
    for (int h = 0; h < cfg_.n_heads; ++h) {
      HeadWeights hw;
      hw.wq = gauss({d, dh});
      hw.wk = gauss({d, dh});
      hw.wv = gauss({d, dh});
      hw.wo = gauss({dh, d});
      lw.mha.heads.push_back(std::move(hw));
    }
    lw.ffn_norm = ones(d);
    lw.w_gate = gauss({d, f});
    lw.w_up = gauss({d, f});
    lw.w_down = gauss({f, d});
    layers_.push_back(std::move(lw));
  }
  final_norm_ = ones(d);
  lm_head_ = gauss({d, cfg_.vocab_size});
}

std::vector<std::pair<std::string, Tensor>> Model::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embed", embed_);
  if (cfg_.pe.kind == PEKind::ape_learn) out.emplace_back("pos_table", pos_table_);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const auto& lw = layers_[static_cast<std::size_t>(l)];
    const std::string base = "layer" + std::to_string(l) + ".";
    out.emplace_back(base + "attn_norm", lw.attn_norm);
    for (int h = 0; h < cfg_.n_heads; ++h) {
      const auto& hw = lw.mha.heads[static_cast<std::size_t>(h)];
      const std::string hb = base + "h" + std::to_string(h) + ".";
      out.emplace_back(hb + "wq", hw.wq);
      out.emplace_back(hb + "wk", hw.wk);
      out.emplace_back(hb + "wv", hw.wv);
      out.emplace_back(hb + "wo", hw.wo);
    }
    out.emplace_back(base + "ffn_norm", lw.ffn_norm);
    out.emplace_back(base + "w_gate", lw.w_gate);
    out.emplace_back(base + "w_up", lw.w_up);
    out.emplace_back(base + "w_down", lw.w_down);
  }
  out.emplace_back("final_norm", final_norm_);
  out.emplace_back("lm_head", lm_head_);
  return out;
}

Tensor Model::param(const std::string& name) const {
  for (auto& [n, t] : named_params())
    if (n == name) return t;
  throw std::invalid_argument("Model: no parameter named '" + name + "'");
}

void Model::load_params(
    const std::vector<std::pair<std::string, Tensor>>& params) {
  auto mine = named_params();
  check(params.size() == mine.size(),
        "load_params: expected " + std::to_string(mine.size()) +
            " tensors, got " + std::to_string(params.size()));
  for (auto& [name, src] : params) {
    bool found = false;
    for (auto& [n, dst] : mine) {
      if (n != name) continue;
      check(dst.shape() == src.shape(),
            "load_params: shape mismatch for '" + name + "'");
      dst.copy_values_from(src);
      found = true;
      break;
    }
    check(found, "load_params: unexpected parameter '" + name + "'");
  }
}

void Model::zero_all_grads() const {
  for (auto& [n, t] : named_params()) t.zero_grad();
}

std::int64_t Model::param_count() const {
  std::int64_t total = 0;
  for (auto& [n, t] : named_params()) total += t.numel();
  return total;
}

Tensor Model::forward_logits(Graph& g, const std::vector<int>& tokens,
                             const ForwardOptions& opts) const {
  const int n = static_cast<int>(tokens.size());
  check(n >= 1, "forward_logits: empty token sequence");
  for (int t : tokens)
    check(t >= 0 && t < cfg_.vocab_size,
          "forward_logits: token " + std::to_string(t) + " out of range");
  if (opts.mode != MaskMode::extrapolate)
    check(n <= cfg_.max_len, "forward_logits: length " + std::to_string(n) +
                                 " exceeds max_len " +
                                 std::to_string(cfg_.max_len) +
                                 " outside extrapolate mode");

  std::vector<int> positions(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;

  Tensor x = g.embedding(embed_, tokens);
  if (cfg_.pe.kind == PEKind::ape_sin) {
    Tensor table = sinusoidal_table(n, cfg_.model_dim, cfg_.pe.rope_base);
    if (cfg_.dtype != Dtype::f64)
      table = Tensor::from_values(table.shape(), table.values(), cfg_.dtype);
    x = g.add(x, g.embedding(table, positions));
  } else if (cfg_.pe.kind == PEKind::ape_learn) {
    check(n <= cfg_.max_len,
          "forward_logits: ape-learn table does not cover length " +
              std::to_string(n));
    x = g.add(x, g.embedding(pos_table_, positions));
  }

  const MaskSpec spec = cfg_.mask_spec(opts.mode);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const auto& lw = layers_[static_cast<std::size_t>(l)];
    Tensor h = g.rmsnorm(x, lw.attn_norm, cfg_.norm_eps);
    Tensor a = mha_forward(g, h, lw.mha, cfg_.mask_kind, spec, cfg_.pe,
                           positions, l, opts.trace);
    x = g.add(x, a);
    if (opts.post_attn_hidden != nullptr)
      opts.post_attn_hidden->push_back(
          Tensor::from_values(x.shape(), x.values()));
    Tensor h2 = g.rmsnorm(x, lw.ffn_norm, cfg_.norm_eps);
    Tensor gate = g.silu(g.matmul(h2, lw.w_gate));
    Tensor up = g.matmul(h2, lw.w_up);
    Tensor ff = g.matmul(g.mul(gate, up), lw.w_down);
    x = g.add(x, ff);
  }
  x = g.rmsnorm(x, final_norm_, cfg_.norm_eps);
  return g.matmul(x, lm_head_);
}

Tensor Model::loss_lm(Graph& g, const std::vector<int>& tokens) const {
  const int n = static_cast<int>(tokens.size());
  check(n >= 2, "loss_lm: needs at least two tokens");
  Tensor logits = forward_logits(g, tokens);
  std::vector<int> targets(static_cast<std::size_t>(n), 0);
  std::vector<double> weights(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i + 1 < n; ++i) {
    targets[static_cast<std::size_t>(i)] = tokens[static_cast<std::size_t>(i) + 1];
    weights[static_cast<std::size_t>(i)] = 1.0;
  }
  Tensor total = g.cross_entropy_sum(logits, targets, weights);
  return g.scale(total, 1.0 / (n - 1));
}

Model::MapLoss Model::loss_map(Graph& g, const std::vector<int>& input,
                               const std::vector<int>& target,
                               const std::vector<std::uint8_t>& mask) const {
  check(input.size() == target.size() && input.size() == mask.size(),
        "loss_map: input/target/mask lengths differ");
  int count = 0;
  std::vector<double> weights(mask.size(), 0.0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] != 0) {
      weights[i] = 1.0;
      ++count;
    }
  check(count > 0, "loss_map: mask scores no positions");
  Tensor logits = forward_logits(g, input);
  MapLoss out;
  out.sum = g.cross_entropy_sum(logits, target, weights);
  out.count = count;
  return out;
}

void Model::apply_position_probe() {
  check(cfg_.mask_kind == MaskKind::stablemask,
        "apply_position_probe: needs the stablemask path");
  check(cfg_.dtype == Dtype::f64, "apply_position_probe: needs f64 weights");
  check(cfg_.model_dim >= 2,
        "apply_position_probe: needs two reserved model dims");
  check(cfg_.pe.kind == PEKind::none || cfg_.pe.kind == PEKind::rope,
        "apply_position_probe: additive position encodings would disturb "
        "the constant-score construction");

  const int d = cfg_.model_dim;
  // Every token embeds to e_0, so rows are identical and the attention
  // output reduces to alpha_i times a constant value vector.
  embed_.fill(0.0);
  for (int vtok = 0; vtok < cfg_.vocab_size; ++vtok)
    embed_.set(static_cast<std::int64_t>(vtok) * d, 1.0);

  LayerWeights& lw = layers_.front();
  lw.attn_norm.fill(1.0);
  for (int h = 0; h < cfg_.n_heads; ++h) {
    HeadWeights& hw = lw.mha.heads[static_cast<std::size_t>(h)];
    if (h == 0) {
      hw.wq.fill(0.0);
      hw.wk.fill(0.0);
      hw.wv.fill(0.0);
      // rmsnorm maps e_0 to e_0 / sqrt(1/d + eps); this entry undoes that
      // so the head's value is exactly one at every position.
      hw.wv.set(0, std::sqrt(1.0 / static_cast<double>(d) + cfg_.norm_eps));
      hw.wo.fill(0.0);
      hw.wo.set(1, 1.0);  // head dim 0 -> model dim 1
    } else {
      hw.wo.fill(0.0);
    }
  }
}

}  // namespace masklab
