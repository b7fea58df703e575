#include "masklab/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace masklab {

namespace {

using nlohmann::json;

constexpr int kFormatVersion = 1;
const char kB64Chars[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string b64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  while (i + 3 <= bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out.push_back(kB64Chars[(v >> 18) & 63]);
    out.push_back(kB64Chars[(v >> 12) & 63]);
    out.push_back(kB64Chars[(v >> 6) & 63]);
    out.push_back(kB64Chars[v & 63]);
    i += 3;
  }
  const std::size_t rem = bytes.size() - i;
  if (rem == 1) {
    const std::uint32_t v = bytes[i] << 16;
    out.push_back(kB64Chars[(v >> 18) & 63]);
    out.push_back(kB64Chars[(v >> 12) & 63]);
    out.push_back('=');
    out.push_back('=');
  } else if (rem == 2) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out.push_back(kB64Chars[(v >> 18) & 63]);
    out.push_back(kB64Chars[(v >> 12) & 63]);
    out.push_back(kB64Chars[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

int b64_value(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  throw std::runtime_error("checkpoint: bad base64 character");
}

std::vector<std::uint8_t> b64_decode(const std::string& text) {
  if (text.size() % 4 != 0)
    throw std::runtime_error("checkpoint: base64 length not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    const int pad = (text[i + 3] == '=') + (text[i + 2] == '=');
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + static_cast<std::size_t>(k)];
      v = (v << 6) | (c == '=' ? 0u : static_cast<std::uint32_t>(b64_value(c)));
    }
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(v & 0xff));
  }
  return out;
}

json tensor_to_json(const Tensor& t) {
  json j;
  j["dtype"] = dtype_name(t.dtype());
  j["shape"] = t.shape();
  std::vector<std::uint8_t> bytes;
  if (t.dtype() == Dtype::f64) {
    const auto& v = t.raw_f64();
    bytes.resize(v.size() * sizeof(double));
    std::memcpy(bytes.data(), v.data(), bytes.size());
  } else {
    const auto& v = t.raw_f32();
    bytes.resize(v.size() * sizeof(float));
    std::memcpy(bytes.data(), v.data(), bytes.size());
  }
  j["data"] = b64_encode(bytes);
  return j;
}

Tensor tensor_from_json(const json& j) {
  const Dtype dt = dtype_from_name(j.at("dtype").get<std::string>());
  Shape shape = j.at("shape").get<Shape>();
  Tensor t = Tensor::zeros(shape, dt);
  const auto bytes = b64_decode(j.at("data").get<std::string>());
  if (dt == Dtype::f64) {
    auto& v = t.raw_f64();
    if (bytes.size() != v.size() * sizeof(double))
      throw std::runtime_error("checkpoint: tensor byte count mismatch");
    std::memcpy(v.data(), bytes.data(), bytes.size());
  } else {
    auto& v = t.raw_f32();
    if (bytes.size() != v.size() * sizeof(float))
      throw std::runtime_error("checkpoint: tensor byte count mismatch");
    std::memcpy(v.data(), bytes.data(), bytes.size());
  }
  return t;
}

json config_to_json_obj(const ModelConfig& cfg) {
  json j;
  j["vocab_size"] = cfg.vocab_size;
  j["model_dim"] = cfg.model_dim;
  j["n_layers"] = cfg.n_layers;
  j["n_heads"] = cfg.n_heads;
  j["ffn_mult"] = cfg.ffn_mult;
  j["max_len"] = cfg.max_len;
  j["pe"] = pe_kind_name(cfg.pe.kind);
  j["rope_base"] = cfg.pe.rope_base;
  j["mask"] = mask_kind_name(cfg.mask_kind);
  j["gamma"] = cfg.gamma;
  j["headwise_gamma"] = cfg.headwise_gamma;
  j["dtype"] = dtype_name(cfg.dtype);
  j["norm_eps"] = cfg.norm_eps;
  j["init_std"] = cfg.init_std;
  return j;
}

ModelConfig config_from_json_obj(const json& j) {
  ModelConfig cfg;
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.model_dim = j.at("model_dim").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.ffn_mult = j.at("ffn_mult").get<int>();
  cfg.max_len = j.at("max_len").get<int>();
  cfg.pe.kind = pe_kind_from_name(j.at("pe").get<std::string>());
  cfg.pe.rope_base = j.at("rope_base").get<double>();
  cfg.mask_kind = mask_kind_from_name(j.at("mask").get<std::string>());
  cfg.gamma = j.at("gamma").get<double>();
  cfg.headwise_gamma = j.at("headwise_gamma").get<bool>();
  cfg.dtype = dtype_from_name(j.at("dtype").get<std::string>());
  cfg.norm_eps = j.at("norm_eps").get<double>();
  cfg.init_std = j.at("init_std").get<double>();
  cfg.validate();
  return cfg;
}

json named_tensors_to_json(
    const std::vector<std::pair<std::string, Tensor>>& list) {
  json arr = json::array();
  for (const auto& [name, t] : list) {
    json e = tensor_to_json(t);
    e["name"] = name;
    arr.push_back(std::move(e));
  }
  return arr;
}

std::vector<std::pair<std::string, Tensor>> named_tensors_from_json(
    const json& arr) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& e : arr)
    out.emplace_back(e.at("name").get<std::string>(), tensor_from_json(e));
  return out;
}

}  // namespace

Checkpoint snapshot(const Model& model, std::int64_t step,
                    const std::string& rng_state) {
  Checkpoint ck;
  ck.config = model.config();
  ck.step = step;
  ck.rng_state = rng_state;
  for (const auto& [name, t] : model.named_params())
    ck.params.emplace_back(name,
                           Tensor::from_values(t.shape(), t.values(), t.dtype()));
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  json j;
  j["format_version"] = kFormatVersion;
  j["config"] = config_to_json_obj(ck.config);
  j["step"] = ck.step;
  j["rng_state"] = ck.rng_state;
  j["params"] = named_tensors_to_json(ck.params);
  if (ck.has_opt) {
    json opt;
    opt["t"] = ck.opt.t;
    opt["m"] = named_tensors_to_json(ck.opt.m);
    opt["v"] = named_tensors_to_json(ck.opt.v);
    j["opt"] = std::move(opt);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out << j.dump();
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint: malformed JSON in " + path + ": " +
                             e.what());
  }
  if (j.at("format_version").get<int>() != kFormatVersion)
    throw std::runtime_error("checkpoint: unsupported format version");
  Checkpoint ck;
  ck.config = config_from_json_obj(j.at("config"));
  ck.step = j.at("step").get<std::int64_t>();
  ck.rng_state = j.at("rng_state").get<std::string>();
  ck.params = named_tensors_from_json(j.at("params"));
  if (j.contains("opt")) {
    ck.has_opt = true;
    ck.opt.t = j["opt"].at("t").get<int>();
    ck.opt.m = named_tensors_from_json(j["opt"].at("m"));
    ck.opt.v = named_tensors_from_json(j["opt"].at("v"));
  }
  return ck;
}

Model restore_model(const Checkpoint& ck) {
  Model model(ck.config, 0);
  model.load_params(ck.params);
  return model;
}

std::string model_config_to_json(const ModelConfig& cfg) {
  return config_to_json_obj(cfg).dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return config_from_json_obj(json::parse(text));
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("config: malformed JSON: ") +
                             e.what());
  }
}

}  // namespace masklab
