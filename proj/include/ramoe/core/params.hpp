#pragma once

#include "ramoe/core/config.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace ramoe::core {

using Mat = Eigen::MatrixXd;

// All trainable arrays of the model, keyed by name in a fixed construction
// order (embed, per-layer blocks, head). Adapter pairs exist only when
// adapter_rank > 0; the "_b" halves start at zero so a fresh adapter is a
// no-op on the forward pass.
class Parameters {
 public:
  ModelConfig config;

  Parameters() = default;
  explicit Parameters(ModelConfig cfg) : config(cfg) {}

  const Mat& at(const std::string& name) const { return arrays_[index_.at(name)].second; }
  Mat& at(const std::string& name) { return arrays_[index_.at(name)].second; }
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  void add(const std::string& name, Mat m) {
    if (has(name)) throw std::invalid_argument("duplicate parameter: " + name);
    index_[name] = arrays_.size();
    arrays_.emplace_back(name, std::move(m));
  }

  const std::vector<std::pair<std::string, Mat>>& arrays() const { return arrays_; }
  std::vector<std::pair<std::string, Mat>>& arrays() { return arrays_; }

  // Names that receive gradient updates under the current adapter setting.
  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [name, m] : arrays_) {
      if (config.adapter_rank > 0 && name.find(".adapter_") == std::string::npos) continue;
      out.push_back(name);
    }
    return out;
  }

  bool all_finite() const {
    for (const auto& [name, m] : arrays_)
      if (!m.allFinite()) return false;
    return true;
  }

  static std::string layer_prefix(int layer) { return "layers." + std::to_string(layer) + "."; }
  static std::string expert_prefix(int layer, int e) {
    return layer_prefix(layer) + "experts." + std::to_string(e) + ".";
  }

 private:
  std::vector<std::pair<std::string, Mat>> arrays_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline Parameters init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  std::normal_distribution<double> dist(0.0, scale);
  auto randmat = [&](int rows, int cols) {
    Mat m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = dist(rng);
    return m;
  };

  Parameters p(cfg);
  p.add("embed", randmat(cfg.vocab_size, cfg.d_model));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string lp = Parameters::layer_prefix(l);
    p.add(lp + "attn.wq", randmat(cfg.d_model, cfg.d_model));
    p.add(lp + "attn.wk", randmat(cfg.d_model, cfg.d_model));
    p.add(lp + "attn.wv", randmat(cfg.d_model, cfg.d_model));
    p.add(lp + "attn.wo", randmat(cfg.d_model, cfg.d_model));
    p.add(lp + "router", randmat(cfg.d_model, cfg.n_experts));
    for (int e = 0; e < cfg.n_experts; ++e) {
      const std::string ep = Parameters::expert_prefix(l, e);
      p.add(ep + "up", randmat(cfg.d_model, cfg.d_expert));
      p.add(ep + "down", randmat(cfg.d_expert, cfg.d_model));
      if (cfg.adapter_rank > 0) {
        p.add(ep + "adapter_up_a", randmat(cfg.d_model, cfg.adapter_rank));
        p.add(ep + "adapter_up_b", Mat::Zero(cfg.adapter_rank, cfg.d_expert));
        p.add(ep + "adapter_down_a", randmat(cfg.d_expert, cfg.adapter_rank));
        p.add(ep + "adapter_down_b", Mat::Zero(cfg.adapter_rank, cfg.d_model));
      }
    }
  }
  p.add("head", randmat(cfg.d_model, cfg.vocab_size));
  return p;
}

// Checkpoint: {"config": {...}, "arrays": {name: {"shape": [r,c], "data": [...]}}}
// Row-major data; doubles round-trip exactly through the JSON writer.
inline nlohmann::json checkpoint_to_json(const Parameters& p) {
  nlohmann::json arrays = nlohmann::json::object();
  for (const auto& [name, m] : p.arrays()) {
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
    arrays[name] = {{"shape", {m.rows(), m.cols()}}, {"data", data}};
  }
  return nlohmann::json{{"config", p.config}, {"arrays", arrays}};
}

inline Parameters checkpoint_from_json(const nlohmann::json& j) {
  Parameters p(j.at("config").get<ModelConfig>());
  Parameters ref = init_params(p.config, 0);  // canonical name order
  for (const auto& [name, _] : ref.arrays()) {
    const auto& a = j.at("arrays").at(name);
    const auto shape = a.at("shape").get<std::vector<Eigen::Index>>();
    const auto data = a.at("data").get<std::vector<double>>();
    if (shape.size() != 2 || static_cast<Eigen::Index>(data.size()) != shape[0] * shape[1])
      throw std::invalid_argument("checkpoint array " + name + ": bad shape/data");
    Mat m(shape[0], shape[1]);
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < shape[0]; ++r)
      for (Eigen::Index c = 0; c < shape[1]; ++c) m(r, c) = data[k++];
    p.add(name, std::move(m));
  }
  return p;
}

inline void save_checkpoint(const Parameters& p, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open checkpoint for write: " + path);
  f << checkpoint_to_json(p).dump();
}

inline Parameters load_checkpoint(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  nlohmann::json j;
  f >> j;
  return checkpoint_from_json(j);
}

}  // namespace ramoe::core
