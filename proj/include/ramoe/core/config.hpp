#pragma once

#include <nlohmann/json.hpp>

#include <stdexcept>
#include <string>

namespace ramoe::core {

struct ModelConfig {
  int vocab_size = 96;
  int d_model = 32;
  int d_expert = 64;
  int n_layers = 6;
  int n_experts = 8;
  int top_k = 2;
  int max_seq_len = 48;
  int adapter_rank = 0;  // 0 = full fine-tune

  int eos_token() const { return vocab_size - 1; }

  void validate() const {
    if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
    if (d_model < 1 || d_expert < 1 || n_layers < 1 || n_experts < 1 || top_k < 1 || max_seq_len < 1)
      throw std::invalid_argument("model dimensions must be >= 1");
    if (adapter_rank < 0) throw std::invalid_argument("adapter_rank must be >= 0");
    if (top_k > n_experts) throw std::invalid_argument("top_k must be <= n_experts");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},       {"d_expert", c.d_expert},
                     {"n_layers", c.n_layers},     {"n_experts", c.n_experts},   {"top_k", c.top_k},
                     {"max_seq_len", c.max_seq_len}, {"adapter_rank", c.adapter_rank}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("d_model").get_to(c.d_model);
  j.at("d_expert").get_to(c.d_expert);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_experts").get_to(c.n_experts);
  j.at("top_k").get_to(c.top_k);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("adapter_rank").get_to(c.adapter_rank);
}

}  // namespace ramoe::core
