// SPDX-License-Identifier: Apache-2.0
#include "smd/model/parameters.hpp"

#include <cmath>

#include "smd/common/errors.hpp"
#include "smd/common/rng.hpp"

namespace smd::model {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("model.vocab_size must be >= 2");
  if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
    throw ConfigError("model.d_model must be a positive multiple of model.n_heads");
  }
  if (n_layers == 0) throw ConfigError("model.n_layers must be >= 1");
  if (d_ff == 0) throw ConfigError("model.d_ff must be >= 1");
  if (max_seq_len == 0) throw ConfigError("model.max_seq_len must be >= 1");
}

namespace {

num::Tensor normal(num::Shape shape, double stddev, Rng& rng) {
  std::vector<double> data(num::shape_numel(shape));
  for (auto& v : data) v = stddev * standard_normal(rng);
  return num::Tensor::from(std::move(shape), std::move(data), true);
}

}  // namespace

Parameters Parameters::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, {0x6d6f64656cULL}));
  const std::size_t d = config.d_model;
  const double proj = 1.0 / std::sqrt(static_cast<double>(d));
  Parameters p;
  p.config = config;
  p.tok_emb = normal({config.vocab_size, d}, 1.0, rng);
  p.pos_emb = normal({config.max_seq_len, d}, 0.5, rng);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerParams lp;
    lp.norm_attn = num::Tensor::full({d}, 1.0, true);
    lp.wq = normal({d, d}, proj, rng);
    lp.wk = normal({d, d}, proj, rng);
    lp.wv = normal({d, d}, proj, rng);
    lp.wo = normal({d, d}, proj / std::sqrt(2.0 * config.n_layers), rng);
    lp.norm_mlp = num::Tensor::full({d}, 1.0, true);
    lp.w_in = normal({d, config.d_ff}, proj, rng);
    lp.w_out = normal({config.d_ff, d},
                      1.0 / std::sqrt(static_cast<double>(config.d_ff) * 2.0 * config.n_layers), rng);
    p.layers.push_back(std::move(lp));
  }
  p.norm_final = num::Tensor::full({d}, 1.0, true);
  p.w_head = normal({d, config.vocab_size}, proj, rng);
  return p;
}

std::vector<NamedTensor> Parameters::named() const {
  std::vector<NamedTensor> out;
  out.push_back({"tok_emb", tok_emb});
  out.push_back({"pos_emb", pos_emb});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto pre = "layer" + std::to_string(l) + ".";
    const auto& lp = layers[l];
    out.push_back({pre + "norm_attn", lp.norm_attn});
    out.push_back({pre + "wq", lp.wq});
    out.push_back({pre + "wk", lp.wk});
    out.push_back({pre + "wv", lp.wv});
    out.push_back({pre + "wo", lp.wo});
    out.push_back({pre + "norm_mlp", lp.norm_mlp});
    out.push_back({pre + "w_in", lp.w_in});
    out.push_back({pre + "w_out", lp.w_out});
  }
  out.push_back({"norm_final", norm_final});
  out.push_back({"w_head", w_head});
  return out;
}

std::vector<num::Tensor> Parameters::tensors() const {
  std::vector<num::Tensor> out;
  for (auto& nt : named()) out.push_back(nt.tensor);
  return out;
}

Parameters Parameters::clone(bool requires_grad) const {
  auto copy = [requires_grad](const num::Tensor& t) {
    auto c = t.clone();
    c.set_requires_grad(requires_grad);
    return c;
  };
  Parameters p;
  p.config = config;
  p.tok_emb = copy(tok_emb);
  p.pos_emb = copy(pos_emb);
  for (const auto& lp : layers) {
    p.layers.push_back({copy(lp.norm_attn), copy(lp.wq), copy(lp.wk), copy(lp.wv), copy(lp.wo),
                        copy(lp.norm_mlp), copy(lp.w_in), copy(lp.w_out)});
  }
  p.norm_final = copy(norm_final);
  p.w_head = copy(w_head);
  return p;
}

void Parameters::zero_grad() {
  for (auto& t : tensors()) t.zero_grad();
}

std::size_t Parameters::count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.numel();
  return n;
}

}  // namespace smd::model
