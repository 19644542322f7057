#include "steer/nn.hpp"

#include <cmath>

#include "steer/errors.hpp"
#include "steer/ops.hpp"

namespace steer::nn {

void ParameterSet::add(std::string name, Tensor tensor) {
  if (!tensor.requires_grad()) {
    throw ContractError("parameter '" + name + "' does not track gradients");
  }
  items_.push_back({std::move(name), std::move(tensor)});
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

const Tensor* ParameterSet::find(const std::string& name) const {
  for (const auto& p : items_) {
    if (p.name == name) return &p.tensor;
  }
  return nullptr;
}

void ParameterSet::zero_grad() {
  for (auto& p : items_) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, double gain) {
  const double bound = gain / std::sqrt(static_cast<double>(in));
  std::vector<double> w(in * out);
  for (double& v : w) v = rng.uniform(-bound, bound);
  weight_ = Tensor::parameter({in, out}, std::move(w));
  bias_ = Tensor::parameter({out}, std::vector<double>(out, 0.0));
}

Tensor Linear::operator()(const Tensor& x) const {
  return ops::linear(x, weight_, bias_);
}

void Linear::collect(ParameterSet& set, const std::string& prefix) const {
  set.add(prefix + ".weight", weight_);
  set.add(prefix + ".bias", bias_);
}

LayerNorm::LayerNorm(std::size_t width)
    : gain_(Tensor::parameter({width}, std::vector<double>(width, 1.0))),
      bias_(Tensor::parameter({width}, std::vector<double>(width, 0.0))) {}

Tensor LayerNorm::operator()(const Tensor& x) const {
  return ops::layer_norm(x, gain_, bias_);
}

void LayerNorm::collect(ParameterSet& set, const std::string& prefix) const {
  set.add(prefix + ".gain", gain_);
  set.add(prefix + ".bias", bias_);
}

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng,
         double out_gain)
    : fc1_(in, hidden, rng), fc2_(hidden, out, rng, out_gain) {}

Tensor Mlp::operator()(const Tensor& x) const {
  return fc2_(ops::gelu(fc1_(x)));
}

void Mlp::collect(ParameterSet& set, const std::string& prefix) const {
  fc1_.collect(set, prefix + ".fc1");
  fc2_.collect(set, prefix + ".fc2");
}

MultiHeadSelfAttention::MultiHeadSelfAttention(std::size_t width,
                                               std::size_t heads, Rng& rng)
    : heads_(heads) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(width) +
                      " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  query_ = Linear(width, width, rng);
  key_ = Linear(width, width, rng);
  value_ = Linear(width, width, rng);
  out_ = Linear(width, width, rng);
}

Tensor MultiHeadSelfAttention::operator()(const Tensor& x, std::size_t batch,
                                          std::size_t tokens, bool causal,
                                          std::vector<double>* weights) const {
  auto att = ops::attention(query_(x), key_(x), value_(x), batch, tokens,
                            heads_, causal, weights != nullptr);
  if (weights) *weights = std::move(att.weights);
  return out_(att.out);
}

void MultiHeadSelfAttention::collect(ParameterSet& set,
                                     const std::string& prefix) const {
  query_.collect(set, prefix + ".query");
  key_.collect(set, prefix + ".key");
  value_.collect(set, prefix + ".value");
  out_.collect(set, prefix + ".out");
}

TransformerBlock::TransformerBlock(std::size_t width, std::size_t heads,
                                   Rng& rng)
    : norm1_(width),
      attention_(width, heads, rng),
      norm2_(width),
      mlp_(width, kMlpExpansion * width, width, rng) {}

Tensor TransformerBlock::operator()(const Tensor& x, std::size_t batch,
                                    std::size_t tokens, bool causal) const {
  Tensor h = ops::add(attention_(norm1_(x), batch, tokens, causal), x);
  return ops::add(mlp_(norm2_(h)), h);
}

void TransformerBlock::collect(ParameterSet& set,
                               const std::string& prefix) const {
  norm1_.collect(set, prefix + ".norm1");
  attention_.collect(set, prefix + ".attention");
  norm2_.collect(set, prefix + ".norm2");
  mlp_.collect(set, prefix + ".mlp");
}

GruCell::GruCell(std::size_t in, std::size_t hidden, Rng& rng)
    : input_reset_(in, hidden, rng),
      input_update_(in, hidden, rng),
      input_new_(in, hidden, rng),
      hidden_reset_(hidden, hidden, rng),
      hidden_update_(hidden, hidden, rng),
      hidden_new_(hidden, hidden, rng) {}

Tensor GruCell::operator()(const Tensor& x, const Tensor& h) const {
  Tensor r = ops::sigmoid(ops::add(input_reset_(x), hidden_reset_(h)));
  Tensor z = ops::sigmoid(ops::add(input_update_(x), hidden_update_(h)));
  Tensor n = ops::tanh(ops::add(input_new_(x), ops::mul(r, hidden_new_(h))));
  // (1 - z) * n + z * h  ==  n + z * (h - n)
  return ops::add(n, ops::mul(z, ops::sub(h, n)));
}

void GruCell::collect(ParameterSet& set, const std::string& prefix) const {
  input_reset_.collect(set, prefix + ".input_reset");
  input_update_.collect(set, prefix + ".input_update");
  input_new_.collect(set, prefix + ".input_new");
  hidden_reset_.collect(set, prefix + ".hidden_reset");
  hidden_update_.collect(set, prefix + ".hidden_update");
  hidden_new_.collect(set, prefix + ".hidden_new");
}

}  // namespace steer::nn
