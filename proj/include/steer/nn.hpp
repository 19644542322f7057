#ifndef STEER_NN_HPP_
#define STEER_NN_HPP_

#include <cstddef>
#include <string>
#include <vector>

#include "steer/rng.hpp"
#include "steer/tensor.hpp"

namespace steer::nn {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

// Ordered collection of named trainable tensors. Order is the registration
// order, which fixes optimizer state layout and checkpoint layout.
class ParameterSet {
 public:
  void add(std::string name, Tensor tensor);
  const std::vector<NamedParameter>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t scalar_count() const;
  const Tensor* find(const std::string& name) const;
  void zero_grad();

 private:
  std::vector<NamedParameter> items_;
};

// Weights drawn from U(-gain/sqrt(in), gain/sqrt(in)); bias zero.
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0);
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterSet& set, const std::string& prefix) const;
  std::size_t in_features() const { return weight_.dim(0); }
  std::size_t out_features() const { return weight_.dim(1); }

  static std::size_t parameter_count(std::size_t in, std::size_t out) {
    return in * out + out;
  }

 private:
  Tensor weight_;
  Tensor bias_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterSet& set, const std::string& prefix) const;

  static std::size_t parameter_count(std::size_t width) { return 2 * width; }

 private:
  Tensor gain_;
  Tensor bias_;
};

// Linear -> GELU -> Linear.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng,
      double out_gain = 1.0);
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterSet& set, const std::string& prefix) const;

  static std::size_t parameter_count(std::size_t in, std::size_t hidden,
                                     std::size_t out) {
    return Linear::parameter_count(in, hidden) +
           Linear::parameter_count(hidden, out);
  }

 private:
  Linear fc1_;
  Linear fc2_;
};

class MultiHeadSelfAttention {
 public:
  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(std::size_t width, std::size_t heads, Rng& rng);
  // x is [batch*tokens x width], tokens of a sample contiguous.
  Tensor operator()(const Tensor& x, std::size_t batch, std::size_t tokens,
                    bool causal, std::vector<double>* weights = nullptr) const;
  void collect(ParameterSet& set, const std::string& prefix) const;
  std::size_t heads() const { return heads_; }

  static std::size_t parameter_count(std::size_t width) {
    return 4 * Linear::parameter_count(width, width);
  }

 private:
  std::size_t heads_ = 1;
  Linear query_;
  Linear key_;
  Linear value_;
  Linear out_;
};

// Pre-norm block: x + MHSA(LN(x)), then h + MLP(LN(h)).
class TransformerBlock {
 public:
  static constexpr std::size_t kMlpExpansion = 4;

  TransformerBlock() = default;
  TransformerBlock(std::size_t width, std::size_t heads, Rng& rng);
  Tensor operator()(const Tensor& x, std::size_t batch, std::size_t tokens,
                    bool causal) const;
  void collect(ParameterSet& set, const std::string& prefix) const;

  static std::size_t parameter_count(std::size_t width) {
    return 2 * LayerNorm::parameter_count(width) +
           MultiHeadSelfAttention::parameter_count(width) +
           Mlp::parameter_count(width, kMlpExpansion * width, width);
  }

 private:
  LayerNorm norm1_;
  MultiHeadSelfAttention attention_;
  LayerNorm norm2_;
  Mlp mlp_;
};

// Gated recurrent cell: h' = (1 - z) * n + z * h.
class GruCell {
 public:
  GruCell() = default;
  GruCell(std::size_t in, std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& h) const;
  void collect(ParameterSet& set, const std::string& prefix) const;

  static std::size_t parameter_count(std::size_t in, std::size_t hidden) {
    return 3 * Linear::parameter_count(in, hidden) +
           3 * Linear::parameter_count(hidden, hidden);
  }

 private:
  Linear input_reset_, input_update_, input_new_;
  Linear hidden_reset_, hidden_update_, hidden_new_;
};

}  // namespace steer::nn

#endif  // STEER_NN_HPP_
