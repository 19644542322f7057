#include "steer/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "steer/errors.hpp"

namespace steer {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor make_result(const Shape& shape, std::vector<double> values) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(const Shape& shape) {
  return from(shape, std::vector<double>(shape_numel(shape), 0.0));
}

Tensor Tensor::full(const Shape& shape, double value) {
  return from(shape, std::vector<double>(shape_numel(shape), value));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  return make_result(shape, std::move(values));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::parameter(const Shape& shape, std::vector<double> values) {
  Tensor t = from(shape, std::move(values));
  t.impl_->requires_grad = true;
  t.impl_->grad.assign(t.impl_->data.size(), 0.0);
  return t;
}

std::size_t Tensor::rows() const {
  if (impl_->shape.empty()) return 1;
  return numel() / impl_->shape.back();
}

std::size_t Tensor::cols() const {
  if (impl_->shape.empty()) return 1;
  return impl_->shape.back();
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item: tensor of shape " + shape_str(shape()) +
                        " is not a scalar");
  }
  return impl_->data[0];
}

Tensor Tensor::detach() const { return make_result(shape(), impl_->data); }

Tensor Tensor::clone() const {
  Tensor t = make_result(shape(), impl_->data);
  t.impl_->requires_grad = impl_->requires_grad && impl_->leaf;
  if (t.impl_->requires_grad) t.impl_->grad = impl_->grad;
  return t;
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kLinear: return "linear";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kAddRow: return "add_row";
    case OpKind::kGelu: return "gelu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kExp: return "exp";
    case OpKind::kSquare: return "square";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kAttention: return "attention";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kReshape: return "reshape";
    case OpKind::kPick: return "pick";
    case OpKind::kRowEntropy: return "row_entropy";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kClamp: return "clamp";
    case OpKind::kMinimum: return "minimum";
    case OpKind::kMaximum: return "maximum";
  }
  return "?";
}

std::int64_t Graph::node_of(const Tensor& t) {
  auto* impl = t.impl();
  if (impl->graph == this && impl->node_id >= 0) return impl->node_id;
  // Leaves may be shared by several graphs over their lifetime, so their
  // ids are tracked per graph.
  auto [it, inserted] = leaf_ids_.try_emplace(
      impl, static_cast<std::int64_t>(nodes_.size()));
  if (inserted) nodes_.push_back(t.impl_ptr());
  return it->second;
}

Tensor Graph::record(OpKind kind, std::span<const Tensor> inputs,
                     Tensor output, std::function<void()> backward) {
  Entry entry;
  entry.kind = kind;
  for (const Tensor& in : inputs) {
    if (in.requires_grad()) entry.inputs.push_back(node_of(in));
  }
  auto* out = output.impl();
  out->requires_grad = true;
  out->leaf = false;
  out->graph = this;
  nodes_.push_back(output.impl_ptr());
  out->node_id = static_cast<std::int64_t>(nodes_.size() - 1);
  entry.output = out->node_id;
  entry.backward = std::move(backward);
  entries_.push_back(std::move(entry));
  return output;
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : "[]"));
  }
  auto* root = loss.impl();
  if (root->graph != this || root->leaf) {
    throw ContractError("backward: loss was not produced by this graph");
  }
  for (auto& node : nodes_) {
    if (!node->leaf) node->grad.assign(node->data.size(), 0.0);
  }
  root->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->backward();
  }
}

namespace {
thread_local Graph* current_graph = nullptr;
}

Graph* active_graph() { return current_graph; }

GraphScope::GraphScope(Graph& graph) : previous_(current_graph) {
  current_graph = &graph;
}

GraphScope::~GraphScope() { current_graph = previous_; }

void backward(Graph& graph, const Tensor& loss) { graph.backward(loss); }

}  // namespace steer
