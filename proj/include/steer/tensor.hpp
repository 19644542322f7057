#ifndef STEER_TENSOR_HPP_
#define STEER_TENSOR_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace steer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Graph;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first written
  bool requires_grad = false;
  bool leaf = true;
  const Graph* graph = nullptr;  // owner graph for recorded (non-leaf) nodes
  std::int64_t node_id = -1;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Dense row-major array of doubles with optional gradient tracking. Copies
// share storage; use clone() for an independent value.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor from(const Shape& shape, std::vector<double> values);
  static Tensor scalar(double value);
  // Leaf that accumulates gradients.
  static Tensor parameter(const Shape& shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  // Leading dimensions folded into rows; last dimension is columns.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  // Empty span when no gradient has been written.
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad();

  double item() const;
  double at(std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const {
    return impl_->data[r * cols() + c];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->leaf; }
  std::int64_t node_id() const { return impl_->node_id; }

  // Same values, no graph attachment.
  Tensor detach() const;
  Tensor clone() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  friend class Graph;
  friend Tensor make_result(const Shape&, std::vector<double>);

  std::shared_ptr<detail::TensorImpl> impl_;
};

enum class OpKind {
  kMatmul,
  kLinear,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kAddRow,
  kGelu,
  kTanh,
  kSigmoid,
  kExp,
  kSquare,
  kLayerNorm,
  kSoftmax,
  kLogSoftmax,
  kAttention,
  kGatherRows,
  kConcatRows,
  kConcatCols,
  kReshape,
  kPick,
  kRowEntropy,
  kSum,
  kMean,
  kClamp,
  kMinimum,
  kMaximum,
};

const char* op_name(OpKind kind);

// Define-by-run tape. While a GraphScope is active on the current thread,
// every op with a gradient-requiring input appends one entry here; with no
// active graph, ops only compute values.
class Graph {
 public:
  struct Entry {
    OpKind kind;
    std::vector<std::int64_t> inputs;
    std::int64_t output;
    std::function<void()> backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Visits entries in exact reverse recording order. Gradients of leaves
  // accumulate across calls; interior gradients are recomputed each call.
  void backward(const Tensor& loss);

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t node_count() const { return nodes_.size(); }

  // Internal: used by ops to register their output.
  Tensor record(OpKind kind, std::span<const Tensor> inputs, Tensor output,
                std::function<void()> backward);
  // Node id for a tensor used as an input (leaves get ids lazily).
  std::int64_t node_of(const Tensor& t);

 private:
  std::vector<std::shared_ptr<detail::TensorImpl>> nodes_;
  std::unordered_map<const detail::TensorImpl*, std::int64_t> leaf_ids_;
  std::vector<Entry> entries_;
};

// The graph receiving recorded ops on this thread, or nullptr.
Graph* active_graph();

class GraphScope {
 public:
  explicit GraphScope(Graph& graph);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* previous_;
};

// Convenience: backward through the graph that produced `loss`.
void backward(Graph& graph, const Tensor& loss);

}  // namespace steer

#endif  // STEER_TENSOR_HPP_
