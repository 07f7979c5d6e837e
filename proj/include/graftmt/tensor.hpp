// Dense row-major tensors and the reverse-mode tape that differentiates them.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "graftmt/errors.hpp"
#include "graftmt/rng.hpp"

namespace graftmt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty when no gradient has been assigned
  bool requires_grad = false;
  std::int64_t node_id = -1;  // -1 for leaves and untracked values
};

// Shared handle to tensor storage. Copies alias the same storage; use clone()
// for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : impl_(std::make_shared<TensorData<T>>()) {
    impl_->value.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<TensorData<T>>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  [[nodiscard]] bool defined() const noexcept { return impl_ != nullptr; }
  [[nodiscard]] const Shape& shape() const { return impl_->shape; }
  [[nodiscard]] std::size_t rank() const { return impl_->shape.size(); }
  [[nodiscard]] std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  [[nodiscard]] std::size_t last_dim() const { return impl_->shape.back(); }
  [[nodiscard]] std::size_t numel() const { return impl_->value.size(); }

  [[nodiscard]] std::span<T> data() { return impl_->value; }
  [[nodiscard]] std::span<const T> data() const { return impl_->value; }
  [[nodiscard]] T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->value[0];
  }
  T& operator[](std::size_t i) { return impl_->value[i]; }
  const T& operator[](std::size_t i) const { return impl_->value[i]; }

  [[nodiscard]] bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    if (!flag) std::vector<T>().swap(impl_->grad);
  }

  [[nodiscard]] bool has_grad() const { return !impl_->grad.empty(); }
  [[nodiscard]] std::span<T> grad() { return impl_->grad; }
  [[nodiscard]] std::span<const T> grad() const { return impl_->grad; }

  // Allocates (or resets) a zero gradient. No-op for tensors that do not require grad.
  void zero_grad() {
    if (impl_->requires_grad) impl_->grad.assign(numel(), T{0});
  }
  void clear_grad() { std::vector<T>().swap(impl_->grad); }

  [[nodiscard]] std::int64_t node_id() const { return impl_->node_id; }
  [[nodiscard]] bool is_leaf() const { return impl_->node_id < 0; }

  [[nodiscard]] Tensor clone() const {
    Tensor out(shape(), std::vector<T>(impl_->value));
    return out;
  }

  // Same storage reinterpreted with another shape; only valid for untracked values.
  [[nodiscard]] Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("reshape: " + shape_str(this->shape()) + " -> " + shape_str(shape));
    }
    Tensor out(std::move(shape), std::vector<T>(impl_->value));
    return out;
  }

  [[nodiscard]] const std::shared_ptr<TensorData<T>>& impl() const { return impl_; }
  [[nodiscard]] bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorData<T>> impl_;
};

struct TapeOptions {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;  // distinguishes micro-batches within one seed
  bool training = false;
  bool strict_finite = false;
  bool record = true;
};

// Ordered record of primitive operations. A tape and its tensors belong to one
// worker; nothing here is synchronised.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(std::span<const T> out_grad)>;

  explicit Tape(TapeOptions options = {}) : options_(options) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  [[nodiscard]] bool training() const noexcept { return options_.training; }
  void set_training(bool flag) noexcept { options_.training = flag; }
  [[nodiscard]] bool strict_finite() const noexcept { return options_.strict_finite; }
  [[nodiscard]] bool recording() const noexcept { return options_.record; }
  void set_recording(bool flag) noexcept { options_.record = flag; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
  [[nodiscard]] std::string_view kind(std::size_t i) const { return nodes_.at(i).kind; }

  // Dropout key for the next stochastic op; advances even when not recording
  // so masks depend only on call order.
  std::uint64_t next_random_node() noexcept { return random_nodes_++; }
  [[nodiscard]] double uniform(std::uint64_t node, std::uint64_t index) const noexcept {
    return counter_uniform(options_.seed, options_.stream, node, index);
  }

  [[nodiscard]] bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!options_.record) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor<T>* t) { return t->requires_grad(); });
  }

  // Registers `output` as produced from `inputs`. Call only when needs_grad() held.
  void record(std::string_view kind, std::vector<Tensor<T>> inputs, Tensor<T>& output,
              Backward backward) {
    if (consumed_) {
      nodes_.clear();
      consumed_ = false;
    }
    auto& out = *output.impl();
    out.requires_grad = true;
    out.node_id = static_cast<std::int64_t>(nodes_.size());
    nodes_.push_back(Node{std::string(kind), std::move(inputs), output.impl(), std::move(backward)});
  }

  // Accumulates d(loss)/d(leaf) into every reachable requires_grad leaf. Leaves
  // that took part in the recorded graph but are unreachable get a zero grad.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (consumed_) throw StateError("backward: tape already consumed; run a new forward first");
    if (nodes_.empty() || !loss.requires_grad()) {
      throw StateError("backward: tape holds no recorded operations for this loss");
    }
    auto& root = *loss.impl();
    if (root.grad.empty()) root.grad.assign(1, T{0});
    root.grad[0] += T{1};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto& out = *it->output;
      if (out.grad.empty()) continue;
      it->backward(out.grad);
      // Intermediate gradients are dead once propagated.
      if (out.node_id >= 0 && it->output.get() != &root) std::vector<T>().swap(out.grad);
    }
    for (auto& node : nodes_) {
      for (auto& in : node.inputs) {
        auto& d = *in.impl();
        if (d.node_id < 0 && d.requires_grad && d.grad.empty()) d.grad.assign(d.value.size(), T{0});
      }
    }
    consumed_ = true;
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  // Grad buffer of `t`, allocated on first use. Only valid for tensors that require grad.
  static std::span<T> grad_of(const Tensor<T>& t) {
    auto& d = *t.impl();
    if (d.grad.empty()) d.grad.assign(d.value.size(), T{0});
    return d.grad;
  }

 private:
  struct Node {
    std::string kind;
    std::vector<Tensor<T>> inputs;
    std::shared_ptr<TensorData<T>> output;
    Backward backward;
  };

  TapeOptions options_;
  std::vector<Node> nodes_;
  std::uint64_t random_nodes_ = 0;
  bool consumed_ = false;
};

}  // namespace graftmt
