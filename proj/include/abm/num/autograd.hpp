#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "abm/num/tensor.hpp"

namespace abm::num {

template <typename Real>
struct Node {
  Tensor<Real> value;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's gradient and accumulates into the parents' gradients.
  std::function<void(Node&)> backward;
};

// Handle to a node of a dynamically built computation graph. Copies alias.
template <typename Real>
class Var {
 public:
  Var() = default;

  static Var leaf(Tensor<Real> value, bool requires_grad) {
    auto node = std::make_shared<Node<Real>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
  }
  static Var constant(Tensor<Real> value) { return leaf(std::move(value), false); }

  bool valid() const noexcept { return static_cast<bool>(node_); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

  const Tensor<Real>& value() const { return node_->value; }
  Tensor<Real>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::span<const Real> data() const { return node_->value.data(); }
  Real item() const;

  std::span<const Real> grad() const { return node_->value.grad(); }
  void zero_grad() { node_->value.zero_grad(); }

  // Reverse-mode sweep from this scalar node, seeding d(self)/d(self) = 1.
  // Gradients accumulate into every reachable node that requires them.
  void backward() const;

  const std::shared_ptr<Node<Real>>& node() const noexcept { return node_; }
  bool same_node(const Var& other) const noexcept { return node_ == other.node_; }

  // Creates a non-leaf result node; requires_grad iff any parent requires it.
  static Var make(Tensor<Real> value, std::vector<Var> parents,
                  std::function<void(Node<Real>&)> backward);

 private:
  explicit Var(std::shared_ptr<Node<Real>> node) : node_(std::move(node)) {}
  std::shared_ptr<Node<Real>> node_;
};

// Records the discrete choices made by piecewise operations (ReLU masks,
// pooling argmax, selected matrix entries) so finite-difference checks can
// detect when a perturbation crosses a kink.
class DecisionTrace {
 public:
  DecisionTrace();
  ~DecisionTrace();
  DecisionTrace(const DecisionTrace&) = delete;
  DecisionTrace& operator=(const DecisionTrace&) = delete;

  std::uint64_t digest() const noexcept { return digest_; }

  // No-op unless a trace is active on this thread.
  static void record(std::uint64_t value) noexcept;
  static bool active() noexcept;

 private:
  std::uint64_t digest_ = 0xcbf29ce484222325ULL;
  DecisionTrace* previous_;
};

enum class NormMode {
  train,  // batch statistics, running statistics updated
  eval,   // running statistics
  batch,  // batch statistics, running statistics untouched
};

template <typename Real>
struct BatchNormStats {
  std::vector<Real> running_mean;
  std::vector<Real> running_var;
  bool populated = false;
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Image ops work on [N, C, H, W] batches.
template <typename Real>
Var<Real> conv2d(const Var<Real>& input, const Var<Real>& kernels, const Var<Real>& bias);
template <typename Real>
Var<Real> batch_norm(const Var<Real>& input, const Var<Real>& gamma, const Var<Real>& beta,
                     BatchNormStats<Real>& stats, NormMode mode);
template <typename Real>
Var<Real> relu(const Var<Real>& input);
template <typename Real>
Var<Real> max_pool2(const Var<Real>& input);
template <typename Real>
Var<Real> upsample_nearest(const Var<Real>& input, std::size_t height, std::size_t width);
template <typename Real>
Var<Real> concat_channels(std::span<const Var<Real>> inputs);
// Scales every pixel's channel vector to unit length.
template <typename Real>
Var<Real> l2_normalize_channels(const Var<Real>& input);
// [N, C, H, W] -> [N, C]
template <typename Real>
Var<Real> spatial_mean(const Var<Real>& input);
// Rows of a [N, D, H, W] field for image `image` at the given pixels -> [P, D].
template <typename Real>
Var<Real> gather_pixels(const Var<Real>& field, std::size_t image,
                        std::span<const std::size_t> pixels);

// Matrix ops.
// Pairwise -<u,v>/(|u||v| + eps) between rows of [P, D] and [Q, D] -> [P, Q].
template <typename Real>
Var<Real> neg_cosine(const Var<Real>& u, const Var<Real>& v, double eps = 1e-12);
// Rows of a [R, C] matrix -> [len, C].
template <typename Real>
Var<Real> gather_rows(const Var<Real>& matrix, std::span<const std::size_t> rows);

// Entry (r, columns[r]) of a [P, Q] matrix for every row -> [P].
template <typename Real>
Var<Real> select_columns(const Var<Real>& matrix, std::span<const std::size_t> columns);
// Mean over rows of -log softmax(row)[targets[r]] for a [P, Q] logit matrix.
template <typename Real>
Var<Real> softmax_cross_entropy_rows(const Var<Real>& logits,
                                     std::span<const std::size_t> targets);

// Elementwise and reductions.
template <typename Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b);
template <typename Real>
Var<Real> scale(const Var<Real>& x, double factor);
// Multiplies every element by the scalar node `s`.
template <typename Real>
Var<Real> mul_scalar(const Var<Real>& x, const Var<Real>& s);
template <typename Real>
Var<Real> exp(const Var<Real>& x);
template <typename Real>
Var<Real> sum(const Var<Real>& x);
template <typename Real>
Var<Real> mean(const Var<Real>& x);
// Flattens and concatenates -> [total].
template <typename Real>
Var<Real> concat(std::span<const Var<Real>> inputs);
template <typename Real>
Var<Real> log_softmax(const Var<Real>& x);
template <typename Real>
Var<Real> pick(const Var<Real>& x, std::size_t index);

}  // namespace abm::num
