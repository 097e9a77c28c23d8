#include "abm/num/autograd.hpp"

#include <sstream>
#include <unordered_set>

namespace abm::num {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

template <typename Real>
Real Var<Real>::item() const {
  if (node_->value.size() != 1) {
    fail(ErrorCode::shape, "item() needs a single-element tensor, got " +
                               shape_string(node_->value.shape()));
  }
  return node_->value[0];
}

template <typename Real>
Var<Real> Var<Real>::make(Tensor<Real> value, std::vector<Var> parents,
                          std::function<void(Node<Real>&)> backward) {
  auto node = std::make_shared<Node<Real>>();
  node->value = std::move(value);
  for (auto& p : parents) {
    node->requires_grad = node->requires_grad || p.requires_grad();
    node->parents.push_back(p.node_);
  }
  if (node->requires_grad) node->backward = std::move(backward);
  return Var(std::move(node));
}

template <typename Real>
void Var<Real>::backward() const {
  if (node_->value.size() != 1) {
    fail(ErrorCode::shape, "backward() starts from a scalar, got " +
                               shape_string(node_->value.shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node<Real>*> order;
  std::unordered_set<Node<Real>*> visited;
  std::vector<std::pair<Node<Real>*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Real>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<Real>* n : order) n->value.ensure_grad();
  node_->value.grad()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

template class Var<float>;
template class Var<double>;

namespace {
thread_local DecisionTrace* active_trace = nullptr;
}

DecisionTrace::DecisionTrace() : previous_(active_trace) { active_trace = this; }

DecisionTrace::~DecisionTrace() { active_trace = previous_; }

void DecisionTrace::record(std::uint64_t value) noexcept {
  if (!active_trace) return;
  // FNV-1a over the 8 bytes of the value.
  for (int i = 0; i < 8; ++i) {
    active_trace->digest_ ^= (value >> (8 * i)) & 0xffU;
    active_trace->digest_ *= 0x100000001b3ULL;
  }
}

bool DecisionTrace::active() noexcept { return active_trace != nullptr; }

}  // namespace abm::num
