#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "utuning/tensor.hpp"

namespace utuning {

class Node;
using Var = std::shared_ptr<Node>;

/// One value in the recorded computation. Leaves are created through
/// `variable` / `constant`; every primitive op returns an interior node
/// holding its adjoint rule. Leaf gradients persist and accumulate across
/// backward calls; interior gradients are scratch space for one traversal.
class Node {
 public:
  Tensor value;
  Tensor grad;
  bool is_leaf = false;
  bool trainable = false;
  bool requires_grad = false;
  std::string name;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    // A default-constructed grad has shape {} like a scalar but no storage.
    if (!grad.same_shape(value) || grad.numel() != value.numel()) {
      grad = Tensor::zeros(value.shape());
    }
  }
  void accumulate(const Tensor& g) {
    ensure_grad();
    grad.add_(g);
  }
};

/// Named leaf; participates in gradient computation. `trainable == false`
/// marks frozen parameters: they still receive gradients (unless the
/// stop-gradient-at-frozen mode is on) but optimizers never touch them.
Var variable(Tensor value, bool trainable, std::string name = "");

/// Anonymous leaf that never requires a gradient (inputs, targets, masks).
Var constant(Tensor value);

/// When enabled, frozen variables are treated as constants during graph
/// recording, pruning their weight-gradient work. Gradients still flow
/// *through* ops whose inputs depend on trainable leaves. Off by default.
void set_stop_grad_at_frozen(bool enabled);
bool stop_grad_at_frozen();

/// While false, ops compute values but record no adjoints (inference mode).
void set_grad_enabled(bool enabled);
bool grad_enabled();

/// RAII helper for inference-only regions.
struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev_); }

 private:
  bool prev_;
};

/// Topologically ordered record of the primitive ops reachable from a root.
struct Graph {
  std::vector<Node*> order;  // parents always precede children
  static Graph build(const Var& root);
};

/// Reverse-mode sweep. `loss` must be scalar. Accumulates into the grad of
/// every reachable leaf; calling twice without zeroing doubles leaf grads.
void backward(const Var& loss);

void zero_grad(const std::vector<Var>& vars);

// ---- primitive ops -------------------------------------------------------
// All ops record their adjoint rule. Elementwise binary ops accept a
// lower-rank right operand whose shape is a suffix of the left one (leading
// batch-dim broadcast); no other broadcasting is supported.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);  // same shape only
Var scale(Var a, double c);

/// Last-two-axes matrix product; leading batch dims must match, or one
/// operand may be rank-2 and is then shared across the batch.
Var matmul(Var a, Var b);
/// a · b^T over the last two axes: [*,m,k] x [*,n,k] -> [*,m,n].
Var matmul_nt(Var a, Var b);

Var softmax(Var x, int64_t axis);
Var concat(std::vector<Var> xs, int64_t axis);
Var narrow(Var x, int64_t axis, int64_t start, int64_t len);
Var reshape(Var x, Shape shape);
/// Prepends a batch axis of extent `batch` by repetition; backward sums.
Var broadcast_batch(Var x, int64_t batch);

Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);
Var gelu(Var x);
Var relu(Var x);
Var sigmoid(Var x);
Var exp(Var x);

Var sum(Var x);                      // -> scalar
Var sum_last(Var x);                 // drop last axis
Var mean_axis(Var x, int64_t axis);  // drop given axis
/// Scales each row (last-axis slice) of x by the matching entry of r,
/// where r has the shape of x without its last axis.
Var scale_rows(Var x, Var r);
/// Subtracts a constant per-row shift (same shape contract as scale_rows).
/// The shift carries no gradient; softmax-mass ratios are invariant to it.
Var sub_rowwise(Var x, const Tensor& shift);

/// Mean softmax cross-entropy over a batch of logit rows [B, C].
Var cross_entropy_mean(Var logits, const std::vector<int64_t>& labels);

// ---- forward-only helpers -------------------------------------------------

Tensor softmax_value(const Tensor& x, int64_t axis);
/// Row-wise max over the last axis (detached; used for shared shifts).
Tensor rowmax_value(const Tensor& x);
Tensor rowmax_value2(const Tensor& a, const Tensor& b);  // max over both

}  // namespace utuning
