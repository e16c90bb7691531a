#include "utuning/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include <malloc.h>

namespace utuning {

namespace {

thread_local bool g_stop_grad_at_frozen = false;
thread_local bool g_grad_enabled = true;

// Activation-sized buffers churn fast; keep them on the heap free-list
// instead of bouncing through mmap/munmap or sbrk trims.
[[maybe_unused]] const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 8 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 64 * 1024 * 1024);
  return true;
}();

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

// Vectorized exp through a fixed-alignment scratch buffer. Eigen peels
// SIMD loops to the destination's alignment, so running it directly on
// arbitrarily aligned tensor data would make results depend on where the
// allocator placed them; a constant-alignment staging buffer keeps the
// result a pure function of values and length.
void exp_inplace(double* p, int64_t n) {
  constexpr int64_t kChunk = 1024;
  alignas(64) double buf[kChunk];
  for (int64_t start = 0; start < n; start += kChunk) {
    int64_t len = std::min(kChunk, n - start);
    std::copy(p + start, p + start + len, buf);
    Eigen::Map<Eigen::ArrayXd, Eigen::Aligned64> m(buf, len);
    m = m.exp();
    std::copy(buf, buf + len, p + start);
  }
}

// Effective gradient demand at recording time. Leaves keep a static
// "gradient allowed" bit in requires_grad; frozen ones drop out when the
// stop-gradient mode is on.
bool wants_grad(const Node& n) {
  if (n.is_leaf) return n.requires_grad && (n.trainable || !g_stop_grad_at_frozen);
  return n.requires_grad;
}

Var make_op(const char* op, Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
  finalize_value(value, op);
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool req = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) req = req || wants_grad(*p);
  }
  n->requires_grad = req;
  if (req) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(bw);
  }
  return n;
}

int64_t norm_axis(int64_t axis, int64_t rank, const char* op, const Shape& s) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError(std::string(op) + ": axis out of range for shape " + shape_str(s));
  }
  return axis;
}

// Suffix broadcast: b's shape must equal the trailing dims of a's shape
// (or be scalar). Returns false on plain mismatch.
bool suffix_compatible(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  for (size_t i = 0; i < b.size(); ++i) {
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) return false;
  }
  return true;
}

void gemm_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool accum) {
  CMap A(a, m, k);
  CMap B(b, k, n);
  MMap C(c, m, n);
  if (accum) {
    C.noalias() += A * B;
  } else {
    C.noalias() = A * B;
  }
}

void gemm_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool accum) {
  // C[m,n] = A[m,k] * B[n,k]^T
  CMap A(a, m, k);
  CMap B(b, n, k);
  MMap C(c, m, n);
  if (accum) {
    C.noalias() += A * B.transpose();
  } else {
    C.noalias() = A * B.transpose();
  }
}

void gemm_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool accum) {
  // C[m,n] = A[k,m]^T * B[k,n]
  CMap A(a, k, m);
  CMap B(b, k, n);
  MMap C(c, m, n);
  if (accum) {
    C.noalias() += A.transpose() * B;
  } else {
    C.noalias() = A.transpose() * B;
  }
}

struct MatmulDims {
  int64_t batch;  // product of leading dims of the output
  int64_t m, k, n;
  bool a_shared;  // operand is rank-2, reused across the batch
  bool b_shared;
  Shape out_shape;
};

MatmulDims matmul_dims(const char* op, const Shape& sa, const Shape& sb, bool b_transposed) {
  if (sa.size() < 2 || sb.size() < 2) {
    throw DimensionError(std::string(op) + ": operands must have rank >= 2: " + shape_str(sa) + " vs " +
                         shape_str(sb));
  }
  MatmulDims d{};
  d.m = sa[sa.size() - 2];
  d.k = sa[sa.size() - 1];
  int64_t bk = b_transposed ? sb[sb.size() - 1] : sb[sb.size() - 2];
  d.n = b_transposed ? sb[sb.size() - 2] : sb[sb.size() - 1];
  if (d.k != bk) {
    throw DimensionError(std::string(op) + ": inner extents disagree: " + shape_str(sa) + " vs " +
                         shape_str(sb));
  }
  Shape lead_a(sa.begin(), sa.end() - 2);
  Shape lead_b(sb.begin(), sb.end() - 2);
  d.a_shared = lead_a.empty() && !lead_b.empty();
  d.b_shared = lead_b.empty() && !lead_a.empty();
  if (!lead_a.empty() && !lead_b.empty() && lead_a != lead_b) {
    throw DimensionError(std::string(op) + ": batch extents disagree: " + shape_str(sa) + " vs " +
                         shape_str(sb));
  }
  const Shape& lead = lead_a.empty() ? lead_b : lead_a;
  d.batch = shape_numel(lead);
  d.out_shape = lead;
  d.out_shape.push_back(d.m);
  d.out_shape.push_back(d.n);
  return d;
}

}  // namespace

void set_stop_grad_at_frozen(bool enabled) { g_stop_grad_at_frozen = enabled; }
bool stop_grad_at_frozen() { return g_stop_grad_at_frozen; }
void set_grad_enabled(bool enabled) { g_grad_enabled = enabled; }
bool grad_enabled() { return g_grad_enabled; }

Var variable(Tensor value, bool trainable, std::string name) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->grad = Tensor::zeros(n->value.shape());
  n->is_leaf = true;
  n->trainable = trainable;
  n->requires_grad = true;  // "gradient allowed" bit for leaves
  n->name = std::move(name);
  return n;
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->is_leaf = true;
  n->trainable = false;
  n->requires_grad = false;
  return n;
}

Graph Graph::build(const Var& root) {
  Graph g;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    size_t i;
  };
  std::vector<Frame> stack;
  stack.push_back({root.get(), 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.i < f.n->parents.size()) {
      Node* p = f.n->parents[f.i++].get();
      if (visited.insert(p).second) stack.push_back({p, 0});
    } else {
      g.order.push_back(f.n);
      stack.pop_back();
    }
  }
  return g;
}

void backward(const Var& loss) {
  if (!loss) throw ContractError("backward: null node");
  if (loss->value.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss->value.shape()));
  }
  if (loss->is_leaf) {
    if (wants_grad(*loss)) loss->accumulate(Tensor::ones(loss->value.shape()));
    return;
  }
  Graph g = Graph::build(loss);
  for (Node* n : g.order) {
    if (!n->is_leaf) {
      n->ensure_grad();
      n->grad.fill(0.0);
    }
  }
  loss->grad.fill(1.0);
  for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf && n->backward_fn) n->backward_fn(*n);
  }
}

void zero_grad(const std::vector<Var>& vars) {
  for (const auto& v : vars) {
    v->ensure_grad();
    v->grad.fill(0.0);
  }
}

// ---- elementwise binary ----------------------------------------------------

namespace {

// Walks the bigger operand in b-sized stripes so the inner loop carries no
// modulo and vectorizes.
template <typename F>
void for_each_stripe(int64_t total, int64_t bn, F body) {
  for (int64_t r = 0; r < total / bn; ++r) body(r * bn);
}

// Accumulates g (shaped like the bigger operand) into the suffix-shaped
// operand's gradient by summing over the leading dims.
void accumulate_suffix(Node& small, const Tensor& g, double sign = 1.0) {
  small.ensure_grad();
  int64_t bn = small.value.numel();
  double* dst = small.grad.data();
  const double* src = g.data();
  for_each_stripe(g.numel(), bn, [&](int64_t base) {
    for (int64_t i = 0; i < bn; ++i) dst[i] += sign * src[base + i];
  });
}

}  // namespace

Var add(Var a, Var b) {
  if (!suffix_compatible(a->value.shape(), b->value.shape())) {
    throw DimensionError("add: shape mismatch " + shape_str(a->value.shape()) + " vs " +
                         shape_str(b->value.shape()));
  }
  Tensor out = a->value;
  const int64_t bn = b->value.numel();
  double* o = out.data();
  const double* bp = b->value.data();
  for_each_stripe(out.numel(), bn, [&](int64_t base) {
    for (int64_t i = 0; i < bn; ++i) o[base + i] += bp[i];
  });
  return make_op("add", std::move(out), {a, b}, [a, b](Node& n) {
    if (wants_grad(*a)) a->accumulate(n.grad);
    if (wants_grad(*b)) {
      if (b->value.same_shape(n.grad)) {
        b->accumulate(n.grad);
      } else {
        accumulate_suffix(*b, n.grad);
      }
    }
  });
}

Var sub(Var a, Var b) {
  if (!suffix_compatible(a->value.shape(), b->value.shape())) {
    throw DimensionError("sub: shape mismatch " + shape_str(a->value.shape()) + " vs " +
                         shape_str(b->value.shape()));
  }
  Tensor out = a->value;
  const int64_t bn = b->value.numel();
  double* o = out.data();
  const double* bp = b->value.data();
  for_each_stripe(out.numel(), bn, [&](int64_t base) {
    for (int64_t i = 0; i < bn; ++i) o[base + i] -= bp[i];
  });
  return make_op("sub", std::move(out), {a, b}, [a, b](Node& n) {
    if (wants_grad(*a)) a->accumulate(n.grad);
    if (wants_grad(*b)) {
      if (b->value.same_shape(n.grad)) {
        Tensor neg = n.grad;
        neg.scale_(-1.0);
        b->accumulate(neg);
      } else {
        accumulate_suffix(*b, n.grad, -1.0);
      }
    }
  });
}

Var mul(Var a, Var b) {
  if (!suffix_compatible(a->value.shape(), b->value.shape())) {
    throw DimensionError("mul: shape mismatch " + shape_str(a->value.shape()) + " vs " +
                         shape_str(b->value.shape()));
  }
  Tensor out = a->value;
  const int64_t bn = b->value.numel();
  double* o = out.data();
  const double* bp = b->value.data();
  for_each_stripe(out.numel(), bn, [&](int64_t base) {
    for (int64_t i = 0; i < bn; ++i) o[base + i] *= bp[i];
  });
  return make_op("mul", std::move(out), {a, b}, [a, b](Node& n) {
    const int64_t bn2 = b->value.numel();
    if (wants_grad(*a)) {
      Tensor da(a->value.shape());
      double* dp = da.data();
      const double* g = n.grad.data();
      const double* bp2 = b->value.data();
      for_each_stripe(da.numel(), bn2, [&](int64_t base) {
        for (int64_t i = 0; i < bn2; ++i) dp[base + i] = g[base + i] * bp2[i];
      });
      a->accumulate(da);
    }
    if (wants_grad(*b)) {
      Tensor db(b->value.shape());
      double* dp = db.data();
      const double* g = n.grad.data();
      const double* ap = a->value.data();
      for_each_stripe(n.grad.numel(), bn2, [&](int64_t base) {
        for (int64_t i = 0; i < bn2; ++i) dp[i] += g[base + i] * ap[base + i];
      });
      b->accumulate(db);
    }
  });
}

Var div(Var a, Var b) {
  if (!a->value.same_shape(b->value)) {
    throw DimensionError("div: shape mismatch " + shape_str(a->value.shape()) + " vs " +
                         shape_str(b->value.shape()));
  }
  Tensor out = a->value;
  double* o = out.data();
  const double* bp = b->value.data();
  for (int64_t i = 0; i < out.numel(); ++i) o[i] /= bp[i];
  return make_op("div", std::move(out), {a, b}, [a, b](Node& n) {
    const double* g = n.grad.data();
    const double* ap = a->value.data();
    const double* bp2 = b->value.data();
    if (wants_grad(*a)) {
      Tensor da(a->value.shape());
      for (int64_t i = 0; i < da.numel(); ++i) da[i] = g[i] / bp2[i];
      a->accumulate(da);
    }
    if (wants_grad(*b)) {
      Tensor db(b->value.shape());
      for (int64_t i = 0; i < db.numel(); ++i) db[i] = -g[i] * ap[i] / (bp2[i] * bp2[i]);
      b->accumulate(db);
    }
  });
}

Var scale(Var a, double c) {
  Tensor out = a->value;
  out.scale_(c);
  return make_op("scale", std::move(out), {a}, [a, c](Node& n) {
    if (!wants_grad(*a)) return;
    Tensor da = n.grad;
    da.scale_(c);
    a->accumulate(da);
  });
}

// ---- matmul ----------------------------------------------------------------

namespace {

Var matmul_impl(const char* op, Var a, Var b, bool b_transposed) {
  MatmulDims d = matmul_dims(op, a->value.shape(), b->value.shape(), b_transposed);
  Tensor out(d.out_shape);
  const double* ap = a->value.data();
  const double* bp = b->value.data();
  double* cp = out.data();
  const int64_t a_stride = d.a_shared ? 0 : d.m * d.k;
  const int64_t b_stride = d.b_shared ? 0 : d.n * d.k;
  for (int64_t i = 0; i < d.batch; ++i) {
    if (b_transposed) {
      gemm_nt(ap + i * a_stride, bp + i * b_stride, cp + i * d.m * d.n, d.m, d.k, d.n, false);
    } else {
      gemm_nn(ap + i * a_stride, bp + i * b_stride, cp + i * d.m * d.n, d.m, d.k, d.n, false);
    }
  }
  return make_op(op, std::move(out), {a, b}, [a, b, d, b_transposed](Node& n) {
    const double* g = n.grad.data();
    const double* ap2 = a->value.data();
    const double* bp2 = b->value.data();
    const int64_t as = d.a_shared ? 0 : d.m * d.k;
    const int64_t bs = d.b_shared ? 0 : d.n * d.k;
    if (wants_grad(*a)) {
      a->ensure_grad();
      double* da = a->grad.data();
      for (int64_t i = 0; i < d.batch; ++i) {
        // dA = G * B^T (plain) or G * B (already-transposed operand)
        if (b_transposed) {
          gemm_nn(g + i * d.m * d.n, bp2 + i * bs, da + i * as, d.m, d.n, d.k, true);
        } else {
          gemm_nt(g + i * d.m * d.n, bp2 + i * bs, da + i * as, d.m, d.n, d.k, true);
        }
      }
    }
    if (wants_grad(*b)) {
      b->ensure_grad();
      double* db = b->grad.data();
      for (int64_t i = 0; i < d.batch; ++i) {
        if (b_transposed) {
          // dB = G^T * A : [n,m]x[m,k] -> [n,k]
          gemm_tn(g + i * d.m * d.n, ap2 + i * as, db + i * bs, d.n, d.m, d.k, true);
        } else {
          // dB = A^T * G : [k,m]x[m,n] -> [k,n]
          gemm_tn(ap2 + i * as, g + i * d.m * d.n, db + i * bs, d.k, d.m, d.n, true);
        }
      }
    }
  });
}

}  // namespace

Var matmul(Var a, Var b) { return matmul_impl("matmul", std::move(a), std::move(b), false); }
Var matmul_nt(Var a, Var b) { return matmul_impl("matmul_nt", std::move(a), std::move(b), true); }

// ---- softmax ----------------------------------------------------------------

Tensor softmax_value(const Tensor& x, int64_t axis) {
  int64_t ax = norm_axis(axis, x.rank(), "softmax", x.shape());
  int64_t n = x.shape()[static_cast<size_t>(ax)];
  int64_t inner = 1;
  for (int64_t i = ax + 1; i < x.rank(); ++i) inner *= x.shape()[static_cast<size_t>(i)];
  int64_t outer = x.numel() / (n * inner);
  Tensor out(x.shape());
  const double* xp = x.data();
  double* op = out.data();
  if (inner == 1) {
    // Contiguous rows: shift, one vectorized exp over the buffer, normalize.
    for (int64_t o = 0; o < outer; ++o) {
      const double* row = xp + o * n;
      double mx = row[0];
      for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      double* orow = op + o * n;
      for (int64_t j = 0; j < n; ++j) orow[j] = row[j] - mx;
    }
    Eigen::Map<Eigen::ArrayXd> all(op, x.numel());
    all = all.exp();
    for (int64_t o = 0; o < outer; ++o) {
      double* orow = op + o * n;
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) s += orow[j];
      for (int64_t j = 0; j < n; ++j) orow[j] /= s;
    }
    return out;
  }
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * n * inner + in;
      double mx = xp[base];
      for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xp[base + j * inner]);
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        double e = std::exp(xp[base + j * inner] - mx);
        op[base + j * inner] = e;
        s += e;
      }
      for (int64_t j = 0; j < n; ++j) op[base + j * inner] /= s;
    }
  }
  return out;
}

Var softmax(Var x, int64_t axis) {
  Tensor out = softmax_value(x->value, axis);
  int64_t ax = norm_axis(axis, x->value.rank(), "softmax", x->value.shape());
  int64_t n = x->value.shape()[static_cast<size_t>(ax)];
  int64_t inner = 1;
  for (int64_t i = ax + 1; i < x->value.rank(); ++i) inner *= x->value.shape()[static_cast<size_t>(i)];
  return make_op("softmax", std::move(out), {x}, [x, n, inner](Node& nd) {
    if (!wants_grad(*x)) return;
    const Tensor& s = nd.value;
    const double* sp = s.data();
    const double* g = nd.grad.data();
    Tensor dx(x->value.shape());
    double* dp = dx.data();
    int64_t outer = s.numel() / (n * inner);
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = o * n * inner + in;
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) dot += g[base + j * inner] * sp[base + j * inner];
        for (int64_t j = 0; j < n; ++j) {
          const int64_t k = base + j * inner;
          dp[k] = sp[k] * (g[k] - dot);
        }
      }
    }
    x->accumulate(dx);
  });
}

// ---- shape ops --------------------------------------------------------------

Var concat(std::vector<Var> xs, int64_t axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = xs[0]->value.shape();
  int64_t ax = norm_axis(axis, xs[0]->value.rank(), "concat", s0);
  Shape out_shape = s0;
  int64_t total = 0;
  for (const auto& v : xs) {
    const Shape& s = v->value.shape();
    if (s.size() != s0.size()) {
      throw DimensionError("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
    }
    for (size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int64_t>(i) != ax && s[i] != s0[i]) {
        throw DimensionError("concat: shape mismatch off-axis " + shape_str(s0) + " vs " + shape_str(s));
      }
    }
    total += s[static_cast<size_t>(ax)];
  }
  out_shape[static_cast<size_t>(ax)] = total;
  int64_t inner = 1;
  for (size_t i = static_cast<size_t>(ax) + 1; i < s0.size(); ++i) inner *= s0[i];
  int64_t outer = shape_numel(out_shape) / (total * inner);
  Tensor out(out_shape);
  double* op = out.data();
  int64_t offset = 0;
  for (const auto& v : xs) {
    int64_t na = v->value.shape()[static_cast<size_t>(ax)];
    const double* xp = v->value.data();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(xp + o * na * inner, xp + (o + 1) * na * inner, op + o * total * inner + offset * inner);
    }
    offset += na;
  }
  std::vector<Var> parents = xs;
  return make_op("concat", std::move(out), std::move(parents),
                 [xs, ax, inner, total, outer](Node& nd) {
                   const double* g = nd.grad.data();
                   int64_t off = 0;
                   for (const auto& v : xs) {
                     int64_t na = v->value.shape()[static_cast<size_t>(ax)];
                     if (wants_grad(*v)) {
                       Tensor dv(v->value.shape());
                       double* dp = dv.data();
                       for (int64_t o = 0; o < outer; ++o) {
                         const double* src = g + o * total * inner + off * inner;
                         std::copy(src, src + na * inner, dp + o * na * inner);
                       }
                       v->accumulate(dv);
                     }
                     off += na;
                   }
                 });
}

Var narrow(Var x, int64_t axis, int64_t start, int64_t len) {
  const Shape& s = x->value.shape();
  int64_t ax = norm_axis(axis, x->value.rank(), "narrow", s);
  int64_t n = s[static_cast<size_t>(ax)];
  if (start < 0 || len <= 0 || start + len > n) {
    throw DimensionError("narrow: window [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of range for shape " + shape_str(s));
  }
  Shape out_shape = s;
  out_shape[static_cast<size_t>(ax)] = len;
  int64_t inner = 1;
  for (size_t i = static_cast<size_t>(ax) + 1; i < s.size(); ++i) inner *= s[i];
  int64_t outer = x->value.numel() / (n * inner);
  Tensor out(out_shape);
  const double* xp = x->value.data();
  double* op = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    const double* src = xp + o * n * inner + start * inner;
    std::copy(src, src + len * inner, op + o * len * inner);
  }
  return make_op("narrow", std::move(out), {x}, [x, n, inner, outer, start, len](Node& nd) {
    if (!wants_grad(*x)) return;
    x->ensure_grad();
    double* dp = x->grad.data();
    const double* g = nd.grad.data();
    for (int64_t o = 0; o < outer; ++o) {
      double* dst = dp + o * n * inner + start * inner;
      const double* src = g + o * len * inner;
      for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
    }
  });
}

Var reshape(Var x, Shape shape) {
  if (shape_numel(shape) != x->value.numel()) {
    throw DimensionError("reshape: element count mismatch " + shape_str(x->value.shape()) + " vs " +
                         shape_str(shape));
  }
  Tensor out(shape, std::vector<double>(x->value.data(), x->value.data() + x->value.numel()));
  return make_op("reshape", std::move(out), {x}, [x](Node& nd) {
    if (!wants_grad(*x)) return;
    Tensor dx(x->value.shape(),
              std::vector<double>(nd.grad.data(), nd.grad.data() + nd.grad.numel()));
    x->accumulate(dx);
  });
}

Var broadcast_batch(Var x, int64_t batch) {
  if (batch <= 0) throw DimensionError("broadcast_batch: batch must be positive");
  Shape out_shape;
  out_shape.push_back(batch);
  for (int64_t d : x->value.shape()) out_shape.push_back(d);
  int64_t n = x->value.numel();
  Tensor out(out_shape);
  double* op = out.data();
  const double* xp = x->value.data();
  for (int64_t b = 0; b < batch; ++b) std::copy(xp, xp + n, op + b * n);
  return make_op("broadcast_batch", std::move(out), {x}, [x, batch, n](Node& nd) {
    if (!wants_grad(*x)) return;
    Tensor dx(x->value.shape());
    double* dp = dx.data();
    const double* g = nd.grad.data();
    for (int64_t b = 0; b < batch; ++b) {
      for (int64_t i = 0; i < n; ++i) dp[i] += g[b * n + i];
    }
    x->accumulate(dx);
  });
}

// ---- normalization / activations ---------------------------------------------

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  if (eps <= 0) throw ContractError("layer_norm: eps must be positive");
  const Shape& s = x->value.shape();
  if (s.empty()) throw DimensionError("layer_norm: rank-0 input");
  int64_t n = s.back();
  if (gamma->value.numel() != n || beta->value.numel() != n) {
    throw DimensionError("layer_norm: affine params must have " + std::to_string(n) + " elements, got " +
                         shape_str(gamma->value.shape()) + " and " + shape_str(beta->value.shape()));
  }
  int64_t rows = x->value.numel() / n;
  Tensor out(s);
  auto xhat = std::make_shared<Tensor>(s);          // normalized pre-affine values
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  const double* xp = x->value.data();
  const double* gp = gamma->value.data();
  const double* bp = beta->value.data();
  double* op = out.data();
  double* hp = xhat->data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = xp + r * n;
    double mean = 0.0;
    for (int64_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < n; ++j) {
      double h = (row[j] - mean) * is;
      hp[r * n + j] = h;
      op[r * n + j] = h * gp[j] + bp[j];
    }
  }
  return make_op("layer_norm", std::move(out), {x, gamma, beta},
                 [x, gamma, beta, xhat, inv_std, n, rows](Node& nd) {
                   const double* g = nd.grad.data();
                   const double* hp2 = xhat->data();
                   const double* gp2 = gamma->value.data();
                   if (wants_grad(*gamma)) {
                     Tensor dg(gamma->value.shape());
                     for (int64_t r = 0; r < rows; ++r) {
                       for (int64_t j = 0; j < n; ++j) dg[j] += g[r * n + j] * hp2[r * n + j];
                     }
                     gamma->accumulate(dg);
                   }
                   if (wants_grad(*beta)) {
                     Tensor db(beta->value.shape());
                     for (int64_t r = 0; r < rows; ++r) {
                       for (int64_t j = 0; j < n; ++j) db[j] += g[r * n + j];
                     }
                     beta->accumulate(db);
                   }
                   if (wants_grad(*x)) {
                     Tensor dx(x->value.shape());
                     double* dp = dx.data();
                     for (int64_t r = 0; r < rows; ++r) {
                       double m1 = 0.0, m2 = 0.0;
                       for (int64_t j = 0; j < n; ++j) {
                         double h = g[r * n + j] * gp2[j];
                         m1 += h;
                         m2 += h * hp2[r * n + j];
                       }
                       m1 /= static_cast<double>(n);
                       m2 /= static_cast<double>(n);
                       double is = (*inv_std)[static_cast<size_t>(r)];
                       for (int64_t j = 0; j < n; ++j) {
                         double h = g[r * n + j] * gp2[j];
                         dp[r * n + j] = is * (h - m1 - hp2[r * n + j] * m2);
                       }
                     }
                     x->accumulate(dx);
                   }
                 });
}

namespace {
// tanh-form GELU: 0.5 x (1 + tanh(c (x + a x^3))) with c = sqrt(2/pi).
constexpr double kGeluC = 0.7978845608028654;
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var x) {
  const int64_t n = x->value.numel();
  // Cache tanh(u) for the adjoint; computing it is the expensive part.
  auto tanh_u = std::make_shared<Tensor>(x->value.shape());
  {
    // tanh(u) = 1 - 2 / (exp(2u) + 1); exp is the vectorizable part.
    const double* vp = x->value.data();
    double* t = tanh_u->data();
    for (int64_t i = 0; i < n; ++i) {
      double v = vp[i];
      t[i] = 2.0 * kGeluC * (v + kGeluA * v * v * v);
    }
    exp_inplace(t, n);
    for (int64_t i = 0; i < n; ++i) t[i] = 1.0 - 2.0 / (t[i] + 1.0);
  }
  Tensor out(x->value.shape());
  const double* xp = x->value.data();
  const double* tp = tanh_u->data();
  double* op = out.data();
  for (int64_t i = 0; i < n; ++i) op[i] = 0.5 * xp[i] * (1.0 + tp[i]);
  return make_op("gelu", std::move(out), {x}, [x, tanh_u](Node& nd) {
    if (!wants_grad(*x)) return;
    Tensor dx(x->value.shape());
    const double* xp2 = x->value.data();
    const double* tp2 = tanh_u->data();
    const double* g = nd.grad.data();
    for (int64_t i = 0; i < dx.numel(); ++i) {
      double v = xp2[i];
      double t = tp2[i];
      double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      dx[i] = g[i] * d;
    }
    x->accumulate(dx);
  });
}

Var relu(Var x) {
  Tensor out(x->value.shape());
  const double* xp = x->value.data();
  double* op = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) op[i] = xp[i] > 0 ? xp[i] : 0.0;
  return make_op("relu", std::move(out), {x}, [x](Node& nd) {
    if (!wants_grad(*x)) return;
    Tensor dx(x->value.shape());
    const double* xp2 = x->value.data();
    const double* g = nd.grad.data();
    for (int64_t i = 0; i < dx.numel(); ++i) dx[i] = xp2[i] > 0 ? g[i] : 0.0;
    x->accumulate(dx);
  });
}

Var sigmoid(Var x) {
  Tensor out(x->value.shape());
  const int64_t n = out.numel();
  const double* xp = x->value.data();
  double* op = out.data();
  for (int64_t i = 0; i < n; ++i) op[i] = -xp[i];
  exp_inplace(op, n);
  for (int64_t i = 0; i < n; ++i) op[i] = 1.0 / (1.0 + op[i]);
  return make_op("sigmoid", std::move(out), {x}, [x](Node& nd) {
    if (!wants_grad(*x)) return;
    Tensor dx(x->value.shape());
    const double* sp = nd.value.data();
    const double* g = nd.grad.data();
    for (int64_t i = 0; i < dx.numel(); ++i) dx[i] = g[i] * sp[i] * (1.0 - sp[i]);
    x->accumulate(dx);
  });
}

Var exp(Var x) {
  Tensor out(x->value.shape());
  Eigen::Map<const Eigen::ArrayXd> xa(x->value.data(), x->value.numel());
  Eigen::Map<Eigen::ArrayXd> oa(out.data(), out.numel());
  oa = xa.exp();
  return make_op("exp", std::move(out), {x}, [x](Node& nd) {
    if (!wants_grad(*x)) return;
    Tensor dx(x->value.shape());
    const double* vp = nd.value.data();
    const double* g = nd.grad.data();
    for (int64_t i = 0; i < dx.numel(); ++i) dx[i] = g[i] * vp[i];
    x->accumulate(dx);
  });
}

// ---- reductions / row ops -----------------------------------------------------

Var sum(Var x) {
  double s = 0.0;
  const double* xp = x->value.data();
  for (int64_t i = 0; i < x->value.numel(); ++i) s += xp[i];
  return make_op("sum", Tensor::scalar(s), {x}, [x](Node& nd) {
    if (!wants_grad(*x)) return;
    Tensor dx(x->value.shape(), nd.grad[0]);
    x->accumulate(dx);
  });
}

Var sum_last(Var x) {
  const Shape& s = x->value.shape();
  if (s.empty()) throw DimensionError("sum_last: rank-0 input");
  int64_t n = s.back();
  Shape out_shape(s.begin(), s.end() - 1);
  int64_t rows = x->value.numel() / n;
  Tensor out(out_shape);
  const double* xp = x->value.data();
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int64_t j = 0; j < n; ++j) acc += xp[r * n + j];
    out[r] = acc;
  }
  return make_op("sum_last", std::move(out), {x}, [x, n, rows](Node& nd) {
    if (!wants_grad(*x)) return;
    Tensor dx(x->value.shape());
    const double* g = nd.grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t j = 0; j < n; ++j) dx[r * n + j] = g[r];
    }
    x->accumulate(dx);
  });
}

Var mean_axis(Var x, int64_t axis) {
  const Shape& s = x->value.shape();
  int64_t ax = norm_axis(axis, x->value.rank(), "mean_axis", s);
  int64_t n = s[static_cast<size_t>(ax)];
  Shape out_shape;
  for (size_t i = 0; i < s.size(); ++i) {
    if (static_cast<int64_t>(i) != ax) out_shape.push_back(s[i]);
  }
  int64_t inner = 1;
  for (size_t i = static_cast<size_t>(ax) + 1; i < s.size(); ++i) inner *= s[i];
  int64_t outer = x->value.numel() / (n * inner);
  Tensor out(out_shape);
  const double* xp = x->value.data();
  double* op = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t j = 0; j < n; ++j) {
      const double* src = xp + (o * n + j) * inner;
      double* dst = op + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  out.scale_(1.0 / static_cast<double>(n));
  return make_op("mean_axis", std::move(out), {x}, [x, n, inner, outer](Node& nd) {
    if (!wants_grad(*x)) return;
    Tensor dx(x->value.shape());
    const double* g = nd.grad.data();
    double inv = 1.0 / static_cast<double>(n);
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t j = 0; j < n; ++j) {
        double* dst = dx.data() + (o * n + j) * inner;
        const double* src = g + o * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] = src[i] * inv;
      }
    }
    x->accumulate(dx);
  });
}

namespace {
void check_row_shapes(const char* op, const Tensor& x, const Shape& rshape) {
  const Shape& xs = x.shape();
  if (xs.empty() || Shape(xs.begin(), xs.end() - 1) != rshape) {
    throw DimensionError(std::string(op) + ": row operand " + shape_str(rshape) +
                         " must match " + shape_str(xs) + " without its last axis");
  }
}
}  // namespace

Var scale_rows(Var x, Var r) {
  check_row_shapes("scale_rows", x->value, r->value.shape());
  int64_t n = x->value.shape().back();
  int64_t rows = x->value.numel() / n;
  Tensor out(x->value.shape());
  const double* xp = x->value.data();
  const double* rp = r->value.data();
  double* op = out.data();
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < n; ++j) op[i * n + j] = xp[i * n + j] * rp[i];
  }
  return make_op("scale_rows", std::move(out), {x, r}, [x, r, n, rows](Node& nd) {
    const double* g = nd.grad.data();
    if (wants_grad(*x)) {
      Tensor dx(x->value.shape());
      const double* rp2 = r->value.data();
      for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < n; ++j) dx[i * n + j] = g[i * n + j] * rp2[i];
      }
      x->accumulate(dx);
    }
    if (wants_grad(*r)) {
      Tensor dr(r->value.shape());
      const double* xp2 = x->value.data();
      for (int64_t i = 0; i < rows; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < n; ++j) acc += g[i * n + j] * xp2[i * n + j];
        dr[i] = acc;
      }
      r->accumulate(dr);
    }
  });
}

Var sub_rowwise(Var x, const Tensor& shift) {
  check_row_shapes("sub_rowwise", x->value, shift.shape());
  int64_t n = x->value.shape().back();
  int64_t rows = x->value.numel() / n;
  Tensor out(x->value.shape());
  const double* xp = x->value.data();
  const double* sp = shift.data();
  double* op = out.data();
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < n; ++j) op[i * n + j] = xp[i * n + j] - sp[i];
  }
  return make_op("sub_rowwise", std::move(out), {x}, [x](Node& nd) {
    if (wants_grad(*x)) x->accumulate(nd.grad);
  });
}

Var cross_entropy_mean(Var logits, const std::vector<int64_t>& labels) {
  const Shape& s = logits->value.shape();
  if (s.size() != 2) {
    throw DimensionError("cross_entropy_mean: logits must be [batch, classes], got " + shape_str(s));
  }
  int64_t batch = s[0];
  int64_t classes = s[1];
  if (static_cast<int64_t>(labels.size()) != batch) {
    throw DimensionError("cross_entropy_mean: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(batch));
  }
  auto probs = std::make_shared<Tensor>(softmax_value(logits->value, 1));
  const double* xp = logits->value.data();
  double loss = 0.0;
  for (int64_t b = 0; b < batch; ++b) {
    const double* row = xp + b * classes;
    double mx = row[0];
    for (int64_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    double lse = 0.0;
    for (int64_t c = 0; c < classes; ++c) lse += std::exp(row[c] - mx);
    lse = std::log(lse) + mx;
    loss += lse - row[labels[static_cast<size_t>(b)]];
  }
  loss /= static_cast<double>(batch);
  auto labels_copy = std::make_shared<std::vector<int64_t>>(labels);
  return make_op("cross_entropy_mean", Tensor::scalar(loss), {logits},
                 [logits, probs, labels_copy, batch, classes](Node& nd) {
                   if (!wants_grad(*logits)) return;
                   Tensor dx(logits->value.shape());
                   double g = nd.grad[0] / static_cast<double>(batch);
                   const double* pp = probs->data();
                   for (int64_t b = 0; b < batch; ++b) {
                     for (int64_t c = 0; c < classes; ++c) {
                       double y = (c == (*labels_copy)[static_cast<size_t>(b)]) ? 1.0 : 0.0;
                       dx[b * classes + c] = g * (pp[b * classes + c] - y);
                     }
                   }
                   logits->accumulate(dx);
                 });
}

Tensor rowmax_value(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("rowmax: rank-0 input");
  int64_t n = s.back();
  Shape out_shape(s.begin(), s.end() - 1);
  int64_t rows = x.numel() / n;
  Tensor out(out_shape);
  const double* xp = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    double mx = xp[r * n];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xp[r * n + j]);
    out[r] = mx;
  }
  return out;
}

Tensor rowmax_value2(const Tensor& a, const Tensor& b) {
  Tensor ma = rowmax_value(a);
  Tensor mb = rowmax_value(b);
  if (!ma.same_shape(mb)) {
    throw DimensionError("rowmax2: row shapes disagree " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  for (int64_t i = 0; i < ma.numel(); ++i) ma[i] = std::max(ma[i], mb[i]);
  return ma;
}

}  // namespace utuning
