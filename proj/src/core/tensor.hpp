#ifndef APT_CORE_TENSOR_HPP
#define APT_CORE_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "core/error.hpp"
#include "core/rng.hpp"

namespace apt {

// Double precision throughout. Finite-difference gradient checks need the
// headroom; the workloads are small enough that training in double is fine.
using Scalar = double;
using Shape = std::vector<std::size_t>;

// Allocator that default-initializes instead of value-initializing, so
// growing a buffer does not zero-fill memory the caller is about to
// overwrite anyway. Zeroing buffers dominated profiles before this.
template <class T>
struct RawAllocator : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = RawAllocator<U>;
  };
  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

using Buffer = std::vector<Scalar, RawAllocator<Scalar>>;

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // allocated iff requires_grad
  bool requires_grad = false;
};

// Value-semantic handle over shared storage, row-major. Tensors are treated
// as immutable once produced by an op; only leaf parameters are mutated (by
// the optimizer) between forward passes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  // Contents unspecified; for op outputs that write every element.
  static Tensor uninitialized(Shape shape);
  static Tensor full(Shape shape, Scalar value);
  static Tensor from_values(Shape shape, std::vector<Scalar> values);
  static Tensor row(std::vector<Scalar> values);     // shape {1, n}
  static Tensor vec(std::vector<Scalar> values);     // shape {n}
  static Tensor scalar(Scalar value);                // shape {1}
  static Tensor randn(Shape shape, Rng& rng, Scalar stddev);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  // Rank-2 accessors; rank-1 tensors count as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const Scalar> data() const { return impl_->data; }
  std::span<Scalar> mutable_data() { return impl_->data; }
  std::span<const Scalar> grad() const { return impl_->grad; }
  std::span<Scalar> mutable_grad() { return impl_->grad; }

  Scalar at(std::size_t i) const { return impl_->data[i]; }
  Scalar at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }
  Scalar value() const;  // scalar tensors only

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool on);
  void zero_grad();

  // Deep copy; the copy never requires grad.
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& shared_impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

// Records the backward rule of every differentiable op executed while the
// tape is active. Replaying in reverse order visits each rule exactly once.
class Tape {
 public:
  void record(std::function<void()> backprop) { nodes_.push_back(std::move(backprop)); }
  std::size_t size() const { return nodes_.size(); }
  void replay_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

Tape* current_tape();

// RAII activation of a fresh tape on the current thread. Scopes nest; the
// previous tape is restored on destruction.
class TapeScope {
 public:
  TapeScope();
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape& tape() { return tape_; }

 private:
  Tape tape_;
  Tape* previous_;
};

// Temporarily deactivates the current tape, e.g. for an inference pass in
// the middle of a training step.
class TapePause {
 public:
  TapePause();
  ~TapePause();
  TapePause(const TapePause&) = delete;
  TapePause& operator=(const TapePause&) = delete;

 private:
  Tape* previous_;
};

// Seeds d(loss)/d(loss) = seed and replays the active tape. Requires a
// scalar loss produced on the active tape.
void backward(const Tensor& loss, Scalar seed = 1.0);

// ---- Differentiable operations -------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // a[m,k] * b[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a[m,k] * b[n,k]^T
Tensor add(const Tensor& a, const Tensor& b);        // elementwise, same shape
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise, same shape
Tensor scale(const Tensor& a, Scalar c);
Tensor add_row_broadcast(const Tensor& x, const Tensor& v);          // each row of x + v
Tensor add_to_row(const Tensor& x, std::size_t row, const Tensor& v);  // only row `row` + v
Tensor softmax_rows(const Tensor& x);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps);
Tensor gelu(const Tensor& x);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1);
Tensor sum_all(const Tensor& x);  // scalar
// Cross-entropy of a single logit row against an integer label, computed via
// a numerically stable log-sum-exp. Returns a scalar.
Tensor cross_entropy_row(const Tensor& logits, std::size_t label);
// Sum of per-row cross-entropies for a batch of logit rows.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& labels);

// ---- Stacked-batch helpers -------------------------------------------------
// A batch of B sequences of N tokens lives in one {B*N, d} matrix; sample b
// occupies rows [b*N, (b+1)*N). Row-wise ops above apply unchanged; the ops
// below are the ones that need the block structure.

// out[r] = x[r] + v[r % v.rows()]; v is {N, d}, x is {B*N, d}.
Tensor add_tiled_rows(const Tensor& x, const Tensor& v);
// Adds vector v to every row r with r % stride == 0 (each sample's CLS row).
Tensor add_to_strided_rows(const Tensor& x, std::size_t stride, const Tensor& v);
// Gathers rows r with r % stride == 0 into {B, d}.
Tensor gather_strided_rows(const Tensor& x, std::size_t stride);
// Replaces rows [offset, offset + block.rows()) of every stride-row group
// with `block` (the same block for every sample).
Tensor replace_strided_rows(const Tensor& x, std::size_t stride, std::size_t offset,
                            const Tensor& block);

// Block-diagonal multi-head attention scores: q, k are {B*N, d} with d split
// into `heads` slices; out is {B*heads*N, N}, scaled by 1/sqrt(d/heads).
// Row ((b*heads + h)*N + r) holds sample b, head h, query r.
Tensor attention_scores(const Tensor& q, const Tensor& k, std::size_t batch, std::size_t heads);
// probs {B*heads*N, N} times values {B*N, d}, heads re-merged into {B*N, d}.
Tensor attention_combine(const Tensor& probs, const Tensor& v, std::size_t batch,
                         std::size_t heads);

// ---- Optimizer ------------------------------------------------------------

// Adam with bias correction. Moment state is keyed by parameter identity and
// persists across step() calls.
class Adam {
 public:
  Adam(Scalar beta1 = 0.9, Scalar beta2 = 0.999, Scalar eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Tensor>& params, Scalar lr);

 private:
  struct State {
    std::vector<Scalar> m;
    std::vector<Scalar> v;
    std::uint64_t t = 0;
  };
  Scalar beta1_, beta2_, eps_;
  std::unordered_map<TensorImpl*, State> state_;
};

void zero_grad(const std::vector<Tensor>& params);

// ---- Instrumentation -------------------------------------------------------

// Multiply-accumulate counter bumped by the matmul kernels on this thread.
// Used to cross-check the analytic cost model against executed work.
std::uint64_t mac_count();
void reset_mac_count();

std::string shape_to_string(const Shape& shape);

}  // namespace apt

#endif  // APT_CORE_TENSOR_HPP
