#include "core/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace apt {

namespace {

thread_local Tape* g_current_tape = nullptr;
thread_local std::uint64_t g_mac_count = 0;

// Dot product with eight independent accumulator lanes folded in a fixed
// order at the end. The lanes break the serial dependency chain so the loop
// vectorizes without relaxing FP semantics; the summation order is still a
// compile-time constant, so results stay deterministic.
inline Scalar dot_fixed(const Scalar* __restrict__ x, const Scalar* __restrict__ y,
                        std::size_t n) {
  constexpr std::size_t kLanes = 8;
  Scalar lanes[kLanes] = {};
  std::size_t t = 0;
  for (; t + kLanes <= n; t += kLanes)
    for (std::size_t u = 0; u < kLanes; ++u) lanes[u] += x[t + u] * y[t + u];
  Scalar tail = 0.0;
  for (; t < n; ++t) tail += x[t] * y[t];
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
         ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail;
}

// Same lane trick for a plain sum.
inline Scalar sum_fixed(const Scalar* __restrict__ x, std::size_t n) {
  constexpr std::size_t kLanes = 8;
  Scalar lanes[kLanes] = {};
  std::size_t t = 0;
  for (; t + kLanes <= n; t += kLanes)
    for (std::size_t u = 0; u < kLanes; ++u) lanes[u] += x[t + u];
  Scalar tail = 0.0;
  for (; t < n; ++t) tail += x[t];
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
         ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail;
}

// Sum of squared deviations from a precomputed mean, lane split as above.
inline Scalar sumsq_dev_fixed(const Scalar* __restrict__ x, std::size_t n, Scalar mean) {
  constexpr std::size_t kLanes = 8;
  Scalar lanes[kLanes] = {};
  std::size_t t = 0;
  for (; t + kLanes <= n; t += kLanes)
    for (std::size_t u = 0; u < kLanes; ++u) {
      const Scalar d = x[t + u] - mean;
      lanes[u] += d * d;
    }
  Scalar tail = 0.0;
  for (; t < n; ++t) {
    const Scalar d = x[t] - mean;
    tail += d * d;
  }
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
         ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail;
}

#if defined(__AVX512F__)

// 8x16 C tile held in sixteen zmm registers across the whole reduction.
// A(r, idx) = a_base[r * a_row_stride + idx * a_idx_stride] covers both the
// plain and the transposed-A product with one kernel. Each C element sums in
// ascending idx order, so results stay deterministic.
inline void tile_8x16(const Scalar* __restrict__ a_base, std::size_t a_row_stride,
                      std::size_t a_idx_stride, const Scalar* __restrict__ b_base,
                      std::size_t b_stride, Scalar* __restrict__ c_base, std::size_t c_stride,
                      std::size_t depth, bool accumulate) {
  __m512d acc[8][2];
  for (int r = 0; r < 8; ++r) acc[r][0] = acc[r][1] = _mm512_setzero_pd();
  for (std::size_t idx = 0; idx < depth; ++idx) {
    const Scalar* brow = b_base + idx * b_stride;
    const __m512d b0 = _mm512_loadu_pd(brow);
    const __m512d b1 = _mm512_loadu_pd(brow + 8);
    const Scalar* acol = a_base + idx * a_idx_stride;
#pragma GCC unroll 8
    for (int r = 0; r < 8; ++r) {
      const __m512d av = _mm512_set1_pd(acol[r * a_row_stride]);
      acc[r][0] = _mm512_fmadd_pd(av, b0, acc[r][0]);
      acc[r][1] = _mm512_fmadd_pd(av, b1, acc[r][1]);
    }
  }
  for (int r = 0; r < 8; ++r) {
    Scalar* crow = c_base + r * c_stride;
    __m512d r0 = acc[r][0], r1 = acc[r][1];
    if (accumulate) {
      r0 = _mm512_add_pd(_mm512_loadu_pd(crow), r0);
      r1 = _mm512_add_pd(_mm512_loadu_pd(crow + 8), r1);
    }
    _mm512_storeu_pd(crow, r0);
    _mm512_storeu_pd(crow + 8, r1);
  }
}

#endif  // __AVX512F__

// Scalar fill-in for the rows/columns the tiled path does not cover.
// A(r, idx) addressing as in tile_8x16.
inline void gemm_edges(const Scalar* __restrict__ a_base, std::size_t a_row_stride,
                       std::size_t a_idx_stride, const Scalar* __restrict__ b,
                       std::size_t b_stride, Scalar* __restrict__ c, std::size_t c_stride,
                       std::size_t rows, std::size_t cols, std::size_t depth, std::size_t r0,
                       std::size_t c0, bool accumulate) {
  auto cell = [&](std::size_t r, std::size_t j) {
    Scalar acc = 0.0;
    for (std::size_t idx = 0; idx < depth; ++idx)
      acc += a_base[r * a_row_stride + idx * a_idx_stride] * b[idx * b_stride + j];
    Scalar& out = c[r * c_stride + j];
    out = accumulate ? out + acc : acc;
  };
  for (std::size_t r = r0; r < rows; ++r)  // bottom strip, full width
    for (std::size_t j = 0; j < cols; ++j) cell(r, j);
  for (std::size_t r = 0; r < r0; ++r)  // right strip beside the tiles
    for (std::size_t j = c0; j < cols; ++j) cell(r, j);
}

// C[rows,cols] (+)= A * B with A(r, idx) = a[r * a_row_stride + idx * a_idx_stride]
// and B row-major {depth, cols}. Tiled where possible, scalar on the edges.
void gemm(const Scalar* __restrict__ a, std::size_t a_row_stride, std::size_t a_idx_stride,
          const Scalar* __restrict__ b, Scalar* __restrict__ c, std::size_t rows,
          std::size_t cols, std::size_t depth, bool accumulate) {
  std::size_t r0 = 0, c0 = 0;
#if defined(__AVX512F__)
  r0 = rows - rows % 8;
  c0 = cols - cols % 16;
  for (std::size_t i = 0; i < r0; i += 8)
    for (std::size_t j = 0; j < c0; j += 16)
      tile_8x16(a + i * a_row_stride, a_row_stride, a_idx_stride, b + j, cols, c + i * cols + j,
                cols, depth, accumulate);
#endif
  gemm_edges(a, a_row_stride, a_idx_stride, b, cols, c, cols, rows, cols, depth, r0, c0,
             accumulate);
}

// C[m,n] (+)= A[m,k] * B[k,n].
void mm_nn(const Scalar* __restrict__ a, const Scalar* __restrict__ b, Scalar* __restrict__ c,
           std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  g_mac_count += static_cast<std::uint64_t>(m) * k * n;
  gemm(a, k, 1, b, c, m, n, k, accumulate);
}

// C[m,n] (+)= A[m,k] * B[n,k]^T. B is transposed into scratch once, then the
// tiled kernel runs; per element the summation order is unchanged.
void mm_nt(const Scalar* __restrict__ a, const Scalar* __restrict__ b, Scalar* __restrict__ c,
           std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  thread_local Buffer scratch;
  scratch.resize(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t t = 0; t < k; ++t) scratch[t * n + j] = b[j * k + t];
  mm_nn(a, scratch.data(), c, m, k, n, accumulate);
}

// C[k,n] (+)= A[m,k]^T * B[m,n]: rows of C walk A's columns (stride 1 across
// r, stride k across the reduction).
void mm_tn(const Scalar* __restrict__ a, const Scalar* __restrict__ b, Scalar* __restrict__ c,
           std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  g_mac_count += static_cast<std::uint64_t>(m) * k * n;
  gemm(a, 1, k, b, c, k, n, m, accumulate);
}

bool tape_wants(const Tensor& a) { return g_current_tape && a.requires_grad(); }
bool tape_wants(const Tensor& a, const Tensor& b) {
  return g_current_tape && (a.requires_grad() || b.requires_grad());
}

void require_rank2(const Tensor& t, const char* who) {
  if (t.rank() != 2)
    raise(ErrorCode::ShapeMismatch,
          std::string(who) + ": expected a rank-2 tensor, got shape " + shape_to_string(t.shape()));
}

void require_vector(const Tensor& t, std::size_t n, const char* who) {
  if (t.rank() != 1 || t.numel() != n)
    raise(ErrorCode::ShapeMismatch, std::string(who) + ": expected a vector of length " +
                                        std::to_string(n) + ", got shape " +
                                        shape_to_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape())
    raise(ErrorCode::ShapeMismatch, std::string(who) + ": shapes differ: " +
                                        shape_to_string(a.shape()) + " vs " +
                                        shape_to_string(b.shape()));
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t = uninitialized(std::move(shape));
  std::memset(t.mutable_data().data(), 0, t.numel() * sizeof(Scalar));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

Tensor Tensor::uninitialized(Shape shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) raise(ErrorCode::InvalidArgument, "tensor dimensions must be positive");
    n *= d;
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.resize(n);
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, Scalar value) {
  Tensor t = uninitialized(std::move(shape));
  for (Scalar& x : t.mutable_data()) x = value;
  return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<Scalar> values) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  if (n != values.size())
    raise(ErrorCode::ShapeMismatch, "from_values: shape " + shape_to_string(shape) + " needs " +
                                        std::to_string(n) + " values, got " +
                                        std::to_string(values.size()));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(values.begin(), values.end());
  return Tensor(std::move(impl));
}

Tensor Tensor::row(std::vector<Scalar> values) {
  std::size_t n = values.size();
  return from_values({1, n}, std::move(values));
}

Tensor Tensor::vec(std::vector<Scalar> values) {
  std::size_t n = values.size();
  return from_values({n}, std::move(values));
}

Tensor Tensor::scalar(Scalar value) { return from_values({1}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, Scalar stddev) {
  Tensor t = uninitialized(std::move(shape));
  for (Scalar& x : t.mutable_data()) x = stddev * rng.normal();
  return t;
}

std::size_t Tensor::rows() const { return rank() == 1 ? 1 : impl_->shape[0]; }
std::size_t Tensor::cols() const {
  return rank() == 1 ? impl_->shape[0] : impl_->shape[rank() - 1];
}

Scalar Tensor::value() const {
  if (numel() != 1) raise(ErrorCode::Contract, "value(): tensor is not a scalar");
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool on) {
  if (on) {
    impl_->requires_grad = true;
    if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
  } else {
    impl_->requires_grad = false;
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }
}

void Tensor::zero_grad() {
  if (impl_->requires_grad) std::memset(impl_->grad.data(), 0, impl_->grad.size() * sizeof(Scalar));
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

// ---- Tape ------------------------------------------------------------------

Tape* current_tape() { return g_current_tape; }

TapeScope::TapeScope() : previous_(g_current_tape) { g_current_tape = &tape_; }
TapeScope::~TapeScope() { g_current_tape = previous_; }

TapePause::TapePause() : previous_(g_current_tape) { g_current_tape = nullptr; }
TapePause::~TapePause() { g_current_tape = previous_; }

void backward(const Tensor& loss, Scalar seed) {
  if (!loss.defined() || loss.numel() != 1)
    raise(ErrorCode::Contract, "backward: loss must be a scalar tensor");
  if (!g_current_tape) raise(ErrorCode::Contract, "backward: no active tape");
  if (!loss.requires_grad())
    raise(ErrorCode::Contract, "backward: loss was not produced on the active tape");
  loss.impl()->grad[0] += seed;
  g_current_tape->replay_backward();
}

// ---- Ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul lhs");
  require_rank2(b, "matmul rhs");
  if (a.cols() != b.rows())
    raise(ErrorCode::ShapeMismatch, "matmul: inner dimensions disagree: " +
                                        shape_to_string(a.shape()) + " x " +
                                        shape_to_string(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c = Tensor::uninitialized({m, n});
  mm_nn(a.data().data(), b.data().data(), c.mutable_data().data(), m, k, n, false);
  if (tape_wants(a, b)) {
    c.set_requires_grad(true);
    auto ai = a.shared_impl(), bi = b.shared_impl(), ci = c.shared_impl();
    g_current_tape->record([ai, bi, ci, m, k, n] {
      if (ai->requires_grad)  // dA += dC * B^T
        mm_nt(ci->grad.data(), bi->data.data(), ai->grad.data(), m, n, k, true);
      if (bi->requires_grad)  // dB += A^T * dC
        mm_tn(ai->data.data(), ci->grad.data(), bi->grad.data(), m, k, n, true);
    });
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt lhs");
  require_rank2(b, "matmul_nt rhs");
  if (a.cols() != b.cols())
    raise(ErrorCode::ShapeMismatch, "matmul_nt: inner dimensions disagree: " +
                                        shape_to_string(a.shape()) + " x " +
                                        shape_to_string(b.shape()) + "^T");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor c = Tensor::uninitialized({m, n});
  mm_nt(a.data().data(), b.data().data(), c.mutable_data().data(), m, k, n, false);
  if (tape_wants(a, b)) {
    c.set_requires_grad(true);
    auto ai = a.shared_impl(), bi = b.shared_impl(), ci = c.shared_impl();
    g_current_tape->record([ai, bi, ci, m, k, n] {
      if (ai->requires_grad)  // dA += dC * B
        mm_nn(ci->grad.data(), bi->data.data(), ai->grad.data(), m, n, k, true);
      if (bi->requires_grad)  // dB += dC^T * A
        mm_tn(ci->grad.data(), ai->data.data(), bi->grad.data(), m, n, k, true);
    });
  }
  return c;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor c = Tensor::uninitialized(a.shape());
  const std::size_t n = a.numel();
  const Scalar* __restrict__ ap = a.data().data();
  const Scalar* __restrict__ bp = b.data().data();
  Scalar* __restrict__ cp = c.mutable_data().data();
  for (std::size_t i = 0; i < n; ++i) cp[i] = ap[i] + bp[i];
  if (tape_wants(a, b)) {
    c.set_requires_grad(true);
    auto ai = a.shared_impl(), bi = b.shared_impl(), ci = c.shared_impl();
    g_current_tape->record([ai, bi, ci, n] {
      const Scalar* __restrict__ cg = ci->grad.data();
      if (ai->requires_grad) {
        Scalar* __restrict__ ag = ai->grad.data();
        for (std::size_t i = 0; i < n; ++i) ag[i] += cg[i];
      }
      if (bi->requires_grad) {
        Scalar* __restrict__ bg = bi->grad.data();
        for (std::size_t i = 0; i < n; ++i) bg[i] += cg[i];
      }
    });
  }
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor c = Tensor::uninitialized(a.shape());
  const std::size_t n = a.numel();
  const Scalar* __restrict__ ap = a.data().data();
  const Scalar* __restrict__ bp = b.data().data();
  Scalar* __restrict__ cp = c.mutable_data().data();
  for (std::size_t i = 0; i < n; ++i) cp[i] = ap[i] * bp[i];
  if (tape_wants(a, b)) {
    c.set_requires_grad(true);
    auto ai = a.shared_impl(), bi = b.shared_impl(), ci = c.shared_impl();
    g_current_tape->record([ai, bi, ci, n] {
      const Scalar* __restrict__ cg = ci->grad.data();
      if (ai->requires_grad) {
        Scalar* __restrict__ ag = ai->grad.data();
        const Scalar* __restrict__ bd = bi->data.data();
        for (std::size_t i = 0; i < n; ++i) ag[i] += cg[i] * bd[i];
      }
      if (bi->requires_grad) {
        Scalar* __restrict__ bg = bi->grad.data();
        const Scalar* __restrict__ ad = ai->data.data();
        for (std::size_t i = 0; i < n; ++i) bg[i] += cg[i] * ad[i];
      }
    });
  }
  return c;
}

Tensor scale(const Tensor& a, Scalar c) {
  Tensor out = Tensor::uninitialized(a.shape());
  const std::size_t n = a.numel();
  const Scalar* __restrict__ ap = a.data().data();
  Scalar* __restrict__ op = out.mutable_data().data();
  for (std::size_t i = 0; i < n; ++i) op[i] = c * ap[i];
  if (tape_wants(a)) {
    out.set_requires_grad(true);
    auto ai = a.shared_impl(), oi = out.shared_impl();
    g_current_tape->record([ai, oi, c, n] {
      Scalar* __restrict__ ag = ai->grad.data();
      const Scalar* __restrict__ og = oi->grad.data();
      for (std::size_t i = 0; i < n; ++i) ag[i] += c * og[i];
    });
  }
  return out;
}

Tensor add_row_broadcast(const Tensor& x, const Tensor& v) {
  require_rank2(x, "add_row_broadcast");
  require_vector(v, x.cols(), "add_row_broadcast bias");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::uninitialized(x.shape());
  const Scalar* __restrict__ xp = x.data().data();
  const Scalar* __restrict__ vp = v.data().data();
  Scalar* __restrict__ op = out.mutable_data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) op[i * n + j] = xp[i * n + j] + vp[j];
  if (tape_wants(x, v)) {
    out.set_requires_grad(true);
    auto xi = x.shared_impl(), vi = v.shared_impl(), oi = out.shared_impl();
    g_current_tape->record([xi, vi, oi, m, n] {
      const Scalar* __restrict__ og = oi->grad.data();
      if (xi->requires_grad) {
        Scalar* __restrict__ xg = xi->grad.data();
        for (std::size_t i = 0; i < m * n; ++i) xg[i] += og[i];
      }
      if (vi->requires_grad) {
        Scalar* __restrict__ vg = vi->grad.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) vg[j] += og[i * n + j];
      }
    });
  }
  return out;
}

Tensor add_to_row(const Tensor& x, std::size_t row, const Tensor& v) {
  require_rank2(x, "add_to_row");
  require_vector(v, x.cols(), "add_to_row delta");
  if (row >= x.rows())
    raise(ErrorCode::InvalidArgument, "add_to_row: row " + std::to_string(row) +
                                          " out of range for shape " + shape_to_string(x.shape()));
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::uninitialized(x.shape());
  std::memcpy(out.mutable_data().data(), x.data().data(), m * n * sizeof(Scalar));
  for (std::size_t j = 0; j < n; ++j) out.mutable_data()[row * n + j] += v.at(j);
  if (tape_wants(x, v)) {
    out.set_requires_grad(true);
    auto xi = x.shared_impl(), vi = v.shared_impl(), oi = out.shared_impl();
    g_current_tape->record([xi, vi, oi, row, m, n] {
      if (xi->requires_grad)
        for (std::size_t i = 0; i < m * n; ++i) xi->grad[i] += oi->grad[i];
      if (vi->requires_grad)
        for (std::size_t j = 0; j < n; ++j) vi->grad[j] += oi->grad[row * n + j];
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  require_rank2(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  const Scalar* __restrict__ xp = x.data().data();
  for (std::size_t i = 0; i < m * n; ++i)
    if (!std::isfinite(xp[i])) raise(ErrorCode::Numeric, "softmax_rows: non-finite input");
  Tensor out = Tensor::uninitialized(x.shape());
  Scalar* __restrict__ op = out.mutable_data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const Scalar* __restrict__ xrow = xp + i * n;
    Scalar* __restrict__ orow = op + i * n;
    Scalar mx = xrow[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xrow[j]);
    Scalar sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      Scalar e = std::exp(xrow[j] - mx);
      orow[j] = e;
      sum += e;
    }
    const Scalar inv = 1.0 / sum;
    for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
  }
  if (tape_wants(x)) {
    out.set_requires_grad(true);
    auto xi = x.shared_impl(), oi = out.shared_impl();
    g_current_tape->record([xi, oi, m, n] {
      // dx = y .* (dy - <dy, y>) per row
      Scalar* __restrict__ xg = xi->grad.data();
      const Scalar* __restrict__ og = oi->grad.data();
      const Scalar* __restrict__ od = oi->data.data();
      for (std::size_t i = 0; i < m; ++i) {
        const Scalar dot = dot_fixed(og + i * n, od + i * n, n);
        for (std::size_t j = 0; j < n; ++j)
          xg[i * n + j] += od[i * n + j] * (og[i * n + j] - dot);
      }
    });
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
  require_rank2(x, "layernorm");
  require_vector(gamma, x.cols(), "layernorm gamma");
  require_vector(beta, x.cols(), "layernorm beta");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::uninitialized(x.shape());
  // Cache normalized values and inverse stddev per row for the backward pass.
  auto xhat = std::make_shared<std::vector<Scalar>>(m * n);
  auto inv_std = std::make_shared<std::vector<Scalar>>(m);
  const Scalar* __restrict__ xp = x.data().data();
  const Scalar* __restrict__ gp = gamma.data().data();
  const Scalar* __restrict__ bp = beta.data().data();
  Scalar* __restrict__ op = out.mutable_data().data();
  Scalar* __restrict__ hp = xhat->data();
  for (std::size_t i = 0; i < m; ++i) {
    const Scalar* __restrict__ xrow = xp + i * n;
    const Scalar mean = sum_fixed(xrow, n) / static_cast<Scalar>(n);
    const Scalar var = sumsq_dev_fixed(xrow, n, mean) / static_cast<Scalar>(n);
    const Scalar inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = inv;
    Scalar* __restrict__ hrow = hp + i * n;
    Scalar* __restrict__ orow = op + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      Scalar h = (xrow[j] - mean) * inv;
      hrow[j] = h;
      orow[j] = gp[j] * h + bp[j];
    }
  }
  if (g_current_tape && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
    out.set_requires_grad(true);
    auto xi = x.shared_impl(), gi = gamma.shared_impl(), bi = beta.shared_impl(),
         oi = out.shared_impl();
    g_current_tape->record([xi, gi, bi, oi, xhat, inv_std, m, n] {
      const Scalar* __restrict__ gd = gi->data.data();
      Scalar* __restrict__ gg = gi->grad.data();
      Scalar* __restrict__ bg = bi->grad.data();
      Scalar* __restrict__ xg = xi->grad.data();
      for (std::size_t i = 0; i < m; ++i) {
        const Scalar* __restrict__ dy = oi->grad.data() + i * n;
        const Scalar* __restrict__ h = xhat->data() + i * n;
        if (gi->requires_grad)
          for (std::size_t j = 0; j < n; ++j) gg[j] += dy[j] * h[j];
        if (bi->requires_grad)
          for (std::size_t j = 0; j < n; ++j) bg[j] += dy[j];
        if (xi->requires_grad) {
          Scalar sum_dh = 0.0, sum_dh_h = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            Scalar dh = dy[j] * gd[j];
            sum_dh += dh;
            sum_dh_h += dh * h[j];
          }
          const Scalar invn = 1.0 / static_cast<Scalar>(n);
          for (std::size_t j = 0; j < n; ++j) {
            Scalar dh = dy[j] * gd[j];
            xg[i * n + j] += (*inv_std)[i] * (dh - invn * sum_dh - h[j] * invn * sum_dh_h);
          }
        }
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  // tanh form; the tanh values are cached so the backward pass is polynomial.
  constexpr Scalar kSqrt2OverPi = 0.7978845608028654;
  constexpr Scalar kCubic = 0.044715;
  const std::size_t n = x.numel();
  Tensor out = Tensor::uninitialized(x.shape());
  auto tcache = std::make_shared<std::vector<Scalar>>(n);
  const Scalar* __restrict__ xp = x.data().data();
  Scalar* __restrict__ tp = tcache->data();
  Scalar* __restrict__ op = out.mutable_data().data();
  for (std::size_t i = 0; i < n; ++i) {
    Scalar v = xp[i];
    Scalar t = std::tanh(kSqrt2OverPi * (v + kCubic * v * v * v));
    tp[i] = t;
    op[i] = 0.5 * v * (1.0 + t);
  }
  if (tape_wants(x)) {
    out.set_requires_grad(true);
    auto xi = x.shared_impl(), oi = out.shared_impl();
    g_current_tape->record([xi, oi, tcache, n] {
      const Scalar* __restrict__ xd = xi->data.data();
      Scalar* __restrict__ xg = xi->grad.data();
      const Scalar* __restrict__ og = oi->grad.data();
      const Scalar* __restrict__ tp = tcache->data();
      for (std::size_t i = 0; i < n; ++i) {
        Scalar v = xd[i];
        Scalar t = tp[i];
        Scalar du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * v * v);
        Scalar d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        xg[i] += og[i] * d;
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) raise(ErrorCode::InvalidArgument, "concat_rows: no parts");
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  bool wants_grad = false;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_rows part");
    if (p.cols() != n)
      raise(ErrorCode::ShapeMismatch, "concat_rows: column counts differ: " +
                                          std::to_string(n) + " vs " + std::to_string(p.cols()));
    total += p.rows();
    wants_grad = wants_grad || p.requires_grad();
  }
  Tensor out = Tensor::uninitialized({total, n});
  std::size_t r = 0;
  for (const Tensor& p : parts) {
    std::memcpy(out.mutable_data().data() + r * n, p.data().data(),
                p.rows() * n * sizeof(Scalar));
    r += p.rows();
  }
  if (g_current_tape && wants_grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const Tensor& p : parts) impls.push_back(p.shared_impl());
    auto oi = out.shared_impl();
    g_current_tape->record([impls, oi, n] {
      std::size_t r = 0;
      for (const auto& pi : impls) {
        const std::size_t rows = pi->data.size() / n;
        if (pi->requires_grad)
          for (std::size_t i = 0; i < rows * n; ++i) pi->grad[i] += oi->grad[r * n + i];
        r += rows;
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
  require_rank2(x, "slice_rows");
  if (r0 >= r1 || r1 > x.rows())
    raise(ErrorCode::InvalidArgument, "slice_rows: invalid range [" + std::to_string(r0) + ", " +
                                          std::to_string(r1) + ") for shape " +
                                          shape_to_string(x.shape()));
  const std::size_t n = x.cols(), rows = r1 - r0;
  Tensor out = Tensor::uninitialized({rows, n});
  std::memcpy(out.mutable_data().data(), x.data().data() + r0 * n, rows * n * sizeof(Scalar));
  if (tape_wants(x)) {
    out.set_requires_grad(true);
    auto xi = x.shared_impl(), oi = out.shared_impl();
    g_current_tape->record([xi, oi, r0, rows, n] {
      for (std::size_t i = 0; i < rows * n; ++i) xi->grad[r0 * n + i] += oi->grad[i];
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) raise(ErrorCode::InvalidArgument, "concat_cols: no parts");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  bool wants_grad = false;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_cols part");
    if (p.rows() != m)
      raise(ErrorCode::ShapeMismatch, "concat_cols: row counts differ: " + std::to_string(m) +
                                          " vs " + std::to_string(p.rows()));
    total += p.cols();
    wants_grad = wants_grad || p.requires_grad();
  }
  Tensor out = Tensor::uninitialized({m, total});
  std::size_t c = 0;
  for (const Tensor& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      std::memcpy(out.mutable_data().data() + i * total + c, p.data().data() + i * p.cols(),
                  p.cols() * sizeof(Scalar));
    c += p.cols();
  }
  if (g_current_tape && wants_grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const Tensor& p : parts) impls.push_back(p.shared_impl());
    auto oi = out.shared_impl();
    g_current_tape->record([impls, oi, m, total] {
      std::size_t c = 0;
      for (const auto& pi : impls) {
        const std::size_t cols = pi->data.size() / m;
        if (pi->requires_grad)
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < cols; ++j)
              pi->grad[i * cols + j] += oi->grad[i * total + c + j];
        c += cols;
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
  require_rank2(x, "slice_cols");
  if (c0 >= c1 || c1 > x.cols())
    raise(ErrorCode::InvalidArgument, "slice_cols: invalid range [" + std::to_string(c0) + ", " +
                                          std::to_string(c1) + ") for shape " +
                                          shape_to_string(x.shape()));
  const std::size_t m = x.rows(), n = x.cols(), cols = c1 - c0;
  Tensor out = Tensor::uninitialized({m, cols});
  for (std::size_t i = 0; i < m; ++i)
    std::memcpy(out.mutable_data().data() + i * cols, x.data().data() + i * n + c0,
                cols * sizeof(Scalar));
  if (tape_wants(x)) {
    out.set_requires_grad(true);
    auto xi = x.shared_impl(), oi = out.shared_impl();
    g_current_tape->record([xi, oi, c0, m, n, cols] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < cols; ++j) xi->grad[i * n + c0 + j] += oi->grad[i * cols + j];
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  Scalar s = 0.0;
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) s += x.at(i);
  Tensor out = Tensor::scalar(s);
  if (tape_wants(x)) {
    out.set_requires_grad(true);
    auto xi = x.shared_impl(), oi = out.shared_impl();
    g_current_tape->record([xi, oi, n] {
      const Scalar g = oi->grad[0];
      for (std::size_t i = 0; i < n; ++i) xi->grad[i] += g;
    });
  }
  return out;
}

Tensor cross_entropy_row(const Tensor& logits, std::size_t label) {
  require_rank2(logits, "cross_entropy_row");
  if (logits.rows() != 1)
    raise(ErrorCode::ShapeMismatch,
          "cross_entropy_row: expected a single logit row, got " + shape_to_string(logits.shape()));
  const std::size_t n = logits.cols();
  if (label >= n)
    raise(ErrorCode::InvalidArgument, "cross_entropy_row: label " + std::to_string(label) +
                                          " out of range for " + std::to_string(n) + " classes");
  Scalar mx = logits.at(0);
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, logits.at(j));
  Scalar sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) sum += std::exp(logits.at(j) - mx);
  const Scalar lse = mx + std::log(sum);
  Tensor out = Tensor::scalar(lse - logits.at(label));
  if (tape_wants(logits)) {
    out.set_requires_grad(true);
    auto li = logits.shared_impl(), oi = out.shared_impl();
    g_current_tape->record([li, oi, label, n, mx, sum] {
      const Scalar g = oi->grad[0];
      for (std::size_t j = 0; j < n; ++j) {
        Scalar p = std::exp(li->data[j] - mx) / sum;
        li->grad[j] += g * (p - (j == label ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& labels) {
  require_rank2(logits, "cross_entropy_rows");
  const std::size_t m = logits.rows(), n = logits.cols();
  if (labels.size() != m)
    raise(ErrorCode::ShapeMismatch, "cross_entropy_rows: " + std::to_string(m) +
                                        " logit rows but " + std::to_string(labels.size()) +
                                        " labels");
  Scalar total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (labels[r] >= n)
      raise(ErrorCode::InvalidArgument, "cross_entropy_rows: label " + std::to_string(labels[r]) +
                                            " out of range for " + std::to_string(n) + " classes");
    const Scalar* row = logits.data().data() + r * n;
    Scalar mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    Scalar sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
    total += mx + std::log(sum) - row[labels[r]];
  }
  Tensor out = Tensor::scalar(total);
  if (tape_wants(logits)) {
    out.set_requires_grad(true);
    auto li = logits.shared_impl(), oi = out.shared_impl();
    auto lab = labels;
    g_current_tape->record([li, oi, lab, m, n] {
      const Scalar g = oi->grad[0];
      for (std::size_t r = 0; r < m; ++r) {
        const Scalar* row = li->data.data() + r * n;
        Scalar mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        Scalar sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
        Scalar* grow = li->grad.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) {
          const Scalar p = std::exp(row[j] - mx) / sum;
          grow[j] += g * (p - (j == lab[r] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

// ---- Stacked-batch ops -------------------------------------------------------

Tensor add_tiled_rows(const Tensor& x, const Tensor& v) {
  require_rank2(x, "add_tiled_rows");
  require_rank2(v, "add_tiled_rows tile");
  if (v.cols() != x.cols() || v.rows() == 0 || x.rows() % v.rows() != 0)
    raise(ErrorCode::ShapeMismatch, "add_tiled_rows: tile " + shape_to_string(v.shape()) +
                                        " does not tile " + shape_to_string(x.shape()));
  const std::size_t m = x.rows(), n = x.cols(), tile = v.rows();
  Tensor out = Tensor::uninitialized(x.shape());
  for (std::size_t r = 0; r < m; ++r) {
    const Scalar* xr = x.data().data() + r * n;
    const Scalar* vr = v.data().data() + (r % tile) * n;
    Scalar* orow = out.mutable_data().data() + r * n;
    for (std::size_t j = 0; j < n; ++j) orow[j] = xr[j] + vr[j];
  }
  if (tape_wants(x, v)) {
    out.set_requires_grad(true);
    auto xi = x.shared_impl(), vi = v.shared_impl(), oi = out.shared_impl();
    g_current_tape->record([xi, vi, oi, m, n, tile] {
      if (xi->requires_grad)
        for (std::size_t i = 0; i < m * n; ++i) xi->grad[i] += oi->grad[i];
      if (vi->requires_grad)
        for (std::size_t r = 0; r < m; ++r) {
          Scalar* vg = vi->grad.data() + (r % tile) * n;
          const Scalar* og = oi->grad.data() + r * n;
          for (std::size_t j = 0; j < n; ++j) vg[j] += og[j];
        }
    });
  }
  return out;
}

Tensor add_to_strided_rows(const Tensor& x, std::size_t stride, const Tensor& v) {
  require_rank2(x, "add_to_strided_rows");
  require_vector(v, x.cols(), "add_to_strided_rows delta");
  if (stride == 0 || x.rows() % stride != 0)
    raise(ErrorCode::ShapeMismatch, "add_to_strided_rows: stride " + std::to_string(stride) +
                                        " does not divide " + std::to_string(x.rows()) + " rows");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::uninitialized(x.shape());
  std::memcpy(out.mutable_data().data(), x.data().data(), m * n * sizeof(Scalar));
  for (std::size_t r = 0; r < m; r += stride) {
    Scalar* orow = out.mutable_data().data() + r * n;
    for (std::size_t j = 0; j < n; ++j) orow[j] += v.at(j);
  }
  if (tape_wants(x, v)) {
    out.set_requires_grad(true);
    auto xi = x.shared_impl(), vi = v.shared_impl(), oi = out.shared_impl();
    g_current_tape->record([xi, vi, oi, m, n, stride] {
      if (xi->requires_grad)
        for (std::size_t i = 0; i < m * n; ++i) xi->grad[i] += oi->grad[i];
      if (vi->requires_grad)
        for (std::size_t r = 0; r < m; r += stride) {
          const Scalar* og = oi->grad.data() + r * n;
          for (std::size_t j = 0; j < n; ++j) vi->grad[j] += og[j];
        }
    });
  }
  return out;
}

Tensor gather_strided_rows(const Tensor& x, std::size_t stride) {
  require_rank2(x, "gather_strided_rows");
  if (stride == 0 || x.rows() % stride != 0)
    raise(ErrorCode::ShapeMismatch, "gather_strided_rows: stride " + std::to_string(stride) +
                                        " does not divide " + std::to_string(x.rows()) + " rows");
  const std::size_t n = x.cols(), b = x.rows() / stride;
  Tensor out = Tensor::uninitialized({b, n});
  for (std::size_t i = 0; i < b; ++i)
    std::memcpy(out.mutable_data().data() + i * n, x.data().data() + i * stride * n,
                n * sizeof(Scalar));
  if (tape_wants(x)) {
    out.set_requires_grad(true);
    auto xi = x.shared_impl(), oi = out.shared_impl();
    g_current_tape->record([xi, oi, b, n, stride] {
      for (std::size_t i = 0; i < b; ++i) {
        Scalar* xg = xi->grad.data() + i * stride * n;
        const Scalar* og = oi->grad.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) xg[j] += og[j];
      }
    });
  }
  return out;
}

Tensor replace_strided_rows(const Tensor& x, std::size_t stride, std::size_t offset,
                            const Tensor& block) {
  require_rank2(x, "replace_strided_rows");
  require_rank2(block, "replace_strided_rows block");
  if (block.cols() != x.cols() || stride == 0 || x.rows() % stride != 0 ||
      offset + block.rows() > stride)
    raise(ErrorCode::ShapeMismatch,
          "replace_strided_rows: block " + shape_to_string(block.shape()) + " at offset " +
              std::to_string(offset) + " does not fit groups of " + std::to_string(stride) +
              " rows in " + shape_to_string(x.shape()));
  const std::size_t m = x.rows(), n = x.cols(), groups = m / stride, rows = block.rows();
  Tensor out = Tensor::uninitialized(x.shape());
  std::memcpy(out.mutable_data().data(), x.data().data(), m * n * sizeof(Scalar));
  for (std::size_t g = 0; g < groups; ++g)
    std::memcpy(out.mutable_data().data() + (g * stride + offset) * n, block.data().data(),
                rows * n * sizeof(Scalar));
  if (tape_wants(x, block)) {
    out.set_requires_grad(true);
    auto xi = x.shared_impl(), bi = block.shared_impl(), oi = out.shared_impl();
    g_current_tape->record([xi, bi, oi, n, stride, offset, groups, rows] {
      if (xi->requires_grad) {
        // replaced rows pass nothing back to x
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t r = 0; r < stride; ++r) {
            if (r >= offset && r < offset + rows) continue;
            const std::size_t row = g * stride + r;
            for (std::size_t j = 0; j < n; ++j) xi->grad[row * n + j] += oi->grad[row * n + j];
          }
      }
      if (bi->requires_grad)
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t r = 0; r < rows; ++r) {
            const Scalar* og = oi->grad.data() + (g * stride + offset + r) * n;
            Scalar* bg = bi->grad.data() + r * n;
            for (std::size_t j = 0; j < n; ++j) bg[j] += og[j];
          }
    });
  }
  return out;
}

namespace {

void check_attention_shapes(const Tensor& q, const Tensor& k, std::size_t batch,
                            std::size_t heads, const char* who) {
  require_rank2(q, who);
  require_rank2(k, who);
  if (batch == 0 || heads == 0)
    raise(ErrorCode::InvalidArgument, std::string(who) + ": batch and heads must be positive");
  if (q.cols() != k.cols() || q.cols() % heads != 0 || q.rows() % batch != 0)
    raise(ErrorCode::ShapeMismatch, std::string(who) + ": incompatible shapes " +
                                        shape_to_string(q.shape()) + " and " +
                                        shape_to_string(k.shape()) + " for " +
                                        std::to_string(batch) + " samples, " +
                                        std::to_string(heads) + " heads");
}

}  // namespace

Tensor attention_scores(const Tensor& q, const Tensor& k, std::size_t batch, std::size_t heads) {
  check_attention_shapes(q, k, batch, heads, "attention_scores");
  if (q.rows() != k.rows())
    raise(ErrorCode::ShapeMismatch, "attention_scores: query and key row counts differ");
  const std::size_t d = q.cols(), dh = d / heads, seq = q.rows() / batch;
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(dh));
  Tensor out = Tensor::uninitialized({batch * heads * seq, seq});
  g_mac_count += static_cast<std::uint64_t>(batch) * heads * seq * seq * dh;
  const Scalar* qd = q.data().data();
  const Scalar* kd = k.data().data();
  Scalar* od = out.mutable_data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t col0 = h * dh;
      for (std::size_t r = 0; r < seq; ++r) {
        const Scalar* qrow = qd + (b * seq + r) * d + col0;
        Scalar* orow = od + ((b * heads + h) * seq + r) * seq;
        for (std::size_t j = 0; j < seq; ++j)
          orow[j] = scale * dot_fixed(qrow, kd + (b * seq + j) * d + col0, dh);
      }
    }
  if (tape_wants(q, k)) {
    out.set_requires_grad(true);
    auto qi = q.shared_impl(), ki = k.shared_impl(), oi = out.shared_impl();
    g_current_tape->record([qi, ki, oi, batch, heads, seq, d, dh, scale] {
      const bool wq = qi->requires_grad, wk = ki->requires_grad;
      if (wq) g_mac_count += static_cast<std::uint64_t>(batch) * heads * seq * seq * dh;
      if (wk) g_mac_count += static_cast<std::uint64_t>(batch) * heads * seq * seq * dh;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t col0 = h * dh;
          for (std::size_t r = 0; r < seq; ++r) {
            const Scalar* grow = oi->grad.data() + ((b * heads + h) * seq + r) * seq;
            if (wq) {
              Scalar* qg = qi->grad.data() + (b * seq + r) * d + col0;
              for (std::size_t j = 0; j < seq; ++j) {
                const Scalar g = scale * grow[j];
                const Scalar* krow = ki->data.data() + (b * seq + j) * d + col0;
                for (std::size_t t = 0; t < dh; ++t) qg[t] += g * krow[t];
              }
            }
            if (wk) {
              const Scalar* qrow = qi->data.data() + (b * seq + r) * d + col0;
              for (std::size_t j = 0; j < seq; ++j) {
                const Scalar g = scale * grow[j];
                Scalar* kg = ki->grad.data() + (b * seq + j) * d + col0;
                for (std::size_t t = 0; t < dh; ++t) kg[t] += g * qrow[t];
              }
            }
          }
        }
    });
  }
  return out;
}

Tensor attention_combine(const Tensor& probs, const Tensor& v, std::size_t batch,
                         std::size_t heads) {
  require_rank2(probs, "attention_combine");
  require_rank2(v, "attention_combine values");
  if (batch == 0 || heads == 0 || v.rows() % batch != 0 || v.cols() % heads != 0)
    raise(ErrorCode::ShapeMismatch, "attention_combine: bad batch/head split");
  const std::size_t d = v.cols(), dh = d / heads, seq = v.rows() / batch;
  if (probs.rows() != batch * heads * seq || probs.cols() != seq)
    raise(ErrorCode::ShapeMismatch, "attention_combine: probabilities " +
                                        shape_to_string(probs.shape()) + " do not match values " +
                                        shape_to_string(v.shape()));
  Tensor out = Tensor::zeros({batch * seq, d});
  g_mac_count += static_cast<std::uint64_t>(batch) * heads * seq * seq * dh;
  const Scalar* pd = probs.data().data();
  const Scalar* vd = v.data().data();
  Scalar* od = out.mutable_data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t col0 = h * dh;
      for (std::size_t r = 0; r < seq; ++r) {
        const Scalar* prow = pd + ((b * heads + h) * seq + r) * seq;
        Scalar* orow = od + (b * seq + r) * d + col0;
        for (std::size_t j = 0; j < seq; ++j) {
          const Scalar p = prow[j];
          const Scalar* vrow = vd + (b * seq + j) * d + col0;
          for (std::size_t t = 0; t < dh; ++t) orow[t] += p * vrow[t];
        }
      }
    }
  if (tape_wants(probs, v)) {
    out.set_requires_grad(true);
    auto pi = probs.shared_impl(), vi = v.shared_impl(), oi = out.shared_impl();
    g_current_tape->record([pi, vi, oi, batch, heads, seq, d, dh] {
      const bool wp = pi->requires_grad, wv = vi->requires_grad;
      if (wp) g_mac_count += static_cast<std::uint64_t>(batch) * heads * seq * seq * dh;
      if (wv) g_mac_count += static_cast<std::uint64_t>(batch) * heads * seq * seq * dh;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t col0 = h * dh;
          for (std::size_t r = 0; r < seq; ++r) {
            const Scalar* og = oi->grad.data() + (b * seq + r) * d + col0;
            if (wp) {
              Scalar* pg = pi->grad.data() + ((b * heads + h) * seq + r) * seq;
              for (std::size_t j = 0; j < seq; ++j)
                pg[j] += dot_fixed(og, vi->data.data() + (b * seq + j) * d + col0, dh);
            }
            if (wv) {
              const Scalar* prow = pi->data.data() + ((b * heads + h) * seq + r) * seq;
              for (std::size_t j = 0; j < seq; ++j) {
                Scalar* vg = vi->grad.data() + (b * seq + j) * d + col0;
                const Scalar p = prow[j];
                for (std::size_t t = 0; t < dh; ++t) vg[t] += p * og[t];
              }
            }
          }
        }
    });
  }
  return out;
}

// ---- Adam ------------------------------------------------------------------

void Adam::step(const std::vector<Tensor>& params, Scalar lr) {
  for (const Tensor& p : params) {
    if (!p.requires_grad())
      raise(ErrorCode::Contract, "adam: parameter has no gradient buffer");
    State& s = state_[p.impl()];
    const std::size_t n = p.numel();
    if (s.m.empty()) {
      s.m.assign(n, 0.0);
      s.v.assign(n, 0.0);
    }
    s.t += 1;
    const Scalar bc1 = 1.0 - std::pow(beta1_, static_cast<Scalar>(s.t));
    const Scalar bc2 = 1.0 - std::pow(beta2_, static_cast<Scalar>(s.t));
    Scalar* w = p.impl()->data.data();
    const Scalar* g = p.impl()->grad.data();
    for (std::size_t i = 0; i < n; ++i) {
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
      const Scalar mhat = s.m[i] / bc1;
      const Scalar vhat = s.v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void zero_grad(const std::vector<Tensor>& params) {
  for (const Tensor& p : params) const_cast<Tensor&>(p).zero_grad();
}

// ---- Instrumentation --------------------------------------------------------

std::uint64_t mac_count() { return g_mac_count; }
void reset_mac_count() { g_mac_count = 0; }

}  // namespace apt
