#include "core/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "core/weights_io.hpp"

namespace apt {

PromptSet PromptSet::zeros(Mode mode, std::size_t depth, std::size_t dim, bool requires_grad) {
  PromptSet p;
  p.mode = mode;
  p.k.reserve(depth);
  for (std::size_t l = 0; l < depth; ++l) p.k.push_back(Tensor::zeros({dim}, requires_grad));
  if (mode == Mode::kAddKv) {
    p.v.reserve(depth);
    for (std::size_t l = 0; l < depth; ++l) p.v.push_back(Tensor::zeros({dim}, requires_grad));
  }
  return p;
}

PromptSet PromptSet::randn(Mode mode, std::size_t depth, std::size_t dim, Rng& rng, Scalar stddev,
                           bool requires_grad) {
  PromptSet p = zeros(mode, depth, dim, requires_grad);
  for (Tensor& t : p.k)
    for (Scalar& x : t.mutable_data()) x = stddev * rng.normal();
  for (Tensor& t : p.v)
    for (Scalar& x : t.mutable_data()) x = stddev * rng.normal();
  return p;
}

std::vector<Tensor> PromptSet::parameters() const {
  std::vector<Tensor> out;
  out.reserve(k.size() + v.size());
  for (const Tensor& t : k) out.push_back(t);
  for (const Tensor& t : v) out.push_back(t);
  return out;
}

std::size_t PromptSet::n_params() const {
  std::size_t n = 0;
  for (const Tensor& t : k) n += t.numel();
  for (const Tensor& t : v) n += t.numel();
  return n;
}

PromptSet PromptSet::clone() const {
  PromptSet out;
  out.mode = mode;
  out.k.reserve(k.size());
  out.v.reserve(v.size());
  for (const Tensor& t : k) out.k.push_back(t.clone());
  for (const Tensor& t : v) out.v.push_back(t.clone());
  return out;
}

void PromptSet::attach(ForwardAddons& addons) const {
  if (mode == Mode::kAddKv) {
    addons.k_add = &k;
    addons.v_add = &v;
  } else {
    addons.x_add = &k;
  }
}

PromptSet fuse_prompts(const PromptSet& previous, const PromptSet& current, Scalar alpha) {
  if (previous.mode != current.mode || previous.k.size() != current.k.size())
    raise(ErrorCode::Contract, "fuse: prompt sets have different structure");
  if (alpha < 0.0 || alpha > 1.0)
    raise(ErrorCode::InvalidArgument, "fuse: alpha must lie in [0, 1]");
  auto blend = [alpha](const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    std::vector<Tensor> out;
    out.reserve(a.size());
    for (std::size_t l = 0; l < a.size(); ++l) {
      if (a[l].shape() != b[l].shape())
        raise(ErrorCode::ShapeMismatch, "fuse: prompt shapes differ at layer " +
                                            std::to_string(l));
      Tensor t = Tensor::zeros(a[l].shape());
      for (std::size_t i = 0; i < t.numel(); ++i)
        t.mutable_data()[i] = alpha * a[l].at(i) + (1.0 - alpha) * b[l].at(i);
      out.push_back(std::move(t));
    }
    return out;
  };
  PromptSet out;
  out.mode = current.mode;
  out.k = blend(previous.k, current.k);
  out.v = blend(previous.v, current.v);
  return out;
}

TokenPrompts TokenPrompts::make(bool deep, std::size_t depth, std::size_t n, std::size_t dim,
                                Rng& rng, Scalar stddev) {
  TokenPrompts tp;
  tp.deep = deep;
  if (deep) {
    tp.per_layer.reserve(depth);
    for (std::size_t l = 0; l < depth; ++l) {
      Tensor t = Tensor::randn({n, dim}, rng, stddev);
      t.set_requires_grad(true);
      tp.per_layer.push_back(std::move(t));
    }
  } else {
    tp.shallow = Tensor::randn({n, dim}, rng, stddev);
    tp.shallow.set_requires_grad(true);
  }
  return tp;
}

std::vector<Tensor> TokenPrompts::parameters() const {
  if (deep) return per_layer;
  return {shallow};
}

std::size_t TokenPrompts::n_params() const {
  std::size_t n = 0;
  for (const Tensor& t : parameters()) n += t.numel();
  return n;
}

void TokenPrompts::attach(ForwardAddons& addons) const {
  if (deep)
    addons.tokens_deep = &per_layer;
  else
    addons.tokens = &shallow;
}

PromptPool::PromptPool(std::size_t pool_size, std::size_t block_len, std::size_t top_k,
                       std::size_t dim, Rng& rng, Scalar stddev)
    : top_k_(top_k) {
  if (pool_size == 0 || block_len == 0 || top_k == 0 || top_k > pool_size)
    raise(ErrorCode::InvalidArgument, "pool: need 0 < top_k <= pool_size and block_len > 0");
  keys_ = Tensor::randn({pool_size, dim}, rng, 1.0);
  for (std::size_t i = 0; i < pool_size; ++i) {
    Scalar norm = 0.0;
    for (std::size_t j = 0; j < dim; ++j) norm += keys_.at(i, j) * keys_.at(i, j);
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < dim; ++j) keys_.mutable_data()[i * dim + j] /= norm;
  }
  blocks_.reserve(pool_size);
  for (std::size_t i = 0; i < pool_size; ++i) {
    Tensor b = Tensor::randn({block_len, dim}, rng, stddev);
    b.set_requires_grad(true);
    blocks_.push_back(std::move(b));
  }
}

std::vector<std::size_t> PromptPool::select(const Tensor& query) const {
  const std::size_t dim = keys_.cols();
  if (query.numel() != dim)
    raise(ErrorCode::ShapeMismatch, "pool select: query length " + std::to_string(query.numel()) +
                                        ", keys have dim " + std::to_string(dim));
  Scalar qnorm = 0.0;
  for (std::size_t j = 0; j < dim; ++j) qnorm += query.at(j) * query.at(j);
  qnorm = std::sqrt(qnorm);
  if (qnorm == 0.0) raise(ErrorCode::Numeric, "pool select: zero query");
  std::vector<Scalar> sim(keys_.rows());
  for (std::size_t i = 0; i < keys_.rows(); ++i) {
    Scalar dot = 0.0;
    for (std::size_t j = 0; j < dim; ++j) dot += keys_.at(i, j) * query.at(j);
    sim[i] = dot / qnorm;
  }
  std::vector<std::size_t> order(sim.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  order.resize(top_k_);
  return order;
}

Tensor PromptPool::compose(const std::vector<std::size_t>& indices) const {
  std::vector<Tensor> parts;
  parts.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= blocks_.size())
      raise(ErrorCode::InvalidArgument, "pool compose: index out of range");
    parts.push_back(blocks_[i]);
  }
  return concat_rows(parts);
}

std::vector<Tensor> PromptPool::parameters() const { return blocks_; }

std::size_t PromptPool::n_trainable_params() const {
  std::size_t n = 0;
  for (const Tensor& b : blocks_) n += b.numel();
  return n;
}

std::size_t PromptPool::n_key_params() const { return keys_.numel(); }

TensorStore prompt_snapshot(const PromptSet& prompts) {
  TensorStore store;
  const Scalar mode = prompts.mode == PromptSet::Mode::kAddKv ? 0.0 : 1.0;
  const std::size_t dim = prompts.k.empty() ? 0 : prompts.k[0].numel();
  store.put("meta", Tensor::vec({mode, static_cast<Scalar>(prompts.depth()),
                                 static_cast<Scalar>(dim)}));
  for (std::size_t l = 0; l < prompts.k.size(); ++l)
    store.put("k." + std::to_string(l), prompts.k[l]);
  for (std::size_t l = 0; l < prompts.v.size(); ++l)
    store.put("v." + std::to_string(l), prompts.v[l]);
  return store;
}

TensorStore prompt_snapshot(const TokenPrompts& tokens) {
  TensorStore store;
  if (tokens.deep) {
    const std::size_t depth = tokens.per_layer.size();
    store.put("meta", Tensor::vec({3.0, static_cast<Scalar>(depth),
                                   static_cast<Scalar>(tokens.per_layer[0].rows()),
                                   static_cast<Scalar>(tokens.per_layer[0].cols())}));
    for (std::size_t l = 0; l < depth; ++l)
      store.put("tokens." + std::to_string(l), tokens.per_layer[l]);
  } else {
    store.put("meta", Tensor::vec({2.0, 1.0, static_cast<Scalar>(tokens.shallow.rows()),
                                   static_cast<Scalar>(tokens.shallow.cols())}));
    store.put("tokens", tokens.shallow);
  }
  return store;
}

TensorStore prompt_snapshot(const PromptPool& pool) {
  TensorStore store;
  const std::vector<Tensor>& blocks = pool.blocks();
  store.put("meta", Tensor::vec({4.0, static_cast<Scalar>(blocks.size()),
                                 static_cast<Scalar>(blocks[0].rows()),
                                 static_cast<Scalar>(blocks[0].cols()),
                                 static_cast<Scalar>(pool.top_k())}));
  store.put("keys", pool.keys());
  for (std::size_t i = 0; i < blocks.size(); ++i)
    store.put("block." + std::to_string(i), blocks[i]);
  return store;
}

void SnapshotAddons::attach(ForwardAddons& addons) const {
  switch (mode) {
    case 0:
    case 1:
      add.attach(addons);
      return;
    case 2:
    case 3:
      tokens.attach(addons);
      return;
    default:
      raise(ErrorCode::InvalidArgument, "snapshot: mode " + std::to_string(mode) +
                                            " cannot drive a plain forward pass");
  }
}

SnapshotAddons snapshot_addons(const TensorStore& store) {
  const Tensor& meta = store.get("meta");
  if (meta.numel() < 3) raise(ErrorCode::Io, "snapshot: malformed meta entry");
  SnapshotAddons out;
  out.mode = static_cast<int>(meta.at(0));
  auto fetch = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    const Tensor& src = store.get(name);
    if (src.numel() != rows * cols)
      raise(ErrorCode::Io, "snapshot: '" + name + "' has " + std::to_string(src.numel()) +
                               " values, expected " + std::to_string(rows * cols));
    Tensor t = Tensor::zeros(rows == 1 && src.rank() == 1 ? Shape{cols} : Shape{rows, cols});
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
    return t;
  };
  const std::size_t depth = static_cast<std::size_t>(meta.at(1));
  if (out.mode == 0 || out.mode == 1) {
    const std::size_t dim = static_cast<std::size_t>(meta.at(2));
    out.add.mode = out.mode == 0 ? PromptSet::Mode::kAddKv : PromptSet::Mode::kInputLevel;
    for (std::size_t l = 0; l < depth; ++l)
      out.add.k.push_back(fetch("k." + std::to_string(l), 1, dim));
    if (out.mode == 0)
      for (std::size_t l = 0; l < depth; ++l)
        out.add.v.push_back(fetch("v." + std::to_string(l), 1, dim));
  } else if (out.mode == 2 || out.mode == 3) {
    if (meta.numel() != 4) raise(ErrorCode::Io, "snapshot: malformed token meta");
    const std::size_t n = static_cast<std::size_t>(meta.at(2));
    const std::size_t dim = static_cast<std::size_t>(meta.at(3));
    out.tokens.deep = out.mode == 3;
    if (out.tokens.deep)
      for (std::size_t l = 0; l < depth; ++l)
        out.tokens.per_layer.push_back(fetch("tokens." + std::to_string(l), n, dim));
    else
      out.tokens.shallow = fetch("tokens", n, dim);
  } else if (out.mode != 4) {
    raise(ErrorCode::Io, "snapshot: unknown mode " + std::to_string(out.mode));
  }
  return out;
}

}  // namespace apt
