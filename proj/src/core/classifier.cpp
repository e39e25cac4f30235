#include "core/classifier.hpp"

#include <algorithm>
#include <cstring>
#include <string>

namespace apt {

void GrowingClassifier::add_task(const std::vector<std::uint16_t>& classes) {
  if (classes.empty()) raise(ErrorCode::InvalidArgument, "add_task: empty class list");
  // Freeze the block of the task that just finished.
  if (!heads_.empty()) {
    heads_.back().w.set_requires_grad(false);
    heads_.back().b.set_requires_grad(false);
  }
  Head h;
  h.w = Tensor::zeros({dim_, classes.size()}, true);
  h.b = Tensor::zeros({classes.size()}, true);
  h.classes = classes;
  heads_.push_back(std::move(h));
}

std::size_t GrowingClassifier::total_classes() const {
  std::size_t n = 0;
  for (const Head& h : heads_) n += h.classes.size();
  return n;
}

Tensor GrowingClassifier::logits_all(const Tensor& embedding) const {
  if (heads_.empty()) raise(ErrorCode::Contract, "classifier has no tasks yet");
  std::vector<Tensor> parts;
  parts.reserve(heads_.size());
  for (const Head& h : heads_)
    parts.push_back(add_row_broadcast(matmul(embedding, h.w), h.b));
  return parts.size() == 1 ? parts[0] : concat_cols(parts);
}

Tensor GrowingClassifier::logits_current(const Tensor& embedding) const {
  if (heads_.empty()) raise(ErrorCode::Contract, "classifier has no tasks yet");
  const Head& h = heads_.back();
  return add_row_broadcast(matmul(embedding, h.w), h.b);
}

std::uint16_t GrowingClassifier::predict(const Tensor& embedding) const {
  return predict_batch(embedding)[0];
}

std::vector<std::uint16_t> GrowingClassifier::predict_batch(const Tensor& embeddings) const {
  Tensor l = logits_all(embeddings);
  const std::size_t rows = l.rows(), n = l.cols();
  std::vector<std::uint16_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j)
      if (l.at(r, j) > l.at(r, best)) best = j;
    std::uint16_t global = 0;
    bool found = false;
    for (const Head& h : heads_) {
      if (best < h.classes.size()) {
        global = h.classes[best];
        found = true;
        break;
      }
      best -= h.classes.size();
    }
    if (!found) raise(ErrorCode::Internal, "predict: argmax fell outside all task blocks");
    out[r] = global;
  }
  return out;
}

std::size_t GrowingClassifier::local_label(std::uint16_t global) const {
  const auto& classes = heads_.back().classes;
  auto it = std::find(classes.begin(), classes.end(), global);
  if (it == classes.end())
    raise(ErrorCode::Contract,
          "label " + std::to_string(global) + " is not in the current task");
  return static_cast<std::size_t>(it - classes.begin());
}

std::vector<Tensor> GrowingClassifier::current_parameters() const {
  if (heads_.empty()) return {};
  return {heads_.back().w, heads_.back().b};
}

std::vector<Tensor> GrowingClassifier::all_parameters() const {
  std::vector<Tensor> out;
  for (const Head& h : heads_) {
    out.push_back(h.w);
    out.push_back(h.b);
  }
  return out;
}

std::vector<std::vector<Scalar>> GrowingClassifier::snapshot(std::size_t t) const {
  const Head& h = heads_.at(t);
  return {{h.w.data().begin(), h.w.data().end()}, {h.b.data().begin(), h.b.data().end()}};
}

bool GrowingClassifier::matches_snapshot(std::size_t t,
                                         const std::vector<std::vector<Scalar>>& snap) const {
  const Head& h = heads_.at(t);
  auto same = [](std::span<const Scalar> a, const std::vector<Scalar>& b) {
    if (a.size() != b.size()) return false;
    // bitwise, not numeric: frozen means untouched
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(Scalar)) == 0;
  };
  return same(h.w.data(), snap[0]) && same(h.b.data(), snap[1]);
}

}  // namespace apt
