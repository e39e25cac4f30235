#include "core/vit.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "core/weights_io.hpp"

namespace apt {

void ViTConfig::validate() const {
  if (image_size == 0 || channels == 0 || patch_size == 0 || depth == 0 || dim == 0 ||
      heads == 0 || mlp_ratio == 0)
    raise(ErrorCode::Config, "model geometry values must be positive");
  if (image_size % patch_size != 0)
    raise(ErrorCode::Config, "patch_size " + std::to_string(patch_size) +
                                 " does not divide image_size " + std::to_string(image_size));
  if (dim % heads != 0)
    raise(ErrorCode::Config,
          "heads " + std::to_string(heads) + " does not divide dim " + std::to_string(dim));
}

ViTModel::ViTModel(const ViTConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.dim;
  patch_w = Tensor::zeros({config_.patch_dim(), d});
  patch_b = Tensor::zeros({d});
  cls = Tensor::zeros({1, d});
  pos = Tensor::zeros({config_.seq_len(), d});
  blocks.resize(config_.depth);
  for (Block& b : blocks) {
    b.ln1_g = Tensor::full({d}, 1.0);
    b.ln1_b = Tensor::zeros({d});
    b.wq = Tensor::zeros({d, d});
    b.bq = Tensor::zeros({d});
    b.wk = Tensor::zeros({d, d});
    b.bk = Tensor::zeros({d});
    b.wv = Tensor::zeros({d, d});
    b.bv = Tensor::zeros({d});
    b.wo = Tensor::zeros({d, d});
    b.bo = Tensor::zeros({d});
    b.ln2_g = Tensor::full({d}, 1.0);
    b.ln2_b = Tensor::zeros({d});
    b.mlp_w1 = Tensor::zeros({d, config_.mlp_dim()});
    b.mlp_b1 = Tensor::zeros({config_.mlp_dim()});
    b.mlp_w2 = Tensor::zeros({config_.mlp_dim(), d});
    b.mlp_b2 = Tensor::zeros({d});
  }
  final_g = Tensor::full({d}, 1.0);
  final_b = Tensor::zeros({d});
  set_trainable(true);
}

void ViTModel::init(Rng& rng) {
  const Scalar s = 0.02;
  auto fill = [&](Tensor& t) {
    for (Scalar& x : t.mutable_data()) x = s * rng.normal();
  };
  fill(patch_w);
  fill(cls);
  fill(pos);
  for (Block& b : blocks) {
    fill(b.wq);
    fill(b.wk);
    fill(b.wv);
    fill(b.wo);
    fill(b.mlp_w1);
    fill(b.mlp_w2);
  }
  // biases stay zero, layernorm gains stay one
}

std::vector<Tensor> ViTModel::parameters() const {
  std::vector<Tensor> out = {patch_w, patch_b, cls, pos};
  for (const Block& b : blocks) {
    out.insert(out.end(), {b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo,
                           b.ln2_g, b.ln2_b, b.mlp_w1, b.mlp_b1, b.mlp_w2, b.mlp_b2});
  }
  out.push_back(final_g);
  out.push_back(final_b);
  return out;
}

void ViTModel::set_trainable(bool trainable) {
  trainable_ = trainable;
  for (Tensor& t : parameters()) t.set_requires_grad(trainable);
}

Tensor ViTModel::patchify(const std::vector<float>& image) const {
  const std::size_t hw = config_.image_size;
  const std::size_t c = config_.channels;
  if (image.size() != hw * hw * c)
    raise(ErrorCode::ShapeMismatch, "patchify: image has " + std::to_string(image.size()) +
                                        " values, expected " + std::to_string(hw * hw * c));
  const std::size_t p = config_.patch_size;
  const std::size_t side = config_.patches_per_side();
  Tensor out = Tensor::zeros({config_.n_patches(), config_.patch_dim()});
  std::size_t row = 0;
  for (std::size_t pr = 0; pr < side; ++pr)
    for (std::size_t pc = 0; pc < side; ++pc, ++row) {
      Scalar* dst = out.mutable_data().data() + row * config_.patch_dim();
      std::size_t k = 0;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t ch = 0; ch < c; ++ch)
            dst[k++] = static_cast<Scalar>(
                image[((pr * p + y) * hw + (pc * p + x)) * c + ch]);
    }
  return out;
}

Tensor ViTModel::embed_patches(const Tensor& patches) const {
  if (patches.rank() != 2 || patches.cols() != config_.patch_dim() ||
      patches.rows() % config_.n_patches() != 0)
    raise(ErrorCode::ShapeMismatch,
          "embed: patch matrix " + shape_to_string(patches.shape()) + ", expected a multiple of " +
              std::to_string(config_.n_patches()) + " rows of width " +
              std::to_string(config_.patch_dim()));
  return add_row_broadcast(matmul(patches, patch_w), patch_b);
}

Tensor ViTModel::forward_stack(const Tensor& embedded, const ForwardAddons& addons,
                               std::size_t batch, AttentionProbe* probe) const {
  const std::size_t m = config_.n_patches();
  if (probe && probe->layer >= config_.depth)
    raise(ErrorCode::InvalidArgument, "forward: probe layer " + std::to_string(probe->layer) +
                                          " out of range for depth " +
                                          std::to_string(config_.depth));
  if (batch == 0 || embedded.rank() != 2 || embedded.cols() != config_.dim ||
      embedded.rows() != batch * m)
    raise(ErrorCode::ShapeMismatch,
          "forward: embedded stack " + shape_to_string(embedded.shape()) + ", expected [" +
              std::to_string(batch * m) + "x" + std::to_string(config_.dim) + "]");
  auto check_layers = [&](const std::vector<Tensor>* v, const char* what) {
    if (v && v->size() != config_.depth)
      raise(ErrorCode::ShapeMismatch, std::string(what) + ": expected " +
                                          std::to_string(config_.depth) + " per-layer entries, got " +
                                          std::to_string(v->size()));
  };
  check_layers(addons.k_add, "k_add");
  check_layers(addons.v_add, "v_add");
  check_layers(addons.x_add, "x_add");
  check_layers(addons.tokens_deep, "tokens_deep");

  const Tensor* prompt_rows = addons.tokens;
  if (addons.tokens_deep) prompt_rows = &(*addons.tokens_deep)[0];
  const std::size_t n_prompt = prompt_rows ? prompt_rows->rows() : 0;
  const std::size_t seq = 1 + n_prompt + m;  // rows per sample

  // Token layout per sample: CLS, prompt rows (if any), patches.
  std::vector<Tensor> pieces;
  pieces.reserve(batch * 3);
  for (std::size_t b = 0; b < batch; ++b) {
    pieces.push_back(cls);
    if (prompt_rows) pieces.push_back(*prompt_rows);
    pieces.push_back(slice_rows(embedded, b * m, (b + 1) * m));
  }
  Tensor x = batch == 1 && !prompt_rows ? concat_rows({cls, embedded}) : concat_rows(pieces);

  // Prompt rows carry no position term.
  Tensor pos_eff = pos;
  if (n_prompt > 0)
    pos_eff = concat_rows(
        {slice_rows(pos, 0, 1), Tensor::zeros({n_prompt, config_.dim}), slice_rows(pos, 1, 1 + m)});
  x = add_tiled_rows(x, pos_eff);

  const std::size_t h = config_.heads;
  for (std::size_t l = 0; l < config_.depth; ++l) {
    if (addons.tokens_deep && l > 0) {
      const Tensor& rows = (*addons.tokens_deep)[l];
      if (rows.rows() != n_prompt)
        raise(ErrorCode::ShapeMismatch, "tokens_deep: inconsistent prompt row count");
      x = replace_strided_rows(x, seq, 1, rows);
    }
    if (addons.x_add) x = add_to_strided_rows(x, seq, (*addons.x_add)[l]);
    const Block& blk = blocks[l];
    Tensor normed = layernorm(x, blk.ln1_g, blk.ln1_b, kLnEps);
    Tensor q = add_row_broadcast(matmul(normed, blk.wq), blk.bq);
    Tensor k = add_row_broadcast(matmul(normed, blk.wk), blk.bk);
    Tensor v = add_row_broadcast(matmul(normed, blk.wv), blk.bv);
    // Prompt vectors land on each CLS row in the full width, before heads split.
    if (addons.k_add) k = add_to_strided_rows(k, seq, (*addons.k_add)[l]);
    if (addons.v_add) v = add_to_strided_rows(v, seq, (*addons.v_add)[l]);
    Tensor probs = softmax_rows(attention_scores(q, k, batch, h));
    if (probe && probe->layer == l) probe->probs = probs;
    Tensor merged = attention_combine(probs, v, batch, h);
    Tensor attn = add_row_broadcast(matmul(merged, blk.wo), blk.bo);
    x = add(x, attn);
    Tensor normed2 = layernorm(x, blk.ln2_g, blk.ln2_b, kLnEps);
    Tensor hidden = gelu(add_row_broadcast(matmul(normed2, blk.mlp_w1), blk.mlp_b1));
    Tensor mlp = add_row_broadcast(matmul(hidden, blk.mlp_w2), blk.mlp_b2);
    x = add(x, mlp);
  }
  return layernorm(x, final_g, final_b, kLnEps);
}

Tensor ViTModel::forward_tokens(const Tensor& patches, const ForwardAddons& addons) const {
  if (patches.rank() != 2 || patches.rows() != config_.n_patches() ||
      patches.cols() != config_.patch_dim())
    raise(ErrorCode::ShapeMismatch,
          "forward: patch matrix " + shape_to_string(patches.shape()) + ", expected [" +
              std::to_string(config_.n_patches()) + "x" + std::to_string(config_.patch_dim()) +
              "]");
  return forward_stack(embed_patches(patches), addons, 1);
}

Tensor ViTModel::cls_embedding(const Tensor& patches, const ForwardAddons& addons) const {
  Tensor tokens = forward_tokens(patches, addons);
  return slice_rows(tokens, 0, 1);
}

namespace {

std::string block_key(std::size_t l, const char* suffix) {
  return "block." + std::to_string(l) + "." + suffix;
}

}  // namespace

TensorStore model_to_store(const ViTModel& model) {
  const ViTConfig& c = model.config();
  TensorStore store;
  store.put("config", Tensor::vec({static_cast<Scalar>(c.image_size),
                                   static_cast<Scalar>(c.channels),
                                   static_cast<Scalar>(c.patch_size),
                                   static_cast<Scalar>(c.depth), static_cast<Scalar>(c.dim),
                                   static_cast<Scalar>(c.heads),
                                   static_cast<Scalar>(c.mlp_ratio)}));
  store.put("patch.w", model.patch_w);
  store.put("patch.b", model.patch_b);
  store.put("cls", model.cls);
  store.put("pos", model.pos);
  for (std::size_t l = 0; l < c.depth; ++l) {
    const Block& b = model.blocks[l];
    store.put(block_key(l, "ln1.g"), b.ln1_g);
    store.put(block_key(l, "ln1.b"), b.ln1_b);
    store.put(block_key(l, "attn.wq"), b.wq);
    store.put(block_key(l, "attn.bq"), b.bq);
    store.put(block_key(l, "attn.wk"), b.wk);
    store.put(block_key(l, "attn.bk"), b.bk);
    store.put(block_key(l, "attn.wv"), b.wv);
    store.put(block_key(l, "attn.bv"), b.bv);
    store.put(block_key(l, "attn.wo"), b.wo);
    store.put(block_key(l, "attn.bo"), b.bo);
    store.put(block_key(l, "ln2.g"), b.ln2_g);
    store.put(block_key(l, "ln2.b"), b.ln2_b);
    store.put(block_key(l, "mlp.w1"), b.mlp_w1);
    store.put(block_key(l, "mlp.b1"), b.mlp_b1);
    store.put(block_key(l, "mlp.w2"), b.mlp_w2);
    store.put(block_key(l, "mlp.b2"), b.mlp_b2);
  }
  store.put("final_ln.g", model.final_g);
  store.put("final_ln.b", model.final_b);
  return store;
}

ViTModel model_from_store(const TensorStore& store) {
  const Tensor& meta = store.get("config");
  if (meta.numel() != 7) raise(ErrorCode::Io, "weights: malformed config entry");
  ViTConfig c;
  c.image_size = static_cast<std::size_t>(meta.at(0));
  c.channels = static_cast<std::size_t>(meta.at(1));
  c.patch_size = static_cast<std::size_t>(meta.at(2));
  c.depth = static_cast<std::size_t>(meta.at(3));
  c.dim = static_cast<std::size_t>(meta.at(4));
  c.heads = static_cast<std::size_t>(meta.at(5));
  c.mlp_ratio = static_cast<std::size_t>(meta.at(6));
  ViTModel model(c);
  auto copy_into = [&](Tensor& dst, const std::string& name) {
    const Tensor& src = store.get(name);
    if (src.shape() != dst.shape())
      raise(ErrorCode::Io, "weights: '" + name + "' has shape " + shape_to_string(src.shape()) +
                               ", expected " + shape_to_string(dst.shape()));
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  };
  copy_into(model.patch_w, "patch.w");
  copy_into(model.patch_b, "patch.b");
  copy_into(model.cls, "cls");
  copy_into(model.pos, "pos");
  for (std::size_t l = 0; l < c.depth; ++l) {
    Block& b = model.blocks[l];
    copy_into(b.ln1_g, block_key(l, "ln1.g"));
    copy_into(b.ln1_b, block_key(l, "ln1.b"));
    copy_into(b.wq, block_key(l, "attn.wq"));
    copy_into(b.bq, block_key(l, "attn.bq"));
    copy_into(b.wk, block_key(l, "attn.wk"));
    copy_into(b.bk, block_key(l, "attn.bk"));
    copy_into(b.wv, block_key(l, "attn.wv"));
    copy_into(b.bv, block_key(l, "attn.bv"));
    copy_into(b.wo, block_key(l, "attn.wo"));
    copy_into(b.bo, block_key(l, "attn.bo"));
    copy_into(b.ln2_g, block_key(l, "ln2.g"));
    copy_into(b.ln2_b, block_key(l, "ln2.b"));
    copy_into(b.mlp_w1, block_key(l, "mlp.w1"));
    copy_into(b.mlp_b1, block_key(l, "mlp.b1"));
    copy_into(b.mlp_w2, block_key(l, "mlp.w2"));
    copy_into(b.mlp_b2, block_key(l, "mlp.b2"));
  }
  copy_into(model.final_g, "final_ln.g");
  copy_into(model.final_b, "final_ln.b");
  model.set_trainable(false);  // stored models are frozen backbones
  return model;
}

}  // namespace apt
