#include "core/harness.hpp"

#include <algorithm>
#include <cstring>
#include <functional>
#include <memory>
#include <set>

#include "core/weights_io.hpp"

namespace apt {

namespace {

constexpr Scalar kPromptInitStd = 0.02;

struct TrainItem {
  Tensor input;  // raw patches, cached patch embedding, or cached CLS, by mode
  std::size_t local_label;
};

struct EvalItem {
  Tensor input;
  std::uint16_t label;
};

// Maps a batch of item inputs to one {batch, dim} embedding matrix.
using BatchForward = std::function<Tensor(const std::vector<const Tensor*>&)>;

std::vector<std::uint16_t> distinct_labels(const Dataset& d) {
  std::set<std::uint16_t> s(d.labels.begin(), d.labels.end());
  return {s.begin(), s.end()};
}

// One optimizer step per batch; the whole batch shares a tape. Mean per-epoch
// loss is appended to `curve`; `first_loss` (if non-null) receives the mean
// loss of the very first batch before any update.
void train_epochs(const std::vector<TrainItem>& items, const BatchForward& forward_batch,
                  const std::vector<Tensor>& prompt_params, GrowingClassifier& clf,
                  const RunConfig& cfg, Rng& shuffle_rng, std::vector<double>& curve,
                  double* first_loss) {
  Adam opt_prompts(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  Adam opt_head(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  std::vector<Tensor> head_params = clf.current_parameters();
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const Scalar inv = 1.0 / static_cast<Scalar>(stop - start);
      std::vector<const Tensor*> inputs;
      std::vector<std::size_t> labels;
      inputs.reserve(stop - start);
      labels.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        inputs.push_back(&items[order[i]].input);
        labels.push_back(items[order[i]].local_label);
      }
      zero_grad(prompt_params);
      zero_grad(head_params);
      double batch_loss;
      {
        TapeScope scope;
        Tensor emb = forward_batch(inputs);
        Tensor loss = cross_entropy_rows(clf.logits_current(emb), labels);
        backward(loss, inv);
        batch_loss = loss.value();
      }
      if (first_loss) {
        *first_loss = batch_loss * inv;
        first_loss = nullptr;
      }
      if (!prompt_params.empty()) opt_prompts.step(prompt_params, cfg.lr_prompts);
      opt_head.step(head_params, cfg.lr_head);
      epoch_loss += batch_loss;
    }
    curve.push_back(epoch_loss / static_cast<double>(items.size()));
  }
}

double eval_accuracy(const std::vector<EvalItem>& items, const BatchForward& forward_batch,
                     const GrowingClassifier& clf, std::size_t batch_size) {
  if (items.empty()) raise(ErrorCode::Contract, "evaluation on an empty test set");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < items.size(); start += batch_size) {
    const std::size_t stop = std::min(items.size(), start + batch_size);
    std::vector<const Tensor*> inputs;
    inputs.reserve(stop - start);
    for (std::size_t i = start; i < stop; ++i) inputs.push_back(&items[i].input);
    std::vector<std::uint16_t> pred = clf.predict_batch(forward_batch(inputs));
    for (std::size_t i = start; i < stop; ++i)
      if (pred[i - start] == items[i].label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

Tensor stack_inputs(const std::vector<const Tensor*>& inputs) {
  if (inputs.size() == 1) return *inputs[0];
  std::vector<Tensor> parts;
  parts.reserve(inputs.size());
  for (const Tensor* t : inputs) parts.push_back(*t);
  return concat_rows(parts);
}

std::vector<std::vector<Scalar>> dump_parameters(const ViTModel& model) {
  std::vector<std::vector<Scalar>> out;
  for (const Tensor& t : model.parameters()) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

bool parameters_match(const ViTModel& model, const std::vector<std::vector<Scalar>>& snap) {
  std::vector<Tensor> params = model.parameters();
  if (params.size() != snap.size()) return false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].numel() != snap[i].size()) return false;
    if (std::memcmp(params[i].data().data(), snap[i].data(),
                    snap[i].size() * sizeof(Scalar)) != 0)
      return false;
  }
  return true;
}

PromptSet trainable_clone(const PromptSet& src) {
  PromptSet out = src.clone();
  for (Tensor& t : out.k) t.set_requires_grad(true);
  for (Tensor& t : out.v) t.set_requires_grad(true);
  return out;
}

}  // namespace

std::vector<std::vector<std::uint16_t>> split_tasks(std::vector<std::uint16_t> classes,
                                                    std::size_t tasks, std::uint64_t seed) {
  if (tasks == 0 || classes.size() < tasks)
    raise(ErrorCode::InvalidArgument, "split_tasks: need at least one class per task");
  if (classes.size() % tasks != 0)
    raise(ErrorCode::InvalidArgument, "split_tasks: " + std::to_string(classes.size()) +
                                          " classes do not divide into " + std::to_string(tasks) +
                                          " equal tasks");
  Rng rng = Rng(seed).substream(0x5417);
  rng.shuffle(classes);
  std::vector<std::vector<std::uint16_t>> out(tasks);
  const std::size_t base = classes.size() / tasks;
  for (std::size_t t = 0; t < tasks; ++t)
    out[t].assign(classes.begin() + t * base, classes.begin() + (t + 1) * base);
  return out;
}

PretrainOutcome pretrain_backbone(ViTModel& model, const Dataset& train, const Dataset& test,
                                  const RunConfig& cfg) {
  if (train.size() == 0) raise(ErrorCode::InvalidArgument, "pretraining set is empty");
  Rng rng(cfg.pretrain_seed);
  model.set_trainable(true);
  model.init(rng);

  GrowingClassifier clf(model.config().dim);
  clf.add_task(distinct_labels(train));

  std::vector<TrainItem> items;
  items.reserve(train.size());
  for (std::size_t i = 0; i < train.size(); ++i)
    items.push_back({model.patchify(train.images[i]), clf.local_label(train.labels[i])});

  RunConfig train_cfg = cfg;
  train_cfg.epochs = cfg.pretrain_epochs;
  train_cfg.lr_prompts = cfg.pretrain_lr;
  train_cfg.lr_head = cfg.pretrain_lr;

  // Items hold raw patch matrices here: the stem is training, so embeddings
  // cannot be cached.
  const std::size_t seq = model.config().seq_len();
  auto forward_batch = [&](const std::vector<const Tensor*>& inputs) {
    Tensor tokens =
        model.forward_stack(model.embed_patches(stack_inputs(inputs)), {}, inputs.size());
    return gather_strided_rows(tokens, seq);
  };

  PretrainOutcome out;
  train_epochs(items, forward_batch, model.parameters(), clf, train_cfg, rng, out.loss_curve,
               nullptr);

  // Freeze first, then measure: the reported accuracy is the accuracy of the
  // exact weights a reload would see.
  model.set_trainable(false);
  for (const Tensor& t : model.parameters()) snap_to_f32(t);

  std::vector<EvalItem> test_items;
  test_items.reserve(test.size());
  for (std::size_t i = 0; i < test.size(); ++i)
    test_items.push_back({model.patchify(test.images[i]), test.labels[i]});
  out.test_accuracy = eval_accuracy(test_items, forward_batch, clf, cfg.batch_size);
  return out;
}

RunResult run_cil(const RunConfig& cfg, const ViTModel& frozen, const Dataset& cil_train,
                  const Dataset& cil_test) {
  cfg.validate();
  if (frozen.trainable())
    raise(ErrorCode::Contract, "incremental training requires a frozen backbone");
  const Method method = parse_method(cfg.method);
  const std::size_t dim = frozen.config().dim;

  std::vector<std::uint16_t> classes = distinct_labels(cil_train);
  auto split = split_tasks(classes, cfg.tasks, cfg.seed);

  // map each class to its task, index training data per task
  std::vector<std::size_t> class_task(65536, static_cast<std::size_t>(-1));
  for (std::size_t t = 0; t < split.size(); ++t)
    for (std::uint16_t c : split[t]) class_task[c] = t;
  std::vector<std::vector<std::size_t>> train_by_task(cfg.tasks), test_by_task(cfg.tasks);
  for (std::size_t i = 0; i < cil_train.size(); ++i) {
    const std::size_t t = class_task[cil_train.labels[i]];
    if (t == static_cast<std::size_t>(-1))
      raise(ErrorCode::Contract, "training sample with a label outside every task");
    train_by_task[t].push_back(i);
  }
  for (std::size_t i = 0; i < cil_test.size(); ++i) {
    const std::size_t t = class_task[cil_test.labels[i]];
    if (t == static_cast<std::size_t>(-1))
      raise(ErrorCode::Contract, "test sample with a label outside every task");
    test_by_task[t].push_back(i);
  }

  const auto backbone_snapshot = dump_parameters(frozen);

  RunResult result(cfg.tasks);
  RehearsalAudit audit;
  GrowingClassifier clf(dim);
  Rng run_rng(cfg.seed);

  // The stem is frozen during incremental learning, so every sample's patch
  // embedding is a constant; cache it instead of recomputing per epoch.
  auto embed_image = [&](const std::vector<float>& img) {
    return frozen.embed_patches(frozen.patchify(img));
  };
  // Plain CLS embedding of one cached patch embedding (no prompts).
  auto plain_cls = [&](const Tensor& embedded) {
    return slice_rows(frozen.forward_stack(embedded, {}, 1), 0, 1);
  };

  // method state that persists across tasks
  PromptSet current, fused;
  const bool apt_family = method == Method::kApt || method == Method::kAptNoPpf ||
                          method == Method::kAptInputLevel;
  const bool with_ppf = method == Method::kApt || method == Method::kAptInputLevel;
  const PromptSet::Mode prompt_mode = method == Method::kAptInputLevel
                                          ? PromptSet::Mode::kInputLevel
                                          : PromptSet::Mode::kAddKv;
  TokenPrompts tokens;
  std::unique_ptr<PromptPool> pool;
  if (method == Method::kVptShallow || method == Method::kVptDeep) {
    Rng init_rng = Rng(cfg.seed).substream(0xc0de);
    tokens = TokenPrompts::make(method == Method::kVptDeep, frozen.config().depth, cfg.vpt_n,
                                dim, init_rng, kPromptInitStd);
  } else if (method == Method::kPool) {
    Rng init_rng = Rng(cfg.seed).substream(0xc0de);
    pool = std::make_unique<PromptPool>(cfg.pool_size, cfg.pool_block_len, cfg.pool_top_k, dim,
                                        init_rng, kPromptInitStd);
  }

  // Pool selection and composition differ per sample, so its batch runs one
  // sample at a time on a shared tape.
  auto pool_forward = [&](const std::vector<const Tensor*>& inputs) {
    std::vector<Tensor> rows;
    rows.reserve(inputs.size());
    for (const Tensor* embedded : inputs) {
      std::vector<std::size_t> sel;
      {
        TapePause pause;
        sel = pool->select(plain_cls(*embedded));
      }
      Tensor composed = pool->compose(sel);
      ForwardAddons a;
      a.tokens = &composed;
      rows.push_back(slice_rows(frozen.forward_stack(*embedded, a, 1), 0, 1));
    }
    return rows.size() == 1 ? rows[0] : concat_rows(rows);
  };
  auto addon_forward = [&](const ForwardAddons& a, const std::vector<const Tensor*>& inputs) {
    Tensor toks = frozen.forward_stack(stack_inputs(inputs), a, inputs.size());
    return gather_strided_rows(toks, toks.rows() / inputs.size());
  };
  auto identity_forward = [&](const std::vector<const Tensor*>& inputs) {
    return stack_inputs(inputs);
  };

  // per-task cached test inputs (patch embeddings), built on first use
  std::vector<std::vector<EvalItem>> test_items(cfg.tasks);
  auto tests_for = [&](std::size_t t) -> const std::vector<EvalItem>& {
    if (test_items[t].empty()) {
      test_items[t].reserve(test_by_task[t].size());
      for (std::size_t i : test_by_task[t])
        test_items[t].push_back({embed_image(cil_test.images[i]), cil_test.labels[i]});
    }
    return test_items[t];
  };
  // linear-probe test embeddings never change; cache them per task
  std::vector<std::vector<EvalItem>> probe_test_emb(cfg.tasks);

  std::vector<std::vector<std::vector<Scalar>>> head_snapshots;

  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    clf.add_task(split[t]);
    audit.begin_task(t);

    // Materialise the task's training set through the audited accessor; this
    // is the only path from raw samples into the training loop.
    std::vector<TrainItem> items;
    items.reserve(train_by_task[t].size());
    for (std::size_t idx : train_by_task[t]) {
      audit.note_access(class_task[cil_train.labels[idx]]);
      Tensor embedded = embed_image(cil_train.images[idx]);
      Tensor input = method == Method::kLinearProbe ? plain_cls(embedded) : embedded;
      items.push_back({std::move(input), clf.local_label(cil_train.labels[idx])});
    }

    BatchForward train_forward;
    std::vector<Tensor> prompt_params;
    switch (method) {
      case Method::kApt:
      case Method::kAptNoPpf:
      case Method::kAptInputLevel: {
        if (t == 0) {
          // Additive deltas start at zero: the first forward is exactly the
          // frozen backbone, and prompts only grow as the loss demands.
          current = PromptSet::zeros(prompt_mode, frozen.config().depth, dim, true);
        } else if (with_ppf && cfg.ppf_warm_start == "fused") {
          current = trainable_clone(fused);
        } else if (cfg.ppf_warm_start == "fresh" && with_ppf) {
          current = PromptSet::zeros(prompt_mode, frozen.config().depth, dim, true);
        } else {
          current = trainable_clone(current);  // continue from the raw previous prompts
        }
        prompt_params = current.parameters();
        train_forward = [&](const std::vector<const Tensor*>& inputs) {
          ForwardAddons a;
          current.attach(a);
          return addon_forward(a, inputs);
        };
        break;
      }
      case Method::kVptShallow:
      case Method::kVptDeep:
        prompt_params = tokens.parameters();
        train_forward = [&](const std::vector<const Tensor*>& inputs) {
          ForwardAddons a;
          tokens.attach(a);
          return addon_forward(a, inputs);
        };
        break;
      case Method::kPool:
        prompt_params = pool->parameters();
        train_forward = pool_forward;
        break;
      case Method::kLinearProbe:
        train_forward = identity_forward;
        break;
    }

    result.loss_curves.emplace_back();
    train_epochs(items, train_forward, prompt_params, clf, cfg, run_rng,
                 result.loss_curves.back(), t == 0 ? &result.first_batch_loss : nullptr);

    if (apt_family && with_ppf)
      fused = t == 0 ? current.clone() : fuse_prompts(fused, current, cfg.alpha);

    head_snapshots.push_back(clf.snapshot(t));

    // evaluate every task seen so far with the method's inference pass
    BatchForward eval_forward;
    const PromptSet& infer_prompts = with_ppf ? fused : current;
    if (apt_family)
      result.snapshots.push_back(prompt_snapshot(infer_prompts));
    else if (method == Method::kVptShallow || method == Method::kVptDeep)
      result.snapshots.push_back(prompt_snapshot(tokens));
    else if (method == Method::kPool)
      result.snapshots.push_back(prompt_snapshot(*pool));
    switch (method) {
      case Method::kApt:
      case Method::kAptNoPpf:
      case Method::kAptInputLevel:
        eval_forward = [&](const std::vector<const Tensor*>& inputs) {
          ForwardAddons a;
          infer_prompts.attach(a);
          return addon_forward(a, inputs);
        };
        break;
      case Method::kVptShallow:
      case Method::kVptDeep:
        eval_forward = [&](const std::vector<const Tensor*>& inputs) {
          ForwardAddons a;
          tokens.attach(a);
          return addon_forward(a, inputs);
        };
        break;
      case Method::kPool:
        eval_forward = pool_forward;
        break;
      case Method::kLinearProbe:
        eval_forward = identity_forward;  // fed from the embedding cache below
        break;
    }
    for (std::size_t i = 0; i <= t; ++i) {
      double acc;
      if (method == Method::kLinearProbe) {
        if (probe_test_emb[i].empty()) {
          probe_test_emb[i].reserve(tests_for(i).size());
          for (const EvalItem& item : tests_for(i))
            probe_test_emb[i].push_back({plain_cls(item.input), item.label});
        }
        acc = eval_accuracy(probe_test_emb[i], eval_forward, clf, cfg.batch_size);
      } else {
        acc = eval_accuracy(tests_for(i), eval_forward, clf, cfg.batch_size);
      }
      result.matrix.set(t, i, acc);
    }
  }

  result.avg_acc = average_accuracy(result.matrix);
  result.forget = forgetting(result.matrix);
  MethodShape shape = cfg.method_shape();
  result.trainable_prompt_params = prompt_params(frozen.config(), shape);
  FlopsBreakdown f = method_flops(frozen.config(), shape);
  result.headline_gmacs = static_cast<double>(f.block_macs) / 1e9;
  result.ratio_vs_plain = f.ratio_vs_plain;

  result.backbone_intact = parameters_match(frozen, backbone_snapshot);
  result.old_heads_intact = true;
  for (std::size_t t = 0; t < head_snapshots.size(); ++t)
    if (!clf.matches_snapshot(t, head_snapshots[t])) result.old_heads_intact = false;
  result.audit_accesses = audit.accesses();
  result.audit_violations = audit.violations();
  if (!audit.clean())
    raise(ErrorCode::Contract, "rehearsal audit recorded " +
                                   std::to_string(audit.violations()) + " cross-task accesses");
  return result;
}

}  // namespace apt
