#include "apt/apt.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <new>
#include <string>

#include <nlohmann/json.hpp>

#include "core/config.hpp"
#include "core/dataset.hpp"
#include "core/harness.hpp"
#include "core/heatmap.hpp"
#include "core/prompts.hpp"
#include "core/weights_io.hpp"

using json = nlohmann::json;

struct apt_config {
  apt::RunConfig cfg;
};

namespace {

thread_local std::string g_last_error;

template <typename F>
apt_status guard(F&& body) {
  try {
    body();
    g_last_error.clear();
    return APT_OK;
  } catch (const apt::Error& e) {
    g_last_error = e.what();
    return static_cast<apt_status>(static_cast<int>(e.code()));
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return APT_ERR_INTERNAL;
  }
}

void require(bool ok, const char* what) {
  if (!ok) apt::raise(apt::ErrorCode::InvalidArgument, what);
}

char* copy_out(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) apt::raise(apt::ErrorCode::Internal, "out of memory");
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

apt::ViTModel load_frozen_model(const apt::RunConfig& cfg, const std::string& path) {
  apt::ViTModel model = apt::model_from_store(apt::TensorStore::load(path));
  const apt::ViTConfig& have = model.config();
  const apt::ViTConfig& want = cfg.model;
  if (have.image_size != want.image_size || have.channels != want.channels ||
      have.patch_size != want.patch_size || have.depth != want.depth || have.dim != want.dim ||
      have.heads != want.heads || have.mlp_ratio != want.mlp_ratio)
    apt::raise(apt::ErrorCode::Config,
               path + ": stored geometry (depth " + std::to_string(have.depth) + ", dim " +
                   std::to_string(have.dim) + ", image " + std::to_string(have.image_size) +
                   ") does not match the configured model");
  return model;
}

json summary_json(const apt::RunConfig& cfg, const apt::RunResult& r) {
  json matrix = json::array();
  for (std::size_t t = 0; t < r.matrix.tasks(); ++t) {
    json row = json::array();
    for (std::size_t i = 0; i < r.matrix.tasks(); ++i) {
      if (i <= t)
        row.push_back(r.matrix.get(t, i));
      else
        row.push_back(nullptr);
    }
    matrix.push_back(row);
  }
  json final_accs = json::array();
  for (std::size_t i = 0; i < r.matrix.tasks(); ++i)
    final_accs.push_back(r.matrix.get(r.matrix.tasks() - 1, i));

  json j;
  j["alpha"] = cfg.alpha;
  j["avg_acc"] = r.avg_acc;
  j["backbone_intact"] = r.backbone_intact;
  j["config"] = cfg.to_map();
  j["eval_matrix"] = matrix;
  j["final_task_accs"] = final_accs;
  j["forgetting"] = r.forget;
  j["gmacs"] = r.headline_gmacs;
  j["method"] = cfg.method;
  j["old_heads_intact"] = r.old_heads_intact;
  j["ratio_vs_plain"] = r.ratio_vs_plain;
  j["rehearsal_accesses"] = r.audit_accesses;
  j["rehearsal_violations"] = r.audit_violations;
  j["seed"] = cfg.seed;
  j["tasks"] = cfg.tasks;
  j["trainable_prompt_params"] = r.trainable_prompt_params;
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) apt::raise(apt::ErrorCode::Io, path + ": cannot open for writing");
  os << text;
  os.flush();
  if (!os) apt::raise(apt::ErrorCode::Io, path + ": write failed");
}

}  // namespace

extern "C" {

const char* apt_status_name(apt_status status) {
  if (status == APT_OK) return "ok";
  return apt::error_code_name(static_cast<apt::ErrorCode>(static_cast<int>(status)));
}

const char* apt_last_error(void) { return g_last_error.c_str(); }

apt_config* apt_config_new(void) { return new (std::nothrow) apt_config(); }

void apt_config_free(apt_config* config) { delete config; }

apt_status apt_config_set(apt_config* config, const char* key, const char* value) {
  return guard([&] {
    require(config && key && value, "config, key and value must be non-null");
    config->cfg.set(key, value);
  });
}

apt_status apt_config_load_file(apt_config* config, const char* path) {
  return guard([&] {
    require(config && path, "config and path must be non-null");
    config->cfg.load_file(path);
  });
}

apt_status apt_config_dump(const apt_config* config, char** out_text) {
  return guard([&] {
    require(config && out_text, "config and out_text must be non-null");
    std::string text;
    for (const auto& [k, v] : config->cfg.to_map()) text += k + " = " + v + "\n";
    *out_text = copy_out(text);
  });
}

apt_status apt_gen_data(const apt_config* config, const char* out_dir) {
  return guard([&] {
    require(config && out_dir, "config and out_dir must be non-null");
    apt::generate_benchmark(config->cfg.data, out_dir);
  });
}

apt_status apt_pretrain(const apt_config* config, const char* data_dir, const char* weights_out,
                        double* test_accuracy) {
  return guard([&] {
    require(config && data_dir && weights_out, "config, data_dir and weights_out must be non-null");
    const apt::RunConfig& cfg = config->cfg;
    cfg.validate();
    apt::Dataset train = apt::Dataset::load(std::string(data_dir) + "/pretrain_train.aptd");
    apt::Dataset test = apt::Dataset::load(std::string(data_dir) + "/pretrain_test.aptd");
    apt::ViTModel model(cfg.model);
    apt::PretrainOutcome out = apt::pretrain_backbone(model, train, test, cfg);
    apt::model_to_store(model).save(weights_out);
    if (test_accuracy) *test_accuracy = out.test_accuracy;
  });
}

apt_status apt_train_cil(const apt_config* config, const char* data_dir,
                         const char* weights_path, const char* out_dir,
                         apt_run_summary* summary) {
  return guard([&] {
    require(config && data_dir && weights_path && out_dir,
            "config, data_dir, weights_path and out_dir must be non-null");
    const apt::RunConfig& cfg = config->cfg;
    cfg.validate();
    apt::ViTModel model = load_frozen_model(cfg, weights_path);
    apt::Dataset train = apt::Dataset::load(std::string(data_dir) + "/cil_train.aptd");
    apt::Dataset test = apt::Dataset::load(std::string(data_dir) + "/cil_test.aptd");
    apt::RunResult result = apt::run_cil(cfg, model, train, test);

    const std::string dir(out_dir);
    write_text(dir + "/eval_matrix.csv", result.matrix.to_csv());
    write_text(dir + "/summary.json", summary_json(cfg, result).dump(2) + "\n");
    apt::write_heatmap(result.matrix, dir + "/matrix.pgm");
    for (std::size_t t = 0; t < result.snapshots.size(); ++t)
      result.snapshots[t].save(dir + "/prompts_task" + std::to_string(t + 1) + ".aptw");

    if (summary) {
      summary->avg_acc = result.avg_acc;
      summary->forgetting = result.forget;
      summary->gmacs = result.headline_gmacs;
      summary->ratio_vs_plain = result.ratio_vs_plain;
      summary->trainable_prompt_params = result.trainable_prompt_params;
      summary->tasks = static_cast<int>(cfg.tasks);
    }
  });
}

apt_status apt_flops_table(const apt_config* config, char** out_table) {
  return guard([&] {
    require(config && out_table, "config and out_table must be non-null");
    config->cfg.model.validate();
    *out_table = copy_out(apt::flops_table(config->cfg.model, config->cfg.method_shape()));
  });
}

apt_status apt_attention_heatmap(const apt_config* config, const char* weights_path,
                                 const char* prompts_path, const char* data_dir,
                                 unsigned image_index, unsigned layer, const char* out_prefix) {
  return guard([&] {
    require(config && weights_path && data_dir && out_prefix,
            "config, weights_path, data_dir and out_prefix must be non-null");
    const apt::RunConfig& cfg = config->cfg;
    cfg.validate();
    apt::ViTModel model = load_frozen_model(cfg, weights_path);
    apt::Dataset test = apt::Dataset::load(std::string(data_dir) + "/cil_test.aptd");
    if (image_index >= test.size())
      apt::raise(apt::ErrorCode::InvalidArgument,
                 "image index " + std::to_string(image_index) + " out of range: the test split has " +
                     std::to_string(test.size()) + " images");

    apt::ForwardAddons addons;
    apt::SnapshotAddons snapshot;
    if (prompts_path) {
      snapshot = apt::snapshot_addons(apt::TensorStore::load(prompts_path));
      snapshot.attach(addons);
    }
    apt::Tensor patches = model.patchify(test.images[image_index]);
    apt::AttentionMap map = apt::cls_attention_map(model, addons, patches, layer);
    const std::string prefix(out_prefix);
    apt::write_attention_map(map, prefix + ".pgm", prefix + ".csv");
  });
}

void apt_string_free(char* text) { std::free(text); }

}  // extern "C"
