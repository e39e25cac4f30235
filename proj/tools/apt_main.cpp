// Command-line front end. Talks to the library exclusively through the C API.

#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "apt/apt.h"

namespace {

struct ConfigDeleter {
  void operator()(apt_config* c) const { apt_config_free(c); }
};
using ConfigPtr = std::unique_ptr<apt_config, ConfigDeleter>;

[[noreturn]] void die(apt_status status) {
  std::fprintf(stderr, "error: %s: %s\n", apt_status_name(status), apt_last_error());
  std::exit(static_cast<int>(status));
}

void check(apt_status status) {
  if (status != APT_OK) die(status);
}

ConfigPtr build_config(const std::string& config_file, const std::vector<std::string>& sets) {
  ConfigPtr cfg(apt_config_new());
  if (!cfg) die(APT_ERR_INTERNAL);
  if (!config_file.empty()) check(apt_config_load_file(cfg.get(), config_file.c_str()));
  for (const std::string& kv : sets) {
    std::size_t eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "error: config: expected key=value, got '%s'\n", kv.c_str());
      std::exit(static_cast<int>(APT_ERR_CONFIG));
    }
    check(apt_config_set(cfg.get(), kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()));
  }
  return cfg;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    std::fprintf(stderr, "error: io: cannot create directory %s: %s\n", dir.c_str(),
                 ec.message().c_str());
    std::exit(static_cast<int>(APT_ERR_IO));
  }
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Large tensor buffers otherwise bounce through mmap/munmap on every
  // allocation; keeping them on the heap roughly halves training wall time.
  mallopt(M_MMAP_THRESHOLD, 1 << 27);
  mallopt(M_TRIM_THRESHOLD, 1 << 28);
#endif
  CLI::App app{"additive-prompt continual-learning lab"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> sets;
  app.add_option("--config", config_file, "configuration file of key = value lines");
  app.add_option("--set", sets, "override a configuration key (key=value, repeatable)");

  std::string out_dir, data_dir, weights, prompts, out_prefix;
  bool show_config = false;
  unsigned image_index = 0, layer = 0;

  CLI::App* gen = app.add_subcommand("gen-data", "synthesise the benchmark datasets");
  gen->add_option("--out", out_dir, "output directory")->required();

  CLI::App* pre = app.add_subcommand("pretrain", "train and freeze a backbone");
  pre->add_option("--data", data_dir, "directory with the generated datasets")->required();
  pre->add_option("--out", weights, "output weights file")->required();

  CLI::App* cil = app.add_subcommand("train-cil", "run the class-incremental protocol");
  cil->add_option("--data", data_dir, "directory with the generated datasets")->required();
  cil->add_option("--weights", weights, "frozen backbone weights")->required();
  cil->add_option("--out", out_dir, "output directory for matrix, summary and snapshots")
      ->required();
  cil->add_flag("--show-config", show_config, "print the effective configuration first");
  // common settings as first-class flags; anything else goes through --set
  std::string method, alpha, tasks, seed, epochs;
  cil->add_option("--method", method,
                  "apt | apt-no-ppf | apt-input-level | vpt-shallow | vpt-deep | pool | "
                  "linear-probe");
  cil->add_option("--alpha", alpha, "fusion weight on the previous prompts, in [0, 1]");
  cil->add_option("--tasks", tasks, "number of incremental tasks");
  cil->add_option("--seed", seed, "run seed (task split, init, batch order)");
  cil->add_option("--epochs", epochs, "training epochs per task");

  CLI::App* flops = app.add_subcommand("flops", "print the analytic cost table");

  CLI::App* heat = app.add_subcommand("heatmap", "CLS attention over the patch grid");
  heat->add_option("--weights", weights, "frozen backbone weights")->required();
  heat->add_option("--data", data_dir, "directory with the generated datasets")->required();
  heat->add_option("--prompts", prompts, "prompt snapshot to apply (omit for plain backbone)");
  heat->add_option("--image-index", image_index, "index into the incremental test split")
      ->required();
  heat->add_option("--layer", layer, "block whose attention to extract")->required();
  heat->add_option("--out", out_prefix, "output prefix; writes <prefix>.pgm and <prefix>.csv")
      ->required();

  // lets --config/--set appear after the subcommand name too
  for (CLI::App* sub : app.get_subcommands(nullptr)) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  ConfigPtr cfg = build_config(config_file, sets);
  auto flag_override = [&](const char* key, const std::string& value) {
    if (!value.empty()) check(apt_config_set(cfg.get(), key, value.c_str()));
  };
  flag_override("method", method);
  flag_override("alpha", alpha);
  flag_override("tasks", tasks);
  flag_override("seed", seed);
  flag_override("epochs", epochs);

  if (gen->parsed()) {
    ensure_dir(out_dir);
    check(apt_gen_data(cfg.get(), out_dir.c_str()));
    std::printf("wrote pretrain_train/pretrain_test/cil_train/cil_test.aptd to %s\n",
                out_dir.c_str());
  } else if (pre->parsed()) {
    double acc = 0.0;
    check(apt_pretrain(cfg.get(), data_dir.c_str(), weights.c_str(), &acc));
    std::printf("pretrain done: test accuracy %.4f, weights saved to %s\n", acc, weights.c_str());
  } else if (cil->parsed()) {
    if (show_config) {
      char* text = nullptr;
      check(apt_config_dump(cfg.get(), &text));
      std::fputs(text, stdout);
      apt_string_free(text);
    }
    ensure_dir(out_dir);
    apt_run_summary summary{};
    check(apt_train_cil(cfg.get(), data_dir.c_str(), weights.c_str(), out_dir.c_str(), &summary));
    std::printf("avg_acc %.4f  forgetting %.4f  gmacs %.4f  prompt_params %llu  tasks %d\n",
                summary.avg_acc, summary.forgetting, summary.gmacs,
                summary.trainable_prompt_params, summary.tasks);
    std::printf("outputs in %s: eval_matrix.csv, summary.json, matrix.pgm, prompt snapshots\n",
                out_dir.c_str());
  } else if (flops->parsed()) {
    char* table = nullptr;
    check(apt_flops_table(cfg.get(), &table));
    std::fputs(table, stdout);
    apt_string_free(table);
  } else if (heat->parsed()) {
    check(apt_attention_heatmap(cfg.get(), weights.c_str(),
                                prompts.empty() ? nullptr : prompts.c_str(), data_dir.c_str(),
                                image_index, layer, out_prefix.c_str()));
    std::printf("wrote %s.pgm and %s.csv\n", out_prefix.c_str(), out_prefix.c_str());
  }
  return 0;
}
