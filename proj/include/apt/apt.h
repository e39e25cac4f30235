#ifndef APT_APT_H
#define APT_APT_H

/* C interface to the additive-prompt continual-learning laboratory.
 *
 * Every entry point returns an apt_status; APT_OK is zero. On failure,
 * apt_last_error() returns a thread-local description of what went wrong.
 * The apt_config handle carries all run settings as key=value pairs with
 * sensible desk-scale defaults; unknown keys are rejected.
 */

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum apt_status {
  APT_OK = 0,
  APT_ERR_INVALID_ARGUMENT = 1,
  APT_ERR_SHAPE_MISMATCH = 2,
  APT_ERR_NUMERIC = 3,
  APT_ERR_CONTRACT = 4,
  APT_ERR_CONFIG = 5,
  APT_ERR_IO = 6,
  APT_ERR_BAD_MAGIC = 7,
  APT_ERR_BAD_VERSION = 8,
  APT_ERR_TRUNCATED = 9,
  APT_ERR_INTERNAL = 10
} apt_status;

const char* apt_status_name(apt_status status);

/* Message for the most recent failure on this thread; never NULL. */
const char* apt_last_error(void);

typedef struct apt_config apt_config;

apt_config* apt_config_new(void);
void apt_config_free(apt_config* config);
apt_status apt_config_set(apt_config* config, const char* key, const char* value);
/* Plain-text file of `key = value` lines; '#' starts a comment. */
apt_status apt_config_load_file(apt_config* config, const char* path);
/* All settings as sorted `key = value` lines. Free with apt_string_free. */
apt_status apt_config_dump(const apt_config* config, char** out_text);

/* Synthesises the benchmark into out_dir: pretrain_train/pretrain_test/
 * cil_train/cil_test.aptd. */
apt_status apt_gen_data(const apt_config* config, const char* out_dir);

/* Trains the backbone on the pretraining split under data_dir, freezes it
 * and writes it to weights_out. Reports held-out accuracy if the pointer is
 * given. */
apt_status apt_pretrain(const apt_config* config, const char* data_dir, const char* weights_out,
                        double* test_accuracy);

typedef struct apt_run_summary {
  double avg_acc;
  double forgetting;
  double gmacs;          /* analytic per-image cost of the method's blocks */
  double ratio_vs_plain; /* relative to the unprompted backbone */
  unsigned long long trainable_prompt_params;
  int tasks;
} apt_run_summary;

/* Runs the class-incremental protocol for config's method over the frozen
 * backbone in weights_path. Writes eval_matrix.csv, summary.json, matrix.pgm
 * and per-task prompt snapshots (prompts_task<N>.aptw) into out_dir. summary
 * may be NULL. */
apt_status apt_train_cil(const apt_config* config, const char* data_dir,
                         const char* weights_path, const char* out_dir,
                         apt_run_summary* summary);

/* Cost comparison across methods for config's geometry. Free with
 * apt_string_free. */
apt_status apt_flops_table(const apt_config* config, char** out_table);

/* CLS attention over the patch grid for one test image (by index into the
 * incremental test split under data_dir) at one block, written as
 * <out_prefix>.pgm and <out_prefix>.csv. prompts_path may be NULL to probe
 * the plain backbone, or name a snapshot written by apt_train_cil. */
apt_status apt_attention_heatmap(const apt_config* config, const char* weights_path,
                                 const char* prompts_path, const char* data_dir,
                                 unsigned image_index, unsigned layer, const char* out_prefix);

void apt_string_free(char* text);

#ifdef __cplusplus
}
#endif

#endif /* APT_APT_H */
