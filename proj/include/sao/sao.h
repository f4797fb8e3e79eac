#ifndef SAO_H_
#define SAO_H_

/*
 * C interface to the structure-alignment pretraining library: synthetic
 * dataset generation, bootstrap pretraining, multi-label fine-tuning,
 * evaluation, embedding-bias and saliency reports, PDB import, and the
 * built-in property-check suites.
 *
 * All functions return sao_status; on failure sao_last_error() describes the
 * most recent error of the calling thread. Strings returned through char**
 * out-parameters are heap-allocated and must be released with
 * sao_string_free().
 *
 * Config arguments are JSON text; absent keys keep their documented
 * defaults. Pass NULL for an empty config.
 */

#ifdef __cplusplus
extern "C" {
#endif

typedef enum sao_status {
  SAO_OK = 0,
  SAO_ERROR_VALIDATION = 1, /* domain rule or check failure */
  SAO_ERROR_IO = 2,         /* file system, format, or schema error */
  SAO_ERROR_ARGUMENT = 3    /* invalid call arguments (e.g. NULL) */
} sao_status;

/* Message for the calling thread's most recent failure; empty if none. */
const char* sao_last_error(void);

void sao_string_free(char* s);

/*
 * Writes a paired synthetic dataset (train/valid/test pair and label files
 * plus manifest.json) into out_dir. config_json keys: n_train, n_valid,
 * n_test, len_min, len_max, sigma_t, sigma_r, n_labels, seed.
 */
sao_status sao_dataset_generate(const char* out_dir, const char* config_json);

/*
 * Bootstrap pretraining on the train split of data_dir; writes a checkpoint
 * to out_checkpoint and, when metrics_path is non-NULL, JSON-lines metrics.
 * config_json mirrors the training config (epochs, batch_size, ema_lambda,
 * weights, lr, seed, precision, mask_ratio, grad_clip, encoder, heads).
 */
sao_status sao_pretrain(const char* data_dir, const char* config_json,
                        const char* out_checkpoint, const char* metrics_path);

/*
 * Supervised fine-tuning. mode is one of "vanilla", "tonp", "mixed", "sao";
 * "sao" requires init_checkpoint (a pretraining checkpoint). Writes the
 * fine-tuned model to out_checkpoint.
 */
sao_status sao_finetune(const char* data_dir, const char* mode,
                        const char* init_checkpoint, const char* config_json,
                        const char* out_checkpoint, const char* metrics_path);

/* Opaque handle to a loaded checkpoint (parameters + config). */
typedef struct sao_model sao_model;

sao_status sao_model_load(const char* checkpoint_path, sao_model** out_model);
void sao_model_free(sao_model* model);

/*
 * Evaluates the model's downstream predictions on one split ("train",
 * "valid", or "test") of data_dir, on experimental and predicted structures.
 * *out_report_json receives an evaluation report with fmax/aupr per setting
 * and their gaps (predicted minus experimental).
 */
sao_status sao_model_eval(const sao_model* model, const char* data_dir,
                          const char* split, char** out_report_json);

/*
 * Mean and per-pair distance between l2-normalized pooled embeddings of the
 * two structures of each pair. When dump_path is non-NULL the raw pooled
 * embeddings are written there as JSON lines.
 */
sao_status sao_model_bias(const sao_model* model, const char* data_dir,
                          const char* split, const char* dump_path,
                          char** out_report_json);

/*
 * Per-residue gradient saliency of one label logit for the protein stored as
 * JSON at protein_path. *out_json receives {"id", "label", "saliency": [...]}.
 */
sao_status sao_model_saliency(const sao_model* model, const char* protein_path,
                              int label_index, char** out_json);

/*
 * Parses a PDB file (backbone ATOM records, one protein per chain) and writes
 * each chain as a protein JSON file into out_dir. strict != 0 turns missing
 * backbone atoms into errors instead of dropped residues. *out_ids_json
 * receives a JSON array of the written chain ids (may be NULL if unwanted).
 */
sao_status sao_parse_pdb(const char* pdb_path, const char* out_dir, int strict,
                         char** out_ids_json);

/*
 * Runs one property suite: "frames", "grads", or "equivariance".
 * *out_text receives the per-property report (may be NULL if unwanted);
 * returns SAO_OK when every property passes, SAO_ERROR_VALIDATION otherwise.
 */
sao_status sao_run_check(const char* suite, char** out_text);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* SAO_H_ */
