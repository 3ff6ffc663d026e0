#ifndef COLDREC_H
#define COLDREC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum ColdrecStatus {
  COLDREC_STATUS_OK = 0,
  COLDREC_STATUS_NULL_ARGUMENT = 1,
  COLDREC_STATUS_INVALID_UTF8 = 2,
  COLDREC_STATUS_OUT_OF_RANGE = 3,
  COLDREC_STATUS_BUFFER_TOO_SMALL = 4,
  COLDREC_STATUS_IO = 5,
  COLDREC_STATUS_CONFIG = 6,
  COLDREC_STATUS_CONTRACT = 7,
  COLDREC_STATUS_DIMENSION = 8,
  COLDREC_STATUS_UNDEFINED_METRIC = 9,
  COLDREC_STATUS_FORMAT = 10,
  COLDREC_STATUS_MISSING_ARTIFACT = 11,
  COLDREC_STATUS_CONFIG_HASH_MISMATCH = 12,
  COLDREC_STATUS_TRAINING = 13,
  COLDREC_STATUS_PANIC = 14,
} ColdrecStatus;

/*
 Frozen item embedding table.
 */
typedef struct ColdrecEmbeddings ColdrecEmbeddings;

/*
 A configured pipeline rooted at its `out_dir`.
 */
typedef struct ColdrecPipeline ColdrecPipeline;

/*
 A decoded tensor file (checkpoint or embedding table).
 */
typedef struct ColdrecTensorFile ColdrecTensorFile;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the calling thread's last error message (NUL-terminated) into
 `buf`, truncating to `cap` bytes. Returns the untruncated length including
 the terminator, or 0 when the last call succeeded.

 # Safety
 `buf` must be NULL or point to `cap` writable bytes.
 */
size_t coldrec_last_error(char *buf, size_t cap);

/*
 Rank-based AUC with tied scores sharing their average rank. `labels` are
 0/1 bytes (any nonzero byte counts as a click).

 # Safety
 `scores` and `labels` must point to `n` readable elements, `out` to one
 writable double.
 */
enum ColdrecStatus coldrec_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/*
 Reads a tensor file written by the pipeline.

 # Safety
 `path` must be a NUL-terminated string, `out` a writable pointer.
 */
enum ColdrecStatus coldrec_tensors_open(const char *path, struct ColdrecTensorFile **out);

/*
 # Safety
 `file` must be NULL or a handle from `coldrec_tensors_open` not yet freed.
 */
void coldrec_tensors_free(struct ColdrecTensorFile *file);

/*
 # Safety
 `file` must be a live handle, `out` a writable pointer.
 */
enum ColdrecStatus coldrec_tensors_count(const struct ColdrecTensorFile *file, size_t *out);

/*
 Name of tensor `index`; the pointer stays valid until the handle is freed.

 # Safety
 `file` must be a live handle, `out` a writable pointer.
 */
enum ColdrecStatus coldrec_tensors_name(const struct ColdrecTensorFile *file,
                                        size_t index,
                                        const char **out);

/*
 Shape of tensor `index` into `dims[..cap]`; `rank` receives its length.

 # Safety
 `file` must be a live handle, `dims` must hold `cap` elements, `rank` must
 be NULL or writable.
 */
enum ColdrecStatus coldrec_tensors_shape(const struct ColdrecTensorFile *file,
                                         size_t index,
                                         size_t *dims,
                                         size_t cap,
                                         size_t *rank);

/*
 Row-major values of tensor `index` into `buf[..cap]`; `len` receives the
 element count.

 # Safety
 `file` must be a live handle, `buf` must hold `cap` doubles, `len` must be
 NULL or writable.
 */
enum ColdrecStatus coldrec_tensors_data(const struct ColdrecTensorFile *file,
                                        size_t index,
                                        double *buf,
                                        size_t cap,
                                        size_t *len);

/*
 Loads `<dir>/<stem>.savior` with its index, e.g. the encode stage's
 `embedding`.

 # Safety
 `dir` and `stem` must be NUL-terminated strings, `out` a writable pointer.
 */
enum ColdrecStatus coldrec_embeddings_open(const char *dir,
                                           const char *stem,
                                           struct ColdrecEmbeddings **out);

/*
 # Safety
 `emb` must be NULL or a handle from `coldrec_embeddings_open` not yet
 freed.
 */
void coldrec_embeddings_free(struct ColdrecEmbeddings *emb);

/*
 Item count and embedding width.

 # Safety
 `emb` must be a live handle; `items` and `dim` must be NULL or writable.
 */
enum ColdrecStatus coldrec_embeddings_size(const struct ColdrecEmbeddings *emb,
                                           size_t *items,
                                           size_t *dim);

/*
 Copies the embedding of `item` into `buf[..cap]`.

 # Safety
 `emb` must be a live handle and `buf` must hold `cap` doubles.
 */
enum ColdrecStatus coldrec_embeddings_get(const struct ColdrecEmbeddings *emb,
                                          uint32_t item,
                                          double *buf,
                                          size_t cap);

/*
 Builds a pipeline from an optional TOML config with optional overrides.
 NULL `config_path` uses the built-in defaults, NULL `out_dir` keeps the
 configured directory, a negative `seed` keeps the configured seed.

 # Safety
 String arguments must be NULL or NUL-terminated, `out` a writable pointer.
 */
enum ColdrecStatus coldrec_pipeline_new(const char *config_path,
                                        const char *out_dir,
                                        int64_t seed,
                                        bool force,
                                        struct ColdrecPipeline **out);

/*
 # Safety
 `p` must be NULL or a handle from `coldrec_pipeline_new` not yet freed.
 */
void coldrec_pipeline_free(struct ColdrecPipeline *p);

/*
 Selects the ablation tag used by `rank`, `eval` and `run-all`.

 # Safety
 `p` must be a live handle and `tag` a NUL-terminated string.
 */
enum ColdrecStatus coldrec_pipeline_set_ablation(struct ColdrecPipeline *p, const char *tag);

/*
 Runs one stage by CLI name: gen, encode, quantize, rank, eval, ablate,
 sweep-dims or run-all. Up-to-date stages are skipped.

 # Safety
 `p` must be a live handle and `stage` a NUL-terminated string.
 */
enum ColdrecStatus coldrec_pipeline_run(const struct ColdrecPipeline *p, const char *stage);

/*
 Full report of the selected ablation as JSON, copied NUL-terminated into
 `buf[..cap]`; `len` receives the size needed including the terminator.

 # Safety
 `p` must be a live handle, `buf` must hold `cap` bytes, `len` must be NULL
 or writable.
 */
enum ColdrecStatus coldrec_pipeline_report_json(const struct ColdrecPipeline *p,
                                                char *buf,
                                                size_t cap,
                                                size_t *len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COLDREC_H */
