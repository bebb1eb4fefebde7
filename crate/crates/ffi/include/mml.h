#ifndef MML_H
#define MML_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum MmlStatus {
  MML_STATUS_OK = 0,
  MML_STATUS_NULL_POINTER = 1,
  MML_STATUS_UTF8_ERROR = 2,
  MML_STATUS_CONFIG_ERROR = 3,
  MML_STATUS_DATA_ERROR = 4,
  MML_STATUS_DIVERGENCE = 5,
  MML_STATUS_IO_ERROR = 6,
} MmlStatus;

/**
 * Opaque trained-model handle.
 */
typedef struct MmlCheckpoint MmlCheckpoint;

/**
 * Opaque dataset handle.
 */
typedef struct MmlDataset MmlDataset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Crate version as a static string.
 */
const char *mml_version(void);

/**
 * Message for the most recent error on this thread; empty if none.
 * Borrowed; valid until the next failing call on the same thread.
 */
const char *mml_last_error(void);

/**
 * Generate a long-tailed synthetic dataset from a TOML spec (the fields of
 * the config file's `[data]` section).
 *
 * # Safety
 * `spec_toml` must be a valid NUL-terminated string; `out` must be a valid
 * pointer to a handle slot.
 */
enum MmlStatus mml_dataset_generate(const char *spec_toml, struct MmlDataset **out);

/**
 * Load a JSON-Lines dataset file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` a valid slot.
 */
enum MmlStatus mml_dataset_load(const char *path, struct MmlDataset **out);

/**
 * Write a dataset back out as JSON-Lines.
 *
 * # Safety
 * `dataset` must be a live handle; `path` a valid string.
 */
enum MmlStatus mml_dataset_save(const struct MmlDataset *dataset, const char *path);

/**
 * Number of samples; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
uintptr_t mml_dataset_len(const struct MmlDataset *dataset);

/**
 * Number of classes; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
uintptr_t mml_dataset_num_classes(const struct MmlDataset *dataset);

/**
 * Input dimensionality; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
void mml_dataset_free(struct MmlDataset *dataset);

/**
 * Train on a dataset. `config_toml` holds the fields of the config file's
 * `[train]` section plus a nested `model` table (the `[model]` section).
 *
 * # Safety
 * `config_toml` must be a valid string, `dataset` a live handle, `out` a
 * valid slot.
 */
enum MmlStatus mml_train(const char *config_toml,
                         const struct MmlDataset *dataset,
                         struct MmlCheckpoint **out);

/**
 * Persist a checkpoint as JSON.
 *
 * # Safety
 * `checkpoint` must be a live handle; `path` a valid string.
 */
enum MmlStatus mml_checkpoint_save(const struct MmlCheckpoint *checkpoint, const char *path);

/**
 * Load a checkpoint from JSON.
 *
 * # Safety
 * `path` must be a valid string; `out` a valid slot.
 */
enum MmlStatus mml_checkpoint_load(const char *path, struct MmlCheckpoint **out);

/**
 * Embedding dimensionality of the checkpoint's backbone; 0 for null or an
 * unreadable checkpoint.
 *
 * # Safety
 * `checkpoint` must be null or a live handle.
 */
uintptr_t mml_checkpoint_embed_dim(const struct MmlCheckpoint *checkpoint);

/**
 * # Safety
 * `checkpoint` must be null or a live handle.
 */
void mml_checkpoint_free(struct MmlCheckpoint *checkpoint);

/**
 * Run the backbone over `rows` input vectors of length `input_dim`, laid
 * out row-major in `inputs`. Writes `rows * embed_dim` values into `out`,
 * row-major. `out_len` must be at least that large.
 *
 * # Safety
 * `checkpoint` must be a live handle; `inputs` valid for `rows * input_dim`
 * reads; `out` valid for `out_len` writes.
 */
enum MmlStatus mml_embed(const struct MmlCheckpoint *checkpoint,
                         const double *inputs,
                         uintptr_t rows,
                         uintptr_t input_dim,
                         double *out,
                         uintptr_t out_len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MML_H */
