#ifndef ECGSYN_H
#define ECGSYN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EcgsynStatus {
  ECGSYN_STATUS_OK = 0,
  ECGSYN_STATUS_NULL_POINTER = 1,
  ECGSYN_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad argument, configuration or input data.
   */
  ECGSYN_STATUS_INVALID = 3,
  ECGSYN_STATUS_IO = 4,
  /**
   * Malformed file contents, checkpoint version or checksum.
   */
  ECGSYN_STATUS_FORMAT = 5,
  ECGSYN_STATUS_NUMERIC = 6,
  ECGSYN_STATUS_INDEX_OUT_OF_RANGE = 7,
  ECGSYN_STATUS_BUFFER_TOO_SMALL = 8,
  ECGSYN_STATUS_RUNTIME = 9,
  ECGSYN_STATUS_PANIC = 10,
} EcgsynStatus;

/**
 * Opaque dataset handle.
 */
typedef struct EcgsynDataset EcgsynDataset;

/**
 * Opaque generator handle.
 */
typedef struct EcgsynGenerator EcgsynGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ecgsyn_version(void);

/**
 * Copies the last error message of the calling thread into `buf`.
 * `needed` (may be null) receives the size including the NUL.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes; `needed` must be null or valid.
 */
enum EcgsynStatus ecgsyn_last_error(char *buf, size_t cap, size_t *needed);

/**
 * Generates a fixture dataset. `classes` is a comma-separated list of class
 * codes, or null for all seven.
 *
 * # Safety
 * `classes` must be null or a NUL-terminated string; `out` must be valid.
 */
enum EcgsynStatus ecgsyn_fixture(const char *classes,
                                 size_t per_class,
                                 double fs,
                                 double seconds,
                                 size_t leads,
                                 uint64_t seed,
                                 struct EcgsynDataset **out);

/**
 * Loads a dataset directory (WFDB records plus `labels.csv`).
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be valid.
 */
enum EcgsynStatus ecgsyn_dataset_load(const char *dir, struct EcgsynDataset **out);

/**
 * # Safety
 * `ds` must come from this library; `dir` must be a NUL-terminated string.
 */
enum EcgsynStatus ecgsyn_dataset_save(const struct EcgsynDataset *ds, const char *dir);

/**
 * Number of records, 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or come from this library.
 */
size_t ecgsyn_dataset_len(const struct EcgsynDataset *ds);

/**
 * Shape and class of record `index`. `class_id` follows the order
 * SBRAD, SR, AFIB, STACH, AFLT, SARRH, SVTAC.
 *
 * # Safety
 * `ds` must come from this library; the out pointers must be valid.
 */
enum EcgsynStatus ecgsyn_dataset_record_info(const struct EcgsynDataset *ds,
                                             size_t index,
                                             size_t *leads,
                                             size_t *samples,
                                             uint32_t *class_id,
                                             double *fs);

/**
 * Copies the signal of record `index`, lead-major, into `buf`.
 *
 * # Safety
 * `buf` must be valid for `cap` doubles.
 */
enum EcgsynStatus ecgsyn_dataset_signal(const struct EcgsynDataset *ds,
                                        size_t index,
                                        double *buf,
                                        size_t cap);

/**
 * # Safety
 * `ds` must be null or come from this library, and is invalid afterwards.
 */
void ecgsyn_dataset_free(struct EcgsynDataset *ds);

/**
 * Loads a generator checkpoint of any family.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum EcgsynStatus ecgsyn_generator_load(const char *path, struct EcgsynGenerator **out);

/**
 * Copies the generator name into `buf`.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes; `needed` must be null or valid.
 */
enum EcgsynStatus ecgsyn_generator_name(const struct EcgsynGenerator *g,
                                        char *buf,
                                        size_t cap,
                                        size_t *needed);

/**
 * Draws `per_class` records of each class in `classes` (comma-separated
 * codes, null for all seven) into a new dataset.
 *
 * # Safety
 * `g` must come from this library; `classes` must be null or a
 * NUL-terminated string; `out` must be valid.
 */
enum EcgsynStatus ecgsyn_generator_sample(const struct EcgsynGenerator *g,
                                          const char *classes,
                                          size_t per_class,
                                          double fs,
                                          uint64_t seed,
                                          struct EcgsynDataset **out);

/**
 * # Safety
 * `g` must be null or come from this library, and is invalid afterwards.
 */
void ecgsyn_generator_free(struct EcgsynGenerator *g);

/**
 * Unbiased squared MMD with an RBF kernel. A `bandwidth` of 0 or less uses
 * the median pairwise distance; the width used is written to
 * `bandwidth_used` when that is not null.
 *
 * # Safety
 * `x` and `y` must come from this library; `value` must be valid.
 */
enum EcgsynStatus ecgsyn_mmd(const struct EcgsynDataset *x,
                             const struct EcgsynDataset *y,
                             double bandwidth,
                             double *value,
                             double *bandwidth_used);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ECGSYN_H */
