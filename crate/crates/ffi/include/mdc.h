#ifndef MDC_H
#define MDC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum MdcStatus {
  MDC_STATUS_OK = 0,
  MDC_STATUS_NULL_POINTER = 1,
  MDC_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Argument outside the domain of the function, such as `t` outside `[0, 1]`.
   */
  MDC_STATUS_DOMAIN = 3,
  MDC_STATUS_NUMERIC = 4,
  MDC_STATUS_IO = 5,
  /**
   * Bad magic, version, checksum or metadata.
   */
  MDC_STATUS_CHECKPOINT = 6,
  MDC_STATUS_BUFFER_TOO_SMALL = 7,
  MDC_STATUS_PANIC = 8,
} MdcStatus;

/**
 * Trained model restored from a checkpoint; sampling uses the EMA parameters.
 */
typedef struct MdcModel MdcModel;

/**
 * Masking schedule `α_t` with its endpoint shift.
 */
typedef struct MdcSchedule MdcSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mdc_version(void);

/**
 * Message of the last failure on this thread, or NULL if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *mdc_last_error(void);

/**
 * Parses a schedule spec such as `linear`, `cosine@0.0001` or `geometric:1e-5:20`.
 *
 * # Safety
 * `spec` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MdcStatus mdc_schedule_parse(const char *spec, struct MdcSchedule **out);

/**
 * # Safety
 * `schedule` must be NULL or a handle from [`mdc_schedule_parse`] not yet freed.
 */
void mdc_schedule_free(struct MdcSchedule *schedule);

/**
 * `α_t` for `t` in `[0, 1]`.
 *
 * # Safety
 * `schedule` must be a live handle and `out` a writable pointer.
 */
enum MdcStatus mdc_schedule_alpha(const struct MdcSchedule *schedule, double t, double *out);

/**
 * `dα/dt`.
 *
 * # Safety
 * `schedule` must be a live handle and `out` a writable pointer.
 */
enum MdcStatus mdc_schedule_alpha_prime(const struct MdcSchedule *schedule, double t, double *out);

/**
 * Cross-entropy weight `α′_t/(1 − α_t)`; fails at `t = 0` where it diverges.
 *
 * # Safety
 * `schedule` must be a live handle and `out` a writable pointer.
 */
enum MdcStatus mdc_schedule_ce_weight(const struct MdcSchedule *schedule, double t, double *out);

/**
 * `log(α_t/(1 − α_t))`.
 *
 * # Safety
 * `schedule` must be a live handle and `out` a writable pointer.
 */
enum MdcStatus mdc_schedule_log_snr(const struct MdcSchedule *schedule, double t, double *out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MdcStatus mdc_model_load(const char *path, struct MdcModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`mdc_model_load`] not yet freed.
 */
void mdc_model_free(struct MdcModel *model);

/**
 * Number of clean token values `m`; the mask id is `m`.
 *
 * # Safety
 * `model` must be a live handle and `out` a writable pointer.
 */
enum MdcStatus mdc_model_vocab_size(const struct MdcModel *model, size_t *out);

/**
 * Sequence length fixed by the model, or 0 when any length is accepted.
 *
 * # Safety
 * `model` must be a live handle and `out` a writable pointer.
 */
enum MdcStatus mdc_model_seq_len(const struct MdcModel *model, size_t *out);

/**
 * Per-token reconstruction and prior terms of the negative ELBO, in nats,
 * for models with a scalar schedule.
 *
 * # Safety
 * `model` must be a live handle; `reconstruction` and `prior` writable pointers.
 */
enum MdcStatus mdc_model_boundary_terms(const struct MdcModel *model,
                                        double t_min,
                                        double *reconstruction,
                                        double *prior);

/**
 * Draws one clean sequence of `len` tokens into `out_ids` (capacity `cap`)
 * with `steps` ancestral steps. The same `seed` reproduces the same draw.
 *
 * # Safety
 * `model` must be a live handle and `out_ids` must point to `cap` writable `u32`s.
 */
enum MdcStatus mdc_model_sample(const struct MdcModel *model,
                                size_t len,
                                size_t steps,
                                double temperature,
                                uint64_t seed,
                                uint32_t *out_ids,
                                size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDC_H */
