#ifndef NULLMOE_H
#define NULLMOE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes returned by every fallible function.
 */
typedef enum nullmoe_status {
  NULLMOE_STATUS_OK = 0,
  NULLMOE_STATUS_NULL_POINTER = 1,
  NULLMOE_STATUS_INVALID_ARGUMENT = 2,
  NULLMOE_STATUS_SHAPE = 3,
  NULLMOE_STATUS_CHECKPOINT = 4,
  NULLMOE_STATUS_IO = 5,
  NULLMOE_STATUS_NON_FINITE = 6,
  NULLMOE_STATUS_PANIC = 7,
} nullmoe_status;

/*
 Null-slot behaviour, mirroring the core's variants.
 */
typedef enum nullmoe_variant {
  NULLMOE_VARIANT_ZERO = 0,
  NULLMOE_VARIANT_COPY = 1,
} nullmoe_variant;

/*
 Opaque model handle.
 */
typedef struct nullmoe_model nullmoe_model;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failure on this thread, or null if none. The
 pointer stays valid until the next failing call on the same thread.
 */
const char *nullmoe_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *nullmoe_version(void);

/*
 Creates a randomly initialised model.

 # Safety
 `out` must point to writable storage for one handle pointer.
 */
enum nullmoe_status nullmoe_model_create(size_t n_experts,
                                         size_t k_max,
                                         double rho,
                                         enum nullmoe_variant variant,
                                         size_t d_model,
                                         size_t d_hidden,
                                         size_t n_layers,
                                         bool use_shared_expert,
                                         uint64_t seed,
                                         struct nullmoe_model **out);

/*
 Loads a checkpoint file.

 # Safety
 `path` must be a NUL-terminated string; `out` as in [`nullmoe_model_create`].
 */
enum nullmoe_status nullmoe_model_load(const char *path, struct nullmoe_model **out);

/*
 Writes a checkpoint file.

 # Safety
 `model` must be a live handle; `path` a NUL-terminated string.
 */
enum nullmoe_status nullmoe_model_save(const struct nullmoe_model *model, const char *path);

/*
 Releases a handle. Null is ignored.

 # Safety
 `model` must be null or a handle not yet freed.
 */
void nullmoe_model_free(struct nullmoe_model *model);

/*
 Model dimensions: any output pointer may be null to skip it.

 # Safety
 `model` must be a live handle; non-null outputs must be writable.
 */
enum nullmoe_status nullmoe_model_dims(const struct nullmoe_model *model,
                                       size_t *n_experts,
                                       size_t *null_copies,
                                       size_t *k_max,
                                       size_t *d_model,
                                       size_t *n_layers);

/*
 Runs the residual stack on `x` (`n_tokens × d_model`, row-major) and
 writes the output, same shape, to `out`.

 # Safety
 `x` and `out` must each hold `n_tokens * d_model` doubles.
 */
enum nullmoe_status nullmoe_model_forward(const struct nullmoe_model *model,
                                          const double *x,
                                          size_t n_tokens,
                                          size_t d_model,
                                          double *out);

/*
 Routing decisions of layer `layer` during a forward pass of `x`.
 `slots` receives `n_tokens * k_max` slot indices (`< n_experts` are
 real experts, the rest null copies) and `real_counts` the number of
 real experts per token.

 # Safety
 `x` must hold `n_tokens * d_model` doubles, `slots` `n_tokens * k_max`
 entries and `real_counts` `n_tokens` entries.
 */
enum nullmoe_status nullmoe_model_route(const struct nullmoe_model *model,
                                        size_t layer,
                                        const double *x,
                                        size_t n_tokens,
                                        size_t d_model,
                                        uint32_t *slots,
                                        uint32_t *real_counts);

/*
 Per-token compute score: mean over layers of real experts / k_max.

 # Safety
 `x` must hold `n_tokens * d_model` doubles and `scores` `n_tokens`.
 */
enum nullmoe_status nullmoe_model_compute_scores(const struct nullmoe_model *model,
                                                 const double *x,
                                                 size_t n_tokens,
                                                 size_t d_model,
                                                 double *scores);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NULLMOE_H */
