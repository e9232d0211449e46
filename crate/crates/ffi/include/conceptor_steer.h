#ifndef CONCEPTOR_STEER_H
#define CONCEPTOR_STEER_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum CsStatus {
  CS_STATUS_OK = 0,
  CS_STATUS_NULL_POINTER = 1,
  CS_STATUS_INVALID_ARGUMENT = 2,
  CS_STATUS_FORMAT = 3,
  CS_STATUS_DIMENSION = 4,
  CS_STATUS_DATA = 5,
  CS_STATUS_NUMERIC = 6,
  CS_STATUS_IO = 7,
  CS_STATUS_PANIC = 8,
} CsStatus;

/**
 * Activation bundle handle.
 */
typedef struct CsBundle CsBundle;

/**
 * Fitted or composed conceptor handle.
 */
typedef struct CsConceptor CsConceptor;

/**
 * Steering plan handle.
 */
typedef struct CsPlan CsPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *cs_last_error(void);

/**
 * Static, NUL-terminated library version.
 */
const char *cs_version(void);

enum CsStatus cs_bundle_load(const char *path, struct CsBundle **out);

enum CsStatus cs_bundle_save(const struct CsBundle *bundle, const char *path);

/**
 * Row count, or 0 for a null handle.
 */
size_t cs_bundle_rows(const struct CsBundle *bundle);

/**
 * Hidden width, or 0 for a null handle.
 */
size_t cs_bundle_dim(const struct CsBundle *bundle);

/**
 * Copies the row-major `rows × dim` payload into `out` (`len` floats).
 */
enum CsStatus cs_bundle_copy_data(const struct CsBundle *bundle, float *out, size_t len);

void cs_bundle_free(struct CsBundle *bundle);

/**
 * Fits a conceptor on every row of the bundle.
 */
enum CsStatus cs_conceptor_fit(const struct CsBundle *bundle,
                               double alpha,
                               struct CsConceptor **out);

enum CsStatus cs_conceptor_load(const char *path, struct CsConceptor **out);

enum CsStatus cs_conceptor_save(const struct CsConceptor *c, const char *path);

size_t cs_conceptor_dim(const struct CsConceptor *c);

/**
 * `tr(C) / d`.
 */
enum CsStatus cs_conceptor_quota(const struct CsConceptor *c, double *out);

enum CsStatus cs_conceptor_trace(const struct CsConceptor *c, double *out);

/**
 * Re-gates a fitted conceptor at a new aperture. Composed conceptors have
 * no aperture and yield `CS_STATUS_INVALID_ARGUMENT`.
 */
enum CsStatus cs_conceptor_regate(const struct CsConceptor *c,
                                  double alpha,
                                  struct CsConceptor **out);

/**
 * Copies the dense `d × d` matrix, row-major, into `out` (`len = d·d`).
 */
enum CsStatus cs_conceptor_copy_matrix(const struct CsConceptor *c, double *out, size_t len);

/**
 * Copies the Boolean expression text, NUL-terminated, into `out` of
 * capacity `len`. `needed` receives the required capacity including NUL.
 */
enum CsStatus cs_conceptor_expression(const struct CsConceptor *c,
                                      char *out,
                                      size_t len,
                                      size_t *needed);

void cs_conceptor_free(struct CsConceptor *c);

/**
 * `I − C`.
 */
enum CsStatus cs_conceptor_not(const struct CsConceptor *c, struct CsConceptor **out);

enum CsStatus cs_conceptor_and(const struct CsConceptor *a,
                               const struct CsConceptor *b,
                               struct CsConceptor **out);

enum CsStatus cs_conceptor_or(const struct CsConceptor *a,
                              const struct CsConceptor *b,
                              struct CsConceptor **out);

/**
 * `a ∧ ¬b`.
 */
enum CsStatus cs_conceptor_and_not(const struct CsConceptor *a,
                                   const struct CsConceptor *b,
                                   struct CsConceptor **out);

enum CsStatus cs_plan_load(const char *path, struct CsPlan **out);

enum CsStatus cs_plan_save(const struct CsPlan *plan, const char *path);

size_t cs_plan_dim(const struct CsPlan *plan);

/**
 * Target layer of the plan, or `u32::MAX` for a null handle.
 */
uint32_t cs_plan_layer(const struct CsPlan *plan);

/**
 * Steers a row-major `tokens × dim` float buffer. `input` and `out` may
 * alias.
 */
enum CsStatus cs_plan_apply(const struct CsPlan *plan,
                            const float *input,
                            size_t tokens,
                            size_t dim,
                            float *out);

void cs_plan_free(struct CsPlan *plan);

/**
 * Fraction of the `n` pairs with `steered[i] > base[i]`.
 */
enum CsStatus cs_win_ratio(const double *base, const double *steered, size_t n, double *out);

/**
 * Mean-length ratio of `n` steered/base generations and whether it exceeds
 * `threshold`.
 */
enum CsStatus cs_degeneracy(const uint64_t *base_len,
                            const uint64_t *steered_len,
                            size_t n,
                            double threshold,
                            double *ratio,
                            bool *degenerate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONCEPTOR_STEER_H */
