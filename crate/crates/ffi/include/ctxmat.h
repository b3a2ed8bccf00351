#ifndef CTXMAT_H
#define CTXMAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Which context a Bayes oracle may use.
 */
typedef enum CtxmatContextMode {
  CTXMAT_CONTEXT_MODE_NONE = 0,
  CTXMAT_CONTEXT_MODE_PLACE = 1,
  CTXMAT_CONTEXT_MODE_OBJECT = 2,
  CTXMAT_CONTEXT_MODE_BOTH = 3,
} CtxmatContextMode;

/**
 * Result codes shared by every function of the library.
 */
typedef enum CtxmatStatus {
  CTXMAT_STATUS_OK = 0,
  CTXMAT_STATUS_NULL_POINTER = 1,
  CTXMAT_STATUS_INVALID_ARGUMENT = 2,
  CTXMAT_STATUS_SHAPE = 3,
  CTXMAT_STATUS_FORMAT = 4,
  CTXMAT_STATUS_IO = 5,
  CTXMAT_STATUS_UNKNOWN_LAYER = 6,
  CTXMAT_STATUS_INVARIANT = 7,
  CTXMAT_STATUS_DIVERGED = 8,
  CTXMAT_STATUS_UTF8 = 9,
  CTXMAT_STATUS_PANIC = 10,
} CtxmatStatus;

/**
 * Trained material network.
 */
typedef struct CtxmatNet CtxmatNet;

/**
 * Synthetic world description.
 */
typedef struct CtxmatWorld CtxmatWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call into the library on the same
 * thread.
 */
const char *ctxmat_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ctxmat_version(void);

/**
 * Shannon entropy in nats of a probability vector of length `len`.
 *
 * # Safety
 * `probs` must point to `len` readable doubles and `out` to one writable
 * double.
 */
enum CtxmatStatus ctxmat_entropy(const double *probs, size_t len, double *out);

/**
 * Creates the default synthetic world.
 *
 * # Safety
 * `out` must point to a writable handle slot.
 */
enum CtxmatStatus ctxmat_world_default(struct CtxmatWorld **out);

/**
 * Parses and validates a world from its JSON description.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a writable handle slot.
 */
enum CtxmatStatus ctxmat_world_from_json(const char *json, struct CtxmatWorld **out);

/**
 * # Safety
 * `world` must be a live handle and `out` a writable size slot.
 */
enum CtxmatStatus ctxmat_world_num_materials(const struct CtxmatWorld *world, size_t *out);

/**
 * Exact accuracy of the MAP classifier that sees the texture and the
 * context selected by `mode`.
 *
 * # Safety
 * `world` must be a live handle and `out` a writable double.
 */
enum CtxmatStatus ctxmat_world_bayes_oracle(const struct CtxmatWorld *world,
                                            enum CtxmatContextMode mode,
                                            double *out);

/**
 * Releases a world handle. Null is ignored.
 *
 * # Safety
 * `world` must be null or a handle not yet freed.
 */
void ctxmat_world_free(struct CtxmatWorld *world);

/**
 * Loads a checkpoint written by the `train` command.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable handle slot.
 */
enum CtxmatStatus ctxmat_net_load(const char *path, struct CtxmatNet **out);

/**
 * Number of output classes and context channels the network expects.
 *
 * # Safety
 * `net` must be a live handle; the out-pointers must be writable.
 */
enum CtxmatStatus ctxmat_net_shape(const struct CtxmatNet *net,
                                   size_t *num_materials,
                                   size_t *context_channels);

/**
 * Dense class probabilities for one image.
 *
 * `image` holds `channels·height·width` doubles in channel-major order.
 * `context` holds `context_channels·height·width` doubles and may be null
 * when the network takes no context. `probs` receives
 * `num_materials·height·width` doubles; `probs_len` is its capacity.
 *
 * # Safety
 * Every non-null pointer must cover the lengths given above.
 */
enum CtxmatStatus ctxmat_net_predict(const struct CtxmatNet *net,
                                     const double *image,
                                     size_t channels,
                                     size_t height,
                                     size_t width,
                                     const double *context,
                                     size_t context_channels,
                                     double *probs,
                                     size_t probs_len);

/**
 * Releases a network handle. Null is ignored.
 *
 * # Safety
 * `net` must be null or a handle not yet freed.
 */
void ctxmat_net_free(struct CtxmatNet *net);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTXMAT_H */
