#ifndef SBID_FFI_H
#define SBID_FFI_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 Status codes returned by every fallible function.
 */
typedef enum SbidStatus {
  SBID_STATUS_OK = 0,
  SBID_STATUS_NULL_POINTER = 1,
  SBID_STATUS_INVALID_PARAMETER = 2,
  SBID_STATUS_DIMENSION_MISMATCH = 3,
  SBID_STATUS_NON_FINITE = 4,
  SBID_STATUS_SINGULAR = 5,
  /*
   Bad magic, unsupported version, truncated or corrupt buffer.
   */
  SBID_STATUS_FORMAT = 6,
  SBID_STATUS_IO = 7,
  SBID_STATUS_PANIC = 8,
  SBID_STATUS_OTHER = 9,
} SbidStatus;

/*
 Secret key plus the parameters and randomness source of its holder.
 */
typedef struct SbidKey SbidKey;

/*
 An enrolled (transformed) template.
 */
typedef struct SbidTemplate SbidTemplate;

/*
 A single-use query token.
 */
typedef struct SbidToken SbidToken;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Static description of a status code. Never NULL; unknown codes get a
 generic message.
 */
const char *sbid_status_message(int32_t status);

/*
 Generates a key for templates of dimension `n` and radius `theta`.
 `seed` drives key generation and all later transform/token randomness.

 # Safety
 `out` must be a valid pointer to writable storage for one pointer.
 */
enum SbidStatus sbid_key_generate(size_t n, double theta, uint64_t seed, struct SbidKey **out);

/*
 # Safety
 `key` must be NULL or a pointer from this library not yet freed.
 */
void sbid_key_free(struct SbidKey *key);

/*
 Template dimension of `key`, or 0 when `key` is NULL.

 # Safety
 `key` must be NULL or a live key handle.
 */
size_t sbid_key_dimension(const struct SbidKey *key);

/*
 Serialises the key in the on-disk key format.

 # Safety
 `key` must be a live handle; `out` and `out_len` must be writable.
 */
enum SbidStatus sbid_key_encode(const struct SbidKey *key,
                                bool test_mode,
                                uint8_t **out,
                                size_t *out_len);

/*
 Restores a key from [`sbid_key_encode`] output. The radius is not part
 of the key format and must be supplied again; `seed` reseeds the
 transform/token randomness.

 # Safety
 `buf` must point to `len` readable bytes; `out` must be writable.
 */
enum SbidStatus sbid_key_decode(const uint8_t *buf,
                                size_t len,
                                double theta,
                                uint64_t seed,
                                struct SbidKey **out);

/*
 Transforms the template `features[0..n]` for enrollment under `id`.

 # Safety
 `key` must be a live handle, `features` must point to `n` doubles and
 `out` must be writable.
 */
enum SbidStatus sbid_transform(struct SbidKey *key,
                               uint64_t id,
                               const double *features,
                               size_t n,
                               struct SbidTemplate **out);

/*
 Produces a query token for `features[0..n]`.

 # Safety
 As for [`sbid_transform`].
 */
enum SbidStatus sbid_token_gen(struct SbidKey *key,
                               const double *features,
                               size_t n,
                               struct SbidToken **out);

/*
 Writes 1 to `matched` when the template lies within the radius of the
 token's query, else 0.

 # Safety
 Both handles must be live; `matched` must be writable.
 */
enum SbidStatus sbid_evaluate(const struct SbidTemplate *template_,
                              const struct SbidToken *token,
                              uint8_t *matched);

/*
 # Safety
 `template` must be a live handle; `id` must be writable.
 */
enum SbidStatus sbid_template_id(const struct SbidTemplate *template_, uint64_t *id);

/*
 Serialises a template as one database record.

 # Safety
 `template` must be a live handle; `out` and `out_len` must be writable.
 */
enum SbidStatus sbid_template_encode(const struct SbidTemplate *template_,
                                     uint8_t **out,
                                     size_t *out_len);

/*
 # Safety
 `buf` must point to `len` readable bytes; `out` must be writable.
 */
enum SbidStatus sbid_template_decode(const uint8_t *buf,
                                     size_t len,
                                     size_t n,
                                     struct SbidTemplate **out);

/*
 # Safety
 `template` must be NULL or a live handle.
 */
void sbid_template_free(struct SbidTemplate *template_);

/*
 Serialises a token in the token file format.

 # Safety
 `token` must be a live handle; `out` and `out_len` must be writable.
 */
enum SbidStatus sbid_token_encode(const struct SbidToken *token,
                                  bool test_mode,
                                  uint8_t **out,
                                  size_t *out_len);

/*
 # Safety
 `buf` must point to `len` readable bytes; `out` must be writable.
 */
enum SbidStatus sbid_token_decode(const uint8_t *buf, size_t len, struct SbidToken **out);

/*
 # Safety
 `token` must be NULL or a live handle.
 */
void sbid_token_free(struct SbidToken *token);

/*
 Releases a buffer returned by one of the `*_encode` functions.

 # Safety
 `buf`/`len` must be exactly as returned, and not yet freed.
 */
void sbid_buffer_free(uint8_t *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SBID_FFI_H */
