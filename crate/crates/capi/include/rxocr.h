/* C interface to the medicine-name extraction pipeline. */

#ifndef RXOCR_H
#define RXOCR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every binding call.
 */
typedef enum RxStatus {
  RxOk = 0,
  /**
   * A required pointer argument was null.
   */
  RxNullPointer = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  RxBadUtf8 = 2,
  /**
   * The operating system refused a read or write.
   */
  RxIo = 3,
  /**
   * A weight, lexicon, or image file was malformed.
   */
  RxBadFormat = 4,
  /**
   * Anything else: bad configuration, shapes, or ranges.
   */
  RxInvalid = 5,
  /**
   * The library caught an internal panic; state is still consistent.
   */
  RxPanic = 6,
} RxStatus;

/**
 * Loaded lexicon handle; create with `rxocr_lexicon_load`, release with
 * `rxocr_lexicon_free`.
 */
typedef struct RxLexicon RxLexicon;

/**
 * One match decision. `stage` is 0 when rejected, 1 for the
 * edit-distance stage, 2 for the fuzzy fallback. `outcome` is the
 * accepted entry or the sentinel "no"; free it with `rxocr_string_free`.
 */
typedef struct RxMatch {
  double s_l;
  double s_f;
  int32_t stage;
  char *outcome;
} RxMatch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Never null; empty
 * before any failure. Valid until the next failing call on this thread.
 */
const char *rxocr_last_error(void);

/**
 * Library version as a static string; do not free.
 */
const char *rxocr_version(void);

/**
 * Release a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must have come from this library and not been freed before.
 */
void rxocr_string_free(char *s);

/**
 * Load a lexicon file (one name per line, `#` comments allowed).
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be a valid slot.
 */
enum RxStatus rxocr_lexicon_load(const char *path, struct RxLexicon **out);

/**
 * Release a lexicon handle. Null is a no-op.
 *
 * # Safety
 * `lex` must have come from `rxocr_lexicon_load` and not been freed.
 */
void rxocr_lexicon_free(struct RxLexicon *lex);

/**
 * Number of entries in the lexicon.
 *
 * # Safety
 * `lex` must be a live handle; `out` must be a valid slot.
 */
enum RxStatus rxocr_lexicon_len(const struct RxLexicon *lex, uintptr_t *out);

/**
 * Edit distance between two strings, by Unicode scalar.
 *
 * # Safety
 * `a` and `b` must be NUL-terminated; `out` must be a valid slot.
 */
enum RxStatus rxocr_levenshtein(const char *a, const char *b, uintptr_t *out);

/**
 * Edit-distance similarity on the 0..=100 scale.
 *
 * # Safety
 * `a` and `b` must be NUL-terminated; `out` must be a valid slot.
 */
enum RxStatus rxocr_similarity(const char *a, const char *b, double *out);

/**
 * Matching-block similarity on the 0..=100 scale.
 *
 * # Safety
 * `a` and `b` must be NUL-terminated; `out` must be a valid slot.
 */
enum RxStatus rxocr_fuzzy_ratio(const char *a, const char *b, double *out);

/**
 * Character error rate of `hypothesis` against `reference`.
 * Fails with `RxInvalid` when the reference is empty.
 *
 * # Safety
 * Both strings must be NUL-terminated; `out` must be a valid slot.
 */
enum RxStatus rxocr_cer(const char *reference, const char *hypothesis, double *out);

/**
 * Match a query against the lexicon with the two-stage rule. On success
 * the caller owns `out.outcome`.
 *
 * # Safety
 * `lex` must be a live handle, `query` NUL-terminated, `out` a valid slot.
 */
enum RxStatus rxocr_decide(const struct RxLexicon *lex,
                           const char *query,
                           double t_l,
                           double t_f,
                           struct RxMatch *out);

/**
 * Run the whole pipeline from a JSON configuration (the same schema the
 * CLI accepts) and hand back the rendered JSON report. The caller owns
 * `out_report`. Per-image failures are listed inside the report; only
 * configuration or I/O problems fail the call.
 *
 * # Safety
 * `config_json` must be NUL-terminated; `out_report` must be a valid slot.
 */
enum RxStatus rxocr_pipeline_run(const char *config_json, char **out_report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RXOCR_H */
