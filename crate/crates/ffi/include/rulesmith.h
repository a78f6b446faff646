#ifndef RULESMITH_H
#define RULESMITH_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RsFormat {
  RS_FORMAT_YARA = 0,
  RS_FORMAT_SEMGREP = 1,
} RsFormat;

typedef enum RsStatus {
  RS_STATUS_OK = 0,
  RS_STATUS_NULL_ARGUMENT = 1,
  RS_STATUS_INVALID_UTF8 = 2,
  /**
   * The rule did not compile; the error list is still written out.
   */
  RS_STATUS_COMPILE_FAILED = 3,
  RS_STATUS_INVALID_ARGUMENT = 4,
  RS_STATUS_INTERNAL = 5,
} RsStatus;

/**
 * Compiled rules ready for scanning.
 */
typedef struct RsRuleSet RsRuleSet;

/**
 * Confusion metrics. Ratios with a zero denominator are NaN.
 */
typedef struct RsMetrics {
  double accuracy;
  double precision;
  double recall;
  double f1;
} RsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *rs_last_error(void);

/**
 * Library version as a static string.
 */
const char *rs_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void rs_string_free(char *s);

/**
 * Compiles `len` bytes of rule text and writes the error list as a JSON
 * array to `*errors_json` (`[]` when the rule compiles). Returns
 * `RS_STATUS_COMPILE_FAILED` when there are errors.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `errors_json` may be null.
 */
enum RsStatus rs_validate(const uint8_t *data,
                          size_t len,
                          enum RsFormat format,
                          char **errors_json);

/**
 * New empty rule set.
 */
struct RsRuleSet *rs_ruleset_new(void);

/**
 * # Safety
 * `set` must come from [`rs_ruleset_new`] and not have been freed. Null is ignored.
 */
void rs_ruleset_free(struct RsRuleSet *set);

/**
 * Compiles a rule and adds it to `set`. On `RS_STATUS_COMPILE_FAILED` the error
 * list is written to `*errors_json` and the set is unchanged.
 *
 * # Safety
 * `set` must be live; `text` a NUL-terminated string; `errors_json` may be null.
 */
enum RsStatus rs_ruleset_add(struct RsRuleSet *set,
                             const char *text,
                             enum RsFormat format,
                             char **errors_json);

/**
 * Number of rules in `set`, 0 for null.
 *
 * # Safety
 * `set` must be live or null.
 */
size_t rs_ruleset_len(const struct RsRuleSet *set);

/**
 * Scans one file and writes `{"matches": [...], "issues": [...]}` to
 * `*result_json`.
 *
 * # Safety
 * `set` must be live; `package` and `path` NUL-terminated; `data` must
 * point to `len` readable bytes; `result_json` must not be null.
 */
enum RsStatus rs_scan(struct RsRuleSet *set,
                      const char *package,
                      const char *path,
                      const uint8_t *data,
                      size_t len,
                      char **result_json);

/**
 * Character-level edit distance.
 *
 * # Safety
 * `a` and `b` must be NUL-terminated; `out` must be writable.
 */
enum RsStatus rs_levenshtein(const char *a, const char *b, size_t *out);

/**
 * Normalized similarity in `[0, 1]`.
 *
 * # Safety
 * `a` and `b` must be NUL-terminated; `out` must be writable.
 */
enum RsStatus rs_similarity(const char *a, const char *b, double *out);

/**
 * Metrics from confusion counts. All-zero counts are `RS_STATUS_INVALID_ARGUMENT`.
 *
 * # Safety
 * `out` must be writable.
 */
enum RsStatus rs_confusion_metrics(uint64_t tp,
                                   uint64_t fp,
                                   uint64_t tn,
                                   uint64_t fn_,
                                   struct RsMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RULESMITH_H */
