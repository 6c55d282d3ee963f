#ifndef SPANPO_H
#define SPANPO_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SP_ALGO_GRPO 0

#define SP_ALGO_GSPO 1

#define SP_ALGO_TSGRPO 2

#define SP_MODE_POSITIONWISE 0

#define SP_MODE_BIGRAM 1

#define SP_GRAMMAR_PLAN_SQL 0

#define SP_GRAMMAR_THINK_ANSWER 1

#define SP_PROFILE_SPIDER 0

#define SP_PROFILE_THINKQUEL 1

/**
 * Number of reward channels, in the order format, sl_table, sl_column,
 * pf_table, pf_column, execution, match.
 */
#define SP_CHANNELS 7

/**
 * Result code of every fallible call.
 */
typedef enum SpStatus {
  SP_STATUS_OK = 0,
  SP_STATUS_NULL_POINTER = 1,
  SP_STATUS_INVALID_INPUT = 2,
  SP_STATUS_CONFIG = 3,
  SP_STATUS_INVARIANT = 4,
  SP_STATUS_NON_FINITE = 5,
  SP_STATUS_TRANSPORT = 6,
  SP_STATUS_PARSE = 7,
  SP_STATUS_IO = 8,
  SP_STATUS_UTF8 = 9,
  SP_STATUS_BUFFER_TOO_SMALL = 10,
  SP_STATUS_PANIC = 11,
} SpStatus;

/**
 * Opaque group of completions under construction.
 */
typedef struct SpBatch SpBatch;

/**
 * Opaque tabular policy.
 */
typedef struct SpPolicy SpPolicy;

/**
 * Objective settings; `algo` is one of the `SP_ALGO_*` constants.
 */
typedef struct SpObjectiveConfig {
  uint32_t algo;
  double eps_ans_low;
  double eps_ans_high;
  double eps_rea_low;
  double eps_rea_high;
  double alpha_ans;
  double alpha_rea;
  double beta_ans;
  double beta_rea;
  bool use_ref_kl;
} SpObjectiveConfig;

typedef struct SpObjectiveSummary {
  double surrogate;
  double kl_ans;
  double kl_rea;
  double clip_fraction_ans;
  double clip_fraction_rea;
} SpObjectiveSummary;

typedef struct SpSpanRewards {
  double r_ans;
  double r_rea;
  double r_total;
  /**
   * Bit `c` is set when channel `c` has nonzero weight but was not present.
   */
  uint32_t missing_mask;
} SpSpanRewards;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sp_version(void);

/**
 * Message for the last failed call on this thread, or null if none.
 * Valid until the next failing call on the same thread.
 */
const char *sp_last_error(void);

/**
 * Group-normalized advantages of `n` rewards, written to `out[0..n]`.
 *
 * # Safety
 * `rewards` and `out` must point to `n` doubles.
 */
enum SpStatus sp_group_normalize(const double *rewards, size_t n, double *out);

double sp_token_ratio(double logp_new, double logp_old);

double sp_clip_asym(double x, double eps_low, double eps_high);

/**
 * Length-normalized sequence ratio over the token positions in `indices`.
 *
 * # Safety
 * `logp_new`/`logp_old` must hold `len` doubles and `indices` `n_indices` entries.
 */
enum SpStatus sp_seq_ratio(const double *logp_new,
                           const double *logp_old,
                           size_t len,
                           const size_t *indices,
                           size_t n_indices,
                           double *out);

/**
 * Creates a policy from a row-major logit table (`rows x vocab`, where rows
 * is the horizon in positionwise mode and the vocabulary size in bigram mode).
 *
 * # Safety
 * `logits` must hold `n_logits` doubles; `out` must be writable.
 */
enum SpStatus sp_policy_new(uint32_t mode,
                            size_t horizon,
                            size_t vocab,
                            uint32_t eos,
                            const double *logits,
                            size_t n_logits,
                            struct SpPolicy **out);

/**
 * Reads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SpStatus sp_policy_load(const char *path, struct SpPolicy **out);

/**
 * Writes a checkpoint file.
 *
 * # Safety
 * `policy` must come from this library; `path` must be a NUL-terminated string.
 */
enum SpStatus sp_policy_save(const struct SpPolicy *policy, const char *path);

/**
 * # Safety
 * `policy` must come from this library and not be used afterwards. Null is a no-op.
 */
void sp_policy_free(struct SpPolicy *policy);

/**
 * Per-token log-probabilities of `tokens` under `policy`.
 *
 * # Safety
 * `tokens` and `out` must hold `n` elements.
 */
enum SpStatus sp_policy_logprob(const struct SpPolicy *policy,
                                const uint32_t *tokens,
                                size_t n,
                                double *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum SpStatus sp_batch_new(struct SpBatch **out);

/**
 * # Safety
 * `batch` must come from this library and not be used afterwards. Null is a no-op.
 */
void sp_batch_free(struct SpBatch *batch);

/**
 * Appends one completion. `logp_ref` may be null. `answer_flags[t]` is
 * nonzero for answer-span tokens; the rest are reasoning.
 *
 * # Safety
 * All arrays must hold `len` elements.
 */
enum SpStatus sp_batch_push(struct SpBatch *batch,
                            const uint32_t *tokens,
                            size_t len,
                            const double *logp_old,
                            const double *logp_new,
                            const double *logp_ref,
                            const uint8_t *answer_flags,
                            double adv_ans,
                            double adv_rea,
                            double adv_total);

/**
 * Members pushed so far, or 0 for null.
 *
 * # Safety
 * `batch` must be null or come from this library.
 */
size_t sp_batch_len(const struct SpBatch *batch);

/**
 * Total tokens over all members: the size `sp_objective_compute` needs for
 * its gradient buffer.
 *
 * # Safety
 * `batch` must be null or come from this library.
 */
size_t sp_batch_total_tokens(const struct SpBatch *batch);

/**
 * Default settings for `algo`.
 *
 * # Safety
 * `out` must be writable.
 */
enum SpStatus sp_objective_config_default(uint32_t algo, struct SpObjectiveConfig *out);

/**
 * Evaluates the objective on the batch. When `token_grad` is non-null it
 * receives `dJ/dlogp_new` for every token, members concatenated in push
 * order; `grad_capacity` must be at least `sp_batch_total_tokens(batch)`.
 *
 * # Safety
 * `batch` and `config` must be valid; `token_grad` null or holding `grad_capacity` doubles.
 */
enum SpStatus sp_objective_compute(const struct SpBatch *batch,
                                   const struct SpObjectiveConfig *config,
                                   struct SpObjectiveSummary *summary,
                                   double *token_grad,
                                   size_t grad_capacity);

/**
 * Aggregates `SP_CHANNELS` channel values under a named profile. `present`
 * may be null (all channels present); otherwise a zero entry marks a channel
 * as not scored.
 *
 * # Safety
 * `channels` (and `present` when non-null) must hold `SP_CHANNELS` elements.
 */
enum SpStatus sp_aggregate(const double *channels,
                           const uint8_t *present,
                           uint32_t profile,
                           struct SpSpanRewards *out);

/**
 * 1.0 when the text has a plan yml block and an answer block, else 0.0.
 *
 * # Safety
 * `text` must be a NUL-terminated UTF-8 string; `out` writable.
 */
enum SpStatus sp_format_reward(const char *text, double *out);

/**
 * Segments `text` given token character ranges (`offsets[2k]`, `offsets[2k+1]`
 * for token k, counted in Unicode scalar values). Writes 1 into
 * `answer_flags[k]` for answer-span tokens and 0 otherwise.
 *
 * # Safety
 * `offsets` must hold `2 * n_tokens` values and `answer_flags` `n_tokens`.
 */
enum SpStatus sp_segment(const char *text,
                         const size_t *offsets,
                         size_t n_tokens,
                         uint32_t grammar,
                         uint8_t *answer_flags);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPANPO_H */
