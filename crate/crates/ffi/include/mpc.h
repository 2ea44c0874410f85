#ifndef MPC_FFI_H
#define MPC_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum MpcStatus {
  MPC_STATUS_OK = 0,
  MPC_STATUS_NULL_ARGUMENT = 1,
  MPC_STATUS_INVALID_ARGUMENT = 2,
  MPC_STATUS_IO = 3,
  MPC_STATUS_PARSE = 4,
  MPC_STATUS_CHECKPOINT = 5,
  // A panic inside the library.
  MPC_STATUS_INTERNAL = 6,
} MpcStatus;

typedef enum MpcTask {
  MPC_TASK_AR = 0,
  MPC_TASK_SI = 1,
  MPC_TASK_RS = 2,
} MpcTask;

// Encoder parameters, vocabulary and optimizer state.
typedef struct MpcCheckpoint MpcCheckpoint;

// Conversations with the vocabulary that encodes them.
typedef struct MpcCorpus MpcCorpus;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread; do not free.
const char *mpc_last_error(void);

// Library version; static, do not free.
const char *mpc_version(void);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void mpc_string_free(char *s);

// Generates a synthetic corpus. `spec_json` holds any generator fields
// (null for defaults); `seed` replaces its seed.
//
// # Safety
// `spec_json` is null or a nul-terminated string; `out` is writable.
enum MpcStatus mpc_corpus_generate(const char *spec_json, uint64_t seed, struct MpcCorpus **out);

// Loads a JSONL corpus. With a checkpoint, its vocabulary encodes the
// text; otherwise a vocabulary of at most `max_vocab` entries is built.
//
// # Safety
// `path` is a nul-terminated string; `vocab_from` is null or a live
// handle; `out` is writable.
enum MpcStatus mpc_corpus_load(const char *path,
                               const struct MpcCheckpoint *vocab_from,
                               size_t max_vocab,
                               struct MpcCorpus **out);

// # Safety
// `corpus` is a live handle and `path` a nul-terminated string.
enum MpcStatus mpc_corpus_write(const struct MpcCorpus *corpus, const char *path);

// Number of conversations; 0 for null.
//
// # Safety
// `corpus` is null or a live handle.
size_t mpc_corpus_len(const struct MpcCorpus *corpus);

// Keeps conversations `[start, end)` in a new handle.
//
// # Safety
// `corpus` is a live handle; `out` is writable.
enum MpcStatus mpc_corpus_slice(const struct MpcCorpus *corpus,
                                size_t start,
                                size_t end,
                                struct MpcCorpus **out);

// # Safety
// `corpus` is null or a handle not yet freed.
void mpc_corpus_free(struct MpcCorpus *corpus);

// Pre-trains a fresh encoder on `corpus`. `config_json` may set
// `encoder`, `sampler`, `train` and `drop` (task names); the encoder's
// vocabulary size always follows the corpus.
//
// # Safety
// `corpus` is a live handle; `config_json` is null or a nul-terminated
// string; `out` is writable.
enum MpcStatus mpc_pretrain(const struct MpcCorpus *corpus,
                            const char *config_json,
                            struct MpcCheckpoint **out);

// Fine-tunes `init` on `task` and returns the best validation epoch.
//
// # Safety
// Handles are live; `config_json` is null or a nul-terminated string;
// `out` is writable.
enum MpcStatus mpc_finetune(enum MpcTask task,
                            const struct MpcCheckpoint *init,
                            const struct MpcCorpus *train,
                            const struct MpcCorpus *valid,
                            const char *config_json,
                            struct MpcCheckpoint **out);

// Evaluates `task` on `corpus` and writes a JSON report to `*out_json`
// (free with [`mpc_string_free`]). A null checkpoint selects the label
// oracle (AR and SI only). `candidates` is 2 or 10 for RS.
//
// # Safety
// `ckpt` is null or a live handle; `corpus` is live; `out_json` is
// writable.
enum MpcStatus mpc_evaluate(const struct MpcCheckpoint *ckpt,
                            const struct MpcCorpus *corpus,
                            enum MpcTask task,
                            size_t candidates,
                            uint64_t seed,
                            char **out_json);

// # Safety
// `path` is a nul-terminated string; `out` is writable.
enum MpcStatus mpc_checkpoint_load(const char *path, struct MpcCheckpoint **out);

// # Safety
// `ckpt` is a live handle and `path` a nul-terminated string.
enum MpcStatus mpc_checkpoint_save(const struct MpcCheckpoint *ckpt, const char *path);

// Number of scalar parameters; 0 for null.
//
// # Safety
// `ckpt` is null or a live handle.
size_t mpc_checkpoint_num_params(const struct MpcCheckpoint *ckpt);

// # Safety
// `ckpt` is null or a handle not yet freed.
void mpc_checkpoint_free(struct MpcCheckpoint *ckpt);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPC_FFI_H */
