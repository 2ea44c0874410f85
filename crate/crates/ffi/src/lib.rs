//! C ABI over `mpc-core`.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `_free` function. Every fallible call returns
//! an [`MpcStatus`]; on failure [`mpc_last_error`] describes what went wrong
//! on the calling thread. Panics never unwind into C: they are reported as
//! `MPC_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use serde::Deserialize;

use mpc_core::corpus::{generate_synthetic, load_corpus, write_jsonl, Conversation, SyntheticSpec, Vocabulary};
use mpc_core::eval::{build_candidate_sets, evaluate_ar, evaluate_rs, evaluate_si, windows, Downstream, ModelScorer, OracleScorer, Scorer};
use mpc_core::model::{Checkpoint, EncoderConfig};
use mpc_core::sampling::{SamplerConfig, Task};
use mpc_core::trainer::{finetune, pretrain, FinetuneInit, FinetuneJob, PretrainJob, TrainConfig};
use mpc_core::MpcError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MpcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    /// A panic inside the library.
    Internal = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MpcTask {
    Ar = 0,
    Si = 1,
    Rs = 2,
}

impl From<MpcTask> for Downstream {
    fn from(t: MpcTask) -> Self {
        match t {
            MpcTask::Ar => Downstream::Ar,
            MpcTask::Si => Downstream::Si,
            MpcTask::Rs => Downstream::Rs,
        }
    }
}

/// Conversations with the vocabulary that encodes them.
pub struct MpcCorpus {
    conversations: Vec<Conversation>,
    vocab: Vocabulary,
}

/// Encoder parameters, vocabulary and optimizer state.
pub struct MpcCheckpoint {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MpcStatus, String);

impl From<MpcError> for Failure {
    fn from(e: MpcError) -> Self {
        let status = match &e {
            MpcError::Io { .. } => MpcStatus::Io,
            MpcError::Json(_) | MpcError::Record { .. } => MpcStatus::Parse,
            MpcError::Checkpoint(_) => MpcStatus::Checkpoint,
            MpcError::Shape { .. } | MpcError::Invalid(_) => MpcStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(MpcStatus::Parse, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MpcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MpcStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            MpcStatus::Internal
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(MpcStatus::NullArgument, format!("{name} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MpcStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out_arg<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// An optional JSON object; null or empty means all defaults.
unsafe fn json_arg<T: for<'de> Deserialize<'de> + Default>(p: *const c_char) -> Result<T, Failure> {
    if p.is_null() {
        return Ok(T::default());
    }
    let s = str_arg(p, "config_json")?;
    if s.trim().is_empty() {
        return Ok(T::default());
    }
    Ok(serde_json::from_str(s)?)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn mpc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version; static, do not free.
#[no_mangle]
pub extern "C" fn mpc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mpc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a synthetic corpus. `spec_json` holds any generator fields
/// (null for defaults); `seed` replaces its seed.
///
/// # Safety
/// `spec_json` is null or a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpc_corpus_generate(spec_json: *const c_char, seed: u64, out: *mut *mut MpcCorpus) -> MpcStatus {
    guard(|| {
        let mut spec: SyntheticSpec = json_arg(spec_json)?;
        spec.seed = seed;
        let conversations = generate_synthetic(&spec)?;
        out_arg(
            out,
            MpcCorpus {
                conversations,
                vocab: spec.vocabulary(),
            },
        )
    })
}

/// Loads a JSONL corpus. With a checkpoint, its vocabulary encodes the
/// text; otherwise a vocabulary of at most `max_vocab` entries is built.
///
/// # Safety
/// `path` is a nul-terminated string; `vocab_from` is null or a live
/// handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpc_corpus_load(
    path: *const c_char,
    vocab_from: *const MpcCheckpoint,
    max_vocab: usize,
    out: *mut *mut MpcCorpus,
) -> MpcStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let vocab = vocab_from.as_ref().map(|c| &c.inner.vocab);
        let (conversations, vocab) = load_corpus(&path, vocab, max_vocab)?;
        out_arg(out, MpcCorpus { conversations, vocab })
    })
}

/// # Safety
/// `corpus` is a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mpc_corpus_write(corpus: *const MpcCorpus, path: *const c_char) -> MpcStatus {
    guard(|| {
        let c = ref_arg(corpus, "corpus")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        Ok(write_jsonl(&path, &c.conversations, &c.vocab)?)
    })
}

/// Number of conversations; 0 for null.
///
/// # Safety
/// `corpus` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mpc_corpus_len(corpus: *const MpcCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.conversations.len())
}

/// Keeps conversations `[start, end)` in a new handle.
///
/// # Safety
/// `corpus` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpc_corpus_slice(corpus: *const MpcCorpus, start: usize, end: usize, out: *mut *mut MpcCorpus) -> MpcStatus {
    guard(|| {
        let c = ref_arg(corpus, "corpus")?;
        if start > end || end > c.conversations.len() {
            return Err(Failure(
                MpcStatus::InvalidArgument,
                format!("slice {start}..{end} of {} conversations", c.conversations.len()),
            ));
        }
        out_arg(
            out,
            MpcCorpus {
                conversations: c.conversations[start..end].to_vec(),
                vocab: c.vocab.clone(),
            },
        )
    })
}

/// # Safety
/// `corpus` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpc_corpus_free(corpus: *mut MpcCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct PretrainOptions {
    encoder: Option<EncoderConfig>,
    sampler: Option<SamplerConfig>,
    train: Option<TrainConfig>,
    drop: BTreeSet<Task>,
}

/// Pre-trains a fresh encoder on `corpus`. `config_json` may set
/// `encoder`, `sampler`, `train` and `drop` (task names); the encoder's
/// vocabulary size always follows the corpus.
///
/// # Safety
/// `corpus` is a live handle; `config_json` is null or a nul-terminated
/// string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpc_pretrain(corpus: *const MpcCorpus, config_json: *const c_char, out: *mut *mut MpcCheckpoint) -> MpcStatus {
    guard(|| {
        let c = ref_arg(corpus, "corpus")?;
        let opts: PretrainOptions = json_arg(config_json)?;
        let mut encoder = opts.encoder.unwrap_or_default();
        encoder.vocab_size = c.vocab.len();
        let job = PretrainJob {
            corpus: &c.conversations,
            vocab: &c.vocab,
            encoder,
            sampler: opts.sampler.unwrap_or_default(),
            train: opts.train.unwrap_or_else(TrainConfig::pretrain_default),
            drop: opts.drop,
        };
        let run = pretrain(&job, None)?;
        out_arg(out, MpcCheckpoint { inner: run.checkpoint })
    })
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FinetuneOptions {
    train: Option<TrainConfig>,
    max_utterances: Option<usize>,
}

/// Fine-tunes `init` on `task` and returns the best validation epoch.
///
/// # Safety
/// Handles are live; `config_json` is null or a nul-terminated string;
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpc_finetune(
    task: MpcTask,
    init: *const MpcCheckpoint,
    train: *const MpcCorpus,
    valid: *const MpcCorpus,
    config_json: *const c_char,
    out: *mut *mut MpcCheckpoint,
) -> MpcStatus {
    guard(|| {
        let task = Downstream::from(task);
        let init = ref_arg(init, "init")?;
        let train = ref_arg(train, "train")?;
        let valid = ref_arg(valid, "valid")?;
        let opts: FinetuneOptions = json_arg(config_json)?;
        let job = FinetuneJob {
            task,
            train: &train.conversations,
            valid: &valid.conversations,
            config: opts
                .train
                .unwrap_or_else(|| TrainConfig::finetune_default(task == Downstream::Rs)),
            max_utterances: opts.max_utterances.unwrap_or(SamplerConfig::default().max_utterances),
        };
        let run = finetune(&job, FinetuneInit::Pretrained(init.inner.clone()))?;
        out_arg(out, MpcCheckpoint { inner: run.checkpoint })
    })
}

/// Evaluates `task` on `corpus` and writes a JSON report to `*out_json`
/// (free with [`mpc_string_free`]). A null checkpoint selects the label
/// oracle (AR and SI only). `candidates` is 2 or 10 for RS.
///
/// # Safety
/// `ckpt` is null or a live handle; `corpus` is live; `out_json` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mpc_evaluate(
    ckpt: *const MpcCheckpoint,
    corpus: *const MpcCorpus,
    task: MpcTask,
    candidates: usize,
    seed: u64,
    out_json: *mut *mut c_char,
) -> MpcStatus {
    guard(|| {
        let c = ref_arg(corpus, "corpus")?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let ck = ckpt.as_ref().map(|k| &k.inner);
        let sampler = SamplerConfig::default();
        let w = windows(&c.conversations, &sampler);
        let model = ck.map(|k| ModelScorer {
            params: &k.params,
            max_seq_len: k.config().max_seq_len,
        });
        let scorer: &dyn Scorer = match &model {
            Some(m) => m,
            None => &OracleScorer,
        };
        let outcome = match Downstream::from(task) {
            Downstream::Ar => evaluate_ar(scorer, &w, false)?,
            Downstream::Si => evaluate_si(scorer, &w, false)?,
            Downstream::Rs => evaluate_rs(scorer, &build_candidate_sets(&w, candidates, seed)?, false)?,
        };
        let text = serde_json::to_string(&outcome)?;
        *out_json = CString::new(text).expect("json has no nul").into_raw();
        Ok(())
    })
}

/// # Safety
/// `path` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpc_checkpoint_load(path: *const c_char, out: *mut *mut MpcCheckpoint) -> MpcStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        out_arg(out, MpcCheckpoint { inner: Checkpoint::load(&path)? })
    })
}

/// # Safety
/// `ckpt` is a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mpc_checkpoint_save(ckpt: *const MpcCheckpoint, path: *const c_char) -> MpcStatus {
    guard(|| {
        let c = ref_arg(ckpt, "ckpt")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        Ok(c.inner.save(&path)?)
    })
}

/// Number of scalar parameters; 0 for null.
///
/// # Safety
/// `ckpt` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mpc_checkpoint_num_params(ckpt: *const MpcCheckpoint) -> usize {
    ckpt.as_ref().map_or(0, |c| c.inner.params.num_scalars())
}

/// # Safety
/// `ckpt` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpc_checkpoint_free(ckpt: *mut MpcCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}
