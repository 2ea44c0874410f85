mod config;
mod inspect;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use mpc_core::corpus::{generate_synthetic, load_corpus, write_jsonl, Conversation};
use mpc_core::eval::{
    build_candidate_sets, evaluate_ar, evaluate_rs, evaluate_si, windows, Downstream, EvalOutcome, ModelScorer,
    OracleScorer, Scorer,
};
use mpc_core::model::Checkpoint;
use mpc_core::sampling::{CorpusIndex, Task};
use mpc_core::trainer::{finetune, pretrain, FinetuneInit, FinetuneJob, PretrainJob, TrainConfig};
use mpc_core::{MpcError, Result};

use config::{RunConfig, RunManifest, SEED_ENV};

#[derive(Parser, Debug)]
#[command(name = "mpc", version = env!("CARGO_PKG_VERSION"), about = "Multi-party conversation encoder: data, pre-training, fine-tuning, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file (or a run manifest to repeat a run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file and MPC_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus as JSONL.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        conversations: Option<usize>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Print reply trees, shared utterances and pre-training samples.
    Inspect {
        #[arg(long)]
        data: PathBuf,
        /// Conversation id; the first conversation by default.
        #[arg(long)]
        id: Option<String>,
        /// Dump this task's sample instead of the tree.
        #[arg(long)]
        task: Option<Task>,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Multi-task self-supervised pre-training.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Leave a task out of the loss sum; repeatable or comma-separated.
        #[arg(long, value_delimiter = ',')]
        drop_task: Vec<Task>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from a checkpoint written by the same job.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune on a downstream task.
    Finetune {
        #[arg(long)]
        task: Downstream,
        /// Pre-trained checkpoint, or `random` for a fresh encoder.
        #[arg(long)]
        init: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint (or the label oracle) and print a JSON report.
    Eval {
        #[arg(long)]
        task: Downstream,
        /// Required unless `--scorer oracle`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Also report per conversation length.
        #[arg(long)]
        by_length: bool,
        #[arg(long, value_enum, default_value_t = ScorerKind::Model)]
        scorer: ScorerKind,
        /// Also write the report (and a manifest) here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScorerKind {
    Model,
    Oracle,
}

fn load_config(common: &Common) -> Result<(RunConfig, u64)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    let seed = cfg.resolve_seed(common.seed, env.as_deref())?;
    Ok((cfg, seed))
}

fn override_train(t: &mut TrainConfig, epochs: Option<usize>, lr: Option<f64>, batch_size: Option<usize>) {
    if let Some(e) = epochs {
        t.epochs = e;
        t.max_steps = None;
    }
    if let Some(l) = lr {
        t.lr = l;
    }
    if let Some(b) = batch_size {
        t.batch_size = b;
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MpcError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{text}");
    Ok(())
}

fn gen_data(out: &Path, conversations: Option<usize>, vocab_size: Option<usize>, common: &Common) -> Result<()> {
    let (mut cfg, seed) = load_config(common)?;
    if let Some(n) = conversations {
        cfg.synthetic.num_conversations = n;
    }
    if let Some(v) = vocab_size {
        cfg.synthetic.vocab_size = v;
    }
    cfg.synthetic.validate()?;
    let mut manifest = RunManifest::start("gen-data", seed, &cfg);
    manifest.outputs.insert("corpus".into(), out.to_path_buf());
    manifest.write(out)?;
    let convs = generate_synthetic(&cfg.synthetic)?;
    write_jsonl(out, &convs, &cfg.synthetic.vocabulary())?;
    info!("wrote {} conversations to {}", convs.len(), out.display());
    manifest.finish(out)?;
    print_json(&json!({"conversations": convs.len(), "out": out}))
}

fn find_conversation<'a>(convs: &'a [Conversation], id: Option<&str>) -> Result<(usize, &'a Conversation)> {
    match id {
        None => convs.first().map(|c| (0, c)).ok_or_else(|| MpcError::Invalid("the corpus is empty".into())),
        Some(id) => convs
            .iter()
            .enumerate()
            .find(|(_, c)| c.id == id)
            .ok_or_else(|| MpcError::Invalid(format!("no conversation with id {id:?}"))),
    }
}

fn inspect_cmd(data: &Path, id: Option<&str>, task: Option<Task>, epoch: u64, common: &Common) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let (convs, vocab) = load_corpus(data, None, cfg.max_vocab)?;
    let (k, conv) = find_conversation(&convs, id)?;
    let text = match task {
        None => inspect::tree(&conv.last_turns(cfg.sampler.max_utterances), &vocab),
        Some(t) => {
            let index = CorpusIndex::new(&convs, &cfg.sampler, vocab.len());
            inspect::samples(&index, k, t, epoch, &cfg.sampler, &vocab)?
        }
    };
    print!("{text}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn pretrain_cmd(
    corpus: &Path,
    out: &Path,
    drop_task: &[Task],
    steps: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    resume: Option<&Path>,
    common: &Common,
) -> Result<()> {
    let (mut cfg, seed) = load_config(common)?;
    cfg.drop_tasks.extend(drop_task.iter().copied());
    override_train(&mut cfg.pretrain, epochs, lr, batch_size);
    if steps.is_some() {
        cfg.pretrain.max_steps = steps;
    }
    let (convs, vocab) = load_corpus(corpus, None, cfg.max_vocab)?;
    cfg.encoder.vocab_size = vocab.len();

    let mut manifest = RunManifest::start("pretrain", seed, &cfg);
    manifest.inputs.insert("corpus".into(), corpus.to_path_buf());
    if let Some(r) = resume {
        manifest.inputs.insert("resume".into(), r.to_path_buf());
    }
    let log_path = sibling(out, ".log.jsonl");
    manifest.outputs.insert("checkpoint".into(), out.to_path_buf());
    manifest.outputs.insert("log".into(), log_path.clone());
    manifest.write(out)?;

    let resume = resume.map(Checkpoint::load).transpose()?;
    let job = PretrainJob {
        corpus: &convs,
        vocab: &vocab,
        encoder: cfg.encoder.clone(),
        sampler: cfg.sampler.clone(),
        train: cfg.pretrain.clone(),
        drop: cfg.drop_tasks.clone(),
    };
    let run = pretrain(&job, resume)?;
    run.checkpoint.save(out)?;
    let mut log = String::new();
    for r in &run.log {
        log.push_str(&serde_json::to_string(r)?);
        log.push('\n');
    }
    write_text(&log_path, &log)?;
    manifest.finish(out)?;
    print_json(&json!({
        "steps": run.checkpoint.step,
        "first_loss": run.log.first().map(|r| r.total),
        "last_loss": run.log.last().map(|r| r.total),
        "dropped": cfg.drop_tasks,
        "checkpoint": out,
    }))
}

#[allow(clippy::too_many_arguments)]
fn finetune_cmd(
    task: Downstream,
    init: &str,
    data: &Path,
    valid: &Path,
    out: &Path,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    common: &Common,
) -> Result<()> {
    let (mut cfg, seed) = load_config(common)?;
    let mut train_cfg = cfg.finetune.clone().unwrap_or_else(|| TrainConfig {
        seed,
        ..TrainConfig::finetune_default(task == Downstream::Rs)
    });
    override_train(&mut train_cfg, epochs, lr, batch_size);
    cfg.finetune = Some(train_cfg.clone());

    let init_path = (init != "random").then(|| PathBuf::from(init));
    let (init, vocab) = if init_path.is_none() {
        let (_, vocab) = load_corpus(data, None, cfg.max_vocab)?;
        cfg.encoder.vocab_size = vocab.len();
        (
            FinetuneInit::Random {
                encoder: cfg.encoder.clone(),
                vocab: vocab.clone(),
                seed,
            },
            vocab,
        )
    } else {
        let ck = Checkpoint::load(Path::new(init))?;
        cfg.encoder = ck.config().clone();
        let vocab = ck.vocab.clone();
        (FinetuneInit::Pretrained(ck), vocab)
    };
    let (train, _) = load_corpus(data, Some(&vocab), cfg.max_vocab)?;
    let (valid_convs, _) = load_corpus(valid, Some(&vocab), cfg.max_vocab)?;

    let mut manifest = RunManifest::start("finetune", seed, &cfg);
    manifest.inputs.insert("data".into(), data.to_path_buf());
    manifest.inputs.insert("valid".into(), valid.to_path_buf());
    if let Some(p) = init_path {
        manifest.inputs.insert("init".into(), p);
    }
    manifest.outputs.insert("checkpoint".into(), out.to_path_buf());
    manifest.write(out)?;

    let job = FinetuneJob {
        task,
        train: &train,
        valid: &valid_convs,
        config: train_cfg,
        max_utterances: cfg.sampler.max_utterances,
    };
    let run = finetune(&job, init)?;
    run.checkpoint.save(out)?;
    manifest.finish(out)?;
    print_json(&json!({
        "task": task,
        "best_epoch": run.best_epoch,
        "history": run.history,
        "checkpoint": out,
    }))
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    task: Downstream,
    ckpt: Option<&Path>,
    data: &Path,
    by_length: bool,
    scorer: ScorerKind,
    out: Option<&Path>,
    common: &Common,
) -> Result<()> {
    let (cfg, seed) = load_config(common)?;
    let ck = match scorer {
        ScorerKind::Model => Some(Checkpoint::load(ckpt.ok_or_else(|| MpcError::Invalid("--ckpt is required".into()))?)?),
        ScorerKind::Oracle => None,
    };
    let (convs, _) = load_corpus(data, ck.as_ref().map(|c| &c.vocab), cfg.max_vocab)?;
    let mut manifest = RunManifest::start("eval", seed, &cfg);
    manifest.inputs.insert("data".into(), data.to_path_buf());
    if let Some(p) = ckpt {
        manifest.inputs.insert("checkpoint".into(), p.to_path_buf());
    }
    if let Some(o) = out {
        manifest.outputs.insert("report".into(), o.to_path_buf());
        manifest.write(o)?;
    }

    let windows = windows(&convs, &cfg.sampler);
    let model;
    let scorer: &dyn Scorer = match &ck {
        Some(c) => {
            model = ModelScorer {
                params: &c.params,
                max_seq_len: c.config().max_seq_len,
            };
            &model
        }
        None => &OracleScorer,
    };
    let outcome: EvalOutcome = match task {
        Downstream::Ar => evaluate_ar(scorer, &windows, by_length)?,
        Downstream::Si => evaluate_si(scorer, &windows, by_length)?,
        Downstream::Rs => {
            let sets = build_candidate_sets(&windows, cfg.candidates, seed)?;
            evaluate_rs(scorer, &sets, by_length)?
        }
    };
    if let Some(o) = out {
        write_text(o, &(serde_json::to_string_pretty(&outcome)? + "\n"))?;
        manifest.finish(o)?;
    }
    print_json(&outcome)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            conversations,
            vocab_size,
            common,
        } => gen_data(&out, conversations, vocab_size, &common),
        Command::Inspect {
            data,
            id,
            task,
            epoch,
            common,
        } => inspect_cmd(&data, id.as_deref(), task, epoch, &common),
        Command::Pretrain {
            corpus,
            out,
            drop_task,
            steps,
            epochs,
            lr,
            batch_size,
            resume,
            common,
        } => pretrain_cmd(&corpus, &out, &drop_task, steps, epochs, lr, batch_size, resume.as_deref(), &common),
        Command::Finetune {
            task,
            init,
            data,
            valid,
            out,
            epochs,
            lr,
            batch_size,
            common,
        } => finetune_cmd(task, &init, &data, &valid, &out, epochs, lr, batch_size, &common),
        Command::Eval {
            task,
            ckpt,
            data,
            by_length,
            scorer,
            out,
            common,
        } => eval_cmd(task, ckpt.as_deref(), &data, by_length, scorer, out.as_deref(), &common),
    }
}

/// Parses argv and runs; returns the process exit code. Usage errors exit
/// with 2 (from clap), failures with 1.
pub fn run() -> i32 {
    let cli = Cli::parse();
    if let Command::Eval {
        scorer: ScorerKind::Model,
        ckpt: None,
        ..
    } = &cli.command
    {
        Cli::command()
            .error(ErrorKind::MissingRequiredArgument, "--ckpt is required with --scorer model")
            .exit();
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
