//! `gpvseq` command line.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{RunConfig, Task};
use crate::corpus::{gen_copy_task, gen_synonym_task, Corpus, CopyTaskParams, EncodedPair, SynonymTaskParams, Vocabulary, EOS};
use crate::decode::{generate, GenMode, GenerationRecord};
use crate::demo::{gp_demo, linspace};
use crate::error::Error;
use crate::gp::{GpPriorSpec, MeanMode, R_BOUNDS, V_BOUNDS};
use crate::metrics::{corpus_bleu2, diversity_report, EvalProtocol};
use crate::seq2seq::{Seq2SeqModel, Variant};
use crate::train::{greedy_quality, train_model, EpochStats, TrainSummary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const CHECKPOINT_FILE: &str = "model.gpvs";
pub const THREADS_ENV: &str = "GPVSEQ_THREADS";

#[derive(Parser, Debug)]
#[command(name = "gpvseq", version, about = "GP-prior latent context for seq2seq models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with train/dev/test splits.
    CorpusGen(CorpusGenArgs),
    /// Train a model and keep the best-dev checkpoint.
    Train(RunArgs),
    /// Train one model per (v, r) cell.
    Grid(GridArgs),
    /// Mean-latent decoding quality on a split.
    EvalQuality(EvalArgs),
    /// Self-BLEU, Div-4 and Uniqueness of posterior samples.
    EvalDiversity(DiversityArgs),
    /// Prior and posterior function samples of a 1-D GP.
    GpDemo(GpDemoArgs),
}

#[derive(Args, Debug)]
pub struct CorpusGenArgs {
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub n_pairs: Option<usize>,
    /// Copy task only; includes the reserved tokens.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub class_size: Option<usize>,
    #[arg(long)]
    pub refs_per_src: Option<usize>,
    #[arg(long)]
    pub len_min: Option<usize>,
    #[arg(long)]
    pub len_max: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lr=0.003`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub v_list: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub r_list: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 10)]
    pub beam: usize,
    #[arg(long, default_value_t = 16)]
    pub max_len: usize,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DiversityArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long)]
    pub tau: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GpDemoArgs {
    #[arg(long, default_value_t = 1.0)]
    pub v: f64,
    #[arg(long, default_value_t = 1.0)]
    pub r: f64,
    #[arg(long, default_value_t = 0.0)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 6)]
    pub n_train: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
    pub x_min: f64,
    #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
    pub x_max: f64,
    #[arg(long, default_value_t = 101)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "copy" => Ok(Task::Copy),
        "synonym" => Ok(Task::Synonym),
        other => Err(format!("unknown task `{other}` (expected copy or synonym)")),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Numerical(_)) | Some(Error::NotPositiveDefinite { .. }) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

pub fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::CorpusGen(a) => cmd_corpus_gen(&a),
        Command::Train(a) => cmd_train(&load_run_config(&a)?).map(|_| ()),
        Command::Grid(a) => cmd_grid(&load_run_config(&a.run)?, &a.v_list, &a.r_list),
        Command::EvalQuality(a) => cmd_eval_quality(&a),
        Command::EvalDiversity(a) => cmd_eval_diversity(&a),
        Command::GpDemo(a) => cmd_gp_demo(&a),
    }
}

pub fn load_run_config(a: &RunArgs) -> anyhow::Result<RunConfig> {
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&a.sets)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

#[derive(Serialize)]
struct CorpusManifest {
    task: Task,
    seed: u64,
    params: serde_json::Value,
    vocab_size: usize,
    train: usize,
    dev: usize,
    test: usize,
}

pub fn cmd_corpus_gen(a: &CorpusGenArgs) -> anyhow::Result<()> {
    let (task, params) = match a.task {
        Task::Copy => {
            let d = CopyTaskParams::default();
            let p = CopyTaskParams {
                n_pairs: a.n_pairs.unwrap_or(d.n_pairs),
                vocab_size: a.vocab_size.unwrap_or(d.vocab_size),
                len_min: a.len_min.unwrap_or(d.len_min),
                len_max: a.len_max.unwrap_or(d.len_max),
                seed: a.seed,
            };
            (gen_copy_task(&p)?, serde_json::to_value(p)?)
        }
        Task::Synonym => {
            let d = SynonymTaskParams::default();
            let p = SynonymTaskParams {
                n_pairs: a.n_pairs.unwrap_or(d.n_pairs),
                n_classes: a.n_classes.unwrap_or(d.n_classes),
                class_size: a.class_size.unwrap_or(d.class_size),
                len_min: a.len_min.unwrap_or(d.len_min),
                len_max: a.len_max.unwrap_or(d.len_max),
                refs_per_src: a.refs_per_src.unwrap_or(d.refs_per_src),
                seed: a.seed,
            };
            (gen_synonym_task(&p)?, serde_json::to_value(p)?)
        }
    };
    create_dir(&a.out)?;
    let (train, dev, test) = task.corpus.split(a.seed);
    task.vocab.save(&a.out.join("vocab.txt"))?;
    for (name, part) in [("train", &train), ("dev", &dev), ("test", &test)] {
        part.save(&a.out.join(format!("{name}.jsonl")))?;
    }
    write_json(
        &a.out.join("manifest.json"),
        &CorpusManifest {
            task: a.task,
            seed: a.seed,
            params,
            vocab_size: task.vocab.len(),
            train: train.len(),
            dev: dev.len(),
            test: test.len(),
        },
    )
}

/// Vocabulary and one encoded split of a corpus directory.
pub fn load_split(dir: &Path, split: &str) -> anyhow::Result<(Vocabulary, Vec<EncodedPair>)> {
    let vocab = Vocabulary::load(&dir.join("vocab.txt")).with_context(|| format!("loading vocabulary from {}", dir.display()))?;
    let path = dir.join(format!("{split}.jsonl"));
    let corpus = Corpus::load(&path, Some(&vocab), true).with_context(|| format!("loading {}", path.display()))?;
    Ok((vocab.clone(), corpus.encode(&vocab, true)?))
}

#[derive(Serialize)]
struct TrainReport<'a> {
    best_epoch: usize,
    steps: u64,
    stopped_early: bool,
    best_dev: crate::train::LossStats,
    history: &'a [EpochStats],
}

fn train_into(cfg: &RunConfig, out: &Path) -> anyhow::Result<TrainSummary> {
    let (vocab, train) = load_split(&cfg.corpus, "train")?;
    let (_, dev) = load_split(&cfg.corpus, "dev")?;
    let model_cfg = cfg.model_config(vocab.len())?;
    create_dir(out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let mut model = Seq2SeqModel::init(model_cfg, cfg.seed)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut log = BufWriter::new(fs::File::create(out.join("train.log"))?);
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    writeln!(log, "# started {started}")?;
    let summary = train_model(&mut model, &train, &dev, &cfg.train_options(), &mut log, &mut |m, _| {
        save_checkpoint(m, &ckpt)
    })?;
    log.flush()?;
    write_json(
        &out.join("summary.json"),
        &TrainReport {
            best_epoch: summary.best_epoch,
            steps: summary.steps,
            stopped_early: summary.stopped_early,
            best_dev: summary.best_stats().dev,
            history: &summary.history,
        },
    )?;
    Ok(summary)
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<TrainSummary> {
    train_into(cfg, &cfg.out)
}

fn grid_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[derive(Serialize)]
struct GridBest {
    v: f64,
    r: f64,
    dev_loss: f64,
    dev_bleu2: f64,
}

type CellResult = Option<(f64, f64)>;

pub fn cmd_grid(cfg: &RunConfig, v_list: &[f64], r_list: &[f64]) -> anyhow::Result<()> {
    if cfg.variant != Variant::Gp {
        bail!(Error::config("grid search tunes the gp kernel; set variant=gp"));
    }
    for &v in v_list {
        if !(V_BOUNDS.0..=V_BOUNDS.1).contains(&v) {
            bail!(Error::config(format!("v = {v} outside [{}, {}]", V_BOUNDS.0, V_BOUNDS.1)));
        }
    }
    for &r in r_list {
        if !(R_BOUNDS.0..=R_BOUNDS.1).contains(&r) {
            bail!(Error::config(format!("r = {r} outside [{}, {}]", R_BOUNDS.0, R_BOUNDS.1)));
        }
    }
    create_dir(&cfg.out)?;
    fs::write(cfg.out.join("config.json"), cfg.to_json())?;
    let cells: Vec<(f64, f64)> = v_list.iter().flat_map(|&v| r_list.iter().map(move |&r| (v, r))).collect();
    let run_cell = |(v, r): (f64, f64)| -> CellResult {
        let mut c = cfg.clone();
        c.v = v;
        c.r = r;
        let dir = cfg.out.join(format!("v{v}_r{r}"));
        let summary = match train_into(&c, &dir) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("grid cell v={v} r={r} failed: {e:#}");
                return None;
            }
        };
        let (_, dev) = load_split(&c.corpus, "dev").ok()?;
        let (_, bleu) = greedy_quality(&summary.best, &dev, c.max_len).ok()?;
        Some((summary.best_stats().dev.loss, bleu))
    };
    let threads = grid_threads().min(cells.len()).max(1);
    let mut results: Vec<CellResult> = vec![None; cells.len()];
    if threads == 1 {
        for (i, &cell) in cells.iter().enumerate() {
            results[i] = run_cell(cell);
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let out = std::sync::Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= cells.len() {
                        break;
                    }
                    let r = run_cell(cells[i]);
                    out.lock().expect("grid results")[i] = r;
                });
            }
        });
    }
    let mut csv = String::from("v,r,dev_loss,dev_bleu2\n");
    let mut best: Option<GridBest> = None;
    for (&(v, r), res) in cells.iter().zip(&results) {
        match res {
            Some((loss, bleu)) => {
                csv.push_str(&format!("{v},{r},{loss},{bleu}\n"));
                if best.as_ref().is_none_or(|b| *loss < b.dev_loss) {
                    best = Some(GridBest {
                        v,
                        r,
                        dev_loss: *loss,
                        dev_bleu2: *bleu,
                    });
                }
            }
            None => csv.push_str(&format!("{v},{r},failed,failed\n")),
        }
    }
    fs::write(cfg.out.join("grid.csv"), csv)?;
    write_json(&cfg.out.join("grid_best.json"), &best)?;
    if best.is_none() {
        bail!(Error::Numerical("every grid cell failed".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct QualityReport {
    split: String,
    mode: GenMode,
    beam: usize,
    n_sources: usize,
    bleu2: f64,
    greedy_token_accuracy: f64,
    greedy_bleu2: f64,
}

fn limited(pairs: Vec<EncodedPair>, limit: Option<usize>) -> Vec<EncodedPair> {
    match limit {
        Some(n) => pairs.into_iter().take(n).collect(),
        None => pairs,
    }
}

pub fn cmd_eval_quality(a: &EvalArgs) -> anyhow::Result<()> {
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let (vocab, pairs) = load_split(&a.corpus, &a.split)?;
    let pairs = limited(pairs, a.limit);
    if pairs.is_empty() {
        bail!(Error::config("no sources to evaluate"));
    }
    if vocab.len() != model.config.vocab {
        bail!(Error::config(format!(
            "checkpoint vocabulary {} differs from corpus vocabulary {}",
            model.config.vocab,
            vocab.len()
        )));
    }
    let cfg = crate::decode::GenerationConfig {
        mode: GenMode::Mean,
        tau: 0.0,
        beam: a.beam,
        max_len: a.max_len,
        seed: 0,
        num_samples: 1,
    };
    create_dir(&a.out)?;
    let mut gens = String::new();
    let mut scored = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let hyps = generate(&model, &p.src, i, &cfg)?;
        gens.push_str(&serde_json::to_string(&GenerationRecord::new(&vocab, &p.src, &cfg, &hyps))?);
        gens.push('\n');
        scored.push((hyps[0].content().to_vec(), p.refs.clone()));
    }
    let (acc, greedy_bleu) = greedy_quality(&model, &pairs, a.max_len)?;
    fs::write(a.out.join("generations.jsonl"), gens)?;
    write_json(
        &a.out.join("quality.json"),
        &QualityReport {
            split: a.split.clone(),
            mode: GenMode::Mean,
            beam: a.beam,
            n_sources: pairs.len(),
            bleu2: corpus_bleu2(&scored)?,
            greedy_token_accuracy: acc,
            greedy_bleu2: greedy_bleu,
        },
    )
}

pub fn cmd_eval_diversity(a: &DiversityArgs) -> anyhow::Result<()> {
    let e = &a.eval;
    let model = load_checkpoint(&e.checkpoint).with_context(|| format!("loading {}", e.checkpoint.display()))?;
    if model.variant() == Variant::Deterministic {
        bail!(Error::config("diversity evaluation needs a normal or gp checkpoint"));
    }
    let (vocab, pairs) = load_split(&e.corpus, &e.split)?;
    if vocab.len() != model.config.vocab {
        bail!(Error::config("checkpoint and corpus vocabularies differ"));
    }
    let pairs = limited(pairs, e.limit);
    let cfg = crate::decode::GenerationConfig {
        mode: GenMode::PosteriorSample,
        tau: a.tau,
        beam: e.beam,
        max_len: e.max_len,
        seed: a.seed,
        num_samples: 10,
    };
    let protocol = EvalProtocol {
        subset_seed: a.seed,
        ..EvalProtocol::default()
    };
    let report = diversity_report(&model, &pairs, &cfg, &protocol)?;
    create_dir(&e.out)?;
    fs::write(e.out.join("diversity.csv"), report.to_csv())?;
    write_json(&e.out.join("diversity.json"), &report.aggregate)
}

pub fn cmd_gp_demo(a: &GpDemoArgs) -> anyhow::Result<()> {
    if a.points == 0 || a.x_max <= a.x_min {
        bail!(Error::config("need at least one grid point and x_max > x_min"));
    }
    let spec = GpPriorSpec::with_override(a.v, a.r, a.sigma2, MeanMode::Zero)?;
    let demo = gp_demo(&spec, &linspace(a.x_min, a.x_max, a.points), a.n_train, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&a.out, demo.to_csv()).with_context(|| format!("writing {}", a.out.display()))
}

/// Content tokens of a decoded id sequence.
pub fn strip_eos(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&t| t != EOS).collect()
}
