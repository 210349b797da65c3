use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use gpvseq_core::corpus::{gen_copy_task, gen_synonym_task, CopyTaskParams, EncodedPair, SynonymTaskParams};
use gpvseq_core::decode::{GenMode, GenerationConfig};
use gpvseq_core::gp::{GpPriorSpec, MeanMode};
use gpvseq_core::metrics::{diversity_report, EvalProtocol};
use gpvseq_core::seq2seq::{ModelConfig, Seq2SeqModel, Variant};
use gpvseq_core::train::{greedy_quality, train_model, TrainOptions, TrainSummary};

use super::Outcome;

const LR: f64 = 3e-3;
const BATCH: usize = 16;
const EPOCHS: usize = 30;
const BUDGET: Duration = Duration::from_secs(600);

/// Kernel used for every trained gp model in this suite.
fn gp_spec() -> GpPriorSpec {
    GpPriorSpec::new(GP_V, 1.0, GP_SIGMA2, MeanMode::Identity).unwrap()
}

const GP_V: f64 = 0.01;
const GP_SIGMA2: f64 = 1e-4;

struct Splits {
    vocab: usize,
    train: Vec<EncodedPair>,
    dev: Vec<EncodedPair>,
    test: Vec<EncodedPair>,
}

fn splits(task: gpvseq_core::corpus::GeneratedTask, seed: u64) -> Splits {
    let (train, dev, test) = task.corpus.split(seed);
    let enc = |c: gpvseq_core::corpus::Corpus| c.encode(&task.vocab, true).unwrap();
    Splits {
        vocab: task.vocab.len(),
        train: enc(train),
        dev: enc(dev),
        test: enc(test),
    }
}

fn train(cfg: ModelConfig, data: &Splits, epochs: usize, seed: u64) -> (TrainSummary, Duration) {
    let mut model = Seq2SeqModel::init(cfg, seed).unwrap();
    let opts = TrainOptions {
        lr: LR,
        epochs,
        batch_size: BATCH,
        patience: 10,
        seed,
    };
    let start = Instant::now();
    let summary = train_model(&mut model, &data.train, &data.dev, &opts, &mut std::io::sink(), &mut |_, _| Ok(())).unwrap();
    (summary, start.elapsed())
}

fn recon_drop(s: &TrainSummary) -> f64 {
    let first = s.history[0].dev.recon_nll;
    1.0 - s.best_stats().dev.recon_nll / first
}

pub fn criterion_copy_quality() -> Outcome {
    let data = splits(gen_copy_task(&CopyTaskParams::default()).unwrap(), 0);
    let det_cfg = ModelConfig::new(data.vocab, 32, 64, 64, Variant::Deterministic, None).unwrap();
    let gp_cfg = ModelConfig::new(data.vocab, 32, 64, GP_LATENT, Variant::Gp, Some(gp_spec())).unwrap();
    let (det, det_time) = train(det_cfg, &data, EPOCHS, 0);
    let (gp, gp_time) = train(gp_cfg, &data, EPOCHS, 0);
    let (det_acc, _) = greedy_quality(&det.best, &data.test, 16).unwrap();
    let (gp_acc, _) = greedy_quality(&gp.best, &data.test, 16).unwrap();
    let (dd, gd) = (recon_drop(&det), recon_drop(&gp));
    let pass = det_acc >= 0.95 && gp_acc >= 0.85 && det_time < BUDGET && gp_time < BUDGET && dd >= 0.5 && gd >= 0.5;
    Outcome::new(
        pass,
        format!(
            "deterministic acc {det_acc:.3} in {:.0}s (recon -{:.0}%), gp acc {gp_acc:.3} in {:.0}s (recon -{:.0}%)",
            det_time.as_secs_f64(),
            100.0 * dd,
            gp_time.as_secs_f64(),
            100.0 * gd
        ),
    )
}

const GP_LATENT: usize = 64;
const DIVERSITY_SOURCES: usize = 40;
const DIVERSITY_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub fn criterion_diversity() -> Outcome {
    let data = splits(gen_synonym_task(&SynonymTaskParams::default()).unwrap(), 0);
    let cfg = ModelConfig::new(data.vocab, 32, 64, GP_LATENT, Variant::Gp, Some(gp_spec())).unwrap();
    let (summary, _) = train(cfg, &data, SYNONYM_EPOCHS, 0);
    let model = summary.best;
    let sources: Vec<EncodedPair> = data.test.iter().take(DIVERSITY_SOURCES).cloned().collect();
    let run = |tau: f64, seed: u64| {
        let gen = GenerationConfig {
            mode: GenMode::PosteriorSample,
            tau,
            beam: 10,
            max_len: 16,
            seed,
            num_samples: 10,
        };
        let protocol = EvalProtocol {
            subset_seed: seed,
            ..EvalProtocol::default()
        };
        diversity_report(&model, &sources, &gen, &protocol).unwrap().aggregate
    };
    let mean = |tau: f64| {
        let aggs: Vec<_> = DIVERSITY_SEEDS.iter().map(|&s| run(tau, s)).collect();
        let k = aggs.len() as f64;
        (
            aggs.iter().map(|a| a.self_bleu2).sum::<f64>() / k,
            aggs.iter().map(|a| a.uniqueness).sum::<f64>() / k,
            aggs.iter().map(|a| a.avg_bleu2).sum::<f64>() / k,
        )
    };
    let (sb1, u1, q1) = mean(1.0);
    let (sb25, u25, q25) = mean(25.0);
    let zero = run(0.0, 0);
    let degenerate = zero.uniqueness == 0.1 && zero.self_bleu2 == 1.0;
    Outcome::new(
        sb25 < sb1 && u25 > u1 && degenerate,
        format!(
            "tau=1: self-BLEU {sb1:.3}, uniqueness {u1:.3}, avg-BLEU {q1:.3}; tau=25: self-BLEU {sb25:.3}, uniqueness {u25:.3}, avg-BLEU {q25:.3}; tau=0: uniqueness {}, self-BLEU {}",
            zero.uniqueness, zero.self_bleu2
        ),
    )
}

const SYNONYM_EPOCHS: usize = 10;

fn gpvseq(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_gpvseq")).args(args).output().unwrap();
    assert!(out.status.success(), "gpvseq {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

/// Every file under `dir`, with the first line of `train.log` dropped.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let mut bytes = fs::read(&p).unwrap();
            if p.file_name().is_some_and(|n| n == "train.log") {
                let cut = bytes.iter().position(|&b| b == b'\n').map_or(bytes.len(), |i| i + 1);
                bytes.drain(..cut);
            }
            files.push((p.strip_prefix(dir).unwrap().display().to_string(), bytes));
        }
    }
    files.sort();
    files
}

pub fn criterion_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let corpus = root.join("corpus");
    let run_dir = root.join("run");
    let (c, r) = (corpus.to_str().unwrap(), run_dir.to_str().unwrap());
    gpvseq(&["corpus-gen", "--task", "synonym", "--out", c, "--n-pairs", "300", "--seed", "8"]);
    let ckpt = run_dir.join("model.gpvs");
    let ck = ckpt.to_str().unwrap();
    let quality = format!("{r}/quality");
    let diversity = format!("{r}/diversity");
    let once = || {
        if run_dir.exists() {
            fs::remove_dir_all(&run_dir).unwrap();
        }
        gpvseq(&[
            "train",
            "--set",
            &format!("corpus={c}"),
            "--set",
            &format!("out={r}"),
            "--set",
            "variant=gp",
            "--set",
            "epochs=2",
            "--set",
            "hidden=16",
            "--set",
            "latent=16",
            "--set",
            "emb=8",
            "--set",
            "seed=5",
        ]);
        gpvseq(&["eval-quality", "--checkpoint", ck, "--corpus", c, "--split", "dev", "--out", &quality]);
        gpvseq(&["eval-diversity", "--checkpoint", ck, "--corpus", c, "--split", "dev", "--tau", "25", "--seed", "3", "--limit", "8", "--out", &diversity]);
        snapshot(&run_dir)
    };
    let first = once();
    let second = once();
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let names: Vec<&str> = first.iter().map(|f| f.0.as_str()).collect();
    Outcome::new(
        first.len() == second.len() && differing.is_empty() && names.contains(&"model.gpvs"),
        format!("{} artifacts compared ({}), differing: {:?}", first.len(), names.join(", "), differing),
    )
}
