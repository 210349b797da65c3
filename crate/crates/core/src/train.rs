//! Adam training on the ELBO with dev-loss early stopping.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{batch_iter, frame_target, EncodedPair};
use crate::decode::greedy_decode_batch;
use crate::error::{Error, Result};
use crate::metrics::corpus_bleu2;
use crate::optim::AdamState;
use crate::rng::{derive_seed, SeededRng};
use crate::seq2seq::{Batch, Seq2SeqModel};
use crate::tensor::Tape;
use crate::variational::elbo_loss;

pub const LOG_HEADER: &str = "step\tepoch\tloss\trecon_nll\tkl\tlr\tseed";
const DEV_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub loss: f64,
    pub recon_nll: f64,
    pub kl: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// `None` for the evaluation before any update.
    pub train: Option<LossStats>,
    pub dev: LossStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best: Seq2SeqModel,
    pub steps: u64,
    pub stopped_early: bool,
}

impl TrainSummary {
    pub fn best_stats(&self) -> &EpochStats {
        &self.history[self.best_epoch]
    }
}

/// Dev-set ELBO with a fixed generator; each pair is scored on its first reference.
pub fn evaluate_loss(model: &Seq2SeqModel, pairs: &[EncodedPair], seed: u64) -> Result<LossStats> {
    if pairs.is_empty() {
        return Err(Error::config("cannot evaluate on an empty set"));
    }
    let mut rng = SeededRng::derived(seed, "dev", 0);
    let (mut recon, mut kl, mut tokens) = (0.0, 0.0, 0usize);
    for chunk in pairs.chunks(DEV_BATCH) {
        let batch = Batch::new(
            chunk.iter().map(|p| p.src.clone()).collect(),
            chunk.iter().map(|p| frame_target(&p.refs[0])).collect(),
        )?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let terms = elbo_loss(&mut tape, model, &vars, &batch, &mut rng)?;
        let n = batch.target_tokens();
        recon += terms.recon_nll * n as f64;
        kl += terms.kl * batch.len() as f64;
        tokens += n;
    }
    let recon_nll = recon / tokens as f64;
    let kl = kl / pairs.len() as f64;
    Ok(LossStats {
        loss: recon_nll + kl,
        recon_nll,
        kl,
    })
}

/// Trains in place. `on_best` sees every new best model, starting with the
/// untrained one. A non-finite loss aborts with [`Error::Numerical`] after the
/// log line for that step has been written.
pub fn train_model(
    model: &mut Seq2SeqModel,
    train: &[EncodedPair],
    dev: &[EncodedPair],
    opts: &TrainOptions,
    log: &mut dyn Write,
    on_best: &mut dyn FnMut(&Seq2SeqModel, &EpochStats) -> Result<()>,
) -> Result<TrainSummary> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::config("training needs non-empty train and dev sets"));
    }
    writeln!(log, "{LOG_HEADER}")?;
    let initial = EpochStats {
        epoch: 0,
        train: None,
        dev: evaluate_loss(model, dev, opts.seed)?,
    };
    if !initial.dev.loss.is_finite() {
        return Err(Error::Numerical(format!("initial dev loss is {}", initial.dev.loss)));
    }
    on_best(model, &initial)?;
    let mut history = vec![initial];
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_loss = initial.dev.loss;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut adam = AdamState::new(model.tensors().into_iter().map(|(_, t)| t));
    let mut step = 0u64;
    for epoch in 1..=opts.epochs {
        let batches = batch_iter(train, opts.batch_size, derive_seed(opts.seed, "epoch", epoch as u64))?;
        let mut sums = LossStats::default();
        for batch in &batches {
            step += 1;
            let mut rng = SeededRng::derived(opts.seed, "step", step);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let terms = elbo_loss(&mut tape, model, &vars, batch, &mut rng)?;
            let loss = tape.item(terms.loss);
            writeln!(
                log,
                "{step}\t{epoch}\t{loss}\t{}\t{}\t{}\t{}",
                terms.recon_nll, terms.kl, opts.lr, opts.seed
            )?;
            if !loss.is_finite() {
                log.flush()?;
                return Err(Error::Numerical(format!("loss became {loss} at step {step}")));
            }
            tape.backward(terms.loss)?;
            model.zero_grads();
            model.accumulate_grads(&tape, &vars);
            let mut params = model.tensors_mut();
            adam.step(&mut params, opts.lr)?;
            sums.loss += loss;
            sums.recon_nll += terms.recon_nll;
            sums.kl += terms.kl;
        }
        let n = batches.len() as f64;
        let stats = EpochStats {
            epoch,
            train: Some(LossStats {
                loss: sums.loss / n,
                recon_nll: sums.recon_nll / n,
                kl: sums.kl / n,
            }),
            dev: evaluate_loss(model, dev, opts.seed)?,
        };
        history.push(stats);
        if !stats.dev.loss.is_finite() {
            return Err(Error::Numerical(format!("dev loss became {} after epoch {epoch}", stats.dev.loss)));
        }
        if stats.dev.loss < best_loss {
            best_loss = stats.dev.loss;
            best_epoch = epoch;
            best = model.clone();
            since_best = 0;
            on_best(model, &stats)?;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                stopped_early = true;
                break;
            }
        }
    }
    log.flush()?;
    Ok(TrainSummary {
        history,
        best_epoch,
        best,
        steps: step,
        stopped_early,
    })
}

/// Per-position agreement of greedy output (with EOS) against the closest
/// reference, pooled over all reference tokens.
pub fn token_accuracy(hyps: &[Vec<usize>], pairs: &[EncodedPair]) -> f64 {
    let (mut correct, mut total) = (0usize, 0usize);
    for (h, p) in hyps.iter().zip(pairs) {
        let (c, t) = p
            .refs
            .iter()
            .map(|r| {
                let target = frame_target(r);
                let target = &target[1..];
                let c = target.iter().zip(h).filter(|(a, b)| a == b).count();
                (c, target.len())
            })
            .max_by(|a, b| (a.0 as f64 / a.1 as f64).total_cmp(&(b.0 as f64 / b.1 as f64)))
            .expect("pairs have references");
        correct += c;
        total += t;
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Greedy mean-latent decoding in chunks.
pub fn greedy_outputs(model: &Seq2SeqModel, pairs: &[EncodedPair], max_len: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(DEV_BATCH) {
        let srcs: Vec<Vec<usize>> = chunk.iter().map(|p| p.src.clone()).collect();
        out.extend(greedy_decode_batch(model, &srcs, max_len)?);
    }
    Ok(out)
}

/// Greedy token accuracy and corpus BLEU-2 of greedy outputs.
pub fn greedy_quality(model: &Seq2SeqModel, pairs: &[EncodedPair], max_len: usize) -> Result<(f64, f64)> {
    let hyps = greedy_outputs(model, pairs, max_len)?;
    let acc = token_accuracy(&hyps, pairs);
    let scored: Vec<(Vec<usize>, Vec<Vec<usize>>)> = hyps
        .iter()
        .zip(pairs)
        .map(|(h, p)| (h.iter().copied().filter(|&t| t != crate::corpus::EOS).collect(), p.refs.clone()))
        .collect();
    Ok((acc, corpus_bleu2(&scored)?))
}
