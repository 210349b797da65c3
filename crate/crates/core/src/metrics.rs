//! BLEU-2, self-BLEU, Div-4 and Uniqueness, plus the per-source diversity
//! protocol (10 generations, overlap metrics on a seeded 5-subset).

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::EncodedPair;
use crate::decode::{diverse_generate, GenMode, GenerationConfig};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::seq2seq::Seq2SeqModel;

pub const NUM_GENERATE: usize = 10;
pub const OVERLAP_SUBSET: usize = 5;

fn ngram_counts<T: Hash + Eq>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for g in seq.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and total n-grams of `hyp` against `refs`.
fn clipped<T: Hash + Eq, R: AsRef<[T]>>(hyp: &[T], refs: &[R], n: usize) -> (usize, usize) {
    let counts = ngram_counts(hyp, n);
    let total = hyp.len().saturating_sub(n - 1);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r.as_ref(), n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = counts.iter().map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, total)
}

/// Reference length closest to `hyp_len`; ties go to the shorter one.
fn closest_ref_len<T, R: AsRef<[T]>>(hyp_len: usize, refs: &[R]) -> usize {
    refs.iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&l| (l.abs_diff(hyp_len), l))
        .unwrap_or(0)
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp()
}

/// Geometric mean of the orders that have at least one hypothesis n-gram.
fn combine(stats: &[(usize, usize); 2], smooth: bool) -> f64 {
    let mut log_sum = 0.0;
    let mut orders = 0;
    for &(m, d) in stats {
        if d == 0 {
            continue;
        }
        let p = if m > 0 {
            m as f64 / d as f64
        } else if smooth {
            1.0 / (2.0 * d as f64)
        } else {
            return 0.0;
        };
        log_sum += p.ln();
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    (log_sum / orders as f64).exp()
}

/// Sentence BLEU with unigram and bigram precision.
///
/// A zero match count is replaced by `1/(2·denominator)`. A one-token
/// hypothesis has no bigrams and is scored on unigrams alone.
pub fn bleu2<T: Hash + Eq, R: AsRef<[T]>>(hyp: &[T], refs: &[R]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::InvalidOperand {
            op: "bleu2",
            msg: "at least one reference is required".into(),
        });
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let stats = [clipped(hyp, refs, 1), clipped(hyp, refs, 2)];
    let bp = brevity_penalty(hyp.len(), closest_ref_len(hyp.len(), refs));
    Ok(bp * combine(&stats, true))
}

/// Corpus BLEU-2: clipped counts and lengths are summed over pairs first.
pub fn corpus_bleu2<T: Hash + Eq, H: AsRef<[T]>, R: AsRef<[T]>>(pairs: &[(H, Vec<R>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidOperand {
            op: "corpus_bleu2",
            msg: "no pairs".into(),
        });
    }
    let mut stats = [(0, 0); 2];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (hyp, refs) in pairs {
        let hyp = hyp.as_ref();
        if refs.is_empty() {
            return Err(Error::InvalidOperand {
                op: "corpus_bleu2",
                msg: "every pair needs a reference".into(),
            });
        }
        for (n, s) in stats.iter_mut().enumerate() {
            let (m, d) = clipped(hyp, refs, n + 1);
            s.0 += m;
            s.1 += d;
        }
        hyp_len += hyp.len();
        ref_len += closest_ref_len(hyp.len(), refs);
    }
    Ok(brevity_penalty(hyp_len, ref_len) * combine(&stats, false))
}

/// Mean BLEU-2 of each output against all the others.
pub fn self_bleu2<T: Hash + Eq, S: AsRef<[T]>>(outputs: &[S]) -> Result<f64> {
    if outputs.len() < 2 {
        return Err(Error::InvalidOperand {
            op: "self_bleu2",
            msg: "needs at least two outputs".into(),
        });
    }
    let mut total = 0.0;
    for i in 0..outputs.len() {
        let refs: Vec<&[T]> = outputs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| o.as_ref()).collect();
        total += bleu2(outputs[i].as_ref(), &refs)?;
    }
    Ok(total / outputs.len() as f64)
}

/// Distinct 4-grams over total 4-grams; 1.0 when there are none.
pub fn div4<T: Hash + Eq, S: AsRef<[T]>>(outputs: &[S]) -> f64 {
    let mut distinct = HashSet::new();
    let mut total = 0usize;
    for o in outputs {
        let o = o.as_ref();
        if o.len() >= 4 {
            for g in o.windows(4) {
                distinct.insert(g);
                total += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        distinct.len() as f64 / total as f64
    }
}

/// Fraction of distinct sequences.
pub fn uniqueness<T: Hash + Eq, S: AsRef<[T]>>(outputs: &[S]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::InvalidOperand {
            op: "uniqueness",
            msg: "no outputs".into(),
        });
    }
    let distinct: HashSet<&[T]> = outputs.iter().map(|o| o.as_ref()).collect();
    Ok(distinct.len() as f64 / outputs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub num_generate: usize,
    pub subset_for_overlap: usize,
    pub subset_seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            num_generate: NUM_GENERATE,
            subset_for_overlap: OVERLAP_SUBSET,
            subset_seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.subset_for_overlap < 2 || self.subset_for_overlap > self.num_generate {
            return Err(Error::config("overlap subset must hold between 2 and num_generate outputs"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceScores {
    pub source_id: usize,
    pub avg_bleu2: f64,
    pub self_bleu2: f64,
    pub div4: f64,
    pub uniqueness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityAggregate {
    pub avg_bleu2: f64,
    pub self_bleu2: f64,
    pub div4: f64,
    pub uniqueness: f64,
    pub n_sources: usize,
    pub tau: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub per_source: Vec<SourceScores>,
    pub aggregate: DiversityAggregate,
}

impl DiversityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source_id,avg_bleu2,self_bleu2,div4,uniqueness\n");
        for s in &self.per_source {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.source_id, s.avg_bleu2, s.self_bleu2, s.div4, s.uniqueness
            ));
        }
        out
    }
}

/// Scores one source's generations (content tokens, EOS stripped).
pub fn score_source(source_id: usize, outputs: &[Vec<usize>], refs: &[Vec<usize>], protocol: &EvalProtocol) -> Result<SourceScores> {
    protocol.validate()?;
    if outputs.len() != protocol.num_generate {
        return Err(Error::dim(format!("{} outputs, protocol expects {}", outputs.len(), protocol.num_generate)));
    }
    let avg_bleu2 = outputs.iter().map(|o| bleu2(o, refs)).sum::<Result<f64>>()? / outputs.len() as f64;
    let mut rng = SeededRng::derived(protocol.subset_seed, "subset", source_id as u64);
    let subset: Vec<&Vec<usize>> = rng
        .sample_indices(outputs.len(), protocol.subset_for_overlap)
        .into_iter()
        .map(|i| &outputs[i])
        .collect();
    Ok(SourceScores {
        source_id,
        avg_bleu2,
        self_bleu2: self_bleu2(&subset)?,
        div4: div4(&subset),
        uniqueness: uniqueness(outputs)?,
    })
}

/// Runs the diversity protocol over `pairs` with posterior sampling at `cfg.tau`.
pub fn diversity_report(model: &Seq2SeqModel, pairs: &[EncodedPair], cfg: &GenerationConfig, protocol: &EvalProtocol) -> Result<DiversityReport> {
    if cfg.mode != GenMode::PosteriorSample {
        return Err(Error::config("diversity evaluation samples from the posterior"));
    }
    if pairs.is_empty() {
        return Err(Error::config("no sources to evaluate"));
    }
    let cfg = GenerationConfig {
        num_samples: protocol.num_generate,
        ..*cfg
    };
    let mut per_source = Vec::with_capacity(pairs.len());
    let mut distinct = 0usize;
    for (i, p) in pairs.iter().enumerate() {
        let hyps = if protocol.num_generate == NUM_GENERATE {
            diverse_generate(model, &p.src, i, &cfg)?
        } else {
            crate::decode::generate(model, &p.src, i, &cfg)?
        };
        let outputs: Vec<Vec<usize>> = hyps.iter().map(|h| h.content().to_vec()).collect();
        distinct += outputs.iter().collect::<HashSet<_>>().len();
        per_source.push(score_source(i, &outputs, &p.refs, protocol)?);
    }
    let n = per_source.len() as f64;
    let mean = |f: fn(&SourceScores) -> f64| per_source.iter().map(f).sum::<f64>() / n;
    let aggregate = DiversityAggregate {
        avg_bleu2: mean(|s| s.avg_bleu2),
        self_bleu2: mean(|s| s.self_bleu2),
        div4: mean(|s| s.div4),
        // Pooled counts: equal to the mean of per-source ratios, without the rounding.
        uniqueness: distinct as f64 / (per_source.len() * protocol.num_generate) as f64,
        n_sources: per_source.len(),
        tau: cfg.tau,
        seed: cfg.seed,
    };
    Ok(DiversityReport { per_source, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_identity() {
        assert_eq!(bleu2(&w("a b c"), &[w("a b c")]).unwrap(), 1.0);
    }

    #[test]
    fn bleu_hand_case() {
        let b = bleu2(&w("the cat sat"), &[w("the cat sleeps")]).unwrap();
        assert_abs_diff_eq!(b, (2.0f64 / 3.0 * 0.5).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(b, 0.57735, epsilon = 1e-5);
    }

    #[test]
    fn bleu_smoothing_floor() {
        let b = bleu2(&w("a b c"), &[w("x y z")]).unwrap();
        assert_abs_diff_eq!(b, (1.0f64 / 6.0 * 0.25).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn bleu_edge_cases() {
        let empty: Vec<&str> = vec![];
        assert_eq!(bleu2(&empty, &[w("a")]).unwrap(), 0.0);
        assert!(bleu2::<&str, Vec<&str>>(&w("a"), &[]).is_err());
        // One token, exact match: unigram only, no brevity penalty.
        assert_eq!(bleu2(&w("a"), &[w("a")]).unwrap(), 1.0);
        // Short hypothesis is penalized.
        let b = bleu2(&w("a b"), &[w("a b c d")]).unwrap();
        assert_abs_diff_eq!(b, (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn closest_length_ties_go_short() {
        assert_eq!(closest_ref_len(3, &[w("a b"), w("a b c d")]), 2);
        assert_eq!(closest_ref_len(3, &[w("a b c d e"), w("a b c d")]), 4);
    }

    #[test]
    fn bleu_reference_properties() {
        let hyp = w("a b c d");
        let r1 = w("a b x d");
        let r2 = w("c d a b");
        let base = bleu2(&hyp, std::slice::from_ref(&r1)).unwrap();
        let both = bleu2(&hyp, &[r1.clone(), r2.clone()]).unwrap();
        assert!(both >= base);
        assert_eq!(both, bleu2(&hyp, &[r2, r1]).unwrap());
        assert!((0.0..=1.0).contains(&both));
    }

    #[test]
    fn corpus_bleu_aggregates_counts() {
        let pairs = vec![(w("a b c"), vec![w("a b c")]), (w("x y"), vec![w("x z")])];
        // unigrams 4/5, bigrams 2/3, lengths 5 vs 5
        let expect = (0.8f64 * (2.0 / 3.0)).sqrt();
        assert_abs_diff_eq!(corpus_bleu2(&pairs).unwrap(), expect, epsilon = 1e-12);
        let single = vec![(w("the cat sat"), vec![w("the cat sleeps")])];
        assert_abs_diff_eq!(
            corpus_bleu2(&single).unwrap(),
            bleu2(&w("the cat sat"), &[w("the cat sleeps")]).unwrap(),
            epsilon = 1e-15
        );
        let perfect = vec![(w("a b"), vec![w("a b")]), (w("c d e"), vec![w("c d e")])];
        assert_eq!(corpus_bleu2(&perfect).unwrap(), 1.0);
    }

    #[test]
    fn self_bleu_cases() {
        let same = vec![w("a b c"); 5];
        assert_eq!(self_bleu2(&same).unwrap(), 1.0);
        let disjoint: Vec<Vec<String>> = (0..5).map(|i| (0..3).map(|j| format!("w{i}_{j}")).collect()).collect();
        let s = self_bleu2(&disjoint).unwrap();
        assert!(s < 0.25, "{s}");
        assert!(self_bleu2(&[w("a")]).is_err());
    }

    #[test]
    fn div4_cases() {
        assert_abs_diff_eq!(div4(&[w("a b c d e"), w("a b c d e")]), 0.5, epsilon = 1e-12);
        assert_eq!(div4(&[w("a b c d"), w("e f g h")]), 1.0);
        assert_eq!(div4(&[w("a b c"), w("d e f")]), 1.0);
        let set = vec![w("a b c d e f"), w("b c d e x")];
        let doubled: Vec<_> = set.iter().chain(&set).cloned().collect();
        assert_abs_diff_eq!(div4(&doubled), div4(&set) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn uniqueness_cases() {
        assert_abs_diff_eq!(uniqueness(&[w("x"), w("x"), w("y")]).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(uniqueness(&vec![w("a b"); 10]).unwrap(), 0.1, epsilon = 1e-15);
        assert_eq!(uniqueness(&[w("a"), w("b")]).unwrap(), 1.0);
        assert!(uniqueness::<&str, Vec<&str>>(&[]).is_err());
    }

    #[test]
    fn source_scores_degenerate() {
        let outs = vec![vec![5, 6, 7, 8]; 10];
        let s = score_source(0, &outs, &[vec![5, 6, 7, 8]], &EvalProtocol::default()).unwrap();
        assert_eq!(s.self_bleu2, 1.0);
        assert_eq!(s.uniqueness, 0.1);
        assert_eq!(s.avg_bleu2, 1.0);
        assert_eq!(s.div4, 0.2);
        assert!(score_source(0, &outs[..4], &[vec![5]], &EvalProtocol::default()).is_err());
    }

    #[test]
    fn zero_tau_report_is_exactly_degenerate() {
        use crate::gp::{GpPriorSpec, MeanMode};
        use crate::seq2seq::{ModelConfig, Variant};
        let spec = GpPriorSpec::new(1.0, 1.0, 0.1, MeanMode::Identity).unwrap();
        let model = Seq2SeqModel::init(ModelConfig::new(12, 4, 6, 6, Variant::Gp, Some(spec)).unwrap(), 1).unwrap();
        let pairs: Vec<EncodedPair> = (0..40)
            .map(|i| EncodedPair {
                src: vec![4 + i % 7, 5 + i % 5, 6],
                refs: vec![vec![4, 5]],
            })
            .collect();
        let cfg = GenerationConfig {
            mode: GenMode::PosteriorSample,
            tau: 0.0,
            beam: 2,
            max_len: 6,
            ..GenerationConfig::default()
        };
        let agg = diversity_report(&model, &pairs, &cfg, &EvalProtocol::default()).unwrap().aggregate;
        assert_eq!(agg.uniqueness, 0.1);
        assert_eq!(agg.self_bleu2, 1.0);
    }

    #[test]
    fn csv_header() {
        let r = DiversityReport {
            per_source: vec![SourceScores {
                source_id: 3,
                avg_bleu2: 0.5,
                self_bleu2: 1.0,
                div4: 0.25,
                uniqueness: 0.1,
            }],
            aggregate: DiversityAggregate {
                avg_bleu2: 0.5,
                self_bleu2: 1.0,
                div4: 0.25,
                uniqueness: 0.1,
                n_sources: 1,
                tau: 0.0,
                seed: 1,
            },
        };
        assert_eq!(r.to_csv(), "source_id,avg_bleu2,self_bleu2,div4,uniqueness\n3,0.5,1,0.25,0.1\n");
    }
}
