//! Synthetic parallel corpora, vocabularies, JSONL I/O and batching.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::seq2seq::Batch;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const MAX_VOCAB: usize = 200;
pub const MAX_REFS: usize = 8;

pub fn is_special(id: usize) -> bool {
    id < RESERVED.len()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in order.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::config(format!("vocabulary id {i} must be `{r}`")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::config(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S], strict: bool) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| match self.id(w.as_ref()) {
                Some(id) => Ok(id),
                None if strict => Err(Error::UnknownToken(w.as_ref().to_string())),
                None => Ok(UNK),
            })
            .collect()
    }

    /// Content tokens only; special ids are dropped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !is_special(i))
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub src: Vec<String>,
    pub refs: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    src: String,
    refs: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<ParallelPair>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let rec = PairRecord {
                src: p.src.join(" "),
                refs: p.refs.iter().map(|r| r.join(" ")).collect(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("plain strings serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(self.to_jsonl().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    /// Reads JSONL. With a vocabulary, unknown tokens are an error when
    /// `strict` and are replaced by `<unk>` otherwise.
    pub fn load(path: &Path, vocab: Option<&Vocabulary>, strict: bool) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let split = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_string).collect() };
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: PairRecord = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            let mut pair = ParallelPair {
                src: split(&rec.src),
                refs: rec.refs.iter().map(|r| split(r)).collect(),
            };
            if pair.src.is_empty() || pair.refs.is_empty() || pair.refs.len() > MAX_REFS || pair.refs.iter().any(Vec::is_empty) {
                return Err(parse_err(
                    i + 1,
                    format!("need a non-empty source and 1..={MAX_REFS} non-empty references"),
                ));
            }
            if let Some(v) = vocab {
                let fix = |toks: &mut Vec<String>| -> Result<()> {
                    for t in toks.iter_mut() {
                        if v.id(t).is_none() {
                            if strict {
                                return Err(parse_err(i + 1, format!("unknown token `{t}`")));
                            }
                            *t = RESERVED[UNK].to_string();
                        }
                    }
                    Ok(())
                };
                fix(&mut pair.src)?;
                for r in &mut pair.refs {
                    fix(r)?;
                }
            }
            pairs.push(pair);
        }
        Ok(Self { pairs })
    }

    pub fn encode(&self, vocab: &Vocabulary, strict: bool) -> Result<Vec<EncodedPair>> {
        self.pairs
            .iter()
            .map(|p| {
                Ok(EncodedPair {
                    src: vocab.encode(&p.src, strict)?,
                    refs: p.refs.iter().map(|r| vocab.encode(r, strict)).collect::<Result<_>>()?,
                })
            })
            .collect()
    }

    /// Seeded 80/10/10 partition into (train, dev, test).
    pub fn split(&self, seed: u64) -> (Corpus, Corpus, Corpus) {
        let n = self.pairs.len();
        let mut idx: Vec<usize> = (0..n).collect();
        SeededRng::derived(seed, "split", 0).shuffle(&mut idx);
        let n_dev = (n as f64 * 0.1).round() as usize;
        let n_test = (n as f64 * 0.1).round() as usize;
        let take = |r: &[usize]| Corpus {
            pairs: r.iter().map(|&i| self.pairs[i].clone()).collect(),
        };
        let train = take(&idx[n_dev + n_test..]);
        let dev = take(&idx[..n_dev]);
        let test = take(&idx[n_dev..n_dev + n_test]);
        (train, dev, test)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub refs: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyTaskParams {
    pub n_pairs: usize,
    /// Includes the four reserved tokens.
    pub vocab_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub seed: u64,
}

impl Default for CopyTaskParams {
    fn default() -> Self {
        Self {
            n_pairs: 2000,
            vocab_size: 50,
            len_min: 4,
            len_max: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymTaskParams {
    pub n_pairs: usize,
    pub n_classes: usize,
    pub class_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub refs_per_src: usize,
    pub seed: u64,
}

impl Default for SynonymTaskParams {
    fn default() -> Self {
        Self {
            n_pairs: 4000,
            n_classes: 24,
            class_size: 3,
            len_min: 5,
            len_max: 12,
            refs_per_src: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedTask {
    pub vocab: Vocabulary,
    pub corpus: Corpus,
}

fn check_lengths(len_min: usize, len_max: usize) -> Result<()> {
    if len_min == 0 || len_min > len_max {
        return Err(Error::config(format!("invalid length range {len_min}..={len_max}")));
    }
    Ok(())
}

pub fn gen_copy_task(p: &CopyTaskParams) -> Result<GeneratedTask> {
    if p.vocab_size < 10 || p.vocab_size > MAX_VOCAB {
        return Err(Error::config(format!("copy-task vocabulary must be in 10..={MAX_VOCAB}")));
    }
    check_lengths(p.len_min, p.len_max)?;
    let words: Vec<String> = (0..p.vocab_size - RESERVED.len()).map(|k| format!("t{k}")).collect();
    let vocab = Vocabulary::new(&words)?;
    let mut rng = SeededRng::derived(p.seed, "copy", 0);
    let pairs = (0..p.n_pairs)
        .map(|_| {
            let len = rng.between(p.len_min, p.len_max);
            let src: Vec<String> = (0..len).map(|_| words[rng.below(words.len())].clone()).collect();
            ParallelPair {
                refs: vec![src.clone()],
                src,
            }
        })
        .collect();
    Ok(GeneratedTask {
        vocab,
        corpus: Corpus { pairs },
    })
}

pub fn synonym_token(class: usize, member: usize) -> String {
    format!("c{class}_{member}")
}

/// Class index of a synonym-task token.
pub fn synonym_class(token: &str) -> Option<usize> {
    let rest = token.strip_prefix('c')?;
    let (class, member) = rest.split_once('_')?;
    member.parse::<usize>().ok()?;
    class.parse().ok()
}

/// True when `hyp` has the same length as `src` and every token is in the
/// class of the aligned source token.
pub fn synonym_valid<S: AsRef<str>, T: AsRef<str>>(src: &[S], hyp: &[T]) -> bool {
    src.len() == hyp.len()
        && src.iter().zip(hyp).all(|(a, b)| {
            let ca = synonym_class(a.as_ref());
            ca.is_some() && ca == synonym_class(b.as_ref())
        })
}

pub fn gen_synonym_task(p: &SynonymTaskParams) -> Result<GeneratedTask> {
    if p.n_classes == 0 || p.class_size == 0 || p.refs_per_src == 0 {
        return Err(Error::config("synonym task needs positive class count, class size and refs per source"));
    }
    if p.refs_per_src > MAX_REFS {
        return Err(Error::config(format!("at most {MAX_REFS} references per source")));
    }
    let content = p
        .n_classes
        .checked_mul(p.class_size)
        .filter(|&c| c <= MAX_VOCAB - RESERVED.len())
        .ok_or_else(|| Error::config(format!("{} classes of {} exceed the vocabulary limit of {MAX_VOCAB}", p.n_classes, p.class_size)))?;
    check_lengths(p.len_min, p.len_max)?;
    let mut words = Vec::with_capacity(content);
    for c in 0..p.n_classes {
        for m in 0..p.class_size {
            words.push(synonym_token(c, m));
        }
    }
    let vocab = Vocabulary::new(&words)?;
    let mut rng = SeededRng::derived(p.seed, "synonym", 0);
    let mut pairs = Vec::with_capacity(p.n_pairs);
    for _ in 0..p.n_pairs {
        let len = rng.between(p.len_min, p.len_max);
        let classes: Vec<usize> = (0..len).map(|_| rng.below(p.n_classes)).collect();
        let src = classes.iter().map(|&c| synonym_token(c, 0)).collect();
        let mut refs: Vec<Vec<String>> = Vec::with_capacity(p.refs_per_src);
        let mut seen = HashSet::new();
        for _ in 0..p.refs_per_src {
            let r: Vec<String> = classes.iter().map(|&c| synonym_token(c, rng.below(p.class_size))).collect();
            if seen.insert(r.clone()) {
                refs.push(r);
            }
        }
        pairs.push(ParallelPair { src, refs });
    }
    Ok(GeneratedTask {
        vocab,
        corpus: Corpus { pairs },
    })
}

/// `BOS tokens EOS`
pub fn frame_target(tokens: &[usize]) -> Vec<usize> {
    let mut t = Vec::with_capacity(tokens.len() + 2);
    t.push(BOS);
    t.extend_from_slice(tokens);
    t.push(EOS);
    t
}

/// Deterministically shuffled batches for one epoch; each pair contributes
/// one uniformly chosen reference.
pub fn batch_iter(pairs: &[EncodedPair], batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut rng = SeededRng::derived(epoch_seed, "batches", 0);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let src = chunk.iter().map(|&i| pairs[i].src.clone()).collect();
            let tgt = chunk
                .iter()
                .map(|&i| {
                    let refs = &pairs[i].refs;
                    frame_target(&refs[rng.below(refs.len())])
                })
                .collect();
            Batch::new(src, tgt)
        })
        .collect()
}

/// Dense id matrices with 0/1 masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub src_ids: Vec<Vec<usize>>,
    pub src_mask: Vec<Vec<u8>>,
    pub tgt_ids: Vec<Vec<usize>>,
    pub tgt_mask: Vec<Vec<u8>>,
}

pub fn pad(batch: &Batch) -> PaddedBatch {
    fn pad_rows(rows: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<Vec<u8>>) {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        rows.iter()
            .map(|r| {
                let mut ids = r.clone();
                ids.resize(width, PAD);
                let mask = (0..width).map(|i| u8::from(i < r.len())).collect();
                (ids, mask)
            })
            .unzip()
    }
    let (src_ids, src_mask) = pad_rows(&batch.src);
    let (tgt_ids, tgt_mask) = pad_rows(&batch.tgt);
    PaddedBatch {
        src_ids,
        src_mask,
        tgt_ids,
        tgt_mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_copy(seed: u64) -> GeneratedTask {
        gen_copy_task(&CopyTaskParams {
            n_pairs: 300,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn vocabulary_reserved_ids() {
        let v = Vocabulary::new(&["a", "b"]).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("</s>"), Some(EOS));
        assert_eq!(v.id("b"), Some(5));
        assert!(Vocabulary::new(&["a", "a"]).is_err());
        assert!(Vocabulary::new(&["<s>"]).is_err());
        assert_eq!(v.encode(&["a", "zz"], false).unwrap(), vec![4, UNK]);
        assert!(matches!(v.encode(&["zz"], true), Err(Error::UnknownToken(_))));
        assert_eq!(v.decode(&[BOS, 4, 5, EOS]), vec!["a", "b"]);
    }

    #[test]
    fn copy_task_properties() {
        let t = small_copy(1);
        assert_eq!(t.vocab.len(), 50);
        for p in &t.corpus.pairs {
            assert_eq!(p.refs, vec![p.src.clone()]);
            assert!((4..=10).contains(&p.src.len()));
            assert!(p.src.iter().all(|w| t.vocab.id(w).is_some()));
        }
        assert_eq!(t, small_copy(1));
        assert_ne!(t, small_copy(2));
        assert!(gen_copy_task(&CopyTaskParams { vocab_size: 9, ..Default::default() }).is_err());
    }

    #[test]
    fn copy_lengths_span_range() {
        let t = gen_copy_task(&CopyTaskParams::default()).unwrap();
        let lens: HashSet<usize> = t.corpus.pairs.iter().map(|p| p.src.len()).collect();
        assert!(lens.contains(&4) && lens.contains(&10));
    }

    #[test]
    fn synonym_refs_respect_classes() {
        let t = gen_synonym_task(&SynonymTaskParams {
            n_pairs: 200,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(t.vocab.len(), 4 + 72);
        for p in &t.corpus.pairs {
            assert!(p.src.iter().all(|w| w.ends_with("_0")));
            let distinct: HashSet<_> = p.refs.iter().collect();
            assert_eq!(distinct.len(), p.refs.len());
            for r in &p.refs {
                assert!(synonym_valid(&p.src, r));
            }
        }
    }

    #[test]
    fn degenerate_classes_copy_source() {
        let t = gen_synonym_task(&SynonymTaskParams {
            n_pairs: 20,
            class_size: 1,
            ..Default::default()
        })
        .unwrap();
        for p in &t.corpus.pairs {
            assert_eq!(p.refs, vec![p.src.clone()]);
        }
    }

    #[test]
    fn synonym_overflow_is_error() {
        let p = SynonymTaskParams {
            n_classes: 100,
            class_size: 3,
            ..Default::default()
        };
        assert!(gen_synonym_task(&p).is_err());
        assert!(gen_synonym_task(&SynonymTaskParams { refs_per_src: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn distinct_refs_per_source() {
        let t = gen_synonym_task(&SynonymTaskParams {
            n_pairs: 2000,
            len_min: 8,
            len_max: 8,
            ..Default::default()
        })
        .unwrap();
        let mean = t.corpus.pairs.iter().map(|p| p.refs.len() as f64).sum::<f64>() / 2000.0;
        assert!(mean >= 3.9, "{mean}");
    }

    #[test]
    fn class_parsing() {
        assert_eq!(synonym_class("c12_2"), Some(12));
        assert_eq!(synonym_class("t4"), None);
        assert!(!synonym_valid(&["c1_0"], &["c2_0"]));
        assert!(!synonym_valid(&["c1_0"], &["c1_0", "c1_1"]));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = small_copy(3);
        let path = dir.path().join("c.jsonl");
        t.corpus.save(&path).unwrap();
        let loaded = Corpus::load(&path, Some(&t.vocab), true).unwrap();
        assert_eq!(loaded, t.corpus);
        let path2 = dir.path().join("c2.jsonl");
        loaded.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());

        let vpath = dir.path().join("vocab.txt");
        t.vocab.save(&vpath).unwrap();
        assert_eq!(Vocabulary::load(&vpath).unwrap(), t.vocab);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        fs::write(&path, "").unwrap();
        assert!(Corpus::load(&path, None, true).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut text = small_copy(4).corpus.to_jsonl().lines().take(16).collect::<Vec<_>>().join("\n");
        text.push_str("\n{\"src\": \"t1 t2\", \"refs\": [\"t1\n");
        fs::write(&path, text).unwrap();
        match Corpus::load(&path, None, false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 17),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_tokens_strict_and_lenient() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.jsonl");
        fs::write(&path, "{\"src\": \"t1 zz\", \"refs\": [\"t1\"]}\n").unwrap();
        let vocab = small_copy(0).vocab;
        assert!(Corpus::load(&path, Some(&vocab), true).is_err());
        let c = Corpus::load(&path, Some(&vocab), false).unwrap();
        assert_eq!(c.pairs[0].src, vec!["t1", "<unk>"]);
    }

    #[test]
    fn split_sizes() {
        let t = small_copy(5);
        let (tr, dv, te) = t.corpus.split(9);
        assert_eq!((tr.len(), dv.len(), te.len()), (240, 30, 30));
        assert_eq!(t.corpus.split(9), (tr, dv, te));
    }

    #[test]
    fn batches_are_framed_and_deterministic() {
        let t = small_copy(6);
        let enc = t.corpus.encode(&t.vocab, true).unwrap();
        let one = batch_iter(&enc, enc.len(), 1).unwrap();
        assert_eq!(one.len(), 1);
        let a = batch_iter(&enc, 32, 7).unwrap();
        assert_eq!(a, batch_iter(&enc, 32, 7).unwrap());
        assert_ne!(a, batch_iter(&enc, 32, 8).unwrap());
        assert_eq!(a.iter().map(Batch::len).sum::<usize>(), enc.len());
        let padded = pad(&a[0]);
        for (i, m) in padded.src_mask.iter().enumerate() {
            assert_eq!(m.iter().map(|&x| x as usize).sum::<usize>(), a[0].src[i].len());
        }
        for (i, m) in padded.tgt_mask.iter().enumerate() {
            assert_eq!(m.iter().map(|&x| x as usize).sum::<usize>(), a[0].tgt[i].len());
            assert_eq!(padded.tgt_ids[i][0], BOS);
        }
        assert!(batch_iter(&enc, 0, 1).is_err());
    }
}
