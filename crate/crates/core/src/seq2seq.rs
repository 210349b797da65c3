//! GRU encoder-decoder with additive attention over latent context vectors.
//!
//! Batched tape code works on flattened `(B·N)×·` matrices in batch-major
//! order: sequence `b`, position `i` lives in row `b·N + i`, where `N` is the
//! longest source in the batch. Padding rows are masked out of attention and
//! the KL term; they never influence real positions since the encoder is
//! unidirectional.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::gp::{GpJoint, GpPriorSpec, MeanMode};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};
use crate::variational::{infer_posterior, LatentPosterior, PosteriorNet, PosteriorVars};

pub const INIT_RANGE: f64 = 0.08;
const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Deterministic,
    Normal,
    Gp,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Deterministic => "deterministic",
            Variant::Normal => "normal",
            Variant::Gp => "gp",
        }
    }

    pub fn is_stochastic(self) -> bool {
        self != Variant::Deterministic
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Variant::Deterministic),
            "normal" => Ok(Variant::Normal),
            "gp" => Ok(Variant::Gp),
            other => Err(Error::config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub emb: usize,
    pub hidden: usize,
    pub latent: usize,
    pub variant: Variant,
    pub gp_spec: Option<GpPriorSpec>,
}

impl ModelConfig {
    pub fn new(vocab: usize, emb: usize, hidden: usize, latent: usize, variant: Variant, gp_spec: Option<GpPriorSpec>) -> Result<Self> {
        let c = Self {
            vocab,
            emb,
            hidden,
            latent,
            variant,
            gp_spec,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.emb == 0 || self.hidden == 0 || self.latent == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        match self.variant {
            Variant::Deterministic if self.latent != self.hidden => {
                Err(Error::config("the deterministic variant attends over h, so latent must equal hidden"))
            }
            Variant::Gp => self
                .gp_spec
                .ok_or_else(|| Error::config("the gp variant needs a gp_spec"))?
                .check_positive(),
            _ => Ok(()),
        }
    }

    /// A linear map `H→D` for the prior mean when `m(h)=h` and `D ≠ H`.
    pub fn has_projection(&self) -> bool {
        self.variant == Variant::Gp
            && self.latent != self.hidden
            && self.gp_spec.map(|s| s.mean_mode == MeanMode::Identity).unwrap_or(false)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gru {
    pub w_in: Tensor,
    pub w_hid: Tensor,
    pub b_in: Tensor,
    pub b_hid: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_in: Var,
    pub w_hid: Var,
    pub b_in: Var,
    pub b_hid: Var,
}

impl Gru {
    fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_in: Tensor::zeros(vec![input, 3 * hidden]),
            w_hid: Tensor::zeros(vec![hidden, 3 * hidden]),
            b_in: Tensor::zeros(vec![3 * hidden]),
            b_hid: Tensor::zeros(vec![3 * hidden]),
        }
    }
}

/// One GRU step on a batch: gates are laid out `[reset | update | candidate]`.
pub fn gru_cell(tape: &mut Tape, g: &GruVars, x: Var, h: Var, hidden: usize) -> Result<Var> {
    let gi = tape.matmul(x, g.w_in)?;
    let gi = tape.add(gi, g.b_in)?;
    let gh = tape.matmul(h, g.w_hid)?;
    let gh = tape.add(gh, g.b_hid)?;
    let gate = |tape: &mut Tape, k: usize| -> Result<(Var, Var)> {
        Ok((tape.slice_cols(gi, k * hidden, hidden)?, tape.slice_cols(gh, k * hidden, hidden)?))
    };
    let (ir, hr) = gate(tape, 0)?;
    let (iu, hu) = gate(tape, 1)?;
    let (in_, hn) = gate(tape, 2)?;
    let r = tape.add(ir, hr)?;
    let r = tape.sigmoid(r)?;
    let u = tape.add(iu, hu)?;
    let u = tape.sigmoid(u)?;
    let rn = tape.mul(r, hn)?;
    let n = tape.add(in_, rn)?;
    let n = tape.tanh(n)?;
    let d = tape.sub(h, n)?;
    let ud = tape.mul(u, d)?;
    tape.add(n, ud)
}

/// Source/target pairs; targets are framed `BOS … EOS`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub src_lens: Vec<usize>,
}

impl Batch {
    pub fn new(src: Vec<Vec<usize>>, tgt: Vec<Vec<usize>>) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::dim(format!("{} sources but {} targets", src.len(), tgt.len())));
        }
        for t in &tgt {
            if t.len() < 2 || t[0] != BOS || t[t.len() - 1] != EOS {
                return Err(Error::InvalidOperand {
                    op: "batch",
                    msg: "targets must start with BOS, end with EOS and predict at least one token".into(),
                });
            }
        }
        let mut b = Self::sources(src)?;
        b.tgt = tgt;
        Ok(b)
    }

    /// Sources only, for encoding and generation.
    pub fn sources(src: Vec<Vec<usize>>) -> Result<Self> {
        if src.iter().any(Vec::is_empty) {
            return Err(Error::InvalidOperand {
                op: "batch",
                msg: "empty source sequence".into(),
            });
        }
        let src_lens = src.iter().map(Vec::len).collect();
        Ok(Self {
            src,
            tgt: Vec::new(),
            src_lens,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn max_src_len(&self) -> usize {
        self.src_lens.iter().copied().max().unwrap_or(0)
    }

    pub fn max_tgt_len(&self) -> usize {
        self.tgt.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Number of predicted target tokens (everything after BOS).
    pub fn target_tokens(&self) -> usize {
        self.tgt.iter().map(|t| t.len() - 1).sum()
    }
}

/// Encoder output on a tape.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `(B·N)×H`, batch-major.
    pub hidden: Var,
    pub max_len: usize,
    pub lens: Vec<usize>,
}

impl Encoded {
    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn rows(&self) -> usize {
        self.lens.len() * self.max_len
    }
}

/// Latent memory prepared for attention.
#[derive(Clone, Debug)]
pub struct AttnMemory {
    /// `(B·N)×D`
    pub z: Var,
    uz: Var,
    mask_bias: Option<Var>,
    rep: Vec<usize>,
    pub batch: usize,
    pub n: usize,
}

/// Decoder state after one step for a single sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub s: Vec<f64>,
    pub c: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub encoder: Gru,
    pub posterior: Option<PosteriorNet>,
    pub projection: Option<Tensor>,
    pub att_w: Tensor,
    pub att_u: Tensor,
    pub att_v: Tensor,
    pub decoder: Gru,
    pub out_w: Tensor,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embedding: Var,
    pub encoder: GruVars,
    pub posterior: Option<PosteriorVars>,
    pub projection: Option<Var>,
    pub att_w: Var,
    pub att_u: Var,
    pub att_v: Var,
    pub decoder: GruVars,
    pub out_w: Var,
    order: Vec<Var>,
}

impl ModelVars {
    /// Handles in the same order as [`Seq2SeqModel::tensors`].
    pub fn in_order(&self) -> &[Var] {
        &self.order
    }
}

fn param(t: Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    Tensor::param(shape, t.into_data()).expect("shape")
}

impl Seq2SeqModel {
    /// All-zero parameters with the right shapes.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            vocab: v,
            emb: e,
            hidden: h,
            latent: d,
            ..
        } = config;
        let mut m = Self {
            config,
            embedding: Tensor::zeros(vec![v, e]),
            encoder: Gru::zeros(e, h),
            posterior: config.variant.is_stochastic().then(|| PosteriorNet::zeroed(h, d)),
            projection: config.has_projection().then(|| Tensor::zeros(vec![h, d])),
            att_w: Tensor::zeros(vec![h, h]),
            att_u: Tensor::zeros(vec![d, h]),
            att_v: Tensor::zeros(vec![h, 1]),
            decoder: Gru::zeros(e + d, h),
            out_w: Tensor::zeros(vec![h, v]),
        };
        for (_, t) in m.tensors_mut() {
            *t = param(t.clone());
        }
        Ok(m)
    }

    /// Uniform(−0.08, 0.08) matrices and zero biases, drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = SeededRng::derived(seed, "init", 0);
        for (_, t) in m.tensors_mut() {
            if t.shape().len() == 2 {
                t.data_mut().iter_mut().for_each(|x| *x = rng.uniform_range(-INIT_RANGE, INIT_RANGE));
            }
        }
        Ok(m)
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> = vec![
            ("embedding", &self.embedding),
            ("encoder.w_in", &self.encoder.w_in),
            ("encoder.w_hid", &self.encoder.w_hid),
            ("encoder.b_in", &self.encoder.b_in),
            ("encoder.b_hid", &self.encoder.b_hid),
        ];
        if let Some(p) = &self.posterior {
            out.extend(PosteriorNet::NAMES.into_iter().zip(p.tensors()));
        }
        if let Some(p) = &self.projection {
            out.push(("projection", p));
        }
        out.extend([
            ("attention.w", &self.att_w),
            ("attention.u", &self.att_u),
            ("attention.v", &self.att_v),
            ("decoder.w_in", &self.decoder.w_in),
            ("decoder.w_hid", &self.decoder.w_hid),
            ("decoder.b_in", &self.decoder.b_in),
            ("decoder.b_hid", &self.decoder.b_hid),
            ("output.w", &self.out_w),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<(&'static str, &mut Tensor)> = vec![
            ("embedding", &mut self.embedding),
            ("encoder.w_in", &mut self.encoder.w_in),
            ("encoder.w_hid", &mut self.encoder.w_hid),
            ("encoder.b_in", &mut self.encoder.b_in),
            ("encoder.b_hid", &mut self.encoder.b_hid),
        ];
        if let Some(p) = &mut self.posterior {
            out.extend(PosteriorNet::NAMES.into_iter().zip(p.tensors_mut()));
        }
        if let Some(p) = &mut self.projection {
            out.push(("projection", p));
        }
        out.extend([
            ("attention.w", &mut self.att_w),
            ("attention.u", &mut self.att_u),
            ("attention.v", &mut self.att_v),
            ("decoder.w_in", &mut self.decoder.w_in),
            ("decoder.w_hid", &mut self.decoder.w_hid),
            ("decoder.b_in", &mut self.decoder.b_in),
            ("decoder.b_hid", &mut self.decoder.b_hid),
            ("output.w", &mut self.out_w),
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds a model from named tensors; every expected name must be present
    /// with the expected shape and nothing else may be.
    pub fn from_tensors(config: ModelConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        for (name, t) in m.tensors_mut() {
            let src = named
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(m)
    }

    /// Records every parameter on `tape`; `trainable = false` records constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let order: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|(_, t)| if trainable { tape.leaf(t) } else { tape.frozen(t) })
            .collect();
        let mut it = order.iter().copied();
        let mut next = || it.next().expect("parameter count");
        let embedding = next();
        let encoder = GruVars {
            w_in: next(),
            w_hid: next(),
            b_in: next(),
            b_hid: next(),
        };
        let posterior = self.posterior.as_ref().map(|_| PosteriorVars {
            mu_w1: next(),
            mu_b1: next(),
            mu_w2: next(),
            mu_b2: next(),
            lv_w1: next(),
            lv_b1: next(),
            lv_w2: next(),
            lv_b2: next(),
        });
        let projection = self.projection.as_ref().map(|_| next());
        let att_w = next();
        let att_u = next();
        let att_v = next();
        let decoder = GruVars {
            w_in: next(),
            w_hid: next(),
            b_in: next(),
            b_hid: next(),
        };
        let out_w = next();
        ModelVars {
            embedding,
            encoder,
            posterior,
            projection,
            att_w,
            att_u,
            att_v,
            decoder,
            out_w,
            order,
        }
    }

    /// Adds the tape gradients of every bound parameter into the model.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &ModelVars) {
        for ((_, t), v) in self.tensors_mut().into_iter().zip(vars.in_order()) {
            tape.accumulate_into(*v, t);
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab) {
            Some(t) => Err(Error::InvalidOperand {
                op: "encode",
                msg: format!("token id {t} out of range for vocabulary of {}", self.config.vocab),
            }),
            None => Ok(()),
        }
    }

    pub fn encode_batch(&self, tape: &mut Tape, vars: &ModelVars, batch: &Batch) -> Result<Encoded> {
        if batch.is_empty() {
            return Err(Error::InvalidOperand {
                op: "encode",
                msg: "empty batch".into(),
            });
        }
        for s in &batch.src {
            if s.is_empty() {
                return Err(Error::InvalidOperand {
                    op: "encode",
                    msg: "empty source sequence".into(),
                });
            }
            self.check_tokens(s)?;
        }
        let b = batch.len();
        let n = batch.max_src_len();
        let hd = self.config.hidden;
        let mut h = tape.zeros(vec![b, hd]);
        let mut states = Vec::with_capacity(n);
        for t in 0..n {
            let ids: Vec<usize> = batch.src.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            let x = tape.gather_rows(vars.embedding, ids)?;
            h = gru_cell(tape, &vars.encoder, x, h, hd)?;
            states.push(h);
        }
        let stacked = if n == 1 { states[0] } else { tape.concat_rows(&states)? };
        let hidden = if b == 1 {
            stacked
        } else {
            let perm = (0..b).flat_map(|s| (0..n).map(move |i| i * b + s)).collect();
            tape.gather_rows(stacked, perm)?
        };
        Ok(Encoded {
            hidden,
            max_len: n,
            lens: batch.src_lens.clone(),
        })
    }

    /// Prior mean on the tape and per-sequence GP joints built from the
    /// current hidden-state values.
    pub fn gp_prior(&self, tape: &mut Tape, vars: &ModelVars, enc: &Encoded) -> Result<(Var, Vec<GpJoint>)> {
        let spec = self
            .config
            .gp_spec
            .ok_or_else(|| Error::config("the gp prior needs a gp_spec"))?;
        let (hd, d) = (self.config.hidden, self.config.latent);
        let mean = match (spec.mean_mode, vars.projection) {
            (MeanMode::Identity, Some(p)) => tape.matmul(enc.hidden, p)?,
            (MeanMode::Identity, None) => enc.hidden,
            (MeanMode::Zero, _) => tape.zeros(vec![enc.rows(), d]),
        };
        let hv = tape.value(enc.hidden);
        let mv = tape.value(mean);
        let mut joints = Vec::with_capacity(enc.batch());
        for (b, &n) in enc.lens.iter().enumerate() {
            let start = b * enc.max_len;
            let h = DMatrix::from_row_slice(n, hd, &hv[start * hd..(start + n) * hd]);
            let m = DMatrix::from_row_slice(n, d, &mv[start * d..(start + n) * d]);
            joints.push(GpJoint::with_mean(&spec, &h, m)?);
        }
        Ok((mean, joints))
    }

    pub fn attention_memory(&self, tape: &mut Tape, vars: &ModelVars, z: Var, lens: &[usize], n: usize) -> Result<AttnMemory> {
        let b = lens.len();
        let shape = tape.shape(z);
        if shape != [b * n, self.config.latent] {
            return Err(Error::dim(format!(
                "latent memory is {shape:?}, expected [{}, {}]",
                b * n,
                self.config.latent
            )));
        }
        let uz = tape.matmul(z, vars.att_u)?;
        let mask_bias = if lens.iter().all(|&l| l == n) {
            None
        } else {
            let mut bias = vec![0.0; b * n];
            for (s, &l) in lens.iter().enumerate() {
                bias[s * n + l..(s + 1) * n].iter_mut().for_each(|x| *x = MASK_BIAS);
            }
            Some(tape.constant(vec![b, n], bias)?)
        };
        Ok(AttnMemory {
            z,
            uz,
            mask_bias,
            rep: (0..b).flat_map(|s| std::iter::repeat_n(s, n)).collect(),
            batch: b,
            n,
        })
    }

    /// Repeats a single-sequence memory `k` times, for decoding `k` states at once.
    pub fn tile_memory(&self, tape: &mut Tape, mem: &AttnMemory, k: usize) -> Result<AttnMemory> {
        if mem.batch != 1 {
            return Err(Error::dim("only single-sequence memories can be tiled"));
        }
        if k == 1 {
            return Ok(mem.clone());
        }
        let idx: Vec<usize> = (0..k).flat_map(|_| 0..mem.n).collect();
        let z = tape.gather_rows(mem.z, idx.clone())?;
        let uz = tape.gather_rows(mem.uz, idx)?;
        Ok(AttnMemory {
            z,
            uz,
            mask_bias: None,
            rep: (0..k).flat_map(|s| std::iter::repeat_n(s, mem.n)).collect(),
            batch: k,
            n: mem.n,
        })
    }

    /// Attention weights `B×N` and context `B×D` for decoder states `s_prev` (`B×H`).
    pub fn attend_on_tape(&self, tape: &mut Tape, vars: &ModelVars, mem: &AttnMemory, s_prev: Var) -> Result<(Var, Var)> {
        let (b, n) = (mem.batch, mem.n);
        let ws = tape.matmul(s_prev, vars.att_w)?;
        let ws = if n == 1 { ws } else { tape.gather_rows(ws, mem.rep.clone())? };
        let e = tape.add(ws, mem.uz)?;
        let e = tape.tanh(e)?;
        let scores = tape.matmul(e, vars.att_v)?;
        let mut scores = tape.reshape(scores, vec![b, n])?;
        if let Some(bias) = mem.mask_bias {
            scores = tape.add(scores, bias)?;
        }
        let alpha = tape.softmax(scores)?;
        let col = tape.reshape(alpha, vec![b * n, 1])?;
        let weighted = tape.mul(col, mem.z)?;
        let c = if n == 1 { weighted } else { tape.sum_row_groups(weighted, n)? };
        Ok((alpha, c))
    }

    /// One decoder step: returns `(s, alpha, c)`.
    pub fn step_on_tape(&self, tape: &mut Tape, vars: &ModelVars, mem: &AttnMemory, s_prev: Var, y_prev: &[usize]) -> Result<(Var, Var, Var)> {
        self.check_tokens(y_prev)?;
        let (alpha, c) = self.attend_on_tape(tape, vars, mem, s_prev)?;
        let emb = tape.gather_rows(vars.embedding, y_prev.to_vec())?;
        let x = tape.concat_cols(&[emb, c])?;
        let s = gru_cell(tape, &vars.decoder, x, s_prev, self.config.hidden)?;
        Ok((s, alpha, c))
    }

    /// Mean per-token NLL of `batch.tgt` under teacher forcing given latent memory `z`.
    pub fn teacher_forced_nll(&self, tape: &mut Tape, vars: &ModelVars, enc: &Encoded, z: Var, batch: &Batch) -> Result<Var> {
        if batch.tgt.len() != batch.len() || batch.tgt.iter().any(|t| t.len() < 2) {
            return Err(Error::InvalidOperand {
                op: "forward_teacher_forced",
                msg: "every target needs at least BOS and EOS".into(),
            });
        }
        for t in &batch.tgt {
            self.check_tokens(t)?;
        }
        let b = batch.len();
        let steps = batch.max_tgt_len() - 1;
        let vocab = self.config.vocab;
        let mem = self.attention_memory(tape, vars, z, &enc.lens, enc.max_len)?;
        let mut s = tape.zeros(vec![b, self.config.hidden]);
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let prev: Vec<usize> = batch.tgt.iter().map(|y| y.get(t).copied().unwrap_or(PAD)).collect();
            s = self.step_on_tape(tape, vars, &mem, s, &prev)?.0;
            states.push(s);
        }
        let all = if steps == 1 { states[0] } else { tape.concat_rows(&states)? };
        let logits = tape.matmul(all, vars.out_w)?;
        let logp = tape.log_softmax(logits)?;
        let mut pick = vec![0.0; steps * b * vocab];
        for t in 0..steps {
            for (i, y) in batch.tgt.iter().enumerate() {
                if let Some(&gold) = y.get(t + 1) {
                    pick[(t * b + i) * vocab + gold] = 1.0;
                }
            }
        }
        let pick = tape.constant(vec![steps * b, vocab], pick)?;
        let ll = tape.mul(logp, pick)?;
        let ll = tape.sum(ll)?;
        tape.scale(ll, -1.0 / batch.target_tokens() as f64)
    }

    fn single_memory(&self, tape: &mut Tape, vars: &ModelVars, z: &DMatrix<f64>) -> Result<AttnMemory> {
        if z.nrows() == 0 {
            return Err(Error::dim("latent memory has no positions"));
        }
        let zt = tape.constant(vec![z.nrows(), z.ncols()], row_major(z))?;
        self.attention_memory(tape, vars, zt, &[z.nrows()], z.nrows())
    }

    /// Hidden states `n×H` for one source sequence.
    pub fn encode(&self, tokens: &[usize]) -> Result<DMatrix<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let enc = self.encode_batch(&mut tape, &vars, &Batch::sources(vec![tokens.to_vec()])?)?;
        Ok(DMatrix::from_row_slice(tokens.len(), self.config.hidden, tape.value(enc.hidden)))
    }

    /// Hidden states and, for stochastic variants, the amortized posterior.
    pub fn infer(&self, tokens: &[usize]) -> Result<(DMatrix<f64>, Option<LatentPosterior>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let enc = self.encode_batch(&mut tape, &vars, &Batch::sources(vec![tokens.to_vec()])?)?;
        let h = DMatrix::from_row_slice(tokens.len(), self.config.hidden, tape.value(enc.hidden));
        let post = match &vars.posterior {
            Some(pv) => {
                let p = infer_posterior(&mut tape, pv, enc.hidden)?;
                Some(LatentPosterior::from_tape(&tape, &p))
            }
            None => None,
        };
        Ok((h, post))
    }

    /// GP joint prior over the latent context of one source.
    pub fn gp_joint(&self, tokens: &[usize]) -> Result<GpJoint> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let enc = self.encode_batch(&mut tape, &vars, &Batch::sources(vec![tokens.to_vec()])?)?;
        let (_, mut joints) = self.gp_prior(&mut tape, &vars, &enc)?;
        Ok(joints.pop().expect("one sequence"))
    }

    /// Attention weights and context for a single decoder state.
    pub fn attend(&self, s_prev: &[f64], z: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let mem = self.single_memory(&mut tape, &vars, z)?;
        let s = tape.constant(vec![1, self.config.hidden], s_prev.to_vec())?;
        let (alpha, c) = self.attend_on_tape(&mut tape, &vars, &mem, s)?;
        Ok((tape.value(alpha).to_vec(), tape.value(c).to_vec()))
    }

    /// One decoder step for a single sequence; returns the new state and `V` logits.
    pub fn decode_step(&self, s_prev: &[f64], y_prev: usize, z: &DMatrix<f64>) -> Result<(DecoderState, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let mem = self.single_memory(&mut tape, &vars, z)?;
        let s = tape.constant(vec![1, self.config.hidden], s_prev.to_vec())?;
        let (s, alpha, c) = self.step_on_tape(&mut tape, &vars, &mem, s, &[y_prev])?;
        let logits = tape.matmul(s, vars.out_w)?;
        let state = DecoderState {
            s: tape.value(s).to_vec(),
            c: tape.value(c).to_vec(),
            alpha: tape.value(alpha).to_vec(),
        };
        Ok((state, tape.value(logits).to_vec()))
    }

    /// Mean per-token NLL of `tgt` given `src` and latent memory `z`.
    pub fn forward_teacher_forced(&self, src: &[usize], tgt: &[usize], z: &DMatrix<f64>) -> Result<f64> {
        if z.nrows() != src.len() {
            return Err(Error::dim(format!("{} latent rows for a source of length {}", z.nrows(), src.len())));
        }
        let batch = Batch::new(vec![src.to_vec()], vec![tgt.to_vec()])?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let zt = tape.constant(vec![z.nrows(), z.ncols()], row_major(z))?;
        let enc = Encoded {
            hidden: zt,
            max_len: src.len(),
            lens: vec![src.len()],
        };
        let nll = self.teacher_forced_nll(&mut tape, &vars, &enc, zt, &batch)?;
        Ok(tape.item(nll))
    }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

#[cfg(test)]
pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(variant: Variant) -> ModelConfig {
        let spec = (variant == Variant::Gp).then(GpPriorSpec::default);
        ModelConfig::new(12, 5, 6, 6, variant, spec).unwrap()
    }

    #[test]
    fn config_rules() {
        assert!(ModelConfig::new(10, 4, 6, 5, Variant::Deterministic, None).is_err());
        assert!(ModelConfig::new(10, 4, 6, 6, Variant::Gp, None).is_err());
        let c = ModelConfig::new(10, 4, 6, 5, Variant::Gp, Some(GpPriorSpec::default())).unwrap();
        assert!(c.has_projection());
        let m = Seq2SeqModel::init(c, 1).unwrap();
        assert_eq!(m.projection.as_ref().unwrap().shape(), &[6, 5]);
        assert_eq!("gp".parse::<Variant>().unwrap(), Variant::Gp);
        assert!("lstm".parse::<Variant>().is_err());
    }

    #[test]
    fn init_ranges_and_biases() {
        let m = Seq2SeqModel::init(cfg(Variant::Gp), 3).unwrap();
        for (name, t) in m.tensors() {
            assert!(t.requires_grad(), "{name}");
            if t.shape().len() == 1 {
                assert!(t.data().iter().all(|x| *x == 0.0), "{name}");
            } else {
                assert!(t.data().iter().all(|x| x.abs() <= INIT_RANGE), "{name}");
            }
        }
        assert_eq!(m, Seq2SeqModel::init(cfg(Variant::Gp), 3).unwrap());
        assert_ne!(m, Seq2SeqModel::init(cfg(Variant::Gp), 4).unwrap());
    }

    #[test]
    fn encode_shapes_and_zero_fixed_point() {
        let m = Seq2SeqModel::zeros(cfg(Variant::Deterministic)).unwrap();
        let h = m.encode(&[5]).unwrap();
        assert_eq!(h.shape(), (1, 6));
        let h = m.encode(&[4, 5, 6]).unwrap();
        assert!(h.iter().all(|x| *x == 0.0));
        assert!(m.encode(&[12]).is_err());
    }

    #[test]
    fn encoder_is_causal() {
        let m = Seq2SeqModel::init(cfg(Variant::Deterministic), 5).unwrap();
        let a = m.encode(&[4, 5, 6, 7, 8]).unwrap();
        let b = m.encode(&[4, 5, 9, 8, 7]).unwrap();
        for i in 0..2 {
            assert_eq!(a.row(i), b.row(i));
        }
        for i in 2..5 {
            assert_ne!(a.row(i), b.row(i));
        }
    }

    #[test]
    fn batched_encoding_matches_single() {
        let m = Seq2SeqModel::init(cfg(Variant::Deterministic), 5).unwrap();
        let srcs = vec![vec![4, 5, 6], vec![7], vec![8, 9]];
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let enc = m.encode_batch(&mut tape, &vars, &Batch::sources(srcs.clone()).unwrap()).unwrap();
        let all = tape.value(enc.hidden);
        for (b, s) in srcs.iter().enumerate() {
            let single = m.encode(s).unwrap();
            for i in 0..s.len() {
                let row = &all[(b * 3 + i) * 6..(b * 3 + i + 1) * 6];
                for d in 0..6 {
                    assert_abs_diff_eq!(row[d], single[(i, d)], epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn attention_symmetry_and_single_position() {
        let m = Seq2SeqModel::init(cfg(Variant::Deterministic), 2).unwrap();
        let z = DMatrix::from_fn(3, 6, |_, j| j as f64 * 0.1);
        let (alpha, c) = m.attend(&[0.3; 6], &z).unwrap();
        for a in &alpha {
            assert_abs_diff_eq!(*a, 1.0 / 3.0, epsilon = 1e-12);
        }
        for d in 0..6 {
            assert_abs_diff_eq!(c[d], z[(0, d)], epsilon = 1e-12);
        }
        let z1 = DMatrix::from_fn(1, 6, |_, j| j as f64 - 2.0);
        let (alpha, c) = m.attend(&[0.1; 6], &z1).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(c, z1.row(0).iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn attention_hand_case() {
        let mut m = Seq2SeqModel::zeros(ModelConfig::new(5, 2, 2, 2, Variant::Deterministic, None).unwrap()).unwrap();
        m.att_u.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        m.att_v.data_mut().copy_from_slice(&[1.0, 0.0]);
        let z = DMatrix::from_row_slice(2, 2, &[0.5, 9.0, -1.0, 3.0]);
        let (alpha, _) = m.attend(&[0.7, -0.2], &z).unwrap();
        let (a, b) = (0.5f64.tanh(), (-1.0f64).tanh());
        let expect0 = a.exp() / (a.exp() + b.exp());
        assert_abs_diff_eq!(alpha[0], expect0, epsilon = 1e-14);
        assert_abs_diff_eq!(alpha[1], 1.0 - expect0, epsilon = 1e-14);
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let mut m = Seq2SeqModel::init(cfg(Variant::Deterministic), 2).unwrap();
        m.out_w.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let z = m.encode(&[4, 5]).unwrap();
        let (state, logits) = m.decode_step(&[0.0; 6], BOS, &z).unwrap();
        assert_eq!(logits.len(), 12);
        assert!(logits.iter().all(|x| *x == 0.0));
        assert_abs_diff_eq!(state.alpha.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let nll = m.forward_teacher_forced(&[4, 5], &[BOS, 7, EOS], &z).unwrap();
        assert_abs_diff_eq!(nll, 12f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn teacher_forced_nll_is_sum_of_steps() {
        let m = Seq2SeqModel::init(cfg(Variant::Deterministic), 9).unwrap();
        let src = [4, 5, 6];
        let tgt = [BOS, 6, 5, 4, EOS];
        let z = m.encode(&src).unwrap();
        let mut s = vec![0.0; 6];
        let mut total = 0.0;
        for t in 0..tgt.len() - 1 {
            let (st, logits) = m.decode_step(&s, tgt[t], &z).unwrap();
            total -= log_softmax(&logits)[tgt[t + 1]];
            s = st.s;
        }
        let mean = m.forward_teacher_forced(&src, &tgt, &z).unwrap();
        assert_abs_diff_eq!(mean * 4.0, total, epsilon = 1e-12);
        let shortest = m.forward_teacher_forced(&src, &[BOS, EOS], &z).unwrap();
        let (_, logits) = m.decode_step(&[0.0; 6], BOS, &z).unwrap();
        assert_abs_diff_eq!(shortest, -log_softmax(&logits)[EOS], epsilon = 1e-12);
    }

    #[test]
    fn duplicated_batch_gives_same_loss() {
        let m = Seq2SeqModel::init(cfg(Variant::Deterministic), 9).unwrap();
        let loss = |k: usize| {
            let batch = Batch::new(vec![vec![4, 5, 6]; k], vec![vec![BOS, 6, 5, EOS]; k]).unwrap();
            let mut tape = Tape::new();
            let vars = m.bind(&mut tape, false);
            let enc = m.encode_batch(&mut tape, &vars, &batch).unwrap();
            let nll = m.teacher_forced_nll(&mut tape, &vars, &enc, enc.hidden, &batch).unwrap();
            tape.item(nll)
        };
        assert_abs_diff_eq!(loss(1), loss(2), epsilon = 1e-14);
    }

    #[test]
    fn padded_batch_matches_individual_losses() {
        let m = Seq2SeqModel::init(cfg(Variant::Deterministic), 9).unwrap();
        let srcs = vec![vec![4, 5, 6, 7], vec![8]];
        let tgts = vec![vec![BOS, 7, EOS], vec![BOS, 8, 8, 8, EOS]];
        let batch = Batch::new(srcs.clone(), tgts.clone()).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let enc = m.encode_batch(&mut tape, &vars, &batch).unwrap();
        let nll = m.teacher_forced_nll(&mut tape, &vars, &enc, enc.hidden, &batch).unwrap();
        let mut sum = 0.0;
        for (s, t) in srcs.iter().zip(&tgts) {
            let z = m.encode(s).unwrap();
            sum += m.forward_teacher_forced(s, t, &z).unwrap() * (t.len() - 1) as f64;
        }
        assert_abs_diff_eq!(tape.item(nll), sum / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn later_targets_do_not_change_earlier_logits() {
        let m = Seq2SeqModel::init(cfg(Variant::Deterministic), 4).unwrap();
        let z = m.encode(&[4, 5]).unwrap();
        let first = |tgt: &[usize]| {
            let (st, _) = m.decode_step(&[0.0; 6], tgt[0], &z).unwrap();
            m.decode_step(&st.s, tgt[1], &z).unwrap().1
        };
        assert_eq!(first(&[BOS, 6, 7, EOS]), first(&[BOS, 6, 9, 4, EOS]));
    }

    #[test]
    fn batch_validation() {
        assert!(Batch::new(vec![vec![4]], vec![vec![BOS]]).is_err());
        assert!(Batch::new(vec![vec![4]], vec![vec![4, EOS]]).is_err());
        assert!(Batch::new(vec![vec![]], vec![vec![BOS, EOS]]).is_err());
        assert!(Batch::new(vec![vec![4]], vec![]).is_err());
    }

    #[test]
    fn from_tensors_round_trip() {
        let m = Seq2SeqModel::init(cfg(Variant::Normal), 6).unwrap();
        let named: BTreeMap<String, Tensor> = m.tensors().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert_eq!(Seq2SeqModel::from_tensors(m.config, named.clone()).unwrap(), m);
        let mut missing = named.clone();
        missing.remove("output.w");
        assert!(Seq2SeqModel::from_tensors(m.config, missing).is_err());
        let mut extra = named;
        extra.insert("bogus".into(), Tensor::zeros(vec![1]));
        assert!(Seq2SeqModel::from_tensors(m.config, extra).is_err());
    }
}
