//! Python bindings for the GP prior, metrics, corpora and trained models.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use gpvseq_core::checkpoint::load_checkpoint;
use gpvseq_core::corpus::{gen_copy_task, gen_synonym_task, CopyTaskParams, GeneratedTask, SynonymTaskParams, Vocabulary};
use gpvseq_core::decode::{generate, GenMode, GenerationConfig};
use gpvseq_core::demo::{gp_demo as run_gp_demo, linspace};
use gpvseq_core::gp::{self, MeanMode};
use gpvseq_core::metrics;
use gpvseq_core::rng::SeededRng;
use gpvseq_core::seq2seq::Seq2SeqModel;
use gpvseq_core::variational::{self, LatentPosterior};
use gpvseq_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

type Rows = Vec<Vec<f64>>;
type PyPairs = Vec<(Vec<String>, Vec<Vec<String>>)>;

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[pyclass(name = "GpPriorSpec", module = "gpvseq", frozen)]
struct PyGpPriorSpec {
    inner: gp::GpPriorSpec,
}

#[pymethods]
impl PyGpPriorSpec {
    #[new]
    #[pyo3(signature = (v=1.0, r=1.0, sigma2=0.1, mean_mode="identity", standardize=true, override_bounds=false))]
    fn new(v: f64, r: f64, sigma2: f64, mean_mode: &str, standardize: bool, override_bounds: bool) -> PyResult<Self> {
        let mode = match mean_mode {
            "identity" => MeanMode::Identity,
            "zero" => MeanMode::Zero,
            other => return Err(PyValueError::new_err(format!("unknown mean mode {other:?}"))),
        };
        let spec = if override_bounds {
            gp::GpPriorSpec::with_override(v, r, sigma2, mode)
        } else {
            gp::GpPriorSpec::new(v, r, sigma2, mode)
        }
        .map_err(py_err)?;
        Ok(Self {
            inner: if standardize { spec } else { spec.without_standardization() },
        })
    }

    #[getter]
    fn v(&self) -> f64 {
        self.inner.v
    }

    #[getter]
    fn r(&self) -> f64 {
        self.inner.r
    }

    #[getter]
    fn sigma2(&self) -> f64 {
        self.inner.sigma2
    }

    #[getter]
    fn standardize(&self) -> bool {
        self.inner.standardize
    }

    fn kernel(&self, h: Vec<f64>, h2: Vec<f64>) -> PyResult<f64> {
        self.inner.kernel(&h, &h2).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "GpPriorSpec(v={}, r={}, sigma2={}, mean_mode={:?}, standardize={})",
            self.inner.v, self.inner.r, self.inner.sigma2, self.inner.mean_mode, self.inner.standardize
        )
    }
}

#[pyclass(name = "GpJoint", module = "gpvseq", frozen)]
struct PyGpJoint {
    inner: gp::GpJoint,
}

#[pymethods]
impl PyGpJoint {
    #[new]
    fn new(spec: &PyGpPriorSpec, hidden: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = gp::GpJoint::build(&spec.inner, &matrix(&hidden)?).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn gram(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.gram().matrix())
    }

    fn sample_prior(&self, seed: u64) -> Vec<Vec<f64>> {
        to_rows(&self.inner.sample_prior_function(&mut SeededRng::new(seed)))
    }

    /// Returns `(mean, cov)` at the query rows.
    fn posterior_predict(&self, observed_z: Vec<Vec<f64>>, query: Vec<Vec<f64>>) -> PyResult<(Rows, Rows)> {
        let (mean, cov) = self
            .inner
            .posterior_predict(&matrix(&observed_z)?, &matrix(&query)?)
            .map_err(py_err)?;
        Ok((to_rows(&mean), to_rows(cov.matrix())))
    }
}

fn posterior(mu: Vec<Vec<f64>>, s: Vec<Vec<f64>>) -> PyResult<LatentPosterior> {
    LatentPosterior::new(matrix(&mu)?, matrix(&s)?).map_err(py_err)
}

#[pyfunction]
fn kl_diag_vs_gp(mu: Vec<Vec<f64>>, s: Vec<Vec<f64>>, joint: &PyGpJoint) -> PyResult<f64> {
    variational::kl_diag_vs_gp(&posterior(mu, s)?, &joint.inner).map_err(py_err)
}

#[pyfunction]
fn kl_diag_vs_standard_normal(mu: Vec<Vec<f64>>, s: Vec<Vec<f64>>) -> PyResult<f64> {
    variational::kl_diag_vs_standard_normal(&posterior(mu, s)?).map_err(py_err)
}

#[pyfunction]
fn bleu2(hyp: Vec<String>, refs: Vec<Vec<String>>) -> PyResult<f64> {
    metrics::bleu2(&hyp, &refs).map_err(py_err)
}

#[pyfunction]
fn corpus_bleu2(pairs: Vec<(Vec<String>, Vec<Vec<String>>)>) -> PyResult<f64> {
    metrics::corpus_bleu2(&pairs).map_err(py_err)
}

#[pyfunction]
fn self_bleu2(outputs: Vec<Vec<String>>) -> PyResult<f64> {
    metrics::self_bleu2(&outputs).map_err(py_err)
}

#[pyfunction]
fn div4(outputs: Vec<Vec<String>>) -> f64 {
    metrics::div4(&outputs)
}

#[pyfunction]
fn uniqueness(outputs: Vec<Vec<String>>) -> PyResult<f64> {
    metrics::uniqueness(&outputs).map_err(py_err)
}


fn pairs(task: GeneratedTask) -> PyPairs {
    task.corpus.pairs.into_iter().map(|p| (p.src, p.refs)).collect()
}

#[pyfunction]
#[pyo3(signature = (n_pairs=2000, vocab_size=50, len_min=4, len_max=10, seed=0))]
fn gen_copy(n_pairs: usize, vocab_size: usize, len_min: usize, len_max: usize, seed: u64) -> PyResult<PyPairs> {
    let p = CopyTaskParams {
        n_pairs,
        vocab_size,
        len_min,
        len_max,
        seed,
    };
    gen_copy_task(&p).map(pairs).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (n_pairs=4000, n_classes=24, class_size=3, len_min=5, len_max=12, refs_per_src=4, seed=0))]
fn gen_synonym(n_pairs: usize, n_classes: usize, class_size: usize, len_min: usize, len_max: usize, refs_per_src: usize, seed: u64) -> PyResult<PyPairs> {
    let p = SynonymTaskParams {
        n_pairs,
        n_classes,
        class_size,
        len_min,
        len_max,
        refs_per_src,
        seed,
    };
    gen_synonym_task(&p).map(pairs).map_err(py_err)
}

/// CSV text of prior and posterior function samples on `[x_min, x_max]`.
#[pyfunction]
#[pyo3(signature = (v=1.0, r=1.0, sigma2=0.0, n_train=6, seed=0, x_min=-5.0, x_max=5.0, points=101))]
#[allow(clippy::too_many_arguments)]
fn gp_demo(v: f64, r: f64, sigma2: f64, n_train: usize, seed: u64, x_min: f64, x_max: f64, points: usize) -> PyResult<String> {
    let spec = gp::GpPriorSpec::with_override(v, r, sigma2, MeanMode::Zero).map_err(py_err)?;
    let demo = run_gp_demo(&spec, &linspace(x_min, x_max, points), n_train, seed).map_err(py_err)?;
    Ok(demo.to_csv())
}

/// A trained checkpoint together with its vocabulary.
#[pyclass(name = "Model", module = "gpvseq", frozen)]
struct PyModel {
    model: Seq2SeqModel,
    vocab: Vocabulary,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(checkpoint: PathBuf, vocab: PathBuf) -> PyResult<Self> {
        let model = load_checkpoint(&checkpoint).map_err(py_err)?;
        let vocab = Vocabulary::load(&vocab).map_err(py_err)?;
        if vocab.len() != model.config.vocab {
            return Err(PyValueError::new_err(format!(
                "vocabulary has {} tokens, checkpoint expects {}",
                vocab.len(),
                model.config.vocab
            )));
        }
        Ok(Self { model, vocab })
    }

    #[getter]
    fn variant(&self) -> String {
        self.model.variant().to_string()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.num_parameters()
    }

    /// Decoded token lists, one per hypothesis.
    #[pyo3(signature = (src, mode="mean", tau=1.0, beam=10, max_len=16, seed=0, num_samples=1, source_index=0))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        src: Vec<String>,
        mode: &str,
        tau: f64,
        beam: usize,
        max_len: usize,
        seed: u64,
        num_samples: usize,
        source_index: usize,
    ) -> PyResult<Vec<Vec<String>>> {
        let mode: GenMode = mode.parse().map_err(py_err)?;
        let cfg = GenerationConfig {
            mode,
            tau,
            beam,
            max_len,
            seed,
            num_samples,
        };
        let ids = self.vocab.encode(&src, true).map_err(py_err)?;
        let hyps = generate(&self.model, &ids, source_index, &cfg).map_err(py_err)?;
        Ok(hyps.iter().map(|h| self.vocab.decode(h.content())).collect())
    }
}

#[pymodule]
fn gpvseq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGpPriorSpec>()?;
    m.add_class::<PyGpJoint>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(kl_diag_vs_gp, m)?)?;
    m.add_function(wrap_pyfunction!(kl_diag_vs_standard_normal, m)?)?;
    m.add_function(wrap_pyfunction!(bleu2, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu2, m)?)?;
    m.add_function(wrap_pyfunction!(self_bleu2, m)?)?;
    m.add_function(wrap_pyfunction!(div4, m)?)?;
    m.add_function(wrap_pyfunction!(uniqueness, m)?)?;
    m.add_function(wrap_pyfunction!(gen_copy, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synonym, m)?)?;
    m.add_function(wrap_pyfunction!(gp_demo, m)?)?;
    Ok(())
}
