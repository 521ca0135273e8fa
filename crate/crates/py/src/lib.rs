//! Python module `critart`: corpus generation and loading, training,
//! evaluation, criticality analysis and the two custom operators.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use critart::analyze::{build_report, frame_weights, ReportOptions};
use critart::autodiff::{Graph, Tensor};
use critart::cli::gradcheck::{run_suite, CheckSize};
use critart::config::KvConfig;
use critart::data::{self as cdata, SyntheticSpec};
use critart::pipeline::{Pipeline, PipelineConfig};
use critart::train::{self as ctrain, TrainConfig, Trainer};

fn err(e: ::critart::Error) -> PyErr {
    match e {
        ::critart::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn rows_to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// A set of utterances sharing one phoneme table.
#[pyclass(name = "Corpus", from_py_object)]
#[derive(Clone)]
struct PyCorpus {
    inner: cdata::Corpus,
}

#[pymethods]
impl PyCorpus {
    /// Reads the utterances listed in a manifest file.
    #[staticmethod]
    fn load(manifest: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: cdata::load_corpus(&manifest).map_err(err)?,
        })
    }

    /// Synthetic utterances `start .. start + n` for the default spec with `seed`.
    #[staticmethod]
    #[pyo3(signature = (seed, n, phones_per_utt = 6, start = 0))]
    fn synthetic(seed: u64, n: usize, phones_per_utt: usize, start: usize) -> PyResult<Self> {
        let spec = SyntheticSpec::default_with_seed(seed);
        Ok(PyCorpus {
            inner: cdata::generate_range(&spec, start..start + n, phones_per_utt).map_err(err)?,
        })
    }

    /// Writes one file per utterance and a manifest; returns the manifest path.
    fn write(&self, dir: PathBuf) -> PyResult<PathBuf> {
        cdata::write_corpus(&self.inner, &dir).map_err(err)
    }

    #[getter]
    fn phonemes(&self) -> Vec<String> {
        self.inner.phonemes.clone()
    }

    #[getter]
    fn total_frames(&self) -> usize {
        self.inner.total_frames()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A trained (or freshly initialized) model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Pipeline,
    phonemes: Vec<String>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let (inner, phonemes) = ctrain::load_pipeline(&checkpoint).map_err(err)?;
        Ok(PyModel { inner, phonemes })
    }

    #[getter]
    fn phonemes(&self) -> Vec<String> {
        self.phonemes.clone()
    }

    /// Held-out metrics: accuracy, accuracy_no_ste, degenerate_rate, frames, rmse.
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        corpus: &PyCorpus,
    ) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let m = ctrain::evaluate(&self.inner, &corpus.inner, 8).map_err(err)?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("accuracy", m.accuracy)?;
        d.set_item("accuracy_no_ste", m.accuracy_no_ste)?;
        d.set_item("degenerate_rate", m.degenerate_rate)?;
        d.set_item("frames", m.frames)?;
        d.set_item("rmse", m.rmse.to_vec())?;
        Ok(d)
    }

    /// Per-phoneme mean weights, top-`k` channels and segment counts.
    #[pyo3(signature = (corpus, k = 3, resample = 10, use_ste = true))]
    fn analyze(
        &self,
        corpus: &PyCorpus,
        k: usize,
        resample: usize,
        use_ste: bool,
    ) -> PyResult<BTreeMap<String, (Vec<f64>, Vec<String>, usize)>> {
        let opts = ReportOptions {
            resample_len: resample,
            use_ste,
            ..ReportOptions::default()
        };
        let report = build_report(&self.inner, &corpus.inner, opts).map_err(err)?;
        report
            .phonemes
            .iter()
            .map(|p| {
                let top = p.top_k(k).map_err(err)?;
                Ok((
                    p.symbol.clone(),
                    (
                        p.means.to_vec(),
                        top.iter().map(|c| c.name().to_string()).collect(),
                        p.segments,
                    ),
                ))
            })
            .collect()
    }

    /// Eval-mode articulator weights, one `[frames][12]` list per utterance.
    fn frame_weights(&self, corpus: &PyCorpus) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let w = frame_weights(&self.inner, &corpus.inner, true, 8).map_err(err)?;
        Ok(w.iter().map(tensor_to_rows).collect())
    }
}

/// Trains on `corpus` with `config` keys (as in the config file) and returns
/// the model and one metrics dict per epoch. Writes the usual outputs when
/// `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (corpus, config = None, eval_corpus = None, out_dir = None))]
fn train(
    corpus: &PyCorpus,
    config: Option<BTreeMap<String, String>>,
    eval_corpus: Option<&PyCorpus>,
    out_dir: Option<PathBuf>,
) -> PyResult<(PyModel, Vec<BTreeMap<String, f64>>)> {
    let mut kv = KvConfig::parse("").map_err(err)?;
    for (k, v) in config.unwrap_or_default() {
        kv.set(&k, &v);
    }
    let model = PipelineConfig::from_kv(&mut kv, corpus.inner.phonemes.len()).map_err(err)?;
    let cfg = TrainConfig::from_kv(&mut kv).map_err(err)?;
    kv.finish().map_err(err)?;
    let mut t =
        Trainer::new(Pipeline::new(model).map_err(err)?, cfg, &corpus.inner).map_err(err)?;
    t.run(&corpus.inner, eval_corpus.map(|c| &c.inner))
        .map_err(err)?;
    if let Some(dir) = out_dir {
        t.save_outputs(&dir).map_err(err)?;
    }
    let log = t
        .log()
        .iter()
        .map(|m| {
            let mut d = BTreeMap::from([
                ("epoch".to_string(), m.epoch as f64),
                ("l_aai".to_string(), m.l_aai),
                ("l_fpc".to_string(), m.l_fpc),
                ("total".to_string(), m.total),
                ("train_acc".to_string(), m.train_acc),
            ]);
            if let Some(a) = m.eval_acc {
                d.insert("eval_acc".into(), a);
            }
            d
        })
        .collect();
    let phonemes = t.phonemes().to_vec();
    Ok((
        PyModel {
            inner: t.into_pipeline(),
            phonemes,
        },
        log,
    ))
}

/// Per-frame min-max normalization; returns the weights and degenerate flags.
#[pyfunction]
fn min_max_normalize(rows: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<bool>)> {
    let mut g = Graph::new();
    let raw = g.constant(rows_to_tensor(rows)?);
    let w = ::critart::nn::min_max_normalize(&mut g, raw);
    Ok((tensor_to_rows(g.value(w.weights)), w.degenerate))
}

/// Straight-through substitution: returns the forward value and the gradient
/// reaching `pred` for upstream gradient `upstream`.
#[pyfunction]
fn straight_through(
    pred: Vec<Vec<f64>>,
    gt: Vec<Vec<f64>>,
    upstream: Vec<Vec<f64>>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let cols = pred.first().map_or(1, |r| r.len().max(1));
    let p = g.param(rows_to_tensor(pred)?);
    let t = g.constant(rows_to_tensor(gt)?);
    let out = ::critart::nn::ste_replace(&mut g, p, t).map_err(err)?;
    let up = g.constant(rows_to_tensor(upstream)?);
    let prod = g.mul(out, up).map_err(err)?;
    let loss = g.sum(prod);
    g.backward(loss).map_err(err)?;
    Ok((
        tensor_to_rows(g.value(out)),
        g.grad(p)
            .unwrap_or(&[])
            .chunks(cols)
            .map(<[f64]>::to_vec)
            .collect(),
    ))
}

/// Planted critical channels of the default synthetic spec, strongest first.
#[pyfunction]
fn planted_channels(seed: u64) -> PyResult<BTreeMap<String, Vec<String>>> {
    let spec = SyntheticSpec::default_with_seed(seed);
    spec.phonemes
        .iter()
        .map(|p| {
            let chans = cdata::planted_oracle(&spec, &p.symbol).map_err(err)?;
            Ok((
                p.symbol.clone(),
                chans.iter().map(|c| c.name().to_string()).collect(),
            ))
        })
        .collect()
}

/// Finite-difference gradient checks: `(name, max_rel_error, tolerance, passed)`.
#[pyfunction]
#[pyo3(signature = (size = "micro"))]
fn gradcheck(size: &str) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let size: CheckSize = size.parse().map_err(err)?;
    Ok(run_suite(size, None)
        .map_err(err)?
        .into_iter()
        .map(|r| {
            let passed = r.passed();
            (r.name, r.max_rel_error, r.tolerance, passed)
        })
        .collect())
}

/// Registers the module contents; also usable from an embedded interpreter.
#[pymodule]
#[pyo3(name = "critart")]
pub fn critart_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(min_max_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(straight_through, m)?)?;
    m.add_function(wrap_pyfunction!(planted_channels, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add(
        "CHANNELS",
        cdata::ArticulatorChannel::ALL
            .iter()
            .map(|c| c.name())
            .collect::<Vec<_>>(),
    )?;
    Ok(())
}
