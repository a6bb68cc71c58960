//! Python bindings: tokenizer, corpus generation, checkpoint scoring and the
//! evaluation statistics, exposed as the `stratlab` module.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;
use stratlab::corpus::{gen_synthetic_corpus, lexicon_terms, CorpusSpec, Domain};
use stratlab::eval::{self, ForecastRecord};
use stratlab::model::{load_checkpoint, InferenceModel, PackedContext};
use stratlab::train::{lr_schedule, OptimizerConfig};
use stratlab::wargame::{normalized_alignment as nw_normalized, smith_waterman as sw, AlignmentScoring};

fn py_err(e: stratlab::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn records(probabilities: &[f64], outcomes: &[u8]) -> PyResult<Vec<ForecastRecord>> {
    if probabilities.len() != outcomes.len() {
        return Err(PyValueError::new_err("probabilities and outcomes differ in length"));
    }
    probabilities.iter().zip(outcomes).map(|(&p, &y)| ForecastRecord::new(p, y, 12).map_err(py_err)).collect()
}

#[pyfunction]
fn brier_score(probabilities: Vec<f64>, outcomes: Vec<u8>) -> PyResult<f64> {
    eval::brier_score(&records(&probabilities, &outcomes)?).map_err(py_err)
}

/// Returns `(ece, bins)` with one `(lower, upper, count, mean_predicted, frequency)` tuple per bin.
#[pyfunction]
#[pyo3(signature = (probabilities, outcomes, bins = 10))]
#[allow(clippy::type_complexity)]
fn reliability(probabilities: Vec<f64>, outcomes: Vec<u8>, bins: usize) -> PyResult<(f64, Vec<(f64, f64, usize, Option<f64>, Option<f64>)>)> {
    let rep = eval::reliability_report(&records(&probabilities, &outcomes)?, bins).map_err(py_err)?;
    Ok((rep.ece, rep.bins.iter().map(|b| (b.lower, b.upper, b.count, b.mean_predicted, b.frequency)).collect()))
}

#[pyfunction]
fn cohen_kappa(a: Vec<String>, b: Vec<String>) -> PyResult<f64> {
    eval::cohen_kappa(&a, &b).map_err(py_err)
}

#[pyfunction]
fn fleiss_kappa(counts: Vec<Vec<usize>>, raters: usize) -> PyResult<f64> {
    eval::fleiss_kappa(&counts, raters).map_err(py_err)
}

/// Returns `(F, df_between, df_within)`.
#[pyfunction]
fn anova_f(groups: Vec<Vec<f64>>) -> PyResult<(f64, usize, usize)> {
    let r = eval::anova_f(&groups).map_err(py_err)?;
    Ok((r.f, r.df_between, r.df_within))
}

#[pyfunction]
fn pearson_r(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    eval::pearson_r(&x, &y).map_err(py_err)
}

#[pyfunction]
fn mae(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    eval::mae(&x, &y).map_err(py_err)
}

/// Local alignment score of two strings, character by character, under
/// match 2, mismatch -1, gap -1.
#[pyfunction]
fn smith_waterman(a: &str, b: &str) -> PyResult<i64> {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    Ok(sw(&a, &b, &AlignmentScoring::default()).map_err(py_err)?.score)
}

#[pyfunction]
fn normalized_alignment(a: &str, b: &str) -> PyResult<f64> {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    nw_normalized(&a, &b, &AlignmentScoring::default()).map_err(py_err)
}

/// Learning rate at `step` of the default warmup-cosine schedule.
#[pyfunction]
fn learning_rate(step: usize, total_steps: usize) -> PyResult<f64> {
    let cfg = OptimizerConfig { total_steps, ..OptimizerConfig::default() };
    cfg.validate().map_err(py_err)?;
    Ok(lr_schedule(step, &cfg))
}

/// Synthetic corpus as a list of dicts with `doc_id`, `domain`, `temporal_index` and `text`.
#[pyfunction]
fn generate_corpus<'py>(py: Python<'py>, n_docs: usize, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let corpus = gen_synthetic_corpus(&CorpusSpec { n_docs, n_probes: 0, ..CorpusSpec::default() }, seed).map_err(py_err)?;
    corpus
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("doc_id", &r.doc_id)?;
            d.set_item("domain", r.domain.as_str())?;
            d.set_item("temporal_index", r.temporal_index)?;
            d.set_item("text", &r.text)?;
            Ok(d)
        })
        .collect()
}

#[pyclass(name = "Tokenizer")]
struct Tokenizer {
    inner: stratlab::tokenizer::Vocabulary,
}

#[pymethods]
impl Tokenizer {
    /// Trains a byte-pair vocabulary, optionally extended with the domain lexicon.
    #[staticmethod]
    #[pyo3(signature = (texts, vocab_size, lexicon = true))]
    fn train(texts: Vec<String>, vocab_size: usize, lexicon: bool) -> PyResult<Self> {
        let mut inner = stratlab::tokenizer::train_bpe(&texts, vocab_size).map_err(py_err)?;
        if lexicon {
            inner.extend_lexicon(&lexicon_terms()).map_err(py_err)?;
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: stratlab::tokenizer::Vocabulary::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<usize>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Model")]
struct Model {
    inner: InferenceModel,
}

#[pymethods]
impl Model {
    /// Loads a checkpoint, with INT8 weights when `int8` is set.
    #[staticmethod]
    #[pyo3(signature = (path, int8 = false))]
    fn load(path: PathBuf, int8: bool) -> PyResult<Self> {
        let m = load_checkpoint(&path).map_err(py_err)?;
        let inner = if int8 { InferenceModel::quantized(&m) } else { InferenceModel::new(&m) }.map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Perplexity of one document's token ids.
    #[pyo3(signature = (tokens, temporal_index = 0, domain = "land"))]
    fn perplexity(&self, tokens: Vec<usize>, temporal_index: u32, domain: &str) -> PyResult<f64> {
        let domain: Domain = domain.parse().map_err(py_err)?;
        let ctx = PackedContext::single(tokens, temporal_index, domain);
        eval::model_perplexity(&self.inner, &[ctx]).map_err(py_err)
    }

    fn weight_bytes(&self) -> usize {
        self.inner.weight_bytes()
    }
}

#[pymodule]
#[pyo3(name = "stratlab")]
fn stratlab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(brier_score, m)?)?;
    m.add_function(wrap_pyfunction!(reliability, m)?)?;
    m.add_function(wrap_pyfunction!(cohen_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(fleiss_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(anova_f, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_r, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(smith_waterman, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_alignment, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_class::<Tokenizer>()?;
    m.add_class::<Model>()?;
    Ok(())
}
