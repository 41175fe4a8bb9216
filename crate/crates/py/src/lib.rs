//! Python bindings: vocabulary handling, training, classification,
//! generation and metrics.
//!
//! ```python
//! import reviewgan_py as rg
//! vocab = rg.Vocabulary.build(texts, 10000)
//! model = rg.Model.new(vocab, config_toml)
//! model.train(labeled, unlabeled)
//! model.classify(["great stay, friendly staff"])
//! ```

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reviewgan::classifier::predict;
use reviewgan::corpus::{decode, encode, tokenize, TokenSequence};
use reviewgan::discriminator::ScoreSeries;
use reviewgan::generator::sample_context;
use reviewgan::synthetic::MarkovSource;
use reviewgan::trainer::{train, Hooks};
use reviewgan::{
    eval, load_checkpoint, rl, save_checkpoint, Checkpoint, Class, ClassPrior, Error, RunState, TrainConfig,
    TrainingData, Vocabulary,
};

fn to_py(e: Error) -> PyErr {
    let msg = format!("[{}] {e}", e.kind());
    match e {
        Error::Io(_) => PyOSError::new_err(msg),
        Error::Diverged(_) | Error::BlockViolation(_) | Error::NonFinite(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn class(label: &str) -> PyResult<Class> {
    label.parse().map_err(to_py)
}

fn classes(labels: &[String]) -> PyResult<Vec<Class>> {
    labels.iter().map(|l| class(l)).collect()
}

#[pyclass(name = "Vocabulary", module = "reviewgan_py", from_py_object)]
#[derive(Clone)]
struct PyVocabulary {
    inner: Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Most frequent tokens of `texts`, after the four reserved tokens.
    #[staticmethod]
    fn build(texts: Vec<String>, size: usize) -> PyResult<Self> {
        Ok(Self {
            inner: Vocabulary::build(&texts, size).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Vocabulary::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    /// Token ids, `<start>` first, padded to `max_len`.
    fn encode(&self, text: &str, max_len: usize) -> PyResult<Vec<u32>> {
        Ok(encode(text, &self.inner, max_len).map_err(to_py)?.ids().to_vec())
    }

    #[pyo3(signature = (ids, keep_unk = true))]
    fn decode(&self, ids: Vec<u32>, keep_unk: bool) -> PyResult<String> {
        let seq = TokenSequence::new(ids).map_err(to_py)?;
        decode(&seq, &self.inner, keep_unk).map_err(to_py)
    }
}

/// A configuration, vocabulary and the three networks, saved and loaded as
/// a checkpoint.
#[pyclass(name = "Model", module = "reviewgan_py")]
struct PyModel {
    ckpt: Checkpoint,
}

impl PyModel {
    fn vocab(&self) -> PyResult<&Vocabulary> {
        self.ckpt
            .vocabulary
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("checkpoint carries no vocabulary"))
    }

    fn encode_all(&self, texts: &[String]) -> PyResult<Vec<TokenSequence>> {
        let vocab = self.vocab()?;
        let t = self.ckpt.config.model.max_len;
        texts.iter().map(|s| encode(s, vocab, t).map_err(to_py)).collect()
    }

    fn labeled(&self, texts: &[String], labels: &[String]) -> PyResult<Vec<(TokenSequence, Class)>> {
        if texts.len() != labels.len() {
            return Err(PyValueError::new_err("texts and labels differ in length"));
        }
        Ok(self.encode_all(texts)?.into_iter().zip(classes(labels)?).collect())
    }
}

#[pymethods]
impl PyModel {
    /// Untrained model. `config` is TOML text; omitted fields keep their
    /// defaults.
    #[staticmethod]
    #[pyo3(signature = (vocabulary, config = None))]
    fn new(vocabulary: &PyVocabulary, config: Option<&str>) -> PyResult<Self> {
        let config = match config {
            Some(text) => TrainConfig::from_toml(text).map_err(to_py)?,
            None => TrainConfig::default(),
        };
        let state = RunState::new(&config, vocabulary.inner.len()).map_err(to_py)?;
        Ok(Self {
            ckpt: Checkpoint::new(&config, Some(&vocabulary.inner), &state),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            ckpt: load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.ckpt.config, self.ckpt.vocabulary.as_ref(), &self.ckpt.state).map_err(to_py)
    }

    fn config_toml(&self) -> String {
        self.ckpt.config.to_toml()
    }

    fn vocabulary(&self) -> PyResult<PyVocabulary> {
        Ok(PyVocabulary {
            inner: self.vocab()?.clone(),
        })
    }

    /// Completed epochs per stage.
    fn progress<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let p = &self.ckpt.state.progress;
        let d = PyDict::new(py);
        d.set_item("pretrain_g", p.pretrain_g)?;
        d.set_item("pretrain_d", p.pretrain_d)?;
        d.set_item("pretrain_c", p.pretrain_c)?;
        d.set_item("adversarial", p.adversarial)?;
        d.set_item("skipped_updates", p.skipped_updates)?;
        Ok(d)
    }

    /// Runs (or resumes) pretraining and adversarial training. Metric
    /// records are appended as JSON lines to `metrics_path` if given.
    #[pyo3(signature = (texts, labels, unlabeled = Vec::new(), metrics_path = None))]
    fn train(
        &mut self,
        py: Python<'_>,
        texts: Vec<String>,
        labels: Vec<String>,
        unlabeled: Vec<String>,
        metrics_path: Option<PathBuf>,
    ) -> PyResult<()> {
        let labeled = self.labeled(&texts, &labels)?;
        let unlabeled = self.encode_all(&unlabeled)?;
        let data = TrainingData::new(labeled, unlabeled).map_err(to_py)?;
        let mut file = match metrics_path {
            Some(p) => Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| to_py(e.into()))?,
            ),
            None => None,
        };
        let Checkpoint { config, state, .. } = &mut self.ckpt;
        py.detach(|| {
            let mut hooks = Hooks {
                metrics: file.as_mut().map(|f| f as &mut dyn std::io::Write),
                checkpoint: None,
            };
            train(config, &data, state, &mut hooks)
        })
        .map_err(to_py)
    }

    /// `(class, p_spam)` per text.
    fn classify(&self, texts: Vec<String>) -> PyResult<Vec<(String, f64)>> {
        let seqs = self.encode_all(&texts)?;
        let tie = self.ckpt.config.schedule.tie_break;
        let dists = self.ckpt.state.classifier.distributions(&seqs).map_err(to_py)?;
        Ok(dists
            .iter()
            .map(|d| (predict(d, tie).to_string(), d[Class::Spam.index()]))
            .collect())
    }

    /// `(class, text)` samples. `label` is "spam", "nonspam" or None for the
    /// configured class prior.
    #[pyo3(signature = (count, label = None, temperature = 1.0, seed = 0))]
    fn generate(&self, count: usize, label: Option<&str>, temperature: f64, seed: u64) -> PyResult<Vec<(String, String)>> {
        let cfg = &self.ckpt.config;
        let prior = match label {
            Some(l) => ClassPrior::only(class(l)?),
            None => cfg.class_prior().map_err(to_py)?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let contexts: Vec<_> = (0..count)
            .map(|_| sample_context(&prior, cfg.model.z_dim, &mut rng))
            .collect();
        let batch = self
            .ckpt
            .state
            .generator
            .generate(&contexts, cfg.model.max_len, temperature, &mut rng)
            .map_err(to_py)?;
        let vocab = self.vocab()?;
        batch
            .sequences
            .iter()
            .zip(&contexts)
            .map(|(s, c)| Ok((c.class.to_string(), decode(s, vocab, cfg.data.keep_unk).map_err(to_py)?)))
            .collect()
    }

    /// Generator perplexity of labeled texts, each scored under its class.
    fn perplexity(&self, texts: Vec<String>, labels: Vec<String>) -> PyResult<f64> {
        let pairs = self.labeled(&texts, &labels)?;
        eval::perplexity(&self.ckpt.state.generator, &pairs).map_err(to_py)
    }

    /// Accuracy, F1 (spam positive) and perplexity on labeled texts.
    fn evaluate<'py>(&self, py: Python<'py>, texts: Vec<String>, labels: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
        let pairs = self.labeled(&texts, &labels)?;
        let e = reviewgan::evaluate(&self.ckpt.state, &pairs, self.ckpt.config.schedule.tie_break).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("accuracy", e.accuracy)?;
        d.set_item("f1", e.f1)?;
        d.set_item("perplexity", e.perplexity)?;
        Ok(d)
    }
}

#[pyfunction]
fn accuracy(predicted: Vec<String>, gold: Vec<String>) -> PyResult<f64> {
    eval::accuracy(&classes(&predicted)?, &classes(&gold)?).map_err(to_py)
}

#[pyfunction]
fn f1(predicted: Vec<String>, gold: Vec<String>) -> PyResult<f64> {
    eval::f1(&classes(&predicted)?, &classes(&gold)?).map_err(to_py)
}

/// Harmonic blend of two rewards, 0 when both are 0.
#[pyfunction]
fn blend(a: f64, b: f64) -> f64 {
    rl::blend(a, b)
}

/// Per-step advantages from discriminator and classifier `(q, v)` series
/// over action positions; all positions are treated as content.
#[pyfunction]
#[pyo3(signature = (disc_q, disc_v, cls_q, cls_v, alpha_offset = 0.0))]
fn advantages(disc_q: Vec<f64>, disc_v: Vec<f64>, cls_q: Vec<f64>, cls_v: Vec<f64>, alpha_offset: f64) -> PyResult<Vec<f64>> {
    let n = disc_q.len();
    let d = ScoreSeries {
        q: disc_q,
        v: disc_v,
        mask: vec![true; n],
    };
    let c = ScoreSeries {
        q: cls_q,
        v: cls_v,
        mask: vec![true; n],
    };
    Ok(rl::advantages(&d, &c, n, alpha_offset).map_err(to_py)?.advantage)
}

#[pyfunction(name = "tokenize")]
fn tokenize_text(text: &str) -> Vec<String> {
    tokenize(text)
}

/// Two-class bigram corpus: `(labeled [(text, class)], unlabeled [text])`.
#[pyfunction]
#[pyo3(signature = (labeled, unlabeled, words = 50, branching = 6, strength = 1.2, length = 18, seed = 0))]
fn synthetic_corpus(
    labeled: usize,
    unlabeled: usize,
    words: usize,
    branching: usize,
    strength: f64,
    length: usize,
    seed: u64,
) -> PyResult<(Vec<(String, String)>, Vec<String>)> {
    let src = MarkovSource::new(words, branching, strength, length, seed).map_err(to_py)?;
    let (lab, unl) = src.corpus(labeled, unlabeled, seed.wrapping_add(1));
    Ok((lab.into_iter().map(|(t, c)| (t, c.to_string())).collect(), unl))
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(blend, m)?)?;
    m.add_function(wrap_pyfunction!(advantages, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize_text, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    Ok(())
}

#[pymodule]
fn reviewgan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
