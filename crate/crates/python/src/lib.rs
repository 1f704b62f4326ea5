//! Python bindings: vocabularies, models, masks, decoding and metrics.
//!
//! Token sequences cross the boundary as lists of ints. Decoder settings
//! are keyword arguments with the same defaults as the command line.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use multitok_core::decoder::{self, DecoderConfig};
use multitok_core::lm::{ModelError, MultiHeadLm};
use multitok_core::metrics::{self, GenerationTrace};
use multitok_core::model::{self as core_model, ModelConfig, MultiHeadModel};
use multitok_core::ngram::{self, MaskError, MaskSet};
use multitok_core::ot;
use multitok_core::train::{self, Optimizer, Schedule, TrainingConfig};
use multitok_core::vocab::{self as core_vocab, TokenMode, TokenSequence};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn model_err(e: ModelError) -> PyErr {
    match e {
        ModelError::File { .. } => PyOSError::new_err(e.to_string()),
        e => value_err(e),
    }
}

fn mask_err(e: MaskError) -> PyErr {
    match e {
        MaskError::File { .. } => PyOSError::new_err(e.to_string()),
        e => value_err(e),
    }
}

type Batch = Vec<Vec<u32>>;
/// `(epsilon_b, ppl_d, speedup, mix)`
type SweepTuple = (f64, f64, f64, Vec<f64>);

fn seqs(batch: Vec<Vec<u32>>) -> Vec<TokenSequence> {
    batch.into_iter().map(TokenSequence::new).collect()
}

#[pyclass(module = "multitok", name = "Vocab", from_py_object)]
#[derive(Clone)]
pub struct PyVocab {
    inner: core_vocab::Vocab,
}

#[pymethods]
impl PyVocab {
    /// Builds the vocabulary of `corpus`; `mode` is "byte" or "char".
    #[new]
    #[pyo3(signature = (corpus, mode = "byte"))]
    fn new(corpus: &str, mode: &str) -> PyResult<Self> {
        let mode: TokenMode = mode.parse().map_err(value_err)?;
        let inner = core_vocab::Vocab::build(corpus, mode).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode().as_str()
    }

    fn encode(&self, text: &str) -> PyResult<Vec<u32>> {
        Ok(self.inner.encode(text).map_err(value_err)?.ids)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(value_err)
    }

    /// One sequence per non-empty line, cut into pieces of at most `max_len`.
    #[pyo3(signature = (text, max_len = core_vocab::DEFAULT_MAX_SEQ_LEN))]
    fn encode_lines(&self, text: &str, max_len: usize) -> PyResult<Vec<Vec<u32>>> {
        let lines = self.inner.encode_lines(text, max_len).map_err(value_err)?;
        Ok(lines.into_iter().map(|s| s.ids).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.size()
    }

    fn __repr__(&self) -> String {
        format!("Vocab(size={}, mode={:?})", self.inner.size(), self.inner.mode().as_str())
    }
}

/// Shuffles `sequences` with `seed` and returns `(train, validation)`.
#[pyfunction]
#[pyo3(signature = (sequences, fraction = 0.97, seed = 0))]
fn split_corpus(sequences: Vec<Vec<u32>>, fraction: f64, seed: u64) -> PyResult<(Batch, Batch)> {
    let s = core_vocab::split_corpus(seqs(sequences), fraction, seed).map_err(value_err)?;
    let ids = |v: Vec<TokenSequence>| v.into_iter().map(|s| s.ids).collect();
    Ok((ids(s.train), ids(s.validation)))
}

#[pyclass(module = "multitok", name = "Model")]
pub struct PyModel {
    inner: MultiHeadModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (vocab_size, d_model = 128, stem_layers = 2, heads = 3, context_len = 256, attn_heads = 4, seed = 0))]
    fn new(
        vocab_size: usize,
        d_model: usize,
        stem_layers: usize,
        heads: usize,
        context_len: usize,
        attn_heads: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            vocab_size,
            d_model,
            stem_layers,
            n_heads: heads,
            context_len,
            attn_heads,
        };
        Ok(Self {
            inner: MultiHeadModel::new(config, seed).map_err(model_err)?,
        })
    }

    /// Extends a single-head base model to `heads` heads. New heads start
    /// as copies of head 1 when `copy_init`, otherwise as fresh layers.
    #[staticmethod]
    #[pyo3(signature = (base, heads, copy_init = false, seed = 0))]
    fn from_base(base: &PyModel, heads: usize, copy_init: bool, seed: u64) -> PyResult<Self> {
        let stem = base.inner.config().stem_layers;
        let inner = MultiHeadModel::transfer_from_base(&base.inner, stem, heads, copy_init, seed).map_err(model_err)?;
        Ok(Self { inner })
    }

    /// Returns `(model, vocab_or_None)`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(PyModel, Option<PyVocab>)> {
        let ck = core_model::load_checkpoint(&path).map_err(model_err)?;
        Ok((PyModel { inner: ck.model }, ck.vocab.map(|inner| PyVocab { inner })))
    }

    #[pyo3(signature = (path, vocab = None))]
    fn save(&self, path: PathBuf, vocab: Option<&PyVocab>) -> PyResult<()> {
        core_model::save_checkpoint(&path, &self.inner, vocab.map(|v| &v.inner)).map_err(model_err)
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.n_heads()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn context_len(&self) -> usize {
        self.inner.context_len()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Stem evaluations since construction or the last reset.
    #[getter]
    fn stem_evaluations(&self) -> usize {
        self.inner.stem_evaluations()
    }

    fn reset_stem_evaluations(&self) {
        self.inner.reset_stem_evaluations();
    }

    /// Logits of every head at the last position of `context`.
    fn next_logits(&self, py: Python<'_>, context: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        py.detach(|| self.inner.next_logits(&context)).map_err(model_err)
    }

    /// Mean loss per head over `batch`, `[L_T1, ..., L_Tn]`.
    fn head_losses(&self, py: Python<'_>, batch: Vec<Vec<u32>>) -> PyResult<Vec<f64>> {
        let batch = seqs(batch);
        py.detach(|| self.inner.head_losses(&batch)).map_err(model_err)
    }

    /// Trains in place. Returns a dict with per-step `losses`, the
    /// `validation` points as `(step, [ln PPL_n...])` and `seconds`.
    #[pyo3(signature = (
        train_set, validation = None, *, steps = 1000, batch_size = 16, lr_b = 3e-3, lr_m = 1e-2,
        lr_mb = 3e-4, optimizer = "adamw", weight_decay = 0.01, warmup = Some(0.01),
        grad_clip = Some(1.0), eval_every = 0, seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        train_set: Vec<Vec<u32>>,
        validation: Option<Vec<Vec<u32>>>,
        steps: usize,
        batch_size: usize,
        lr_b: f64,
        lr_m: f64,
        lr_mb: f64,
        optimizer: &str,
        weight_decay: f64,
        warmup: Option<f64>,
        grad_clip: Option<f64>,
        eval_every: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = TrainingConfig {
            lr_b,
            lr_m,
            lr_mb,
            steps,
            batch_size,
            optimizer: match optimizer {
                "adamw" => Optimizer::AdamW { weight_decay },
                "sgd" => Optimizer::Sgd,
                other => return Err(value_err(format!("unknown optimizer {other:?}"))),
            },
            schedule: match warmup {
                Some(warmup_fraction) => Schedule::WarmupCosine { warmup_fraction },
                None => Schedule::Constant,
            },
            grad_clip,
            seed,
            eval_every,
        };
        let train_set = seqs(train_set);
        let validation = validation.map(seqs);
        let model = &mut self.inner;
        let report = py
            .detach(|| train::train(model, &train_set, validation.as_deref(), &cfg))
            .map_err(value_err)?;
        let out = PyDict::new(py);
        out.set_item("losses", report.losses)?;
        let points: Vec<(usize, Vec<f64>)> = report.validation.into_iter().map(|p| (p.step, p.log_ppl)).collect();
        out.set_item("validation", points)?;
        out.set_item("seconds", report.wall_clock.as_secs_f64())?;
        Ok(out)
    }

    /// Perplexity of head `n` alone.
    fn ppl_n(&self, py: Python<'_>, validation: Vec<Vec<u32>>, n: usize) -> PyResult<f64> {
        let v = seqs(validation);
        py.detach(|| metrics::ppl_n(&self.inner, &v, n)).map_err(value_err)
    }

    /// Perplexity of the joint prediction of heads `1..=n`.
    fn ppl_joint(&self, py: Python<'_>, validation: Vec<Vec<u32>>, n: usize) -> PyResult<f64> {
        let v = seqs(validation);
        py.detach(|| metrics::ppl_joint(&self.inner, &v, n)).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(vocab_size={}, d_model={}, stem_layers={}, heads={}, context_len={}, attn_heads={})",
            c.vocab_size, c.d_model, c.stem_layers, c.n_heads, c.context_len, c.attn_heads
        )
    }
}

#[pyclass(module = "multitok", name = "Mask", from_py_object)]
#[derive(Clone)]
pub struct PyMask {
    inner: ngram::CooccurrenceMask,
}

#[pymethods]
impl PyMask {
    /// Counts n-grams of `order` in `sequences` and stores smoothed
    /// co-occurrence ratios.
    #[staticmethod]
    #[pyo3(signature = (sequences, order, vocab_size, floor = 0.5))]
    fn build(py: Python<'_>, sequences: Vec<Vec<u32>>, order: usize, vocab_size: usize, floor: f64) -> PyResult<Self> {
        let s = seqs(sequences);
        let inner = py
            .detach(|| {
                let threads = ngram::shards_from_env();
                let uni = ngram::count_ngrams_with(&s, 1, vocab_size, None, threads)?;
                let joint = ngram::count_ngrams_with(&s, order, vocab_size, None, threads)?;
                ngram::build_mask(&uni, &joint, floor)
            })
            .map_err(mask_err)?;
        Ok(Self { inner })
    }

    /// A mask whose every ratio is 1.
    #[staticmethod]
    fn identity(order: usize, vocab_size: usize) -> PyResult<Self> {
        let inner = ngram::CooccurrenceMask::identity(order, vocab_size).map_err(mask_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = ngram::CooccurrenceMask::load(&path).map_err(mask_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(mask_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, pyo3::types::PyBytes> {
        pyo3::types::PyBytes::new(py, &self.inner.to_bytes())
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let inner = ngram::CooccurrenceMask::from_bytes(data).map_err(mask_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    /// Ratio for `tuple`; tuples never seen get the default value.
    fn ratio(&self, tuple: Vec<u32>) -> f64 {
        self.inner.ratio(&tuple)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mask(order={}, vocab_size={}, entries={})",
            self.inner.order(),
            self.inner.vocab_size(),
            self.inner.len()
        )
    }
}

/// Decoder settings shared by `generate`, `ppl_dynamic` and `sweep`.
#[derive(Clone, Copy)]
struct DecodeOpts {
    n_max: Option<usize>,
    epsilon_b: f64,
    k: usize,
    temperature: f64,
    rep_penalty: f64,
    rep_window: usize,
    alpha_c: f64,
    adaptive: bool,
    blur: Option<usize>,
    seed: u64,
    end_token: Option<u32>,
}

impl DecodeOpts {
    fn config(&self, heads: usize) -> PyResult<DecoderConfig> {
        let cfg = DecoderConfig {
            n_max: self.n_max.unwrap_or(heads.min(3)),
            k: self.k,
            temperature: self.temperature,
            repetition_penalty: self.rep_penalty,
            repetition_window: self.rep_window,
            epsilon_b: self.epsilon_b,
            alpha_c: self.alpha_c,
            adaptive_thresholding: self.adaptive,
            blur_kernel: self.blur,
            rng_seed: self.seed,
            end_token: self.end_token,
        };
        cfg.validate().map_err(value_err)?;
        Ok(cfg)
    }
}

/// Identity masks unless masks are given; given masks must cover every
/// order `2..=n_max`.
fn mask_set(masks: Option<Vec<PyMask>>, n_max: usize, vocab_size: usize) -> PyResult<MaskSet> {
    let set = match masks {
        None => MaskSet::identity(n_max, vocab_size).map_err(mask_err)?,
        Some(list) => {
            let mut set = MaskSet::new();
            for m in list {
                set.insert(m.inner);
            }
            set
        }
    };
    set.check(n_max, vocab_size).map_err(mask_err)?;
    Ok(set)
}

fn trace_dict<'py>(py: Python<'py>, trace: &GenerationTrace, n_max: usize) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let steps: Vec<(usize, usize, f64)> = trace
        .steps
        .iter()
        .map(|s| (s.emitted, s.backoffs, s.max_joint_value))
        .collect();
    d.set_item("steps", steps)?;
    d.set_item("forward_passes", trace.forward_passes)?;
    if !trace.steps.is_empty() {
        let (speedup, mix) = metrics::speedup_and_mix(trace, n_max).map_err(value_err)?;
        d.set_item("speedup", speedup)?;
        d.set_item("mix", mix)?;
    }
    Ok(d)
}

/// Generates up to `max_tokens` ids after `prompt`. Returns `(ids, trace)`
/// where `trace["steps"]` holds `(n_emitted, backoffs, max_joint_value)`.
#[pyfunction]
#[pyo3(signature = (
    model, prompt, max_tokens = 100, masks = None, *, n_max = None, epsilon_b = 0.5, k = 50,
    temperature = 0.7, rep_penalty = 1.1, rep_window = 64, alpha_c = 1.0, adaptive = true,
    blur = Some(3), seed = 0, end_token = None
))]
#[allow(clippy::too_many_arguments)]
fn generate<'py>(
    py: Python<'py>,
    model: &PyModel,
    prompt: Vec<u32>,
    max_tokens: usize,
    masks: Option<Vec<PyMask>>,
    n_max: Option<usize>,
    epsilon_b: f64,
    k: usize,
    temperature: f64,
    rep_penalty: f64,
    rep_window: usize,
    alpha_c: f64,
    adaptive: bool,
    blur: Option<usize>,
    seed: u64,
    end_token: Option<u32>,
) -> PyResult<(Vec<u32>, Bound<'py, PyDict>)> {
    let opts = DecodeOpts {
        n_max,
        epsilon_b,
        k,
        temperature,
        rep_penalty,
        rep_window,
        alpha_c,
        adaptive,
        blur,
        seed,
        end_token,
    };
    let cfg = opts.config(model.inner.n_heads())?;
    let set = mask_set(masks, cfg.n_max, model.inner.vocab_size())?;
    let (out, trace) = py
        .detach(|| decoder::generate(&model.inner, &prompt, max_tokens, &cfg, &set))
        .map_err(value_err)?;
    Ok((out.ids, trace_dict(py, &trace, cfg.n_max)?))
}

/// Dynamic perplexity with speed-up and mix over `validation`.
#[pyfunction]
#[pyo3(signature = (
    model, validation, masks = None, *, n_max = None, epsilon_b = 0.5, k = 50, temperature = 0.7,
    rep_penalty = 1.1, rep_window = 64, alpha_c = 1.0, adaptive = true, blur = Some(3), seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn ppl_dynamic<'py>(
    py: Python<'py>,
    model: &PyModel,
    validation: Vec<Vec<u32>>,
    masks: Option<Vec<PyMask>>,
    n_max: Option<usize>,
    epsilon_b: f64,
    k: usize,
    temperature: f64,
    rep_penalty: f64,
    rep_window: usize,
    alpha_c: f64,
    adaptive: bool,
    blur: Option<usize>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let opts = DecodeOpts {
        n_max,
        epsilon_b,
        k,
        temperature,
        rep_penalty,
        rep_window,
        alpha_c,
        adaptive,
        blur,
        seed,
        end_token: None,
    };
    let cfg = opts.config(model.inner.n_heads())?;
    let set = mask_set(masks, cfg.n_max, model.inner.vocab_size())?;
    let v = seqs(validation);
    let eval = py
        .detach(|| metrics::ppl_dynamic(&model.inner, &v, &cfg, &set))
        .map_err(value_err)?;
    let d = trace_dict(py, &eval.trace, cfg.n_max)?;
    d.set_item("ppl_d", eval.ppl)?;
    Ok(d)
}

/// Evaluates `ppl_d`, speed-up and mix at each `epsilon_b` of `grid`, a
/// list of floats or a string like "0:1:0.1". Returns `(rows, csv_text)`.
#[pyfunction]
#[pyo3(signature = (
    model, validation, grid, masks = None, *, n_max = None, k = 50, temperature = 0.7,
    rep_penalty = 1.1, rep_window = 64, alpha_c = 1.0, adaptive = true, blur = Some(3), seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn sweep(
    py: Python<'_>,
    model: &PyModel,
    validation: Vec<Vec<u32>>,
    grid: &Bound<'_, PyAny>,
    masks: Option<Vec<PyMask>>,
    n_max: Option<usize>,
    k: usize,
    temperature: f64,
    rep_penalty: f64,
    rep_window: usize,
    alpha_c: f64,
    adaptive: bool,
    blur: Option<usize>,
    seed: u64,
) -> PyResult<(Vec<SweepTuple>, String)> {
    let grid: Vec<f64> = match grid.extract::<String>() {
        Ok(spec) => metrics::parse_epsilon_grid(&spec).map_err(value_err)?,
        Err(_) => grid.extract()?,
    };
    let opts = DecodeOpts {
        n_max,
        epsilon_b: 0.5,
        k,
        temperature,
        rep_penalty,
        rep_window,
        alpha_c,
        adaptive,
        blur,
        seed,
        end_token: None,
    };
    let cfg = opts.config(model.inner.n_heads())?;
    let set = mask_set(masks, cfg.n_max, model.inner.vocab_size())?;
    let v = seqs(validation);
    let rows = py
        .detach(|| metrics::sweep(&model.inner, &v, &cfg, &set, &grid))
        .map_err(value_err)?;
    let mut csv = Vec::new();
    metrics::write_sweep_csv(&rows, &mut csv).map_err(value_err)?;
    let tuples = rows
        .into_iter()
        .map(|r| (r.epsilon_b, r.ppl_d, r.speedup, r.mix))
        .collect();
    Ok((tuples, String::from_utf8(csv).map_err(value_err)?))
}

/// Otsu cut on `values`: entries at or below the returned level are
/// background.
#[pyfunction]
fn otsu_threshold(values: Vec<f64>) -> f64 {
    decoder::otsu_threshold(&values)
}

/// Normalized Gaussian kernel of odd `size`.
#[pyfunction]
fn gaussian_kernel(size: usize) -> PyResult<Vec<f64>> {
    decoder::gaussian_kernel(size).map_err(value_err)
}

/// Compares the closed-form transport solution with a numeric minimizer on
/// random instances. Returns `(passed, max_tv)`.
#[pyfunction]
#[pyo3(signature = (trials = 50, vocab = None, seed = 0, tolerance = 1e-6))]
fn ot_check(py: Python<'_>, trials: usize, vocab: Option<usize>, seed: u64, tolerance: f64) -> PyResult<(bool, f64)> {
    let report = py
        .detach(|| ot::run_ot_check(trials, vocab, seed, tolerance))
        .map_err(value_err)?;
    Ok((report.passed(), report.max_tv))
}

#[pymodule]
fn multitok(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocab>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyMask>()?;
    m.add_function(wrap_pyfunction!(split_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(ppl_dynamic, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(otsu_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(ot_check, m)?)?;
    Ok(())
}
