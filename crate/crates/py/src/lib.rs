//! Python bindings: run configs, worlds, models, sampling, metrics and the
//! end-to-end pipeline. Grids cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use arpersona::eval;
use arpersona::grid::Grid;
use arpersona::model::{self, Checkpoint, CountMode, ModelParams};
use arpersona::pipeline::{self, AblationGrid};
use arpersona::sampler;
use arpersona::tensor::Tensor;
use arpersona::trainer::LossTrace;
use arpersona::vocab;
use arpersona::world;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_grid(rows: Vec<Vec<u16>>) -> PyResult<Grid> {
    Grid::from_rows(&rows).ok_or_else(|| PyValueError::new_err("grid rows must be non-empty and rectangular"))
}

#[pyclass(name = "RunConfig", module = "arpersona_py", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: pipeline::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    fn bench() -> Self {
        Self {
            inner: pipeline::RunConfig::bench(),
        }
    }

    #[staticmethod]
    fn smoke() -> Self {
        Self {
            inner: pipeline::RunConfig::smoke(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = pipeline::RunConfig::from_json(text).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Returns a copy with every stage seed re-derived from `seed`.
    fn with_seed(&self, seed: u64) -> Self {
        Self {
            inner: self.inner.clone().with_seed(seed),
        }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(seed={}, layers={}, hidden={})",
            self.inner.seed, self.inner.model.layers, self.inner.model.hidden
        )
    }
}

#[pyclass(name = "Vocabulary", module = "arpersona_py", skip_from_py_object)]
#[derive(Clone)]
struct PyVocabulary {
    inner: vocab::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: vocab::Vocabulary::from_json(text).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn __len__(&self) -> usize {
        self.inner.size()
    }

    #[getter]
    fn image_codes(&self) -> usize {
        self.inner.image_codes()
    }

    /// Token ids of a free-text prompt, ending in the image-start token.
    fn encode(&self, text: &str) -> PyResult<Vec<u32>> {
        Ok(self.inner.encode_text(text).map_err(value_err)?.ids)
    }

    fn token_name(&self, id: u32) -> String {
        self.inner.token_name(id)
    }

    /// Adds `[V]` and one per-image token per reference.
    fn personalized(&self, references: usize) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::personal_vocab(&self.inner, references).map_err(value_err)?,
        })
    }
}

#[pyclass(name = "World", module = "arpersona_py")]
struct PyWorld {
    inner: world::World,
}

#[pymethods]
impl PyWorld {
    #[staticmethod]
    fn from_config(config: &PyRunConfig) -> PyResult<Self> {
        let (inner, _) = pipeline::build_world(&config.inner).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn vocabulary(&self) -> PyResult<PyVocabulary> {
        Ok(PyVocabulary {
            inner: self.inner.vocabulary().map_err(value_err)?,
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.config.classes.clone()
    }

    #[getter]
    fn contexts(&self) -> Vec<String> {
        self.inner.config.contexts.clone()
    }

    fn held_out_subjects(&self) -> Vec<u32> {
        self.inner.held_out_subjects().map(|s| s.subject_id).collect()
    }

    fn subject_class(&self, subject_id: u32) -> PyResult<usize> {
        Ok(self.inner.subject(subject_id).map_err(value_err)?.class_id)
    }

    fn subject_sprite(&self, subject_id: u32) -> PyResult<Vec<Vec<u16>>> {
        Ok(self.inner.subject(subject_id).map_err(value_err)?.sprite.rows())
    }

    /// Reference images of a held-out subject.
    fn references(&self, subject_id: u32, count: usize, seed: u64) -> PyResult<Vec<Vec<Vec<u16>>>> {
        let s = self.inner.subject(subject_id).map_err(value_err)?;
        let refs = self.inner.sample_reference_set(s, count, seed).map_err(value_err)?;
        Ok(refs.iter().map(|e| e.image.rows()).collect())
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(runtime_err)
    }
}

#[pyclass(name = "Model", module = "arpersona_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    params: ModelParams,
    adapters: Option<model::LoraAdapterSet>,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model with the config's shape.
    #[staticmethod]
    fn init(config: &PyRunConfig, vocab: &PyVocabulary, seed: u64) -> PyResult<Self> {
        let cfg = config.inner.model.config(vocab.inner.size());
        Ok(Self {
            params: ModelParams::init(&cfg, seed).map_err(value_err)?,
            adapters: None,
        })
    }

    /// Loads a checkpoint, refusing one trained with a different vocabulary.
    #[staticmethod]
    fn load(path: PathBuf, vocab: &PyVocabulary) -> PyResult<Self> {
        let (ckpt, _) = model::load_checkpoint(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        if ckpt.vocab_hash != vocab.inner.hash() {
            return Err(PyValueError::new_err("checkpoint was trained with a different vocabulary"));
        }
        Ok(Self {
            params: ckpt.params,
            adapters: ckpt.adapters,
        })
    }

    fn save(&self, path: PathBuf, vocab: &PyVocabulary) -> PyResult<()> {
        let mut ckpt = Checkpoint::new(self.params.clone(), vocab.inner.hash());
        ckpt.adapters = self.adapters.clone();
        model::save_checkpoint(&path, &ckpt).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn provenance(&self) -> String {
        format!("{:?}", self.params.provenance)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Logits for every position of `tokens`; the first `text_len` ids are
    /// the prompt.
    fn logits(&self, tokens: Vec<u32>, text_len: usize) -> PyResult<Vec<Vec<f64>>> {
        let seq = vocab::TokenSequence::new(tokens, text_len);
        let t = model::forward_logits(&self.params, &seq, self.adapters.as_ref()).map_err(value_err)?;
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }
}

/// Classifier-free guidance: `s * cond + (1 - s) * uncond`.
#[pyfunction]
fn cfg_combine(cond: Vec<f64>, uncond: Vec<f64>, scale: f64) -> PyResult<Vec<f64>> {
    let out = sampler::cfg_combine(&Tensor::vector(cond), &Tensor::vector(uncond), scale).map_err(value_err)?;
    Ok(out.into_data())
}

#[pyfunction]
#[pyo3(signature = (d, layers, mode="lora", rank=16, every_n=1, targets=3, rows=1))]
fn count_trainable_params(
    d: usize,
    layers: usize,
    mode: &str,
    rank: usize,
    every_n: usize,
    targets: usize,
    rows: usize,
) -> PyResult<u64> {
    let mode = match mode {
        "lora" if every_n > 0 => CountMode::Lora {
            rank,
            every_n,
            targets,
        },
        "full-attn" => CountMode::FullAttn,
        "embedding-only" => CountMode::EmbeddingOnly { rows },
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?} or every_n = 0"))),
    };
    Ok(model::count_trainable_params(d, layers, &mode))
}

#[pyfunction]
fn format_millions(count: u64) -> String {
    model::format_millions(count)
}

/// Samples one image grid for a text prompt.
#[pyfunction]
#[pyo3(signature = (model, vocab, prompt, config, seed))]
fn generate(model: &PyModel, vocab: &PyVocabulary, prompt: &str, config: &PyRunConfig, seed: u64) -> PyResult<Vec<Vec<u16>>> {
    let seq = vocab.inner.encode_text(prompt).map_err(value_err)?;
    let sc = config.inner.sampler.build(&vocab.inner, &config.inner.world, seed);
    let grid = sampler::generate_image(&model.params, model.adapters.as_ref(), &seq, &vocab.inner, &sc).map_err(value_err)?;
    Ok(grid.rows())
}

#[pyfunction]
fn subject_fidelity(generated: Vec<Vec<u16>>, references: Vec<Vec<Vec<u16>>>, sprite: Vec<Vec<u16>>) -> PyResult<f64> {
    let refs = references.into_iter().map(to_grid).collect::<PyResult<Vec<_>>>()?;
    eval::subject_fidelity(&to_grid(generated)?, &refs, &to_grid(sprite)?).map_err(value_err)
}

#[pyfunction]
fn diversity(grids: Vec<Vec<Vec<u16>>>) -> PyResult<f64> {
    let grids = grids.into_iter().map(to_grid).collect::<PyResult<Vec<_>>>()?;
    eval::diversity(&grids).map_err(value_err)
}

/// Pretrains a base model for `config`; returns it with its loss curve.
#[pyfunction]
fn pretrain(py: Python<'_>, config: &PyRunConfig) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = config.inner.clone();
    let (params, trace) = py
        .detach(move || {
            let (world, vocab) = pipeline::build_world(&cfg)?;
            pipeline::pretrain_base(&cfg, &world, &vocab)
        })
        .map_err(runtime_err)?;
    Ok((PyModel { params, adapters: None }, trace.losses()))
}

/// Base, stage-1 and stage-2 reports (JSON) plus the class-prior comparison.
#[pyfunction]
#[pyo3(signature = (config, base=None))]
fn run_full(py: Python<'_>, config: &PyRunConfig, base: Option<&PyModel>) -> PyResult<(String, String, String, String)> {
    let cfg = config.inner.clone();
    let base = base.map(|m| m.params.clone());
    let run = py
        .detach(move || {
            let (world, vocab) = pipeline::build_world(&cfg)?;
            match base {
                Some(b) => pipeline::run_from_base(&cfg, &world, &vocab, &b, LossTrace::default()),
                None => pipeline::run_full(&cfg),
            }
        })
        .map_err(runtime_err)?;
    let prior = serde_json::to_string(&run.prior).map_err(runtime_err)?;
    Ok((run.base.to_json(), run.stage1.to_json(), run.stage2.to_json(), prior))
}

/// Ablation grid (`lora`, `no-class-name` or `embedding-only`) as JSON.
#[pyfunction]
fn run_ablation(py: Python<'_>, config: &PyRunConfig, base: &PyModel, grid: &str) -> PyResult<String> {
    let grid = match grid {
        "lora" => AblationGrid::Lora,
        "no-class-name" => AblationGrid::NoClassName,
        "embedding-only" => AblationGrid::EmbeddingOnly,
        other => return Err(PyValueError::new_err(format!("unknown grid {other:?}"))),
    };
    let cfg = config.inner.clone();
    let base = base.params.clone();
    let report = py
        .detach(move || {
            let (world, vocab) = pipeline::build_world(&cfg)?;
            pipeline::run_ablation(&cfg, &world, &vocab, &base, grid)
        })
        .map_err(runtime_err)?;
    Ok(report.to_json())
}

#[pymodule]
fn arpersona_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyWorld>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(cfg_combine, m)?)?;
    m.add_function(wrap_pyfunction!(count_trainable_params, m)?)?;
    m.add_function(wrap_pyfunction!(format_millions, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(subject_fidelity, m)?)?;
    m.add_function(wrap_pyfunction!(diversity, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(run_full, m)?)?;
    m.add_function(wrap_pyfunction!(run_ablation, m)?)?;
    Ok(())
}
