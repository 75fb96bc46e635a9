//! Python bindings. Structured results cross the boundary as plain dicts and
//! lists; points are `[x, y, z]` lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use springtwin_core::corpus::{self, Checkpoint, Preset, SyntheticSpec};
use springtwin_core::pipeline::{self, PrepareOptions};
use springtwin_core::service::{ServiceError, Session as CoreSession};
use springtwin_core::training::{self, LossWeights, TrainConfig};
use springtwin_core::{Error, Vec3};

create_exception!(springtwin, SimulationUnstable, PyRuntimeError);
create_exception!(springtwin, TrainingAborted, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Unstable { .. } | Error::NonFiniteForce { .. } | Error::NonFiniteGradient { .. } => {
            SimulationUnstable::new_err(e.to_string())
        }
        Error::TrainingAborted(_) => TrainingAborted::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn service_err(e: ServiceError) -> PyErr {
    match e.code.as_str() {
        "unstable" => SimulationUnstable::new_err(e.detail),
        _ => PyValueError::new_err(format!("{}: {}", e.code, e.detail)),
    }
}

/// Serializes through JSON so dicts match the on-disk formats.
fn to_object<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn points(frame: &[Vec3]) -> Vec<[f64; 3]> {
    frame.iter().map(|p| [p.x, p.y, p.z]).collect()
}

fn vec3(p: [f64; 3]) -> Vec3 {
    Vec3::new(p[0], p[1], p[2])
}

/// A recorded scene.
#[pyclass(module = "springtwin", frozen, from_py_object)]
#[derive(Clone)]
struct Scene {
    inner: corpus::Scene,
}

#[pymethods]
impl Scene {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Scene { inner: corpus::load_scene(&path).map_err(to_py)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Scene { inner: corpus::scene_from_str(text).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        corpus::save_scene(&self.inner, &path).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.meta.id.clone()
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames()
    }

    #[getter]
    fn t_train(&self) -> usize {
        self.inner.t_train
    }

    #[getter]
    fn point_count(&self) -> usize {
        self.inner.point_count()
    }

    #[getter]
    fn num_parts(&self) -> usize {
        self.inner.num_parts
    }

    fn initial_positions(&self) -> PyResult<Vec<[f64; 3]>> {
        Ok(points(&self.inner.mass_state().map_err(to_py)?.positions))
    }

    fn __repr__(&self) -> String {
        format!("Scene(id={:?}, points={}, frames={})", self.inner.meta.id, self.point_count(), self.frames())
    }
}

/// Predictor weights: material codebook and the two decoders.
#[pyclass(module = "springtwin")]
struct Model {
    inner: springtwin_core::predictor::Model,
    seed: u64,
    disable_parts: bool,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (seed = 0, use_codebook = true))]
    fn new(seed: u64, use_codebook: bool) -> Self {
        Model { inner: springtwin_core::predictor::Model::new(seed, use_codebook), seed, disable_parts: false }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = corpus::load_checkpoint(&path).map_err(to_py)?;
        Ok(Model { inner: ckpt.model(), seed: ckpt.seed, disable_parts: ckpt.disable_parts })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut ckpt = Checkpoint::from_model(&self.inner, self.seed);
        ckpt.disable_parts = self.disable_parts;
        corpus::save_checkpoint(&ckpt, &path).map_err(to_py)
    }

    /// Fits the model to the given scenes and returns the per-epoch history.
    #[pyo3(signature = (scenes, epochs = 300, lr = 1e-3, lambda_trk = 1.0, lambda_cham = 1.0, lambda_prior = 1e-3, disable_parts = false))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        py: Python<'_>,
        scenes: Vec<Scene>,
        epochs: usize,
        lr: f64,
        lambda_trk: f64,
        lambda_cham: f64,
        lambda_prior: f64,
        disable_parts: bool,
    ) -> PyResult<Py<PyAny>> {
        let opts = PrepareOptions { disable_parts, ..PrepareOptions::default() };
        let config = TrainConfig {
            epochs,
            lr,
            weights: LossWeights { lambda_trk, lambda_cham, lambda_prior },
            ..TrainConfig::default()
        };
        let model = self.inner.clone();
        let outcome = py
            .detach(move || {
                let prepared = scenes
                    .iter()
                    .map(|s| pipeline::prepare(&s.inner, &model.ranges, &opts))
                    .collect::<Result<Vec<_>, _>>()?;
                training::train(model, &prepared, &config)
            })
            .map_err(to_py)?;
        self.inner = outcome.model;
        self.disable_parts = disable_parts;
        to_object(py, &outcome.history)
    }

    /// Predicted simulator parameters for a scene.
    fn predict(&self, py: Python<'_>, scene: &Scene) -> PyResult<Py<PyAny>> {
        let prepared = self.prepare(&scene.inner)?;
        let params = pipeline::predict(&self.inner, &prepared).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("edge_stiffness", &params.edge_stiffness)?;
        d.set_item("controller_stiffness", params.controller_stiffness)?;
        d.set_item("gamma", params.dashpot_damping)?;
        d.set_item("delta", params.drag_damping)?;
        d.set_item("mu", params.friction)?;
        d.set_item("epsilon", params.elasticity)?;
        d.set_item("summary", to_object(py, &pipeline::summarize(&prepared, &params, self.seed))?)?;
        Ok(d.into_any().unbind())
    }

    /// Simulates `frames` frames (default: the whole scene) with predicted parameters.
    #[pyo3(signature = (scene, frames = None))]
    fn rollout(&self, py: Python<'_>, scene: &Scene, frames: Option<usize>) -> PyResult<Vec<Vec<[f64; 3]>>> {
        let prepared = self.prepare(&scene.inner)?;
        let frames = frames.unwrap_or(scene.inner.frames());
        let model = &self.inner;
        let (_, roll) = py.detach(|| pipeline::feed_forward(model, &prepared, frames)).map_err(to_py)?;
        Ok(roll.trajectory.iter().map(|f| points(f)).collect())
    }
}

impl Model {
    fn prepare(&self, scene: &corpus::Scene) -> PyResult<pipeline::PreparedScene> {
        let opts = PrepareOptions { disable_parts: self.disable_parts, ..PrepareOptions::default() };
        pipeline::prepare(scene, &self.inner.ranges, &opts).map_err(to_py)
    }
}

/// Interactive drag session over a fitted twin.
#[pyclass(module = "springtwin")]
struct Session {
    inner: CoreSession,
}

#[pymethods]
impl Session {
    #[new]
    #[pyo3(signature = (scene, model, id = 0))]
    fn new(scene: &Scene, model: &Model, id: u64) -> PyResult<Self> {
        Ok(Session { inner: CoreSession::from_scene(id, &scene.inner, &model.inner).map_err(service_err)? })
    }

    fn topology(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_object(py, &self.inner.topology())
    }

    fn add_controller(&mut self, pos: [f64; 3]) -> PyResult<usize> {
        self.inner.add_controller(vec3(pos)).map_err(service_err)
    }

    fn drag(&mut self, id: usize, target: [f64; 3]) -> PyResult<()> {
        self.inner.drag(id, vec3(target)).map_err(service_err)
    }

    fn pause(&mut self) -> PyResult<()> {
        self.inner.pause().map_err(service_err)
    }

    fn resume(&mut self) -> PyResult<()> {
        self.inner.resume().map_err(service_err)
    }

    fn reset(&mut self) -> PyResult<()> {
        self.inner.reset().map_err(service_err)
    }

    /// Advances one frame and returns the point positions.
    fn tick(&mut self) -> PyResult<Vec<[f64; 3]>> {
        self.inner.tick().map_err(service_err)?;
        Ok(points(&self.inner.state().positions))
    }

    #[getter]
    fn tick_index(&self) -> u64 {
        self.inner.tick_index()
    }
}

/// Generates a synthetic scene; returns `(scene, ground_truth_dict)`.
#[pyfunction]
#[pyo3(signature = (preset, seed = 0, frames = None))]
fn gen_synthetic(py: Python<'_>, preset: &str, seed: u64, frames: Option<usize>) -> PyResult<(Scene, Py<PyAny>)> {
    let preset: Preset = serde_json::from_value(serde_json::Value::String(preset.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown preset `{preset}`")))?;
    let mut spec = SyntheticSpec { seed, ..SyntheticSpec::preset(preset) };
    if let Some(f) = frames {
        spec.frames = f;
    }
    let (scene, gt) = corpus::gen_synthetic(&spec).map_err(to_py)?;
    Ok((Scene { inner: scene }, to_object(py, &gt)?))
}

/// Resimulation and future-window metrics of a trajectory against a scene.
#[pyfunction]
fn evaluate(py: Python<'_>, scene: &Scene, trajectory: Vec<Vec<[f64; 3]>>) -> PyResult<Py<PyAny>> {
    let traj: Vec<Vec<Vec3>> = trajectory.into_iter().map(|f| f.into_iter().map(vec3).collect()).collect();
    to_object(py, &corpus::evaluate(&scene.inner, &traj).map_err(to_py)?)
}

#[pymodule]
fn springtwin(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_class::<Model>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("SimulationUnstable", m.py().get_type::<SimulationUnstable>())?;
    m.add("TrainingAborted", m.py().get_type::<TrainingAborted>())?;
    Ok(())
}
