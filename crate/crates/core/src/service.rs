//! Interactive drag sessions over a fitted twin.
//!
//! A [`Session`] is a plain sequential state machine; the socket server in the
//! CLI owns one per connection and feeds it events between ticks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{load_checkpoint, load_scene, Scene};
use crate::error::Error;
use crate::pipeline::{predict, prepare, PrepareOptions};
use crate::predictor::Model;
use crate::sim::{
    attach_controllers, check_bounds, substep, ControllerEdge, MassState, PhysParams, SimConfig, SpringGraph,
    StepScratch, Vec3,
};

pub const DEFAULT_N_ATTACH: usize = 5;
/// Controller speed cap while dragging, m/s.
pub const DEFAULT_DRAG_SPEED: f64 = 1.0;

/// Structured error reported to clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {detail}")]
pub struct ServiceError {
    pub code: String,
    pub detail: String,
}

impl ServiceError {
    pub fn new(code: &str, detail: impl Into<String>) -> Self {
        ServiceError {
            code: code.into(),
            detail: detail.into(),
        }
    }
}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::DimensionMismatch { .. } => "dimension",
            Error::Unstable { .. } | Error::NonFiniteForce { .. } => "unstable",
            _ if e.is_validation() => "validation",
            _ => "internal",
        };
        ServiceError::new(code, e.to_string())
    }
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Create { scene: String, checkpoint: String },
    AddController { pos: [f64; 3] },
    Drag { id: usize, target: [f64; 3] },
    Pause,
    Resume,
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Topology(Topology),
    /// Acknowledges `add_controller`.
    Controller { id: usize },
    Frame(Frame),
    Error(ServiceError),
}

/// Static payload sent once per session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub session: u64,
    pub points: Vec<[f32; 3]>,
    pub edges: Vec<[usize; 2]>,
    pub parts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub tick: u64,
    pub positions: Vec<[f32; 3]>,
}

fn to_f32(p: &Vec3) -> [f32; 3] {
    [p.x as f32, p.y as f32, p.z as f32]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiveController {
    pub position: Vec3,
    pub target: Vec3,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: u64,
    graph: SpringGraph,
    params: PhysParams,
    config: SimConfig,
    initial: MassState,
    state: MassState,
    controllers: Vec<LiveController>,
    tick: u64,
    paused: bool,
    fault: Option<ServiceError>,
    pub n_attach: usize,
    pub drag_speed: f64,
    scratch: StepScratch,
}

impl Session {
    /// Loads a scene and checkpoint and predicts parameters once.
    pub fn create(id: u64, scene: &Path, checkpoint: &Path) -> ServiceResult<Session> {
        let scene = load_scene(scene)?;
        let model = load_checkpoint(checkpoint)?.model();
        Self::from_scene(id, &scene, &model)
    }

    /// Recorded scene controllers are dropped; the object starts at rest.
    pub fn from_scene(id: u64, scene: &Scene, model: &Model) -> ServiceResult<Session> {
        let prepared = prepare(scene, &model.ranges, &PrepareOptions::default())?;
        let params = predict(model, &prepared)?;
        let mut graph = prepared.problem.graph;
        graph.controller_edges.clear();
        graph.controller_count = 0;
        let mut initial = prepared.problem.initial;
        initial.velocities.iter_mut().for_each(|v| *v = Vec3::zeros());
        Ok(Self::new(id, graph, params, prepared.problem.config, initial)?)
    }

    pub fn new(id: u64, graph: SpringGraph, params: PhysParams, config: SimConfig, initial: MassState) -> crate::Result<Session> {
        graph.validate()?;
        params.validate(graph.edges.len())?;
        config.validate()?;
        initial.validate()?;
        if initial.len() != graph.point_count {
            return Err(Error::dims("mass points", graph.point_count, initial.len()));
        }
        Ok(Session {
            id,
            graph,
            params,
            config,
            state: initial.clone(),
            initial,
            controllers: Vec::new(),
            tick: 0,
            paused: false,
            fault: None,
            n_attach: DEFAULT_N_ATTACH,
            drag_speed: DEFAULT_DRAG_SPEED,
            scratch: StepScratch::default(),
        })
    }

    pub fn topology(&self) -> Topology {
        Topology {
            session: self.id,
            points: self.initial.positions.iter().map(to_f32).collect(),
            edges: self.graph.edges.iter().map(|e| [e.i, e.j]).collect(),
            parts: self.graph.part_of.clone(),
        }
    }

    pub fn params(&self) -> &PhysParams {
        &self.params
    }

    pub fn state(&self) -> &MassState {
        &self.state
    }

    pub fn controllers(&self) -> &[LiveController] {
        &self.controllers
    }

    pub fn tick_index(&self) -> u64 {
        self.tick
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    /// Edges attaching controller `id`.
    pub fn attachments(&self, id: usize) -> Vec<ControllerEdge> {
        self.graph
            .controller_edges
            .iter()
            .filter(|e| e.controller == id)
            .cloned()
            .collect()
    }

    fn live(&self) -> ServiceResult<()> {
        match &self.fault {
            Some(f) => Err(f.clone()),
            None => Ok(()),
        }
    }

    pub fn add_controller(&mut self, pos: Vec3) -> ServiceResult<usize> {
        self.live()?;
        if !pos.iter().all(|c| c.is_finite()) {
            return Err(ServiceError::new("validation", "controller position must be finite"));
        }
        let id = self.controllers.len();
        let mut edges = attach_controllers(&self.state, &[pos], self.n_attach)?;
        edges.iter_mut().for_each(|e| e.controller = id);
        self.graph.controller_edges.extend(edges);
        self.graph.controller_count += 1;
        self.controllers.push(LiveController {
            position: pos,
            target: pos,
        });
        Ok(id)
    }

    pub fn drag(&mut self, id: usize, target: Vec3) -> ServiceResult<()> {
        self.live()?;
        if !target.iter().all(|c| c.is_finite()) {
            return Err(ServiceError::new("validation", "drag target must be finite"));
        }
        let c = self
            .controllers
            .get_mut(id)
            .ok_or_else(|| ServiceError::new("unknown_controller", format!("no controller with id {id}")))?;
        c.target = target;
        Ok(())
    }

    pub fn pause(&mut self) -> ServiceResult<()> {
        self.live()?;
        self.paused = true;
        Ok(())
    }

    pub fn resume(&mut self) -> ServiceResult<()> {
        self.live()?;
        self.paused = false;
        Ok(())
    }

    /// Back to the initial state with no controllers.
    pub fn reset(&mut self) -> ServiceResult<()> {
        self.live()?;
        self.state = self.initial.clone();
        self.controllers.clear();
        self.graph.controller_edges.clear();
        self.graph.controller_count = 0;
        self.tick = 0;
        Ok(())
    }

    /// Applies a client event; `create` is handled by the server.
    pub fn apply(&mut self, msg: &ClientMessage) -> ServiceResult<Option<ServerMessage>> {
        match msg {
            ClientMessage::Create { .. } => Err(ServiceError::new("protocol", "session already created")),
            ClientMessage::AddController { pos } => {
                let id = self.add_controller(Vec3::new(pos[0], pos[1], pos[2]))?;
                Ok(Some(ServerMessage::Controller { id }))
            }
            ClientMessage::Drag { id, target } => {
                self.drag(*id, Vec3::new(target[0], target[1], target[2]))?;
                Ok(None)
            }
            ClientMessage::Pause => self.pause().map(|_| None),
            ClientMessage::Resume => self.resume().map(|_| None),
            ClientMessage::Reset => self.reset().map(|_| None),
        }
    }

    /// Advances one frame unless paused, then returns the current state.
    pub fn tick(&mut self) -> ServiceResult<Frame> {
        self.live()?;
        if !self.paused {
            if let Err(e) = self.advance() {
                let err = ServiceError::from(e);
                self.fault = Some(err.clone());
                return Err(err);
            }
            self.tick += 1;
        }
        Ok(Frame {
            tick: self.tick,
            positions: self.state.positions.iter().map(to_f32).collect(),
        })
    }

    fn advance(&mut self) -> crate::Result<()> {
        let max_step = self.drag_speed * self.config.dt;
        let starts: Vec<Vec3> = self.controllers.iter().map(|c| c.position).collect();
        for c in &mut self.controllers {
            let d = c.target - c.position;
            let n = d.norm();
            c.position = if n <= max_step { c.target } else { c.position + d * (max_step / n) };
        }
        let s = self.config.substeps;
        let (x, v) = (&mut self.state.positions, &mut self.state.velocities);
        for k in 0..s {
            let a = (k + 1) as f64 / s as f64;
            self.scratch.controllers.clear();
            self.scratch
                .controllers
                .extend(starts.iter().zip(&self.controllers).map(|(p, c)| p + (c.position - p) * a));
            substep(
                x,
                v,
                &self.state.masses,
                &self.graph,
                &self.params,
                &self.scratch.controllers,
                &self.config,
                &mut self.scratch.forces,
                None,
            )
            .map_err(|e| match e {
                Error::NonFiniteForce { .. } => Error::Unstable { frame: self.tick as usize + 1 },
                other => other,
            })?;
            if !check_bounds(x, self.config.instability_bound) {
                return Err(Error::Unstable {
                    frame: self.tick as usize + 1,
                });
            }
        }
        Ok(())
    }
}
