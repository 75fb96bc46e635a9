use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use clap::Args;
use futures::StreamExt;
use serde::Serialize;
use tokio::time::MissedTickBehavior;

use springtwin_core::service::{ClientMessage, ServerMessage, ServiceError, Session};

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Directory holding scene and checkpoint files clients may open.
    #[arg(long, default_value = "fixtures")]
    fixtures: PathBuf,
    /// Simulation ticks per second.
    #[arg(long, default_value_t = 60)]
    tick_hz: u32,
    /// Send a state frame every this many ticks.
    #[arg(long, default_value_t = 2)]
    frame_every: u32,
}

struct AppState {
    fixtures: PathBuf,
    next_id: AtomicU64,
    tick: Duration,
    frame_every: u64,
}

#[derive(Serialize)]
struct FixtureList {
    scenes: Vec<String>,
    checkpoints: Vec<String>,
}

pub fn run(args: ServeArgs) -> anyhow::Result<()> {
    if !args.fixtures.is_dir() {
        anyhow::bail!(springtwin_core::Error::InvalidInput(format!(
            "fixtures directory {} does not exist",
            args.fixtures.display()
        )));
    }
    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse()?;
    let state = Arc::new(AppState {
        fixtures: args.fixtures,
        next_id: AtomicU64::new(1),
        tick: Duration::from_secs_f64(1.0 / args.tick_hz.max(1) as f64),
        frame_every: args.frame_every.max(1) as u64,
    });
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}

fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/fixtures", get(list_fixtures))
        .route("/ws", get(ws_upgrade))
        .with_state(state)
}

/// Scene files are `*.scene.json`, checkpoints `*.ckpt.json`.
async fn list_fixtures(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    let mut list = FixtureList {
        scenes: Vec::new(),
        checkpoints: Vec::new(),
    };
    if let Ok(entries) = std::fs::read_dir(&state.fixtures) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            if name.ends_with(".scene.json") {
                list.scenes.push(name);
            } else if name.ends_with(".ckpt.json") {
                list.checkpoints.push(name);
            }
        }
    }
    list.scenes.sort();
    list.checkpoints.sort();
    Json(list)
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, state))
}

/// Resolves a client-supplied name inside the fixtures directory.
fn fixture_path(root: &Path, name: &str) -> Result<PathBuf, ServiceError> {
    let rel = Path::new(name);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(ServiceError::new("validation", format!("`{name}` is not a fixture name")));
    }
    Ok(root.join(rel))
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    let text = serde_json::to_string(msg).expect("server messages serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn create(state: &AppState, scene: &str, checkpoint: &str) -> Result<Session, ServiceError> {
    let scene = fixture_path(&state.fixtures, scene)?;
    let checkpoint = fixture_path(&state.fixtures, checkpoint)?;
    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    tokio::task::spawn_blocking(move || Session::create(id, &scene, &checkpoint))
        .await
        .map_err(|e| ServiceError::new("internal", e.to_string()))?
}

fn parse(msg: &Message) -> Option<Result<ClientMessage, ServiceError>> {
    match msg {
        Message::Text(t) => Some(
            serde_json::from_str(t.as_str()).map_err(|e| ServiceError::new("protocol", e.to_string())),
        ),
        _ => None,
    }
}

/// One session per connection: wait for `create`, then tick at a fixed
/// rate, applying inbound events between ticks in arrival order.
async fn connection(mut socket: WebSocket, state: Arc<AppState>) {
    let mut session = loop {
        let Some(Ok(msg)) = socket.next().await else { return };
        match parse(&msg) {
            None => continue,
            Some(Ok(ClientMessage::Create { scene, checkpoint })) => match create(&state, &scene, &checkpoint).await {
                Ok(s) => break s,
                Err(e) => {
                    if !send(&mut socket, &ServerMessage::Error(e)).await {
                        return;
                    }
                }
            },
            Some(Ok(_)) => {
                let e = ServiceError::new("protocol", "send `create` first");
                if !send(&mut socket, &ServerMessage::Error(e)).await {
                    return;
                }
            }
            Some(Err(e)) => {
                if !send(&mut socket, &ServerMessage::Error(e)).await {
                    return;
                }
            }
        }
    };
    if !send(&mut socket, &ServerMessage::Topology(session.topology())).await {
        return;
    }

    let mut ticker = tokio::time::interval(state.tick);
    ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
    let mut faulted = false;
    loop {
        tokio::select! {
            inbound = socket.next() => {
                let Some(Ok(msg)) = inbound else { return };
                if matches!(msg, Message::Close(_)) {
                    return;
                }
                let reply = match parse(&msg) {
                    None => continue,
                    Some(Ok(m)) => session.apply(&m),
                    Some(Err(e)) => Err(e),
                };
                let out = match reply {
                    Ok(Some(m)) => m,
                    Ok(None) => continue,
                    Err(e) => ServerMessage::Error(e),
                };
                if !send(&mut socket, &out).await {
                    return;
                }
            }
            _ = ticker.tick(), if !faulted => {
                match session.tick() {
                    Ok(frame) => {
                        if frame.tick % state.frame_every == 0 && !send(&mut socket, &ServerMessage::Frame(frame)).await {
                            return;
                        }
                    }
                    Err(e) => {
                        faulted = true;
                        if !send(&mut socket, &ServerMessage::Error(e)).await {
                            return;
                        }
                    }
                }
            }
        }
    }
}
