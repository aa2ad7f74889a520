//! Play server: one generator per WebSocket session, fed by a latest-value
//! parameter mailbox and paced to real time, plus an offline synthesis
//! endpoint returning WAV.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use condsynth_core::codec::{mulaw_decode, silence_code};
use condsynth_core::corpus::ParamPoint;
use condsynth_core::network::Weights;
use condsynth_core::protocol::{
    AudioFrame, ErrorMessage, HealthResponse, ParamMailbox, ParamMessage, StatusMessage, SynthRequest,
    FRAME_SAMPLES, MAX_SYNTH_SECONDS,
};
use condsynth_core::signals::SAMPLE_RATE;
use condsynth_core::synthesis::{generate, make_schedule, GenerationConfig, Generator};
use condsynth_core::training::Checkpoint;
use condsynth_core::wav::encode_wav;
use sha2::{Digest, Sha256};
use tokio::sync::mpsc;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("cannot load checkpoint: {0}")]
    Checkpoint(#[source] condsynth_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Wall-clock duration of one frame.
pub const FRAME_PERIOD: Duration = Duration::from_millis(32);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    /// Parameters a new session starts from.
    pub initial: ParamPoint,
    /// Frames the synthesis loop may run ahead of the socket.
    pub queue_frames: usize,
    /// A status message goes out after every this many frames.
    pub status_every: u64,
    /// Hold each frame until its real-time slot. Off only for tests.
    pub pace: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            initial: ParamPoint {
                pitch: 0.0,
                volume: 1.0,
                instrument: 0.0,
            },
            queue_frames: 4,
            status_every: 16,
            pace: true,
        }
    }
}

#[derive(Debug)]
pub struct AppState {
    pub weights: Arc<Weights<f32>>,
    pub checkpoint_id: String,
    pub session: SessionConfig,
}

impl AppState {
    pub fn new(checkpoint: &Checkpoint, session: SessionConfig) -> Result<Self, ServerError> {
        let bytes = checkpoint.to_bytes().map_err(ServerError::Checkpoint)?;
        Ok(AppState {
            weights: Arc::new(checkpoint.weights.clone()),
            checkpoint_id: checkpoint_id(&bytes),
            session,
        })
    }

    pub fn from_path(path: &Path, session: SessionConfig) -> Result<Self, ServerError> {
        let checkpoint = Checkpoint::load(path).map_err(ServerError::Checkpoint)?;
        Generator::new(&checkpoint.weights, silence_code()).map_err(ServerError::Checkpoint)?;
        Self::new(&checkpoint, session)
    }
}

/// First 16 hex digits of the SHA-256 of the serialized checkpoint.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/play", get(play))
        .route("/synth", post(synth))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(addr: SocketAddr, state: AppState) -> Result<(), ServerError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, checkpoint = %state.checkpoint_id, "play server listening");
    axum::serve(listener, router(Arc::new(state))).await?;
    Ok(())
}

/// Binds `addr` (port 0 for any) and serves in the background.
pub async fn spawn(addr: SocketAddr, state: AppState) -> Result<(SocketAddr, tokio::task::JoinHandle<()>), ServerError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(Arc::new(state));
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "server stopped");
        }
    });
    Ok((local, handle))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        checkpoint_id: state.checkpoint_id.clone(),
        sample_rate: SAMPLE_RATE as u32,
    })
}

fn bad_request(msg: String) -> Response {
    (StatusCode::BAD_REQUEST, Json(ErrorMessage { error: msg })).into_response()
}

async fn synth(State(state): State<Arc<AppState>>, body: axum::body::Bytes) -> Response {
    let req: SynthRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(format!("invalid request: {e}")),
    };
    let schedule = match make_schedule(&req.schedule) {
        Ok(s) => s,
        Err(e) => return bad_request(e.to_string()),
    };
    if schedule.end() > MAX_SYNTH_SECONDS {
        return bad_request(format!("schedule longer than {MAX_SYNTH_SECONDS} s"));
    }
    let weights = state.weights.clone();
    let job = tokio::task::spawn_blocking(move || {
        let config = GenerationConfig {
            total_samples: (schedule.end() * SAMPLE_RATE).round() as usize,
            warmup: req.warmup,
            ..Default::default()
        };
        generate(&weights, &schedule, &config).and_then(|g| encode_wav(&g.samples))
    });
    match job.await {
        Ok(Ok(wav)) => ([(header::CONTENT_TYPE, "audio/wav")], wav).into_response(),
        Ok(Err(e)) => bad_request(e.to_string()),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(ErrorMessage { error: e.to_string() })).into_response(),
    }
}

async fn play(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> Response {
    ws.on_upgrade(move |socket| session(socket, state))
}

/// A frame handed from the synthesis loop to the socket.
struct Produced {
    frame: AudioFrame,
    realtime_factor: f64,
}

/// Runs the generator, reading the mailbox once per sample. Frame `n` is
/// released no earlier than `n` frame periods after the start; if the
/// generator is slower than that, frames go out as soon as they exist.
fn synthesis_loop(
    weights: Arc<Weights<f32>>,
    mailbox: Arc<ParamMailbox>,
    stop: Arc<AtomicBool>,
    pace: bool,
    tx: mpsc::Sender<Produced>,
) {
    let mut gen = match Generator::new(&weights, silence_code()) {
        Ok(g) => g,
        Err(e) => {
            tracing::error!(error = %e, "cannot start generator");
            return;
        }
    };
    let start = Instant::now();
    let mut busy = Duration::ZERO;
    let mut samples = vec![0.0f64; FRAME_SAMPLES];
    let mut seq: u32 = 0;
    while !stop.load(Ordering::Relaxed) {
        if pace {
            let due = start + FRAME_PERIOD * seq;
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
        let t0 = Instant::now();
        for s in samples.iter_mut() {
            *s = mulaw_decode(gen.step(mailbox.snapshot()));
        }
        busy += t0.elapsed();
        let produced = (u64::from(seq) + 1) * FRAME_SAMPLES as u64;
        let realtime_factor = produced as f64 / SAMPLE_RATE / busy.as_secs_f64().max(1e-9);
        let frame = AudioFrame::new(seq, &samples).expect("frame of decoded codes");
        if tx.blocking_send(Produced { frame, realtime_factor }).is_err() {
            break;
        }
        seq = seq.wrapping_add(1);
    }
}

async fn send_text<T: serde::Serialize>(socket: &mut WebSocket, value: &T) -> bool {
    let text = serde_json::to_string(value).expect("plain data serializes");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn session(mut socket: WebSocket, state: Arc<AppState>) {
    let config = state.session;
    let mailbox = Arc::new(ParamMailbox::new(config.initial));
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, mut rx) = mpsc::channel(config.queue_frames.max(1));
    let worker = {
        let (weights, mailbox, stop) = (state.weights.clone(), mailbox.clone(), stop.clone());
        tokio::task::spawn_blocking(move || synthesis_loop(weights, mailbox, stop, config.pace, tx))
    };
    let mut frames_sent: u64 = 0;
    loop {
        tokio::select! {
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    if let Err(e) = ParamMessage::parse(&text).and_then(|m| mailbox.apply(&m)) {
                        if !send_text(&mut socket, &ErrorMessage { error: e.to_string() }).await {
                            break;
                        }
                    }
                }
                Some(Ok(Message::Binary(_))) => {
                    let err = ErrorMessage { error: "binary messages are not accepted".into() };
                    if !send_text(&mut socket, &err).await {
                        break;
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
            produced = rx.recv() => {
                let Some(Produced { frame, realtime_factor }) = produced else { break };
                if socket.send(Message::Binary(frame.to_bytes().into())).await.is_err() {
                    break;
                }
                frames_sent += 1;
                if config.status_every > 0 && frames_sent.is_multiple_of(config.status_every) {
                    let status = StatusMessage { realtime_factor, frames_sent };
                    if !send_text(&mut socket, &status).await {
                        break;
                    }
                }
            }
        }
    }
    stop.store(true, Ordering::Relaxed);
    drop(rx);
    let _ = worker.await;
    tracing::debug!(frames_sent, "session closed");
}
