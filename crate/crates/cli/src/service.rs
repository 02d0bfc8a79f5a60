//! HTTP + WebSocket service for live class → style steering.
//!
//! Endpoints: `GET /api/classes`, `GET /api/styles`, `GET|PUT /api/assignment`,
//! `GET /api/stats` and `WS /stream`. Every JSON body carries `schema`.

use std::collections::{BTreeSet, VecDeque};
use std::net::SocketAddr;
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use base64::Engine;
use cbs_core::pipeline::{FrameTimings, StreamItem};
use cbs_core::{datagen, Frame, Pipeline, StyleAssignment};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot, watch};

use crate::config::{assignment_of, entries_of, AssignmentEntry};

pub const API_SCHEMA: u32 = 1;
pub const STATS_WINDOW: usize = 100;
const THUMBNAIL_SIZE: usize = 32;

pub struct ServiceSetup {
    pub pipeline: Pipeline,
    pub initial: StyleAssignment,
    /// Looped forever as the live source.
    pub frames: Vec<Frame>,
    pub frame_interval: Duration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub index: u32,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassesBody {
    pub schema: u32,
    pub classes: Vec<ClassInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleInfo {
    pub id: String,
    pub thumbnail_png_base64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylesBody {
    pub schema: u32,
    pub styles: Vec<StyleInfo>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentBody {
    pub schema: u32,
    pub entries: Vec<AssignmentEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub schema: u32,
    pub error: String,
    pub index: Option<usize>,
    pub entry: Option<AssignmentEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsBody {
    pub schema: u32,
    pub frames: u64,
    pub errors: u64,
    /// Number of frames the means are taken over (at most 100).
    pub window: usize,
    /// `1000 / mean_total_ms` over the window.
    pub fps: f64,
    /// Delivered frames per second of wall time over the window, pacing included.
    pub throughput_fps: f64,
    pub mean_total_ms: f64,
    pub mean_seg_ms: f64,
    pub mean_style_ms: f64,
    pub mean_composite_ms: f64,
}

/// Text message sent after each binary PNG on `/stream`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum StreamMessage {
    Timing {
        schema: u32,
        frame_index: usize,
        t_seg: f64,
        t_style: f64,
        t_composite: f64,
        t_total: f64,
        entries: Vec<AssignmentEntry>,
    },
    Error {
        schema: u32,
        frame_index: usize,
        message: String,
    },
}

enum Outgoing {
    Frame { png: Bytes, text: String },
    Error { text: String },
}

#[derive(Default)]
struct Stats {
    window: VecDeque<(Instant, FrameTimings)>,
    frames: u64,
    errors: u64,
}

impl Stats {
    fn push(&mut self, t: FrameTimings) {
        if self.window.len() == STATS_WINDOW {
            self.window.pop_front();
        }
        self.window.push_back((Instant::now(), t));
        self.frames += 1;
    }

    fn body(&self) -> StatsBody {
        let n = self.window.len();
        let mean = |f: fn(&FrameTimings) -> f64| {
            if n == 0 {
                0.0
            } else {
                self.window.iter().map(|(_, t)| f(t)).sum::<f64>() / n as f64
            }
        };
        let mean_total_ms = mean(|t| t.t_total);
        let throughput_fps = match (self.window.front(), self.window.back()) {
            (Some((a, _)), Some((b, _))) if n > 1 && b > a => (n - 1) as f64 / (*b - *a).as_secs_f64(),
            _ => 0.0,
        };
        StatsBody {
            schema: API_SCHEMA,
            frames: self.frames,
            errors: self.errors,
            window: n,
            fps: if mean_total_ms > 0.0 { 1000.0 / mean_total_ms } else { 0.0 },
            throughput_fps,
            mean_total_ms,
            mean_seg_ms: mean(|t| t.t_seg),
            mean_style_ms: mean(|t| t.t_style),
            mean_composite_ms: mean(|t| t.t_composite),
        }
    }
}

struct Shared {
    pipeline: Arc<Pipeline>,
    styles: Vec<StyleInfo>,
    /// Last acknowledged assignment; its lock also serializes updates.
    assignment: Mutex<StyleAssignment>,
    control: Mutex<mpsc::Sender<StyleAssignment>>,
    stats: Mutex<Stats>,
    feed: broadcast::Sender<Arc<Outgoing>>,
    closing: watch::Receiver<bool>,
}

pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    closing: watch::Sender<bool>,
    shutdown: Option<oneshot::Sender<()>>,
    server: Option<tokio::task::JoinHandle<()>>,
    streamer: Option<thread::JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub async fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.closing.send(true);
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(server) = self.server.take() {
            let _ = server.await;
        }
        if let Some(streamer) = self.streamer.take() {
            let _ = tokio::task::spawn_blocking(move || streamer.join()).await;
        }
    }
}

fn thumbnails(pipeline: &Pipeline) -> Result<Vec<StyleInfo>> {
    let preview = datagen::generate_sample(0, 0, THUMBNAIL_SIZE)?.image;
    pipeline
        .style_ids()
        .map(|id| {
            let branch = pipeline.style(id).expect("listed style");
            let png = branch.stylize(&preview).with_context(|| format!("thumbnail for `{id}`"))?.encode_png()?;
            Ok(StyleInfo {
                id: id.to_string(),
                thumbnail_png_base64: base64::engine::general_purpose::STANDARD.encode(png),
            })
        })
        .collect()
}

/// Binds `addr` (port 0 picks a free one), starts the streaming loop and serves.
pub async fn start(setup: ServiceSetup, addr: SocketAddr) -> Result<ServiceHandle> {
    if setup.frames.is_empty() {
        bail!("no input frames to stream");
    }
    setup.pipeline.validate(&setup.initial)?;
    let pipeline = Arc::new(setup.pipeline);
    let styles = thumbnails(&pipeline)?;
    let (control_tx, control_rx) = mpsc::channel();
    let (feed, _) = broadcast::channel(16);
    let (closing_tx, closing_rx) = watch::channel(false);
    let shared = Arc::new(Shared {
        pipeline: Arc::clone(&pipeline),
        styles,
        assignment: Mutex::new(setup.initial.clone()),
        control: Mutex::new(control_tx),
        stats: Mutex::new(Stats::default()),
        feed,
        closing: closing_rx,
    });

    let stop = Arc::new(AtomicBool::new(false));
    let streamer = {
        let shared = Arc::clone(&shared);
        let stop = Arc::clone(&stop);
        let frames = setup.frames;
        let interval = setup.frame_interval;
        let initial = setup.initial;
        thread::Builder::new().name("cbs-stream".into()).spawn(move || {
            let stop_src = Arc::clone(&stop);
            let source = (0..).map_while(move |i: usize| {
                if i > 0 && !interval.is_zero() {
                    thread::sleep(interval);
                }
                (!stop_src.load(Ordering::SeqCst)).then(|| Ok(frames[i % frames.len()].clone()))
            });
            let result = pipeline.process_stream(source, initial, &control_rx, |item| {
                publish(&shared, item);
                if stop.load(Ordering::SeqCst) {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            });
            if let Err(e) = result {
                log::error!("stream stopped: {e}");
            }
        })?
    };

    let app = router(shared);
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    let addr = listener.local_addr()?;
    let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        let serve = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = shutdown_rx.await;
        });
        if let Err(e) = serve.await {
            log::error!("server error: {e}");
        }
    });
    log::info!("serving on http://{addr}");
    Ok(ServiceHandle {
        addr,
        stop,
        closing: closing_tx,
        shutdown: Some(shutdown_tx),
        server: Some(server),
        streamer: Some(streamer),
    })
}

fn publish(shared: &Shared, item: StreamItem<f64>) {
    let out = match item {
        StreamItem::Frame { frame, timings, assignment } => {
            shared.stats.lock().expect("stats").push(timings);
            let png = match frame.encode_png() {
                Ok(png) => png,
                Err(e) => {
                    log::error!("frame {}: {e}", timings.frame_index);
                    return;
                }
            };
            let msg = StreamMessage::Timing {
                schema: API_SCHEMA,
                frame_index: timings.frame_index,
                t_seg: timings.t_seg,
                t_style: timings.t_style,
                t_composite: timings.t_composite,
                t_total: timings.t_total,
                entries: entries_of(&assignment),
            };
            Outgoing::Frame { png: png.into(), text: serde_json::to_string(&msg).expect("timing json") }
        }
        StreamItem::Error { index, error } => {
            shared.stats.lock().expect("stats").errors += 1;
            log::warn!("frame {index}: {error}");
            let msg = StreamMessage::Error { schema: API_SCHEMA, frame_index: index, message: error.to_string() };
            Outgoing::Error { text: serde_json::to_string(&msg).expect("error json") }
        }
    };
    // no subscribers is fine
    let _ = shared.feed.send(Arc::new(out));
}

fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/api/classes", get(get_classes))
        .route("/api/styles", get(get_styles))
        .route("/api/assignment", get(get_assignment).put(put_assignment))
        .route("/api/stats", get(get_stats))
        .route("/stream", get(stream))
        .with_state(shared)
}

async fn get_classes(State(s): State<Arc<Shared>>) -> Json<ClassesBody> {
    let classes = s
        .pipeline
        .class_names()
        .iter()
        .enumerate()
        .map(|(i, name)| ClassInfo { index: i as u32, name: name.clone() })
        .collect();
    Json(ClassesBody { schema: API_SCHEMA, classes })
}

async fn get_styles(State(s): State<Arc<Shared>>) -> Json<StylesBody> {
    Json(StylesBody { schema: API_SCHEMA, styles: s.styles.clone() })
}

async fn get_assignment(State(s): State<Arc<Shared>>) -> Json<AssignmentBody> {
    let current = s.assignment.lock().expect("assignment");
    Json(AssignmentBody { schema: API_SCHEMA, entries: entries_of(&current) })
}

async fn get_stats(State(s): State<Arc<Shared>>) -> Json<StatsBody> {
    Json(s.stats.lock().expect("stats").body())
}

fn reject(status: StatusCode, error: String, located: Option<(usize, &AssignmentEntry)>) -> Response {
    let body = ErrorBody {
        schema: API_SCHEMA,
        error,
        index: located.map(|(i, _)| i),
        entry: located.map(|(_, e)| e.clone()),
    };
    (status, Json(body)).into_response()
}

/// Full replacement. Nothing changes unless every entry validates.
async fn put_assignment(State(s): State<Arc<Shared>>, body: Bytes) -> Response {
    let req: AssignmentBody = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return reject(StatusCode::BAD_REQUEST, format!("malformed assignment body: {e}"), None),
    };
    if req.schema != API_SCHEMA {
        return reject(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("schema {} is not supported (expected {API_SCHEMA})", req.schema),
            None,
        );
    }
    let mut seen = BTreeSet::new();
    for (i, entry) in req.entries.iter().enumerate() {
        if !seen.insert(entry.class) {
            return reject(StatusCode::UNPROCESSABLE_ENTITY, format!("class {} listed twice", entry.class), Some((i, entry)));
        }
        let single = StyleAssignment::new().with(entry.class, entry.style.clone());
        if let Err(e) = s.pipeline.validate(&single) {
            return reject(StatusCode::UNPROCESSABLE_ENTITY, e.to_string(), Some((i, entry)));
        }
    }
    let assignment = match assignment_of(&req.entries) {
        Ok(a) => a,
        Err(e) => return reject(StatusCode::UNPROCESSABLE_ENTITY, e.to_string(), None),
    };
    let mut current = s.assignment.lock().expect("assignment");
    if s.control.lock().expect("control").send(assignment.clone()).is_err() {
        return reject(StatusCode::SERVICE_UNAVAILABLE, "stream is not running".into(), None);
    }
    log::info!("assignment updated: {:?}", entries_of(&assignment));
    *current = assignment;
    Json(AssignmentBody { schema: API_SCHEMA, entries: entries_of(&current) }).into_response()
}

async fn stream(ws: WebSocketUpgrade, State(s): State<Arc<Shared>>) -> Response {
    let rx = s.feed.subscribe();
    let closing = s.closing.clone();
    ws.on_upgrade(move |socket| pump(socket, rx, closing))
}

async fn pump(mut socket: WebSocket, mut rx: broadcast::Receiver<Arc<Outgoing>>, mut closing: watch::Receiver<bool>) {
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(out) => {
                    let sent = match out.as_ref() {
                        Outgoing::Frame { png, text } => {
                            socket.send(Message::Binary(png.clone())).await.is_ok()
                                && socket.send(Message::Text(text.clone().into())).await.is_ok()
                        }
                        Outgoing::Error { text } => socket.send(Message::Text(text.clone().into())).await.is_ok(),
                    };
                    if !sent {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::debug!("stream client skipped {n} frames"),
                Err(broadcast::error::RecvError::Closed) => break,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
            _ = closing.changed() => break,
        }
    }
    let _ = socket.send(Message::Close(None)).await;
}
