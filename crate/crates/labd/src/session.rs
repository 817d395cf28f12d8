//! Live session: streams rollout state to WebSocket clients and lets one of
//! them take over the arm.
//!
//! While a controller holds the arm, each `intervene` message drives
//! exactly one environment step and the actor waits between messages (the
//! learner keeps updating meanwhile). `release` hands control back to the
//! policy once every earlier `intervene` from that controller has run.

use std::collections::{HashMap, VecDeque};
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use gatelab::env::{ArmAction, EnvState, GripperMode, TaskSpec};
use gatelab::oracle::InterventionSource;
use gatelab::training::{EpisodeMetrics, MetricsRecord, Observer, StepRecord};
use serde_json::{json, Value};
use tungstenite::{Message, WebSocket};

use crate::protocol::{encode, parse_client, ClientMsg, Kind};

/// Environment variable naming the listen address.
pub const LISTEN_ENV: &str = "LABD_LISTEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:7878";
/// State frames a connection may have queued before the oldest is dropped.
pub const FRAME_BACKLOG: usize = 64;
const POLL: Duration = Duration::from_millis(2);

/// Outgoing messages of one connection. Control messages are never dropped;
/// state frames beyond [`FRAME_BACKLOG`] displace the oldest queued frame.
#[derive(Debug, Default)]
pub struct Outbox {
    items: VecDeque<(Kind, Value)>,
    frames: usize,
    dropped: u64,
}

impl Outbox {
    pub fn push(&mut self, kind: Kind, payload: Value) {
        if kind.droppable() {
            if self.frames >= FRAME_BACKLOG {
                let oldest = self.items.iter().position(|(k, _)| k.droppable()).expect("frame count is consistent");
                self.items.remove(oldest);
                self.frames -= 1;
                self.dropped += 1;
            }
            self.frames += 1;
        }
        self.items.push_back((kind, payload));
    }

    pub fn pop(&mut self) -> Option<(Kind, Value)> {
        let item = self.items.pop_front()?;
        if item.0.droppable() {
            self.frames -= 1;
        }
        Some(item)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// State frames discarded so far.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Command {
    Act(ArmAction, GripperMode),
    Release,
}

#[derive(Default)]
struct Shared {
    paused: bool,
    controller: Option<u64>,
    commands: VecDeque<Command>,
    clients: HashMap<u64, Outbox>,
    next_id: u64,
}

impl Shared {
    fn broadcast(&mut self, kind: Kind, payload: &Value) {
        for out in self.clients.values_mut() {
            out.push(kind, payload.clone());
        }
    }

    /// The actor must wait: paused, or a controller holds the arm but has
    /// not sent the next step.
    fn blocked(&self) -> bool {
        self.paused || (self.controller.is_some() && self.commands.is_empty())
    }

    fn disconnect(&mut self, id: u64) {
        self.clients.remove(&id);
        if self.controller == Some(id) {
            self.controller = None;
            self.commands.clear();
        }
        if self.clients.is_empty() {
            self.paused = false;
        }
    }
}

/// A running session server. Dropping it stops accepting connections and
/// closes every open one.
pub struct Session {
    shared: Arc<Mutex<Shared>>,
    stop: Arc<AtomicBool>,
    addr: SocketAddr,
    accept: Option<JoinHandle<()>>,
    start: Instant,
}

fn lock(m: &Mutex<Shared>) -> MutexGuard<'_, Shared> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Session {
    /// Binds `addr` and starts accepting clients on a background thread.
    pub fn bind(addr: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Mutex::new(Shared::default()));
        let stop = Arc::new(AtomicBool::new(false));
        let start = Instant::now();
        let accept = {
            let shared = Arc::clone(&shared);
            let stop = Arc::clone(&stop);
            std::thread::spawn(move || accept_loop(listener, shared, stop, start))
        };
        log::info!("session listening on {addr}");
        Ok(Self {
            shared,
            stop,
            addr,
            accept: Some(accept),
            start,
        })
    }

    /// Binds the address from `LABD_LISTEN`, or the default.
    pub fn bind_from_env() -> std::io::Result<Self> {
        let addr = std::env::var(LISTEN_ENV).unwrap_or_else(|_| DEFAULT_LISTEN.to_string());
        Self::bind(&addr)
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// The intervention source to hand to the training loop.
    pub fn source(&self) -> SessionSource {
        SessionSource {
            shared: Arc::clone(&self.shared),
        }
    }

    /// The observer to hand to the training loop. `tick` is slept after
    /// every streamed step so a human can follow the rollout.
    pub fn observer(&self, tick: Duration) -> SessionObserver {
        SessionObserver {
            shared: Arc::clone(&self.shared),
            stop: Arc::clone(&self.stop),
            tick,
            start: self.start,
        }
    }

    pub fn clients(&self) -> usize {
        lock(&self.shared).clients.len()
    }

    /// Asks the training loop to finish and stops the server threads.
    pub fn shutdown(mut self) {
        self.close();
    }

    fn close(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.close();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Mutex<Shared>>, stop: Arc<AtomicBool>, start: Instant) {
    let mut conns = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let shared = Arc::clone(&shared);
                let stop = Arc::clone(&stop);
                conns.push(std::thread::spawn(move || {
                    if let Err(e) = serve_conn(stream, &shared, &stop, start) {
                        log::info!("connection {peer} closed: {e}");
                    }
                }));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL * 5),
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(POLL * 5);
            }
        }
    }
    for c in conns {
        let _ = c.join();
    }
}

fn serve_conn(stream: TcpStream, shared: &Mutex<Shared>, stop: &AtomicBool, start: Instant) -> Result<(), String> {
    stream.set_nonblocking(false).map_err(|e| e.to_string())?;
    stream.set_nodelay(true).map_err(|e| e.to_string())?;
    let mut ws = tungstenite::accept(stream).map_err(|e| e.to_string())?;
    ws.get_mut().set_read_timeout(Some(POLL)).map_err(|e| e.to_string())?;
    let id = {
        let mut s = lock(shared);
        let id = s.next_id;
        s.next_id += 1;
        s.clients.insert(id, Outbox::default());
        id
    };
    let result = conn_loop(&mut ws, id, shared, stop, start);
    lock(shared).disconnect(id);
    let _ = ws.close(None);
    let _ = ws.flush();
    result
}

fn conn_loop(
    ws: &mut WebSocket<TcpStream>,
    id: u64,
    shared: &Mutex<Shared>,
    stop: &AtomicBool,
    start: Instant,
) -> Result<(), String> {
    let mut out_seq = 0u64;
    let mut last_in: Option<u64> = None;
    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        let pending: Vec<(Kind, Value)> = {
            let mut s = lock(shared);
            let out = s.clients.get_mut(&id).ok_or("connection dropped")?;
            std::iter::from_fn(|| out.pop()).collect()
        };
        for (kind, payload) in pending {
            out_seq += 1;
            let text = encode(out_seq, start.elapsed().as_secs_f64(), kind, payload);
            ws.write(Message::text(text)).map_err(|e| e.to_string())?;
        }
        ws.flush().map_err(|e| e.to_string())?;
        match ws.read() {
            Ok(Message::Text(text)) => {
                let reply = handle(id, text.as_str(), &mut last_in, shared);
                if let Some((kind, payload)) = reply {
                    let mut s = lock(shared);
                    if let Some(out) = s.clients.get_mut(&id) {
                        out.push(kind, payload);
                    }
                }
            }
            Ok(Message::Binary(_)) => {
                let mut s = lock(shared);
                if let Some(out) = s.clients.get_mut(&id) {
                    out.push(Kind::Error, error_payload("binary frames are not part of the protocol", None));
                }
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => return Err(e.to_string()),
        }
    }
}

fn error_payload(message: &str, reply_to: Option<u64>) -> Value {
    json!({ "message": message, "reply_to": reply_to })
}

/// Applies one client frame; returns the direct reply, if any.
fn handle(id: u64, text: &str, last_in: &mut Option<u64>, shared: &Mutex<Shared>) -> Option<(Kind, Value)> {
    let (seq, msg) = match parse_client(text, *last_in) {
        Ok(ok) => ok,
        Err(e) => return Some((Kind::Error, error_payload(&e, None))),
    };
    *last_in = Some(seq);
    let mut s = lock(shared);
    let other_controller = s.controller.is_some_and(|c| c != id);
    let reject = |m: &str| Some((Kind::Error, error_payload(m, Some(seq))));
    match msg {
        ClientMsg::Intervene(p) => {
            if other_controller {
                return reject("another client is controlling the arm");
            }
            s.controller = Some(id);
            let (arm, grip) = p.action();
            s.commands.push_back(Command::Act(arm, grip));
            None
        }
        ClientMsg::Release => {
            if s.controller != Some(id) {
                return reject("release without holding control");
            }
            s.commands.push_back(Command::Release);
            None
        }
        ClientMsg::Pause | ClientMsg::Resume if other_controller => {
            reject("another client is controlling the arm")
        }
        ClientMsg::Pause => {
            s.paused = true;
            None
        }
        ClientMsg::Resume => {
            s.paused = false;
            None
        }
        ClientMsg::Ping(payload) => Some((Kind::Ping, json!({ "reply_to": seq, "echo": payload }))),
    }
}

/// Feeds controller commands to the rollout.
pub struct SessionSource {
    shared: Arc<Mutex<Shared>>,
}

impl InterventionSource for SessionSource {
    fn decide(&mut self, _task: &TaskSpec, _state: &EnvState) -> Option<(ArmAction, GripperMode)> {
        let mut s = lock(&self.shared);
        while let Some(cmd) = s.commands.pop_front() {
            match cmd {
                Command::Act(arm, grip) => return Some((arm, grip)),
                Command::Release => s.controller = None,
            }
        }
        None
    }
}

/// Streams rollout events to every client and reports pause state.
pub struct SessionObserver {
    shared: Arc<Mutex<Shared>>,
    stop: Arc<AtomicBool>,
    tick: Duration,
    start: Instant,
}

impl SessionObserver {
    fn broadcast(&self, kind: Kind, payload: Value) {
        lock(&self.shared).broadcast(kind, &payload);
    }

    pub fn elapsed(&self) -> Duration {
        self.start.elapsed()
    }
}

impl Observer for SessionObserver {
    fn on_step(&mut self, episode: u64, record: &StepRecord) {
        self.broadcast(Kind::StateFrame, json!({ "episode": episode, "step": record }));
        if !self.tick.is_zero() {
            std::thread::sleep(self.tick);
        }
    }

    fn on_episode_end(&mut self, metrics: &EpisodeMetrics) {
        self.broadcast(Kind::EpisodeEnd, serde_json::to_value(metrics).expect("metrics serialize"));
    }

    fn on_metrics(&mut self, record: &MetricsRecord) {
        if matches!(record, MetricsRecord::Update { .. }) {
            self.broadcast(Kind::Metrics, serde_json::to_value(record).expect("metrics serialize"));
        }
    }

    fn is_paused(&self) -> bool {
        lock(&self.shared).blocked()
    }

    fn should_stop(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }
}
