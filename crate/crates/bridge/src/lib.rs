//! WebSocket front end for planner sessions.
//!
//! The engine runs on its own thread at a fixed tick rate. Connections talk
//! to it through one bounded command queue, drained at the start of every
//! tick, and receive state frames through a broadcast channel. The first
//! client to connect drives; later ones observe.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use tokio::sync::{broadcast, mpsc, oneshot};

use qplan::denoiser::Denoiser;
use qplan::live::{
    ClientCommand, Hello, LiveSession, ReplayCursor, Role, ServerMessage, StateFrame,
};

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("cannot listen on {addr}: {source} (is another server already using this port?)")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },

    #[error("invalid bridge configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] qplan::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct BridgeConfig {
    pub addr: SocketAddr,
    /// Engine ticks per second (recorded ticks per second in replay).
    pub tick_hz: f64,
    /// Commands waiting for the next tick beyond this are refused.
    pub command_capacity: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8765)),
            tick_hz: 20.0,
            command_capacity: 64,
        }
    }
}

impl BridgeConfig {
    fn validate(&self) -> Result<(), BridgeError> {
        if !(self.tick_hz.is_finite() && self.tick_hz > 0.0) || self.command_capacity == 0 {
            return Err(BridgeError::Config(format!(
                "tick rate must be positive and the command queue non-empty: {self:?}"
            )));
        }
        Ok(())
    }
}

/// What the engine thread drives: a live session or a replay.
pub trait Engine: Send + 'static {
    fn hello(&self, role: Role) -> Hello;
    /// Applies one client command; a frame is broadcast if one is returned.
    fn command(&mut self, command: ClientCommand) -> Result<Option<StateFrame>, String>;
    /// Advances one tick.
    fn tick(&mut self) -> Result<Option<StateFrame>, String>;
    /// Time until the next tick given the base period.
    fn period(&self, base: Duration) -> Duration {
        base
    }
}

pub struct LiveEngine<D: Denoiser + Send + Sync + 'static>(pub LiveSession<D>);

impl<D: Denoiser + Send + Sync + 'static> Engine for LiveEngine<D>
where
    D::Tape: 'static,
{
    fn hello(&self, role: Role) -> Hello {
        self.0.hello(role)
    }

    fn command(&mut self, command: ClientCommand) -> Result<Option<StateFrame>, String> {
        self.0
            .apply(command)
            .map(|_| None)
            .map_err(|e| e.to_string())
    }

    fn tick(&mut self) -> Result<Option<StateFrame>, String> {
        self.0.step().map_err(|e| format!("engine error: {e}"))
    }
}

pub struct ReplayEngine {
    pub cursor: ReplayCursor,
    pub hello: Hello,
}

impl Engine for ReplayEngine {
    fn hello(&self, role: Role) -> Hello {
        Hello {
            role,
            ..self.hello.clone()
        }
    }

    fn command(&mut self, command: ClientCommand) -> Result<Option<StateFrame>, String> {
        self.cursor.apply(&command).map_err(|e| e.to_string())
    }

    fn tick(&mut self) -> Result<Option<StateFrame>, String> {
        Ok(if self.cursor.is_streaming() {
            self.cursor.advance()
        } else {
            None
        })
    }

    fn period(&self, base: Duration) -> Duration {
        let rate = self.cursor.rate();
        if self.cursor.is_streaming() {
            base.div_f64(rate)
        } else {
            base
        }
    }
}

struct Incoming {
    command: ClientCommand,
    reply: mpsc::UnboundedSender<String>,
}

struct App {
    commands: SyncSender<Incoming>,
    frames: broadcast::Sender<Arc<str>>,
    hello: Mutex<Hello>,
    driver_taken: AtomicBool,
}

/// A running server; dropping it without [`Bridge::shutdown`] leaves it
/// running until the process exits.
pub struct Bridge {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    engine: Option<JoinHandle<()>>,
    server: Option<tokio::task::JoinHandle<()>>,
    close: Option<oneshot::Sender<()>>,
}

impl Bridge {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub async fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(tx) = self.close.take() {
            let _ = tx.send(());
        }
        if let Some(server) = self.server.take() {
            let _ = server.await;
        }
        if let Some(engine) = self.engine.take() {
            let _ = tokio::task::spawn_blocking(move || engine.join()).await;
        }
    }

    /// Waits until the server stops on its own.
    pub async fn wait(mut self) {
        if let Some(server) = self.server.take() {
            let _ = server.await;
        }
    }
}

/// Binds `config.addr` (port 0 picks a free port) and starts the engine
/// thread and the connection handler.
pub async fn start<E: Engine>(engine: E, config: &BridgeConfig) -> Result<Bridge, BridgeError> {
    config.validate()?;
    let listener = tokio::net::TcpListener::bind(config.addr)
        .await
        .map_err(|source| BridgeError::Bind {
            addr: config.addr,
            source,
        })?;
    let addr = listener.local_addr()?;
    let (cmd_tx, cmd_rx) = sync_channel(config.command_capacity);
    let (frame_tx, _) = broadcast::channel(1024);
    let app = Arc::new(App {
        commands: cmd_tx,
        frames: frame_tx.clone(),
        hello: Mutex::new(engine.hello(Role::Driver)),
        driver_taken: AtomicBool::new(false),
    });
    let stop = Arc::new(AtomicBool::new(false));
    let period = Duration::from_secs_f64(1.0 / config.tick_hz);
    let engine_thread = {
        let app = app.clone();
        let stop = stop.clone();
        std::thread::Builder::new()
            .name("qplan-engine".into())
            .spawn(move || engine_loop(engine, cmd_rx, frame_tx, app, stop, period))?
    };
    let router = Router::new().route("/ws", get(upgrade)).with_state(app);
    let (close_tx, close_rx) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        let shutdown = async {
            let _ = close_rx.await;
        };
        if let Err(e) = axum::serve(listener, router)
            .with_graceful_shutdown(shutdown)
            .await
        {
            log::error!("bridge server stopped: {e}");
        }
    });
    log::info!("bridge listening on ws://{addr}/ws");
    Ok(Bridge {
        addr,
        stop,
        engine: Some(engine_thread),
        server: Some(server),
        close: Some(close_tx),
    })
}

/// Runs a bridge on a fresh runtime until interrupted.
pub fn run<E: Engine>(engine: E, config: &BridgeConfig) -> Result<(), BridgeError> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(async {
        let bridge = start(engine, config).await?;
        eprintln!(
            "listening on ws://{}/ws (ctrl-c to stop)",
            bridge.local_addr()
        );
        tokio::signal::ctrl_c().await?;
        bridge.shutdown().await;
        Ok(())
    })
}

fn broadcast_frame(frames: &broadcast::Sender<Arc<str>>, frame: StateFrame) {
    // no receivers is fine: frames are not buffered for late joiners
    let _ = frames.send(ServerMessage::State(frame).to_text().into());
}

fn engine_loop<E: Engine>(
    mut engine: E,
    commands: Receiver<Incoming>,
    frames: broadcast::Sender<Arc<str>>,
    app: Arc<App>,
    stop: Arc<AtomicBool>,
    base: Duration,
) {
    let mut next = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        let now = Instant::now();
        if next > now {
            std::thread::sleep(next - now);
        }
        while let Ok(Incoming { command, reply }) = commands.try_recv() {
            match engine.command(command) {
                Ok(Some(frame)) => broadcast_frame(&frames, frame),
                Ok(None) => {}
                Err(message) => {
                    let _ = reply.send(message);
                }
            }
        }
        match engine.tick() {
            Ok(Some(frame)) => broadcast_frame(&frames, frame),
            Ok(None) => {}
            Err(message) => {
                log::error!("{message}");
                let _ = frames.send(ServerMessage::Error { message }.to_text().into());
            }
        }
        *app.hello.lock().expect("hello lock") = engine.hello(Role::Driver);
        next += engine.period(base);
        // after a long stall, do not burst to catch up
        let now = Instant::now();
        if next + base < now {
            next = now;
        }
    }
}

async fn upgrade(ws: WebSocketUpgrade, State(app): State<Arc<App>>) -> Response {
    ws.on_upgrade(move |socket| client(socket, app))
}

async fn send(socket: &mut WebSocket, text: &str) -> bool {
    socket.send(Message::Text(text.into())).await.is_ok()
}

fn error_text(message: impl Into<String>) -> String {
    ServerMessage::Error {
        message: message.into(),
    }
    .to_text()
}

async fn client(mut socket: WebSocket, app: Arc<App>) {
    let role = if app
        .driver_taken
        .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
        .is_ok()
    {
        Role::Driver
    } else {
        Role::Observer
    };
    let mut frames = app.frames.subscribe();
    let (reply_tx, mut replies) = mpsc::unbounded_channel::<String>();
    let hello = Hello {
        role,
        ..app.hello.lock().expect("hello lock").clone()
    };
    if send(&mut socket, &ServerMessage::Hello(hello).to_text()).await {
        loop {
            tokio::select! {
                msg = socket.recv() => {
                    let text = match msg {
                        Some(Ok(Message::Text(t))) => t,
                        Some(Ok(Message::Binary(_))) => {
                            if !send(&mut socket, &error_text("binary frames are not supported; send JSON text")).await {
                                break;
                            }
                            continue;
                        }
                        Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                        Some(Ok(_)) => continue,
                    };
                    let refusal = if role == Role::Observer {
                        Some("this connection observes; only the driving client may send commands".to_string())
                    } else {
                        match ClientCommand::parse(text.as_str()) {
                            Err(e) => Some(e),
                            Ok(command) => match app.commands.try_send(Incoming { command, reply: reply_tx.clone() }) {
                                Ok(()) => None,
                                Err(TrySendError::Full(_)) => Some("command queue full; slow down".to_string()),
                                Err(TrySendError::Disconnected(_)) => Some("engine has stopped".to_string()),
                            },
                        }
                    };
                    if let Some(message) = refusal {
                        if !send(&mut socket, &error_text(message)).await {
                            break;
                        }
                    }
                }
                frame = frames.recv() => match frame {
                    Ok(text) => {
                        if !send(&mut socket, &text).await {
                            break;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        log::warn!("client fell {n} frames behind");
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                Some(message) = replies.recv() => {
                    if !send(&mut socket, &error_text(message)).await {
                        break;
                    }
                }
            }
        }
    }
    if role == Role::Driver {
        app.driver_taken.store(false, Ordering::SeqCst);
    }
}
