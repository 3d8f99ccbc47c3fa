//! WebSocket front end for a simulated session.
//!
//! Clients connect to `/ws` and exchange protocol lines as text messages.
//! A subscribing client first receives the latest state and suggestion.
//! The session idles until a client sends `start`. Any client may start or
//! abort; only the steering owner (the earliest connected client still
//! present) may steer.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use crossbeam_channel::{Receiver, Sender};
use futures::{SinkExt, StreamExt};
use tokio::sync::{broadcast, oneshot};

use super::driver::{SessionOutcome, SimSession};
use super::{evaluate_nbts, Command, Event, SessionError};

#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    pub addr: SocketAddr,
    /// Pace the simulation to wall-clock time.
    pub realtime: bool,
    /// How long clients may keep reading after the session ends.
    pub linger: Duration,
}

#[derive(Debug)]
enum ClientMsg {
    Joined(u64),
    Left(u64),
    Command(u64, Command),
}

#[derive(Clone)]
struct App {
    events: broadcast::Sender<String>,
    commands: Sender<ClientMsg>,
    latest: Arc<Mutex<Latest>>,
    next_id: Arc<AtomicU64>,
}

/// A running server; [`ServerHandle::join`] waits for the session to end.
pub struct ServerHandle {
    pub local_addr: SocketAddr,
    session: JoinHandle<Result<SessionOutcome, SessionError>>,
    http: JoinHandle<()>,
    shutdown: Option<oneshot::Sender<()>>,
    linger: Duration,
}

impl ServerHandle {
    pub fn join(mut self) -> Result<SessionOutcome, SessionError> {
        let outcome = self.session.join().expect("session thread panicked");
        std::thread::sleep(self.linger);
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.http.join().expect("server thread panicked");
        outcome
    }
}

/// Binds `opts.addr` and runs `session` behind it in background threads.
pub fn spawn(session: SimSession, opts: ServeOptions) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(opts.addr)?;
    listener.set_nonblocking(true)?;
    let local_addr = listener.local_addr()?;
    let (events, _) = broadcast::channel(1 << 14);
    let (cmd_tx, cmd_rx) = crossbeam_channel::unbounded();
    let app = App {
        events: events.clone(),
        commands: cmd_tx,
        latest: Arc::new(Mutex::new(Latest::default())),
        next_id: Arc::new(AtomicU64::new(0)),
    };
    let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let router = Router::new().route("/ws", get(upgrade)).with_state(app.clone());
    let http = std::thread::spawn(move || {
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener from a bound socket");
            let served = axum::serve(listener, router)
                .with_graceful_shutdown(async {
                    let _ = shutdown_rx.await;
                })
                .await;
            if let Err(e) = served {
                log::error!("server stopped: {e}");
            }
        });
        runtime.shutdown_timeout(Duration::from_millis(100));
    });
    let realtime = opts.realtime;
    let latest = app.latest.clone();
    let session = std::thread::spawn(move || run_session(session, cmd_rx, events, latest, realtime));
    Ok(ServerHandle {
        local_addr,
        session,
        http,
        shutdown: Some(shutdown_tx),
        linger: opts.linger,
    })
}

async fn upgrade(ws: WebSocketUpgrade, State(app): State<App>) -> Response {
    ws.on_upgrade(move |socket| client(socket, app))
}

async fn client(socket: WebSocket, app: App) {
    let id = app.next_id.fetch_add(1, Ordering::SeqCst);
    let mut rx = app.events.subscribe();
    let (mut sink, mut stream) = socket.split();
    let greeting = app.latest.lock().expect("latest lock").lines();
    for line in greeting {
        if sink.send(Message::Text(line.into())).await.is_err() {
            return;
        }
    }
    let _ = app.commands.send(ClientMsg::Joined(id));
    let forward = tokio::spawn(async move {
        loop {
            match rx.recv().await {
                Ok(line) => {
                    if sink.send(Message::Text(line.into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("client {id} dropped {n} events"),
                Err(broadcast::error::RecvError::Closed) => break,
            }
        }
        let _ = sink.close().await;
    });
    while let Some(Ok(msg)) = stream.next().await {
        match msg {
            Message::Text(text) => {
                for line in text.as_str().lines().filter(|l| !l.trim().is_empty()) {
                    match Command::from_line(line) {
                        Ok(cmd) => {
                            let _ = app.commands.send(ClientMsg::Command(id, cmd));
                        }
                        Err(e) => log::warn!("client {id}: {e}"),
                    }
                }
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    let _ = app.commands.send(ClientMsg::Left(id));
    forward.abort();
}

struct Clients {
    present: BTreeSet<u64>,
}

impl Clients {
    fn owner(&self) -> Option<u64> {
        self.present.first().copied()
    }
}

/// Lines replayed to a client when it subscribes.
#[derive(Debug, Default)]
struct Latest {
    state: Option<String>,
    suggestion: Option<String>,
}

impl Latest {
    fn lines(&self) -> Vec<String> {
        self.state.iter().chain(&self.suggestion).cloned().collect()
    }
}

fn publish(session: &mut SimSession, events: &broadcast::Sender<String>, latest: &Mutex<Latest>) {
    for e in session.engine.drain_events() {
        let line = e.to_line();
        match e {
            Event::State { .. } => latest.lock().expect("latest lock").state = Some(line.clone()),
            Event::Suggestion { .. } => latest.lock().expect("latest lock").suggestion = Some(line.clone()),
            _ => {}
        }
        // no subscribers is fine
        let _ = events.send(line);
    }
}

fn run_session(
    mut session: SimSession,
    commands: Receiver<ClientMsg>,
    events: broadcast::Sender<String>,
    latest: Arc<Mutex<Latest>>,
    realtime: bool,
) -> Result<SessionOutcome, SessionError> {
    let mut clients = Clients {
        present: BTreeSet::new(),
    };
    // announce the idle state to the first clients
    let idle = Event::State {
        t_ns: 0,
        stage: session.engine.stage(),
        mode: session.engine.mode(),
    };
    latest.lock().expect("latest lock").state = Some(idle.to_line());

    let handle = |msg: ClientMsg, session: &mut SimSession, clients: &mut Clients| match msg {
        ClientMsg::Joined(id) => {
            clients.present.insert(id);
        }
        ClientMsg::Left(id) => {
            clients.present.remove(&id);
        }
        ClientMsg::Command(_, Command::Start) => session.engine.start(),
        ClientMsg::Command(_, Command::Abort) => {
            if session.engine.is_started() {
                session.engine.abort("aborted by client");
            } else {
                session.engine.start();
                session.engine.abort("aborted by client");
            }
        }
        ClientMsg::Command(id, Command::Steer { t_fc }) => {
            if clients.owner() == Some(id) {
                session.steer(&t_fc);
            }
        }
    };

    while !session.engine.is_started() {
        match commands.recv() {
            Ok(msg) => handle(msg, &mut session, &mut clients),
            // every client handle is gone: the server is shutting down
            Err(_) => return Ok(session.outcome()),
        }
    }
    publish(&mut session, &events, &latest);

    let (req_tx, req_rx) = crossbeam_channel::unbounded();
    let (res_tx, res_rx) = crossbeam_channel::unbounded();
    let evaluator = std::thread::spawn(move || {
        for req in req_rx {
            if res_tx.send(evaluate_nbts(&req)).is_err() {
                break;
            }
        }
    });

    let t0 = Instant::now();
    let mut result = Ok(());
    while session.engine.is_running() {
        while let Ok(msg) = commands.try_recv() {
            handle(msg, &mut session, &mut clients);
        }
        if !session.engine.is_running() {
            break;
        }
        if let Err(e) = session.step(false) {
            result = Err(e);
            break;
        }
        if let Some(req) = session.engine.take_eval_request() {
            req_tx.send(req).expect("evaluator is alive");
        }
        while let Ok(res) = res_rx.try_recv() {
            let applied = res.map_err(SessionError::from).and_then(|r| session.engine.apply_evaluation(&r));
            if let Err(e) = applied {
                session.engine.abort(e.to_string());
                result = Err(e);
            }
        }
        publish(&mut session, &events, &latest);
        if realtime {
            let due = t0 + Duration::from_secs_f64(session.sim.now().max(0.0));
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
    }
    publish(&mut session, &events, &latest);
    drop(req_tx);
    evaluator.join().expect("evaluator thread panicked");
    result.map(|()| session.outcome())
}
