//! Websocket server for human-play sessions.
//!
//! Each connection on `/session` joins with `{"type":"join",...}`, then the
//! server ticks its own world at the configured rate. Client keys go into a
//! single-slot mailbox that every tick drains, so the simulation never waits
//! on the network.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use iatt_core::io::{ClientMsg, Mailbox, PlaySession, PlaySetup, ServerMsg, SessionLog};
use tokio::net::TcpListener;
use tokio::sync::mpsc;

pub struct PlayServer {
    setup: PlaySetup,
    log_dir: Option<PathBuf>,
    logs: Mutex<Vec<SessionLog>>,
}

impl PlayServer {
    pub fn new(setup: PlaySetup, log_dir: Option<PathBuf>) -> iatt_core::Result<Arc<Self>> {
        setup.validate()?;
        Ok(Arc::new(Self {
            setup,
            log_dir,
            logs: Mutex::new(Vec::new()),
        }))
    }

    pub fn setup(&self) -> &PlaySetup {
        &self.setup
    }

    /// Logs of every session that has ended, complete or not.
    pub fn logs(&self) -> Vec<SessionLog> {
        self.logs.lock().expect("log lock").clone()
    }

    fn record(&self, log: SessionLog) {
        if let Some(dir) = &self.log_dir {
            let n = self.logs.lock().expect("log lock").len();
            let path = dir.join(format!("session-{n:04}.json"));
            match serde_json::to_vec_pretty(&log) {
                Ok(bytes) => {
                    if let Err(e) = std::fs::write(&path, bytes) {
                        log::error!("could not write {}: {e}", path.display());
                    }
                }
                Err(e) => log::error!("could not serialize a session log: {e}"),
            }
        }
        self.logs.lock().expect("log lock").push(log);
    }
}

pub fn router(server: Arc<PlayServer>) -> Router {
    Router::new()
        .route("/session", get(upgrade))
        .with_state(server)
}

/// Serves until the task is dropped.
pub async fn serve(listener: TcpListener, server: Arc<PlayServer>) -> std::io::Result<()> {
    axum::serve(listener, router(server)).await
}

/// Binds `addr` and serves in the background; returns the bound address.
pub async fn spawn(
    addr: SocketAddr,
    server: Arc<PlayServer>,
) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    Ok((bound, tokio::spawn(serve(listener, server))))
}

/// Serves on `addr` from a fresh runtime until the process is stopped.
pub fn serve_blocking(addr: SocketAddr, server: Arc<PlayServer>) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(async {
            let listener = TcpListener::bind(addr).await?;
            log::info!(
                "play server listening on ws://{}/session",
                listener.local_addr()?
            );
            serve(listener, server).await
        })
}

async fn upgrade(ws: WebSocketUpgrade, State(server): State<Arc<PlayServer>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| run_session(socket, server))
}

async fn send(
    socket: &mut futures::stream::SplitSink<WebSocket, Message>,
    msg: &ServerMsg,
) -> bool {
    socket
        .send(Message::Text(msg.to_json().into()))
        .await
        .is_ok()
}

enum Inbound {
    Error(String),
    Closed,
}

async fn run_session(socket: WebSocket, server: Arc<PlayServer>) {
    let (mut tx, mut rx) = socket.split();

    // Handshake: malformed messages get an error and another chance.
    loop {
        let Some(Ok(msg)) = rx.next().await else {
            return;
        };
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => return,
            _ => continue,
        };
        match ClientMsg::parse(&text).and_then(|m| server.setup.accept_join(&m)) {
            Ok(welcome) => {
                if !send(&mut tx, &welcome).await {
                    return;
                }
                break;
            }
            Err(e) => {
                if !send(&mut tx, &ServerMsg::error(e.to_string())).await {
                    return;
                }
            }
        }
    }

    let mut session = match PlaySession::new(server.setup.clone()) {
        Ok(s) => s,
        Err(e) => {
            let _ = send(&mut tx, &ServerMsg::error(e.to_string())).await;
            return;
        }
    };
    let mailbox = Arc::new(Mailbox::default());
    let (events, mut inbound) = mpsc::unbounded_channel();
    let reader = {
        let mailbox = mailbox.clone();
        tokio::spawn(async move {
            while let Some(msg) = rx.next().await {
                let text = match msg {
                    Ok(Message::Text(t)) => t,
                    Ok(Message::Close(_)) | Err(_) => break,
                    Ok(_) => continue,
                };
                match ClientMsg::parse(&text) {
                    Ok(ClientMsg::Action { key }) => mailbox.post(key),
                    Ok(ClientMsg::Join { .. }) => {
                        let _ = events.send(Inbound::Error("already joined".into()));
                    }
                    Err(e) => {
                        let _ = events.send(Inbound::Error(e.to_string()));
                    }
                }
            }
            let _ = events.send(Inbound::Closed);
        })
    };

    let mut connected = true;
    if let Some(state) = session.state() {
        connected = send(&mut tx, &state).await;
    }
    let mut ticker = tokio::time::interval(server.setup.config.tick_interval());
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    ticker.tick().await;
    while connected && !session.is_finished() {
        ticker.tick().await;
        while let Ok(ev) = inbound.try_recv() {
            match ev {
                Inbound::Error(message) => {
                    connected &= send(&mut tx, &ServerMsg::Error { message }).await;
                }
                Inbound::Closed => connected = false,
            }
        }
        if !connected {
            break;
        }
        match session.tick(mailbox.take()) {
            Ok(msgs) => {
                for m in &msgs {
                    if !send(&mut tx, m).await {
                        connected = false;
                        break;
                    }
                }
            }
            Err(e) => {
                log::error!("play session failed: {e}");
                let _ = send(&mut tx, &ServerMsg::error(e.to_string())).await;
                break;
            }
        }
    }
    session.abort();
    if connected {
        let _ = tx.send(Message::Close(None)).await;
    }
    reader.abort();
    server.record(session.into_log());
}
