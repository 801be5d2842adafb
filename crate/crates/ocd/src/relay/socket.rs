//! TCP driver for the relay engine using std::net and threads.
//!
//! One accept loop per listening port; each accepted or dialed connection
//! gets a read pump that feeds engine events and applies the resulting
//! commands. A single mutex guards the engine together with command
//! application so bytes are written in the order the engine emitted them.
//! Bulk data here flows one way per connection pair (request up, response
//! down), which keeps that coarse lock safe from write-write deadlocks.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use anyhow::{Context, Result};
use socket2::{SockRef, TcpKeepalive};

use crate::relay::config::RelayConfig;
use crate::relay::engine::{Cmd, ConnId, DialPurpose, RelayEngine, RelayStatus};
use crate::relay::pool::WorkerPool;

struct Shared {
    /// Engine state plus in-flight command application, one critical
    /// section so per-connection write order matches engine emit order.
    engine: Mutex<RelayEngine>,
    streams: Mutex<HashMap<ConnId, TcpStream>>,
    next_conn: AtomicU64,
    forward_buffer: usize,
}

pub struct SocketRelay {
    shared: Arc<Shared>,
    workers: Option<Arc<WorkerPool>>,
}

impl SocketRelay {
    /// Binds all listeners, pre-fills the connection pool (an unreachable
    /// peer relay fails startup, naming the peer), then starts accepting.
    pub fn start(cfg: RelayConfig) -> Result<SocketRelay> {
        cfg.validate().context("invalid relay config")?;
        let mut listeners = Vec::new();
        for port in cfg.accept_ports() {
            let addr = SocketAddr::new(cfg.listen.ip(), port);
            listeners.push((
                port,
                TcpListener::bind(addr).with_context(|| format!("bind {addr}"))?,
            ));
        }
        listeners.push((
            cfg.peer_listen.port(),
            TcpListener::bind(cfg.peer_listen)
                .with_context(|| format!("bind peer port {}", cfg.peer_listen))?,
        ));

        let workers = if cfg.features.thread_pool {
            Some(Arc::new(WorkerPool::new(
                cfg.worker_pool_size,
                cfg.pool_low_watermark.min(cfg.worker_pool_size),
                cfg.worker_pool_size,
            )))
        } else {
            None
        };
        let fork_delay = if cfg.features.thread_pool {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(cfg.fork_delay_ms / 1e3)
        };
        let forward_buffer = cfg.forward_buffer;
        let shared = Arc::new(Shared {
            engine: Mutex::new(RelayEngine::new(cfg)),
            streams: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(1),
            forward_buffer,
        });

        // Pool pre-fill runs synchronously so a dead peer is a startup error.
        let start_cmds = shared.engine.lock().unwrap().start();
        for cmd in start_cmds {
            let Cmd::Dial { token, dest, params, purpose, .. } = cmd else {
                continue;
            };
            debug_assert_eq!(purpose, DialPurpose::Pool);
            let stream = TcpStream::connect_timeout(&dest, Duration::from_secs(5))
                .with_context(|| format!("peer relay {dest} unreachable"))?;
            apply_transport(&stream, params.nagle_enabled, true)?;
            let id = register(&shared, stream.try_clone()?);
            let cmds = shared.engine.lock().unwrap().on_dial_result(token, Ok(id));
            apply_cmds(&shared, cmds);
            spawn_pump(shared.clone(), id, stream);
        }

        for (port, listener) in listeners {
            let shared = shared.clone();
            let workers = workers.clone();
            thread::spawn(move || accept_loop(shared, listener, port, workers, fork_delay));
        }
        Ok(SocketRelay { shared, workers })
    }

    pub fn status(&self) -> RelayStatus {
        self.shared.engine.lock().unwrap().status()
    }

    pub fn worker_pool(&self) -> Option<&WorkerPool> {
        self.workers.as_deref()
    }
}

fn register(shared: &Arc<Shared>, stream: TcpStream) -> ConnId {
    let id = shared.next_conn.fetch_add(1, Ordering::Relaxed);
    shared.streams.lock().unwrap().insert(id, stream);
    id
}

fn apply_transport(stream: &TcpStream, nagle: bool, keepalive: bool) -> Result<()> {
    stream.set_nodelay(!nagle)?;
    if keepalive {
        let ka = TcpKeepalive::new().with_time(Duration::from_secs(30));
        SockRef::from(stream).set_tcp_keepalive(&ka)?;
    }
    Ok(())
}

fn accept_loop(
    shared: Arc<Shared>,
    listener: TcpListener,
    port: u16,
    workers: Option<Arc<WorkerPool>>,
    fork_delay: Duration,
) {
    for stream in listener.incoming() {
        let Ok(stream) = stream else { break };
        if !fork_delay.is_zero() {
            thread::sleep(fork_delay);
        }
        let _ = stream.set_nodelay(true);
        let shared = shared.clone();
        let id = register(&shared, match stream.try_clone() {
            Ok(s) => s,
            Err(_) => continue,
        });
        let handle_conn = move || {
            let cmds = {
                let mut eng = shared.engine.lock().unwrap();
                let mut cmds = eng.on_conn_attempt(id, port, None);
                cmds.extend(eng.on_established(id));
                cmds
            };
            apply_cmds(&shared, cmds);
            pump(&shared, id, stream);
        };
        match &workers {
            Some(pool) => run_on_pool(pool.clone(), handle_conn),
            None => {
                thread::spawn(handle_conn);
            }
        }
    }
}

/// Runs a job on a pooled worker and returns the worker afterwards.
fn run_on_pool(pool: Arc<WorkerPool>, job: impl FnOnce() + Send + 'static) {
    let slot = Arc::new(Mutex::new(Some(pool.acquire())));
    let guard = slot.lock().unwrap();
    let slot2 = slot.clone();
    guard.as_ref().unwrap().execute(move || {
        job();
        if let Some(h) = slot2.lock().unwrap().take() {
            pool.release(h);
        }
    });
}

fn spawn_pump(shared: Arc<Shared>, id: ConnId, stream: TcpStream) {
    thread::spawn(move || pump(&shared, id, stream));
}

fn pump(shared: &Arc<Shared>, id: ConnId, mut stream: TcpStream) {
    let mut buf = vec![0u8; shared.forward_buffer];
    loop {
        match stream.read(&mut buf) {
            Ok(0) => {
                let cmds = shared.engine.lock().unwrap().on_eof(id);
                apply_cmds(shared, cmds);
                break;
            }
            Ok(n) => {
                let cmds = shared.engine.lock().unwrap().on_data(id, &buf[..n]);
                apply_cmds(shared, cmds);
            }
            Err(_) => {
                let cmds = shared.engine.lock().unwrap().on_reset(id);
                apply_cmds(shared, cmds);
                shared.streams.lock().unwrap().remove(&id);
                break;
            }
        }
    }
}

fn apply_cmds(shared: &Arc<Shared>, cmds: Vec<Cmd>) {
    for cmd in cmds {
        match cmd {
            Cmd::Send { conn, data } => {
                let stream = shared
                    .streams
                    .lock()
                    .unwrap()
                    .get(&conn)
                    .and_then(|s| s.try_clone().ok());
                if let Some(mut s) = stream {
                    if s.write_all(&data).is_err() {
                        let more = shared.engine.lock().unwrap().on_reset(conn);
                        apply_cmds(shared, more);
                    }
                }
            }
            Cmd::ShutdownWrite { conn } => {
                if let Some(s) = shared.streams.lock().unwrap().get(&conn) {
                    let _ = s.shutdown(Shutdown::Write);
                }
            }
            Cmd::Reset { conn } => {
                if let Some(s) = shared.streams.lock().unwrap().remove(&conn) {
                    // Linger 0 turns the close into an RST.
                    let _ = SockRef::from(&s).set_linger(Some(Duration::ZERO));
                    let _ = s.shutdown(Shutdown::Both);
                }
            }
            Cmd::Dial { token, dest, params, purpose, .. } => {
                let shared = shared.clone();
                thread::spawn(move || {
                    let result = TcpStream::connect_timeout(&dest, Duration::from_secs(10));
                    match result {
                        Ok(stream) => {
                            if apply_transport(
                                &stream,
                                params.nagle_enabled,
                                purpose == DialPurpose::Pool,
                            )
                            .is_err()
                            {
                                let cmds = shared
                                    .engine
                                    .lock()
                                    .unwrap()
                                    .on_dial_result(token, Err("setsockopt failed".into()));
                                apply_cmds(&shared, cmds);
                                return;
                            }
                            let clone = match stream.try_clone() {
                                Ok(c) => c,
                                Err(e) => {
                                    let cmds = shared
                                        .engine
                                        .lock()
                                        .unwrap()
                                        .on_dial_result(token, Err(e.to_string()));
                                    apply_cmds(&shared, cmds);
                                    return;
                                }
                            };
                            let id = register(&shared, clone);
                            let cmds =
                                shared.engine.lock().unwrap().on_dial_result(token, Ok(id));
                            apply_cmds(&shared, cmds);
                            pump(&shared, id, stream);
                        }
                        Err(e) => {
                            let cmds = shared
                                .engine
                                .lock()
                                .unwrap()
                                .on_dial_result(token, Err(e.to_string()));
                            apply_cmds(&shared, cmds);
                        }
                    }
                });
            }
        }
    }
}
