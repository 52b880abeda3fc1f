//! Socket mode: the same client and server state machines on wall time.
//!
//! Each side runs one network thread and one compute thread joined by a
//! single-slot handoff that keeps only the freshest item.

use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{score_records, ClientConfig, ClientState, EpisodeLog, FrameRecord, ModelSet, Scenario, ServerState};
use crate::channel::socket::{read_message, write_message};
use crate::channel::WireMessage;
use crate::error::{Error, Result};
use crate::models::LocalModel;
use crate::scene::{capture_ts_us, FrameSource};

/// Single-producer single-consumer slot holding only the freshest item.
#[derive(Debug)]
pub struct Freshest<T> {
    state: Mutex<(Option<T>, bool)>,
    ready: Condvar,
}

impl<T> Default for Freshest<T> {
    fn default() -> Self {
        Self {
            state: Mutex::new((None, false)),
            ready: Condvar::new(),
        }
    }
}

impl<T> Freshest<T> {
    /// Store `item` unless the held one is fresher by `newer`.
    pub fn offer(&self, item: T, newer: impl Fn(&T, &T) -> bool) {
        let mut s = self.state.lock().expect("slot poisoned");
        if s.0.as_ref().is_none_or(|held| newer(&item, held)) {
            s.0 = Some(item);
            self.ready.notify_one();
        }
    }

    pub fn take(&self) -> Option<T> {
        self.state.lock().expect("slot poisoned").0.take()
    }

    /// Wait up to `timeout` for an item; returns early when closed.
    pub fn wait_take(&self, timeout: Duration) -> Option<T> {
        let deadline = Instant::now() + timeout;
        let mut s = self.state.lock().expect("slot poisoned");
        loop {
            if let Some(item) = s.0.take() {
                return Some(item);
            }
            let now = Instant::now();
            if s.1 || now >= deadline {
                return None;
            }
            s = self.ready.wait_timeout(s, deadline - now).expect("slot poisoned").0;
        }
    }

    pub fn close(&self) {
        self.state.lock().expect("slot poisoned").1 = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().expect("slot poisoned").1
    }
}

fn net_err(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Network(format!("{what}: {e}"))
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub scenario: Scenario,
    pub compute_delay_ms: f64,
    pub fps: u32,
    /// Stop after this many client sessions.
    pub max_sessions: Option<usize>,
}

/// A running server; dropping it does not stop it, [`ServerHandle::kill`] does.
pub struct ServerHandle {
    pub port: u16,
    stop: Arc<AtomicBool>,
    active: Arc<Mutex<Option<TcpStream>>>,
    thread: Option<JoinHandle<Result<u64>>>,
}

impl ServerHandle {
    /// Abort immediately, resetting any live connection.
    pub fn kill(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(s) = self.active.lock().expect("poisoned").take() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    /// Wait for the server thread; returns the number of FEAT messages sent.
    pub fn join(mut self) -> Result<u64> {
        self.thread.take().expect("joined once").join().unwrap_or_else(|_| Err(Error::Network("server thread panicked".into())))
    }
}

pub fn bind(host: &str, port: u16) -> Result<TcpListener> {
    TcpListener::bind((host, port)).map_err(|e| net_err(&format!("cannot listen on {host}:{port}"), e))
}

/// Serve on an already bound listener from a background thread.
pub fn spawn_server(listener: TcpListener, models: &ModelSet, opts: ServeOptions) -> Result<ServerHandle> {
    let remote = models
        .server_remote(opts.scenario)?
        .ok_or_else(|| Error::Config("local scenario has no server".into()))?
        .clone();
    let port = listener.local_addr().map_err(|e| net_err("local addr", e))?.port();
    let stop = Arc::new(AtomicBool::new(false));
    let active = Arc::new(Mutex::new(None));
    let (stop2, active2) = (stop.clone(), active.clone());
    let thread = thread::spawn(move || {
        listener.set_nonblocking(true).map_err(|e| net_err("listener", e))?;
        let mut sent = 0;
        let mut sessions = 0;
        while !stop2.load(Ordering::SeqCst) && opts.max_sessions.is_none_or(|m| sessions < m) {
            match listener.accept() {
                Ok((stream, _)) => {
                    sessions += 1;
                    stream.set_nonblocking(false).map_err(|e| net_err("stream", e))?;
                    let _ = stream.set_nodelay(true);
                    *active2.lock().expect("poisoned") = stream.try_clone().ok();
                    let server = ServerState::new(remote.clone(), opts.scenario, opts.compute_delay_ms, opts.fps);
                    sent += serve_connection(stream, server, &stop2);
                    active2.lock().expect("poisoned").take();
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(net_err("accept", e)),
            }
        }
        Ok(sent)
    });
    Ok(ServerHandle {
        port,
        stop,
        active,
        thread: Some(thread),
    })
}

/// Run one session; returns FEAT messages sent.
fn serve_connection(stream: TcpStream, mut server: ServerState, stop: &AtomicBool) -> u64 {
    let Ok(read_half) = stream.try_clone() else {
        return 0;
    };
    let slot = Arc::new(Freshest::<WireMessage>::default());
    let reader_slot = slot.clone();
    let reader = thread::spawn(move || {
        let mut r = BufReader::new(read_half);
        while let Ok(Some(msg)) = read_message(&mut r) {
            reader_slot.offer(msg, |new, old| new.seq > old.seq);
        }
        reader_slot.close();
    });
    let mut w = BufWriter::new(stream);
    let mut sent = 0;
    while !stop.load(Ordering::SeqCst) {
        let Some(msg) = slot.wait_take(Duration::from_millis(50)) else {
            if slot.is_closed() {
                break;
            }
            continue;
        };
        let reply = match server.on_frame(&msg) {
            Ok(Some(r)) => r,
            Ok(None) => continue,
            Err(_) => {
                server.decode_failures += 1;
                continue;
            }
        };
        if server.compute_delay_ms > 0.0 {
            thread::sleep(Duration::from_secs_f64(server.compute_delay_ms / 1000.0));
        }
        if write_message(&mut w, &reply).is_err() {
            break;
        }
        sent += 1;
    }
    let _ = w.get_ref().shutdown(Shutdown::Both);
    let _ = reader.join();
    sent
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub scenario: Scenario,
    pub frames: usize,
    pub warmup_frames: usize,
    pub fuse_deadline_ms: f64,
    pub client: ClientConfig,
}

/// Result of a live client run.
#[derive(Debug, Clone)]
pub struct ClientRun {
    pub log: EpisodeLog,
    /// First frame captured after the connection was lost.
    pub disconnected_at: Option<u64>,
    pub connect_error: Option<String>,
}

/// Run the client against `addr`, pacing frames at the source frame rate.
/// Connection failures are not fatal: the client falls back to local
/// inference and still emits one record per frame.
pub fn run_client(
    addr: impl ToSocketAddrs,
    source: &dyn FrameSource,
    local: Option<&LocalModel>,
    opts: &ClientOptions,
) -> Result<ClientRun> {
    let mut client = ClientState::new(opts.scenario, &opts.client);
    let fps = source.fps();
    let slot = Arc::new(Freshest::<WireMessage>::default());
    let (mut writer, mut connect_error) = (None, None);
    let mut reader = None;
    if opts.scenario.uses_remote() {
        match TcpStream::connect(addr) {
            Ok(stream) => {
                let _ = stream.set_nodelay(true);
                let read_half = stream.try_clone().map_err(|e| net_err("socket", e))?;
                let reader_slot = slot.clone();
                reader = Some(thread::spawn(move || {
                    let mut r = BufReader::new(read_half);
                    while let Ok(Some(msg)) = read_message(&mut r) {
                        reader_slot.offer(msg, |new, old| new.capture_ts_us > old.capture_ts_us);
                    }
                    reader_slot.close();
                }));
                writer = Some(BufWriter::new(stream));
            }
            Err(e) => {
                connect_error = Some(e.to_string());
                slot.close();
            }
        }
    }
    let start = Instant::now();
    let now_us = || start.elapsed().as_micros() as u64;
    let mut records: Vec<FrameRecord> = Vec::with_capacity(opts.frames);
    let mut disconnected_at = None;
    let deadline = Duration::from_secs_f64(opts.fuse_deadline_ms.max(0.0) / 1000.0);
    for t in 0..opts.frames as u64 {
        let Some(frame) = source.frame(t) else {
            break;
        };
        let ts = capture_ts_us(t, fps);
        let now = now_us();
        if ts > now {
            thread::sleep(Duration::from_micros(ts - now));
        }
        if let Some(w) = writer.as_mut() {
            let msg = client.frame_message(&frame, ts)?;
            if write_message(w, &msg).is_err() {
                writer = None;
            }
        }
        if opts.scenario.uses_remote() && !slot.is_closed() {
            let until = Instant::now() + deadline;
            loop {
                let left = until.saturating_duration_since(Instant::now());
                let Some(msg) = slot.wait_take(left) else {
                    break;
                };
                client.on_feat(&msg, now_us());
                if client.latest.as_ref().is_some_and(|l| l.basis_index >= t) {
                    break;
                }
            }
        }
        if opts.scenario.uses_remote() && slot.is_closed() {
            if let Some(msg) = slot.take() {
                client.on_feat(&msg, now_us());
            }
            if disconnected_at.is_none() && connect_error.is_none() {
                disconnected_at = Some(t);
            }
            client.clear_remote();
            writer = None;
        }
        records.push(client.predict(local, &frame, now_us())?);
    }
    if let Some(w) = writer.take() {
        let _ = w.get_ref().shutdown(Shutdown::Both);
    }
    if let Some(r) = reader {
        let _ = r.join();
    }
    let warmup = opts.warmup_frames.min(records.len().saturating_sub(1));
    let (miou_running, miou) = score_records(&records, source.class_count() as usize, warmup, 0, |t| source.labels(t))?;
    Ok(ClientRun {
        log: EpisodeLog {
            scenario: opts.scenario,
            records,
            miou_running,
            miou,
        },
        disconnected_at,
        connect_error,
    })
}
