//! Real-socket hosting for live mode: a blocking TCP server around
//! [`BrokerState`] and a stream wrapper around [`Session`].
//!
//! MQTT packets are self-delimiting, so reads accumulate into a buffer and
//! the decoder's `Truncated` result simply means "read more". One thread per
//! connection feeds a shared broker state; a ticker thread drives keep-alive
//! and retransmission.

use super::broker::{broker_step, BrokerAction, BrokerEvent, BrokerState, ConnId};
use super::client::{client_step, ClientAction, ClientEvent, Session};
use super::packet::{decode_packet, encode_packet, DecodeError, MqttPacket};
use crate::Millis;
use std::collections::HashMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

/// UTC wall clock in milliseconds, the live-mode time base.
pub fn wall_clock_ms() -> Millis {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .expect("system clock before the epoch")
        .as_millis() as Millis
}

struct Shared {
    broker: BrokerState,
    writers: HashMap<ConnId, TcpStream>,
}

impl Shared {
    fn perform(&mut self, actions: Vec<BrokerAction>) {
        for action in actions {
            match action {
                BrokerAction::Send { conn, packet } => {
                    if let Some(stream) = self.writers.get_mut(&conn) {
                        let bytes = encode_packet(&packet).expect("broker emits valid packets");
                        if stream.write_all(&bytes).is_err() {
                            let _ = stream.shutdown(std::net::Shutdown::Both);
                        }
                    }
                }
                BrokerAction::Close { conn } => {
                    if let Some(stream) = self.writers.remove(&conn) {
                        let _ = stream.shutdown(std::net::Shutdown::Both);
                    }
                }
            }
        }
    }
}

/// Serves the broker on `listener` until `shutdown` flips. Returns the number
/// of connections accepted over its lifetime.
pub fn serve_broker(listener: TcpListener, shutdown: Arc<AtomicBool>) -> std::io::Result<u64> {
    listener.set_nonblocking(true)?;
    let shared = Arc::new(Mutex::new(Shared { broker: BrokerState::new(), writers: HashMap::new() }));
    let mut accepted = 0u64;
    let mut workers = Vec::new();

    // Keep-alive expiry and qos-1 retransmission need a clock even when no
    // packets arrive.
    let ticker_shared = Arc::clone(&shared);
    let ticker_shutdown = Arc::clone(&shutdown);
    let ticker = std::thread::spawn(move || {
        while !ticker_shutdown.load(Ordering::Relaxed) {
            std::thread::sleep(Duration::from_millis(1_000));
            let mut guard = ticker_shared.lock().unwrap();
            let actions = broker_step(&mut guard.broker, wall_clock_ms(), BrokerEvent::Tick);
            guard.perform(actions);
        }
    });

    while !shutdown.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                accepted += 1;
                let conn: ConnId = format!("tcp-{accepted}-{peer}");
                let conn_shared = Arc::clone(&shared);
                let conn_shutdown = Arc::clone(&shutdown);
                stream.set_read_timeout(Some(Duration::from_millis(200)))?;
                {
                    let mut guard = conn_shared.lock().unwrap();
                    guard.writers.insert(conn.clone(), stream.try_clone()?);
                    let actions = broker_step(
                        &mut guard.broker,
                        wall_clock_ms(),
                        BrokerEvent::Connected { conn: conn.clone() },
                    );
                    guard.perform(actions);
                }
                workers.push(std::thread::spawn(move || {
                    connection_loop(stream, conn, conn_shared, conn_shutdown);
                }));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(50));
            }
            Err(e) => return Err(e),
        }
    }
    drop(listener);
    for worker in workers {
        let _ = worker.join();
    }
    let _ = ticker.join();
    Ok(accepted)
}

fn connection_loop(mut stream: TcpStream, conn: ConnId, shared: Arc<Mutex<Shared>>, shutdown: Arc<AtomicBool>) {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    'outer: loop {
        if shutdown.load(Ordering::Relaxed) {
            break;
        }
        match stream.read(&mut chunk) {
            Ok(0) => break, // peer closed
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
            Err(_) => break,
        }
        loop {
            match decode_packet(&buf) {
                Ok((packet, consumed)) => {
                    buf.drain(..consumed);
                    let mut guard = shared.lock().unwrap();
                    let actions = broker_step(
                        &mut guard.broker,
                        wall_clock_ms(),
                        BrokerEvent::PacketIn { conn: conn.clone(), packet },
                    );
                    let closing = actions
                        .iter()
                        .any(|a| matches!(a, BrokerAction::Close { conn: c } if *c == conn));
                    guard.perform(actions);
                    if closing {
                        break 'outer;
                    }
                }
                Err(DecodeError::Truncated) => break,
                Err(DecodeError::Malformed(_)) => break 'outer,
            }
        }
    }
    let mut guard = shared.lock().unwrap();
    let actions = broker_step(&mut guard.broker, wall_clock_ms(), BrokerEvent::ConnectionClosed { conn: conn.clone() });
    guard.perform(actions);
    guard.writers.remove(&conn);
    let _ = stream.shutdown(std::net::Shutdown::Both);
}

/// A client session over a real TCP stream.
pub struct LiveClient {
    stream: TcpStream,
    rx: Vec<u8>,
    pub session: Session,
}

#[derive(Debug, thiserror::Error)]
pub enum LiveError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("peer sent a malformed packet: {0}")]
    Malformed(&'static str),
    #[error("connection closed by peer")]
    Closed,
}

impl LiveClient {
    /// Dials the broker and sends CONNECT.
    pub fn connect(addr: &str, session: Session) -> Result<LiveClient, LiveError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(Duration::from_millis(100)))?;
        stream.set_nodelay(true)?;
        let mut client = LiveClient { stream, rx: Vec::new(), session };
        let actions = client_step(&mut client.session, wall_clock_ms(), ClientEvent::Start);
        client.dispatch(actions)
    }

    fn dispatch(mut self, actions: Vec<ClientAction>) -> Result<LiveClient, LiveError> {
        let mut sink = Vec::new();
        self.perform(actions, &mut sink)?;
        Ok(self)
    }

    /// Writes `Send` actions to the socket, collects the rest for the caller.
    fn perform(&mut self, actions: Vec<ClientAction>, out: &mut Vec<ClientAction>) -> Result<(), LiveError> {
        for action in actions {
            match action {
                ClientAction::Send(packet) => {
                    let bytes = encode_packet(&packet).expect("session emits valid packets");
                    self.stream.write_all(&bytes)?;
                }
                other => out.push(other),
            }
        }
        Ok(())
    }

    pub fn request(&mut self, event: ClientEvent) -> Result<Vec<ClientAction>, LiveError> {
        let actions = client_step(&mut self.session, wall_clock_ms(), event);
        let mut out = Vec::new();
        self.perform(actions, &mut out)?;
        Ok(out)
    }

    /// Reads whatever is available, feeds decoded packets and a tick through
    /// the session, and returns the application-facing actions.
    pub fn pump(&mut self) -> Result<Vec<ClientAction>, LiveError> {
        let mut chunk = [0u8; 4096];
        match self.stream.read(&mut chunk) {
            Ok(0) => return Err(LiveError::Closed),
            Ok(n) => self.rx.extend_from_slice(&chunk[..n]),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => return Err(e.into()),
        }
        let mut out = Vec::new();
        loop {
            match decode_packet(&self.rx) {
                Ok((packet, consumed)) => {
                    self.rx.drain(..consumed);
                    let actions =
                        client_step(&mut self.session, wall_clock_ms(), ClientEvent::PacketIn(packet));
                    self.perform(actions, &mut out)?;
                }
                Err(DecodeError::Truncated) => break,
                Err(DecodeError::Malformed(what)) => return Err(LiveError::Malformed(what)),
            }
        }
        let actions = client_step(&mut self.session, wall_clock_ms(), ClientEvent::Tick);
        self.perform(actions, &mut out)?;
        Ok(out)
    }

    /// Pumps until `predicate` yields something or the deadline passes.
    pub fn pump_until<T>(
        &mut self,
        timeout: Duration,
        mut predicate: impl FnMut(&ClientAction) -> Option<T>,
    ) -> Result<Option<T>, LiveError> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            for action in self.pump()? {
                if let Some(hit) = predicate(&action) {
                    return Ok(Some(hit));
                }
            }
            if std::time::Instant::now() >= deadline {
                return Ok(None);
            }
        }
    }

    pub fn send_disconnect(&mut self) -> Result<(), LiveError> {
        let bytes = encode_packet(&MqttPacket::Disconnect).expect("static packet");
        self.stream.write_all(&bytes)?;
        Ok(())
    }
}
