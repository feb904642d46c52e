//! TCP transport: one authenticated session per peer pair.
//!
//! Parties connect to every peer with a smaller id and accept connections
//! from every peer with a larger id, so mesh setup cannot wait in a cycle.
//! Records on the stream are `u32` big-endian length plus sealed bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{CryptoRng, RngCore};

use super::channel::{Identity, InitiatorHandshake, Opener, PeerDirectory, ResponderHandshake, Sealer};
use super::{AuditLog, MessageEnvelope, PartyId, Transport, TransportError, DEFAULT_MAX_FRAME};

#[derive(Clone, Debug)]
pub struct TcpConfig {
    pub me: PartyId,
    /// Listening address of every other party.
    pub peers: BTreeMap<PartyId, SocketAddr>,
    /// Bound on mesh setup, including retries while peers start.
    pub connect_timeout: Duration,
    pub max_frame: usize,
}

impl TcpConfig {
    pub fn new(me: PartyId, peers: BTreeMap<PartyId, SocketAddr>) -> Self {
        Self { me, peers, connect_timeout: Duration::from_secs(30), max_frame: DEFAULT_MAX_FRAME }
    }
}

struct Link {
    stream: TcpStream,
    sealer: Sealer,
}

pub struct TcpTransport {
    me: PartyId,
    links: BTreeMap<PartyId, Mutex<Link>>,
    inbox: Receiver<Result<MessageEnvelope, TransportError>>,
    readers: Vec<JoinHandle<()>>,
    audit: AuditLog,
    max_frame: usize,
}

fn write_record(stream: &mut TcpStream, record: &[u8]) -> Result<(), TransportError> {
    stream.write_all(&(record.len() as u32).to_be_bytes())?;
    stream.write_all(record)?;
    stream.flush()?;
    Ok(())
}

fn read_record(stream: &mut TcpStream, max: usize) -> Result<Vec<u8>, TransportError> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > max {
        return Err(TransportError::FrameTooLarge { size: len, max });
    }
    let mut buf = vec![0u8; len];
    stream.read_exact(&mut buf)?;
    Ok(buf)
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn connect_retry(addr: SocketAddr, deadline: Instant) -> Result<TcpStream, TransportError> {
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_millis(500)) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => return Err(e.into()),
            Err(_) => std::thread::sleep(Duration::from_millis(50)),
        }
    }
}

impl TcpTransport {
    /// Builds the full mesh. `listener` must already be bound to this party's
    /// advertised address.
    pub fn connect_mesh<R: RngCore + CryptoRng>(
        config: &TcpConfig,
        listener: TcpListener,
        identity: &Identity,
        directory: &PeerDirectory,
        rng: &mut R,
    ) -> Result<Self, TransportError> {
        let me = &config.me;
        let deadline = Instant::now() + config.connect_timeout;
        let record_max = config.max_frame + 64;
        let mut sessions: BTreeMap<PartyId, (TcpStream, Sealer, Opener)> = BTreeMap::new();

        for (peer, addr) in config.peers.iter().filter(|(p, _)| *p < me) {
            let mut stream = connect_retry(*addr, deadline)?;
            stream.set_read_timeout(Some(config.connect_timeout))?;
            stream.set_nodelay(true)?;
            let (init, m1) = InitiatorHandshake::start(me, rng);
            write_record(&mut stream, &m1)?;
            let m2 = read_record(&mut stream, record_max)?;
            let (session, m3) = init.finish(identity, &m2, directory, peer)?;
            write_record(&mut stream, &m3)?;
            let (_, sealer, opener) = session.split();
            sessions.insert(peer.clone(), (stream, sealer, opener));
        }

        let expected = config.peers.keys().filter(|p| *p > me).count();
        listener.set_nonblocking(true)?;
        let mut accepted = 0;
        while accepted < expected {
            let mut stream = match listener.accept() {
                Ok((s, _)) => s,
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Timeout);
                    }
                    std::thread::sleep(Duration::from_millis(20));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            stream.set_nonblocking(false)?;
            stream.set_read_timeout(Some(config.connect_timeout))?;
            stream.set_nodelay(true)?;
            let m1 = read_record(&mut stream, record_max)?;
            let (resp, m2) = ResponderHandshake::respond(identity, me, &m1, directory, rng)?;
            let peer = resp.peer().clone();
            if peer <= *me || !config.peers.contains_key(&peer) || sessions.contains_key(&peer) {
                return Err(TransportError::Authentication(format!("unexpected connection from {peer}")));
            }
            write_record(&mut stream, &m2)?;
            let m3 = read_record(&mut stream, record_max)?;
            let (_, sealer, opener) = resp.finish(&m3, directory)?.split();
            sessions.insert(peer, (stream, sealer, opener));
            accepted += 1;
        }

        let (tx, rx) = mpsc::channel();
        let mut links = BTreeMap::new();
        let mut readers = Vec::new();
        for (peer, (stream, sealer, opener)) in sessions {
            stream.set_read_timeout(None)?;
            let reader = stream.try_clone()?;
            let tx = tx.clone();
            let p = peer.clone();
            let max_frame = config.max_frame;
            readers.push(std::thread::spawn(move || read_loop(reader, opener, p, max_frame, tx)));
            links.insert(peer, Mutex::new(Link { stream, sealer }));
        }
        Ok(Self { me: me.clone(), links, inbox: rx, readers, audit: AuditLog::new(), max_frame: config.max_frame })
    }

    /// Everything sent or received so far, in local order.
    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }
}

fn read_loop(
    mut stream: TcpStream,
    mut opener: Opener,
    peer: PartyId,
    max_frame: usize,
    tx: Sender<Result<MessageEnvelope, TransportError>>,
) {
    loop {
        let item = read_record(&mut stream, max_frame + 64)
            .and_then(|rec| opener.open(&rec))
            .and_then(|frame| MessageEnvelope::decode(&frame, max_frame))
            .and_then(|env| {
                if env.sender() == &peer {
                    Ok(env)
                } else {
                    Err(TransportError::Authentication(format!("{peer} sent a message labelled from {}", env.sender())))
                }
            });
        let stop = item.is_err();
        let item = item.map_err(|e| match e {
            TransportError::Io(_) => TransportError::Closed(peer.clone()),
            other => other,
        });
        if tx.send(item).is_err() || stop {
            return;
        }
    }
}

impl Transport for TcpTransport {
    fn local_id(&self) -> &PartyId {
        &self.me
    }

    fn peers(&self) -> Vec<PartyId> {
        self.links.keys().cloned().collect()
    }

    fn send(&mut self, env: MessageEnvelope) -> Result<(), TransportError> {
        let link = self.links.get(env.recipient()).ok_or_else(|| TransportError::UnknownParty(env.recipient().clone()))?;
        let frame = env.encode(self.max_frame)?;
        let mut link = link.lock().unwrap_or_else(|e| e.into_inner());
        let record = link.sealer.seal(&frame);
        write_record(&mut link.stream, &record)?;
        drop(link);
        self.audit.append(now_ms(), &env);
        Ok(())
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<MessageEnvelope, TransportError> {
        let item = match timeout {
            Some(t) => self.inbox.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::Timeout,
                RecvTimeoutError::Disconnected => TransportError::Closed(self.me.clone()),
            })?,
            None => self.inbox.recv().map_err(|_| TransportError::Closed(self.me.clone()))?,
        };
        let env = item?;
        self.audit.append(now_ms(), &env);
        Ok(env)
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for link in self.links.values() {
            let link = link.lock().unwrap_or_else(|e| e.into_inner());
            let _ = link.stream.shutdown(Shutdown::Both);
        }
        for h in self.readers.drain(..) {
            let _ = h.join();
        }
    }
}
