//! TCP full-mesh transport.
//!
//! Worker `i` accepts connections from every `j < i` and dials every `j > i`.
//! After the handshake each connection gets a reader thread feeding the
//! worker's mailbox and a writer thread draining an unbounded send queue, so
//! sends never wait for the matching receive.
//!
//! Wire frame: `[tag u32 LE][src u32 LE][len u64 LE][payload]`.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::hostfile::PeerAddr;
use super::mailbox::Mailbox;
use crate::error::{Error, Result};

pub const HANDSHAKE_MAGIC: &[u8; 4] = b"TMTC";
pub const PROTOCOL_VERSION: u32 = 1;

const VERDICT_OK: u8 = 0;
const VERDICT_RANK_COLLISION: u8 = 1;
const VERDICT_VERSION: u8 = 2;
const VERDICT_BAD_RANK: u8 = 3;

pub(crate) struct TcpLinks {
    writers: Vec<Option<mpsc::Sender<Vec<u8>>>>,
    writer_threads: Vec<JoinHandle<()>>,
}

impl TcpLinks {
    pub(crate) fn send_frame(&self, dst: usize, frame: Vec<u8>) -> Result<()> {
        match self.writers.get(dst).and_then(Option::as_ref) {
            Some(tx) => tx.send(frame).map_err(|_| Error::PeerClosed(dst)),
            None => Err(Error::PeerClosed(dst)),
        }
    }

    /// Flushes all queued frames and half-closes every connection.
    pub(crate) fn shutdown(&mut self) {
        self.writers.clear();
        for h in self.writer_threads.drain(..) {
            let _ = h.join();
        }
    }
}

pub(crate) fn encode_frame(tag: u32, src: usize, payload: &[u8]) -> Vec<u8> {
    let mut f = Vec::with_capacity(16 + payload.len());
    f.extend_from_slice(&tag.to_le_bytes());
    f.extend_from_slice(&(src as u32).to_le_bytes());
    f.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    f.extend_from_slice(payload);
    f
}

fn read_frame(r: &mut impl Read) -> io::Result<Option<(u32, u32, Vec<u8>)>> {
    let mut head = [0u8; 16];
    match r.read_exact(&mut head) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let tag = u32::from_le_bytes(head[0..4].try_into().unwrap());
    let src = u32::from_le_bytes(head[4..8].try_into().unwrap());
    let len = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some((tag, src, payload)))
}

fn handshake_bytes(rank: usize) -> [u8; 12] {
    let mut h = [0u8; 12];
    h[0..4].copy_from_slice(HANDSHAKE_MAGIC);
    h[4..8].copy_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    h[8..12].copy_from_slice(&(rank as u32).to_le_bytes());
    h
}

/// Reads the peer's handshake, returning `(version, rank)`.
fn read_handshake(s: &mut TcpStream) -> Result<(u32, usize)> {
    let mut h = [0u8; 12];
    s.read_exact(&mut h).map_err(|e| Error::ProtocolFault(format!("handshake read: {e}")))?;
    if &h[0..4] != HANDSHAKE_MAGIC {
        return Err(Error::ProtocolFault("bad handshake magic".into()));
    }
    let version = u32::from_le_bytes(h[4..8].try_into().unwrap());
    let rank = u32::from_le_bytes(h[8..12].try_into().unwrap()) as usize;
    Ok((version, rank))
}

fn remaining(deadline: Instant) -> Option<Duration> {
    deadline.checked_duration_since(Instant::now()).filter(|d| !d.is_zero())
}

fn dial(me: usize, peer: &PeerAddr, deadline: Instant) -> Result<TcpStream> {
    let addr = peer.socket_addr();
    let mut stream = loop {
        let attempt = addr
            .to_socket_addrs()
            .map_err(|e| Error::InvalidSpec(format!("resolve {addr}: {e}")))?
            .find_map(|a| {
                let wait = remaining(deadline)?.min(Duration::from_secs(1));
                TcpStream::connect_timeout(&a, wait).ok()
            });
        if let Some(s) = attempt {
            break s;
        }
        if remaining(deadline).is_none() {
            return Err(Error::RendezvousTimeout(format!(
                "rank {me} could not reach rank {} at {addr}",
                peer.rank
            )));
        }
        thread::sleep(Duration::from_millis(20));
    };
    stream.set_read_timeout(remaining(deadline).or(Some(Duration::from_millis(1))))?;
    stream.write_all(&handshake_bytes(me))?;
    let (version, their_rank) = read_handshake(&mut stream)?;
    let mut verdict = [0u8; 1];
    stream
        .read_exact(&mut verdict)
        .map_err(|e| Error::ProtocolFault(format!("handshake verdict: {e}")))?;
    match verdict[0] {
        VERDICT_OK => {}
        VERDICT_RANK_COLLISION => {
            return Err(Error::RankCollision(format!("rank {me} already connected at rank {}", peer.rank)))
        }
        VERDICT_VERSION => return Err(Error::VersionMismatch { local: PROTOCOL_VERSION, remote: version }),
        _ => return Err(Error::ProtocolFault(format!("rank {} rejected rank {me}", peer.rank))),
    }
    if version != PROTOCOL_VERSION {
        return Err(Error::VersionMismatch { local: PROTOCOL_VERSION, remote: version });
    }
    if their_rank != peer.rank {
        return Err(Error::RankCollision(format!(
            "expected rank {} at {addr}, found rank {their_rank}",
            peer.rank
        )));
    }
    stream.set_read_timeout(None)?;
    Ok(stream)
}

fn accept_lower(
    me: usize,
    listener: TcpListener,
    deadline: Instant,
) -> Result<Vec<(usize, TcpStream)>> {
    listener.set_nonblocking(true)?;
    let mut accepted: Vec<(usize, TcpStream)> = Vec::with_capacity(me);
    while accepted.len() < me {
        let mut stream = match listener.accept() {
            Ok((s, _)) => s,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if remaining(deadline).is_none() {
                    let missing: Vec<usize> =
                        (0..me).filter(|r| !accepted.iter().any(|(a, _)| a == r)).collect();
                    return Err(Error::RendezvousTimeout(format!(
                        "rank {me} still waiting for ranks {missing:?}"
                    )));
                }
                thread::sleep(Duration::from_millis(5));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        stream.set_nonblocking(false)?;
        stream.set_read_timeout(remaining(deadline).or(Some(Duration::from_millis(1))))?;
        let (version, their_rank) = read_handshake(&mut stream)?;
        stream.write_all(&handshake_bytes(me))?;
        let verdict = if version != PROTOCOL_VERSION {
            VERDICT_VERSION
        } else if their_rank >= me {
            VERDICT_BAD_RANK
        } else if accepted.iter().any(|(r, _)| *r == their_rank) {
            VERDICT_RANK_COLLISION
        } else {
            VERDICT_OK
        };
        stream.write_all(&[verdict])?;
        match verdict {
            VERDICT_OK => {
                stream.set_read_timeout(None)?;
                accepted.push((their_rank, stream));
            }
            VERDICT_VERSION => {
                return Err(Error::VersionMismatch { local: PROTOCOL_VERSION, remote: version })
            }
            VERDICT_RANK_COLLISION => {
                return Err(Error::RankCollision(format!(
                    "two peers claimed rank {their_rank} at rank {me}"
                )))
            }
            _ => {
                return Err(Error::ProtocolFault(format!(
                    "rank {their_rank} dialed rank {me}; only lower ranks may dial"
                )))
            }
        }
    }
    Ok(accepted)
}

/// Establishes the full mesh and starts the per-connection I/O threads.
pub(crate) fn connect_mesh(
    rank: usize,
    peers: &[PeerAddr],
    mailbox: &Arc<Mailbox>,
    rendezvous_timeout: Duration,
) -> Result<TcpLinks> {
    let world = peers.len();
    let deadline = Instant::now() + rendezvous_timeout;
    let me = &peers[rank];
    let listener = TcpListener::bind(me.socket_addr())
        .map_err(|e| Error::InvalidSpec(format!("rank {rank} cannot bind {}: {e}", me.socket_addr())))?;

    let acceptor = thread::spawn(move || accept_lower(rank, listener, deadline));
    let mut streams: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();
    let mut dial_err = None;
    for peer in &peers[rank + 1..] {
        match dial(rank, peer, deadline) {
            Ok(s) => streams[peer.rank] = Some(s),
            Err(e) => {
                dial_err = Some(e);
                break;
            }
        }
    }
    let accepted = acceptor.join().map_err(|_| Error::ProtocolFault("acceptor panicked".into()))?;
    if let Some(e) = dial_err {
        return Err(e);
    }
    for (r, s) in accepted? {
        streams[r] = Some(s);
    }

    let mut writers: Vec<Option<mpsc::Sender<Vec<u8>>>> = (0..world).map(|_| None).collect();
    let mut writer_threads = Vec::new();
    for (peer, stream) in streams.into_iter().enumerate() {
        let Some(stream) = stream else { continue };
        stream.set_nodelay(true)?;
        let read_half = stream.try_clone()?;
        let mb = Arc::clone(mailbox);
        thread::Builder::new()
            .name(format!("tcp-read-{rank}<-{peer}"))
            .spawn(move || reader_loop(peer, read_half, &mb))?;

        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        writers[peer] = Some(tx);
        let h = thread::Builder::new()
            .name(format!("tcp-write-{rank}->{peer}"))
            .spawn(move || writer_loop(stream, rx))?;
        writer_threads.push(h);
    }
    Ok(TcpLinks { writers, writer_threads })
}

fn reader_loop(peer: usize, stream: TcpStream, mailbox: &Mailbox) {
    let mut r = BufReader::with_capacity(1 << 16, stream);
    while let Ok(Some((tag, src, payload))) = read_frame(&mut r) {
        // a peer may only speak for itself
        if src as usize != peer {
            break;
        }
        mailbox.deliver(peer, tag, payload);
    }
    mailbox.close(peer);
}

fn writer_loop(stream: TcpStream, rx: mpsc::Receiver<Vec<u8>>) {
    let mut w = BufWriter::with_capacity(1 << 16, &stream);
    'outer: while let Ok(frame) = rx.recv() {
        if w.write_all(&frame).is_err() {
            return;
        }
        // drain whatever is queued, then flush
        loop {
            match rx.try_recv() {
                Ok(f) => {
                    if w.write_all(&f).is_err() {
                        return;
                    }
                }
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => break 'outer,
            }
        }
        if w.flush().is_err() {
            return;
        }
    }
    let _ = w.flush();
    drop(w);
    let _ = stream.shutdown(Shutdown::Write);
}
