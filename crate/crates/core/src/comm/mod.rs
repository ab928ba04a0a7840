//! Loosely synchronous communicator.
//!
//! Each of the `p` symmetric workers owns one [`Communicator`]. Point-to-point
//! sends are buffered and never wait for the receiver. Collectives are built
//! as gather-to-rank-0 plus broadcast, so every result (including Float64
//! reductions) is computed in a fixed rank order and is bitwise identical on
//! all ranks and across transports. There is no coordinator process.
//!
//! Tags below [`COLLECTIVE_TAG_BASE`] belong to user point-to-point traffic;
//! each collective call takes fresh tags from an epoch counter above it.

mod hostfile;
mod mailbox;
mod tcp;

use std::cell::{Cell, RefCell};
use std::sync::{Arc, Mutex};
use std::time::Duration;

pub use hostfile::{format_hostfile, parse_hostfile, read_hostfile, PeerAddr};
pub use tcp::{HANDSHAKE_MAGIC, PROTOCOL_VERSION};

use crate::columnar::{concat, deserialize_table, schema_digest, serialize_table, Table};
use crate::error::{Error, Result};
use mailbox::Mailbox;
use tcp::TcpLinks;

/// First tag reserved for collectives.
pub const COLLECTIVE_TAG_BASE: u32 = 1 << 16;

pub const DEFAULT_RENDEZVOUS_TIMEOUT: Duration = Duration::from_secs(30);

/// Shared registry through which in-process workers find each other.
#[derive(Debug, Clone)]
pub struct InProcessHub {
    mailboxes: Arc<Vec<Arc<Mailbox>>>,
    claimed: Arc<Mutex<Vec<bool>>>,
}

impl InProcessHub {
    pub fn new(world_size: usize) -> Self {
        InProcessHub {
            mailboxes: Arc::new((0..world_size).map(|_| Arc::new(Mailbox::new(world_size))).collect()),
            claimed: Arc::new(Mutex::new(vec![false; world_size])),
        }
    }

    pub fn world_size(&self) -> usize {
        self.mailboxes.len()
    }
}

#[derive(Debug, Clone)]
pub enum TransportSpec {
    InProcess(InProcessHub),
    Tcp { peers: Vec<PeerAddr>, rendezvous_timeout: Duration },
}

#[derive(Debug, Clone)]
pub struct WorkerSpec {
    pub rank: usize,
    pub world_size: usize,
    pub transport: TransportSpec,
    /// Bound on matched receives; `None` waits forever.
    pub recv_timeout: Option<Duration>,
}

impl WorkerSpec {
    pub fn in_process(hub: &InProcessHub, rank: usize) -> Self {
        WorkerSpec {
            rank,
            world_size: hub.world_size(),
            transport: TransportSpec::InProcess(hub.clone()),
            recv_timeout: None,
        }
    }

    pub fn tcp(rank: usize, peers: Vec<PeerAddr>) -> Self {
        WorkerSpec {
            rank,
            world_size: peers.len(),
            transport: TransportSpec::Tcp { peers, rendezvous_timeout: DEFAULT_RENDEZVOUS_TIMEOUT },
            recv_timeout: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Min,
    Max,
}

impl ReduceOp {
    fn code(self) -> u8 {
        match self {
            ReduceOp::Sum => 0,
            ReduceOp::Min => 1,
            ReduceOp::Max => 2,
        }
    }
}

/// Element types accepted by [`Communicator::allreduce`].
pub trait ReduceElem: Copy + Send + 'static {
    const CODE: u8;
    const WIDTH: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
    /// `None` signals overflow.
    fn combine(self, other: Self, op: ReduceOp) -> Option<Self>;
}

impl ReduceElem for i64 {
    const CODE: u8 = 1;
    const WIDTH: usize = 8;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        i64::from_le_bytes(bytes.try_into().unwrap())
    }
    fn combine(self, other: Self, op: ReduceOp) -> Option<Self> {
        match op {
            ReduceOp::Sum => self.checked_add(other),
            ReduceOp::Min => Some(self.min(other)),
            ReduceOp::Max => Some(self.max(other)),
        }
    }
}

macro_rules! float_reduce_elem {
    ($t:ty, $bits:ty, $code:expr) => {
        impl ReduceElem for $t {
            const CODE: u8 = $code;
            const WIDTH: usize = std::mem::size_of::<$t>();
            fn put(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_bits().to_le_bytes());
            }
            fn get(bytes: &[u8]) -> Self {
                <$t>::from_bits(<$bits>::from_le_bytes(bytes.try_into().unwrap()))
            }
            fn combine(self, other: Self, op: ReduceOp) -> Option<Self> {
                Some(match op {
                    ReduceOp::Sum => self + other,
                    ReduceOp::Min if other.total_cmp(&self).is_lt() => other,
                    ReduceOp::Max if other.total_cmp(&self).is_gt() => other,
                    ReduceOp::Min | ReduceOp::Max => self,
                })
            }
        }
    };
}

float_reduce_elem!(f64, u64, 2);
float_reduce_elem!(f32, u32, 3);

enum Links {
    InProcess(Arc<Vec<Arc<Mailbox>>>),
    Tcp(TcpLinks),
}

/// One worker's endpoint. Confined to one control thread for collectives.
pub struct Communicator {
    rank: usize,
    world_size: usize,
    mailbox: Arc<Mailbox>,
    links: Links,
    recv_timeout: Option<Duration>,
    epoch: Cell<u32>,
    trace: RefCell<Option<Vec<&'static str>>>,
    depth: Cell<usize>,
}

impl std::fmt::Debug for Communicator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.links {
            Links::InProcess(_) => "in-process",
            Links::Tcp(_) => "tcp",
        };
        f.debug_struct("Communicator")
            .field("rank", &self.rank)
            .field("world_size", &self.world_size)
            .field("transport", &kind)
            .finish()
    }
}

/// Creates a ready communicator. For tcp this performs the full-mesh
/// rendezvous and handshake.
pub fn init(spec: &WorkerSpec) -> Result<Communicator> {
    if spec.world_size == 0 || spec.rank >= spec.world_size {
        return Err(Error::InvalidSpec(format!(
            "rank {} not in world of size {}",
            spec.rank, spec.world_size
        )));
    }
    match &spec.transport {
        TransportSpec::InProcess(hub) => {
            if hub.world_size() != spec.world_size {
                return Err(Error::InvalidSpec("hub size differs from world size".into()));
            }
            {
                let mut claimed = hub.claimed.lock().unwrap();
                if claimed[spec.rank] {
                    return Err(Error::RankCollision(format!("rank {} already claimed", spec.rank)));
                }
                claimed[spec.rank] = true;
            }
            Ok(Communicator::new(
                spec.rank,
                spec.world_size,
                Arc::clone(&hub.mailboxes[spec.rank]),
                Links::InProcess(Arc::clone(&hub.mailboxes)),
                spec.recv_timeout,
            ))
        }
        TransportSpec::Tcp { peers, rendezvous_timeout } => {
            if peers.len() != spec.world_size {
                return Err(Error::InvalidSpec(format!(
                    "{} peers for world size {}",
                    peers.len(),
                    spec.world_size
                )));
            }
            for (i, p) in peers.iter().enumerate() {
                if p.rank != i {
                    return Err(Error::InvalidSpec(format!("peer list not dense at rank {i}")));
                }
            }
            let mailbox = Arc::new(Mailbox::new(spec.world_size));
            let links = if spec.world_size == 1 {
                Links::InProcess(Arc::new(vec![Arc::clone(&mailbox)]))
            } else {
                Links::Tcp(tcp::connect_mesh(spec.rank, peers, &mailbox, *rendezvous_timeout)?)
            };
            Ok(Communicator::new(spec.rank, spec.world_size, mailbox, links, spec.recv_timeout))
        }
    }
}

/// Encodes a list of byte strings as `[count u32][len u64, bytes]*`.
fn pack(parts: &[Vec<u8>]) -> Vec<u8> {
    let total: usize = parts.iter().map(|p| p.len() + 8).sum();
    let mut out = Vec::with_capacity(total + 4);
    out.extend_from_slice(&(parts.len() as u32).to_le_bytes());
    for p in parts {
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(p);
    }
    out
}

fn unpack(bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
    let short = || Error::Decode("truncated packed list".into());
    let count = u32::from_le_bytes(bytes.get(0..4).ok_or_else(short)?.try_into().unwrap()) as usize;
    let mut pos = 4;
    let mut parts = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u64::from_le_bytes(bytes.get(pos..pos + 8).ok_or_else(short)?.try_into().unwrap())
            as usize;
        pos += 8;
        parts.push(bytes.get(pos..pos + len).ok_or_else(short)?.to_vec());
        pos += len;
    }
    Ok(parts)
}

const STATUS_OK: u8 = 0;
const STATUS_LENGTH: u8 = 1;
const STATUS_OVERFLOW: u8 = 2;
const STATUS_BAD_ARGS: u8 = 3;

impl Communicator {
    fn new(
        rank: usize,
        world_size: usize,
        mailbox: Arc<Mailbox>,
        links: Links,
        recv_timeout: Option<Duration>,
    ) -> Self {
        Communicator {
            rank,
            world_size,
            mailbox,
            links,
            recv_timeout,
            epoch: Cell::new(0),
            trace: RefCell::new(None),
            depth: Cell::new(0),
        }
    }

    /// `n` in-process endpoints sharing one hub, indexed by rank.
    pub fn local_world(n: usize) -> Vec<Communicator> {
        let hub = InProcessHub::new(n);
        (0..n).map(|r| init(&WorkerSpec::in_process(&hub, r)).expect("fresh hub")).collect()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn is_tcp(&self) -> bool {
        matches!(self.links, Links::Tcp(_))
    }

    pub fn set_recv_timeout(&mut self, timeout: Option<Duration>) {
        self.recv_timeout = timeout;
    }

    /// Starts recording the names of top-level communication calls.
    pub fn enable_trace(&self) {
        *self.trace.borrow_mut() = Some(Vec::new());
    }

    /// Returns and clears the recorded call names.
    pub fn take_trace(&self) -> Vec<&'static str> {
        self.trace.borrow_mut().as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn traced<R>(&self, name: &'static str, f: impl FnOnce() -> R) -> R {
        if self.depth.get() == 0 {
            if let Some(t) = self.trace.borrow_mut().as_mut() {
                t.push(name);
            }
        }
        self.depth.set(self.depth.get() + 1);
        let r = f();
        self.depth.set(self.depth.get() - 1);
        r
    }

    fn next_tag(&self) -> u32 {
        let e = self.epoch.get();
        self.epoch.set(e.wrapping_add(1) % (u32::MAX - COLLECTIVE_TAG_BASE));
        COLLECTIVE_TAG_BASE + e
    }

    fn check_rank(&self, r: usize) -> Result<()> {
        if r >= self.world_size {
            return Err(Error::InvalidSpec(format!("rank {r} outside world of size {}", self.world_size)));
        }
        Ok(())
    }

    fn raw_send(&self, dst: usize, tag: u32, payload: &[u8]) -> Result<()> {
        self.check_rank(dst)?;
        if dst == self.rank {
            self.mailbox.deliver(self.rank, tag, payload.to_vec());
            return Ok(());
        }
        match &self.links {
            Links::InProcess(boxes) => {
                boxes[dst].deliver(self.rank, tag, payload.to_vec());
                Ok(())
            }
            Links::Tcp(links) => links.send_frame(dst, tcp::encode_frame(tag, self.rank, payload)),
        }
    }

    fn raw_recv(&self, src: usize, tag: u32) -> Result<Vec<u8>> {
        self.check_rank(src)?;
        self.mailbox.recv(src, tag, self.recv_timeout)
    }

    /// Buffered send: returns once the transport has accepted the payload.
    pub fn send(&self, dst: usize, tag: u32, payload: &[u8]) -> Result<()> {
        if tag >= COLLECTIVE_TAG_BASE {
            return Err(Error::InvalidSpec(format!("user tag {tag} must be below {COLLECTIVE_TAG_BASE}")));
        }
        self.traced("send", || self.raw_send(dst, tag, payload))
    }

    /// Blocks until the next message from `src` with `tag` arrives.
    pub fn recv(&self, src: usize, tag: u32) -> Result<Vec<u8>> {
        if tag >= COLLECTIVE_TAG_BASE {
            return Err(Error::InvalidSpec(format!("user tag {tag} must be below {COLLECTIVE_TAG_BASE}")));
        }
        self.traced("recv", || self.raw_recv(src, tag))
    }

    pub fn barrier(&self) -> Result<()> {
        self.traced("barrier", || {
            self.gather_impl(0, &[])?;
            self.broadcast_impl(0, &[])?;
            Ok(())
        })
    }

    fn broadcast_impl(&self, root: usize, payload: &[u8]) -> Result<Vec<u8>> {
        self.check_rank(root)?;
        let tag = self.next_tag();
        if self.rank == root {
            for dst in (0..self.world_size).filter(|&d| d != root) {
                self.raw_send(dst, tag, payload)?;
            }
            Ok(payload.to_vec())
        } else {
            self.raw_recv(root, tag)
        }
    }

    fn gather_impl(&self, root: usize, payload: &[u8]) -> Result<Option<Vec<Vec<u8>>>> {
        self.check_rank(root)?;
        let tag = self.next_tag();
        if self.rank == root {
            let mut out = Vec::with_capacity(self.world_size);
            for src in 0..self.world_size {
                if src == root {
                    out.push(payload.to_vec());
                } else {
                    out.push(self.raw_recv(src, tag)?);
                }
            }
            Ok(Some(out))
        } else {
            self.raw_send(root, tag, payload)?;
            Ok(None)
        }
    }

    fn allgather_impl(&self, payload: &[u8]) -> Result<Vec<Vec<u8>>> {
        let gathered = self.gather_impl(0, payload)?;
        let packed = gathered.map(|parts| pack(&parts)).unwrap_or_default();
        unpack(&self.broadcast_impl(0, &packed)?)
    }

    /// Every rank receives a copy of `root`'s payload; other ranks' payloads
    /// are ignored.
    pub fn broadcast_bytes(&self, root: usize, payload: &[u8]) -> Result<Vec<u8>> {
        self.traced("broadcast", || self.broadcast_impl(root, payload))
    }

    /// At `root`: every rank's payload in rank order. Elsewhere: `None`.
    pub fn gather_bytes(&self, root: usize, payload: &[u8]) -> Result<Option<Vec<Vec<u8>>>> {
        self.traced("gather", || self.gather_impl(root, payload))
    }

    /// Every rank's payload in rank order, at every rank. Implemented as a
    /// gather to rank 0 followed by a broadcast of the packed list.
    pub fn allgather_bytes(&self, payload: &[u8]) -> Result<Vec<Vec<u8>>> {
        self.traced("allgather", || self.allgather_impl(payload))
    }

    /// Element-wise reduction across ranks, folded in rank order 0..p at rank 0
    /// and broadcast, so the result is bitwise identical everywhere.
    pub fn allreduce<T: ReduceElem>(&self, values: &[T], op: ReduceOp) -> Result<Vec<T>> {
        self.traced("allreduce", || self.allreduce_impl(values, op))
    }

    fn allreduce_impl<T: ReduceElem>(&self, values: &[T], op: ReduceOp) -> Result<Vec<T>> {
        let mut local = Vec::with_capacity(2 + values.len() * T::WIDTH);
        local.push(T::CODE);
        local.push(op.code());
        for v in values {
            v.put(&mut local);
        }
        let reply = match self.gather_impl(0, &local)? {
            Some(parts) => {
                let mut reply = vec![STATUS_OK];
                match reduce_parts::<T>(&parts, op) {
                    Ok(acc) => acc.iter().for_each(|v| v.put(&mut reply)),
                    Err((status, msg)) => {
                        reply[0] = status;
                        reply.extend_from_slice(msg.as_bytes());
                    }
                }
                reply
            }
            None => Vec::new(),
        };
        let reply = self.broadcast_impl(0, &reply)?;
        let body = &reply[1..];
        match reply[0] {
            STATUS_OK => Ok(body.chunks_exact(T::WIDTH).map(T::get).collect()),
            STATUS_OVERFLOW => Err(Error::Overflow("allreduce sum")),
            _ => Err(Error::LengthMismatch(String::from_utf8_lossy(body).into_owned())),
        }
    }

    /// Routes row `i` of `t` to rank `dest[i]`. Each rank returns the rows
    /// sent to it ordered by source rank, then by source row order.
    pub fn shuffle_table(&self, t: &Table, dest: &[usize]) -> Result<Table> {
        self.traced("shuffle_table", || self.shuffle_impl(t, dest))
    }

    fn shuffle_impl(&self, t: &Table, dest: &[usize]) -> Result<Table> {
        let p = self.world_size;
        let args_ok = dest.len() == t.nrows() && dest.iter().all(|&d| d < p);
        let mut header = schema_digest(t.schema()).to_le_bytes().to_vec();
        header.push(u8::from(args_ok));
        let headers = self.allgather_impl(&header)?;
        if let Some(bad) = headers.iter().position(|h| h.get(8) != Some(&1)) {
            return Err(Error::InvalidSpec(format!(
                "shuffle destinations on rank {bad} do not match its rows or world size"
            )));
        }
        if let Some(bad) = headers.iter().position(|h| h[..8] != header[..8]) {
            return Err(Error::SchemaMismatch(format!(
                "shuffle schema on rank {bad} differs from rank {}",
                self.rank
            )));
        }

        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); p];
        for (row, &d) in dest.iter().enumerate() {
            buckets[d].push(row);
        }
        let tag = self.next_tag();
        for (d, rows) in buckets.iter().enumerate() {
            if d != self.rank {
                self.raw_send(d, tag, &serialize_table(&t.take_unchecked(rows)))?;
            }
        }
        let mut parts = Vec::with_capacity(p);
        for (src, rows) in buckets.iter().enumerate() {
            if src == self.rank {
                parts.push(t.take_unchecked(rows));
            } else {
                let part = deserialize_table(&self.raw_recv(src, tag)?)?;
                if part.schema() != t.schema() {
                    return Err(Error::SchemaMismatch(format!("rows from rank {src}")));
                }
                parts.push(part);
            }
        }
        concat(t.schema(), &parts)
    }

    /// Every rank receives `root`'s table; only the root passes `Some`.
    pub fn broadcast_table(&self, root: usize, t: Option<&Table>) -> Result<Table> {
        self.traced("broadcast_table", || {
            let bytes = match (self.rank == root, t) {
                (true, Some(t)) => serialize_table(t),
                (true, None) => {
                    return Err(Error::InvalidSpec("broadcast_table root must supply a table".into()))
                }
                (false, _) => Vec::new(),
            };
            deserialize_table(&self.broadcast_impl(root, &bytes)?)
        })
    }

    /// Concatenation of every rank's table in rank order, at `root` only.
    pub fn gather_table(&self, root: usize, t: &Table) -> Result<Option<Table>> {
        self.traced("gather_table", || {
            match self.gather_impl(root, &serialize_table(t))? {
                Some(parts) => {
                    let tables =
                        parts.iter().map(|b| deserialize_table(b)).collect::<Result<Vec<_>>>()?;
                    Ok(Some(concat(t.schema(), &tables)?))
                }
                None => Ok(None),
            }
        })
    }

    /// Every rank's table, in rank order, at every rank.
    pub fn allgather_tables(&self, t: &Table) -> Result<Vec<Table>> {
        self.traced("allgather_tables", || {
            self.allgather_impl(&serialize_table(t))?
                .iter()
                .map(|b| deserialize_table(b))
                .collect()
        })
    }
}

fn reduce_parts<T: ReduceElem>(parts: &[Vec<u8>], op: ReduceOp) -> Result<Vec<T>, (u8, String)> {
    let head = &parts[0];
    for (r, part) in parts.iter().enumerate() {
        if part.len() < 2 || part[0] != T::CODE || part[1] != op.code() {
            return Err((STATUS_BAD_ARGS, format!("rank {r} passed a different element type or op")));
        }
        if part.len() != head.len() {
            return Err((
                STATUS_LENGTH,
                format!(
                    "rank {r} passed {} elements, rank 0 passed {}",
                    (part.len() - 2) / T::WIDTH,
                    (head.len() - 2) / T::WIDTH
                ),
            ));
        }
    }
    let mut acc: Vec<T> = head[2..].chunks_exact(T::WIDTH).map(T::get).collect();
    for part in &parts[1..] {
        for (a, chunk) in acc.iter_mut().zip(part[2..].chunks_exact(T::WIDTH)) {
            *a = a.combine(T::get(chunk), op).ok_or((STATUS_OVERFLOW, String::new()))?;
        }
    }
    Ok(acc)
}

impl Drop for Communicator {
    fn drop(&mut self) {
        match &mut self.links {
            Links::InProcess(boxes) => {
                for (r, b) in boxes.iter().enumerate() {
                    if r != self.rank {
                        b.close(self.rank);
                    }
                }
            }
            Links::Tcp(links) => links.shutdown(),
        }
    }
}

/// Runs `f` on `n` in-process workers, one thread each, and returns the
/// per-rank results in rank order.
pub fn run_local<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Communicator) -> R + Sync,
{
    let comms = Communicator::local_world(n);
    std::thread::scope(|s| {
        let handles: Vec<_> = comms
            .into_iter()
            .map(|c| {
                let f = &f;
                std::thread::Builder::new()
                    .name(format!("worker-{}", c.rank()))
                    .stack_size(8 << 20)
                    .spawn_scoped(s, move || f(c))
                    .expect("spawn worker")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
            .collect()
    })
}

/// `n` loopback peers on ports that were free when probed.
pub fn loopback_peers(n: usize) -> Result<Vec<PeerAddr>> {
    let listeners = (0..n)
        .map(|_| std::net::TcpListener::bind("127.0.0.1:0"))
        .collect::<std::io::Result<Vec<_>>>()?;
    listeners
        .iter()
        .enumerate()
        .map(|(rank, l)| Ok(PeerAddr { rank, host: "127.0.0.1".into(), port: l.local_addr()?.port() }))
        .collect()
}

/// Like [`run_local`], but the workers form a tcp mesh on loopback.
pub fn run_tcp_loopback<R, F>(n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(Communicator) -> R + Sync,
{
    let peers = loopback_peers(n)?;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|rank| {
                let (f, peers) = (&f, peers.clone());
                s.spawn(move || init(&WorkerSpec::tcp(rank, peers)).map(f))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
            .collect()
    })
}
