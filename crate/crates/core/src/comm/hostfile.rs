//! Hostfile: one `<rank> <host>:<port>` per line, `#` starts a comment.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerAddr {
    pub rank: usize,
    pub host: String,
    pub port: u16,
}

impl PeerAddr {
    pub fn socket_addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

impl fmt::Display for PeerAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}:{}", self.rank, self.host, self.port)
    }
}

/// Parses hostfile text into peers sorted by rank. Ranks must be dense from 0;
/// a rank listed twice is a [`Error::RankCollision`].
pub fn parse_hostfile(text: &str) -> Result<Vec<PeerAddr>> {
    let mut peers: Vec<PeerAddr> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: &str| Error::Hostfile { line: line_no, reason: reason.to_string() };
        let mut parts = line.split_whitespace();
        let rank: usize = parts
            .next()
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| bad("expected a rank"))?;
        let addr = parts.next().ok_or_else(|| bad("expected host:port"))?;
        if parts.next().is_some() {
            return Err(bad("trailing fields"));
        }
        let (host, port) = addr.rsplit_once(':').ok_or_else(|| bad("expected host:port"))?;
        let port: u16 = port.parse().map_err(|_| bad("invalid port"))?;
        if host.is_empty() {
            return Err(bad("empty host"));
        }
        if peers.iter().any(|p| p.rank == rank) {
            return Err(Error::RankCollision(format!("rank {rank} listed twice (line {line_no})")));
        }
        peers.push(PeerAddr { rank, host: host.to_string(), port });
    }
    peers.sort_by_key(|p| p.rank);
    if let Some((i, p)) = peers.iter().enumerate().find(|(i, p)| p.rank != *i) {
        return Err(Error::InvalidSpec(format!("ranks not dense: expected rank {i}, found {}", p.rank)));
    }
    Ok(peers)
}

pub fn read_hostfile(path: &Path) -> Result<Vec<PeerAddr>> {
    parse_hostfile(&std::fs::read_to_string(path)?)
}

pub fn format_hostfile(peers: &[PeerAddr]) -> String {
    peers.iter().map(|p| format!("{p}\n")).collect()
}
