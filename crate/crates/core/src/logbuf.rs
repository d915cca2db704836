//! Per-process output capture: bounded rings of lines per stream.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::model::Npid;

/// Lines retained per (process, stream).
pub const LOG_RING_LINES: usize = 1000;
/// Longer lines are truncated to this many bytes.
pub const MAX_LINE_BYTES: usize = 8 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogStream {
    Stdout,
    Stderr,
}

impl std::fmt::Display for LogStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LogStream::Stdout => "stdout",
            LogStream::Stderr => "stderr",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub npid: Npid,
    pub stream: LogStream,
    pub line: String,
    /// Unix milliseconds.
    pub ts: u64,
    /// Strictly increasing per (npid, stream), starting at 1.
    pub seq: u64,
    /// Arrival order across both streams of the process.
    #[serde(skip)]
    order: u64,
}

#[derive(Debug)]
pub struct LogRing {
    npid: Npid,
    rings: [VecDeque<LogRecord>; 2],
    next_seq: [u64; 2],
    next_order: u64,
    closed: bool,
}

fn idx(stream: LogStream) -> usize {
    match stream {
        LogStream::Stdout => 0,
        LogStream::Stderr => 1,
    }
}

impl LogRing {
    pub fn new(npid: Npid) -> Self {
        Self { npid, rings: [VecDeque::new(), VecDeque::new()], next_seq: [1, 1], next_order: 0, closed: false }
    }

    pub fn push(&mut self, stream: LogStream, line: &[u8], ts: u64) -> LogRecord {
        let line = &line[..line.len().min(MAX_LINE_BYTES)];
        let i = idx(stream);
        let rec = LogRecord {
            npid: self.npid,
            stream,
            line: String::from_utf8_lossy(line).into_owned(),
            ts,
            seq: self.next_seq[i],
            order: self.next_order,
        };
        self.next_seq[i] += 1;
        self.next_order += 1;
        if self.rings[i].len() == LOG_RING_LINES {
            self.rings[i].pop_front();
        }
        self.rings[i].push_back(rec.clone());
        rec
    }

    /// The last `n` buffered records across both streams, oldest first.
    pub fn tail(&self, n: usize) -> Vec<LogRecord> {
        let mut all: Vec<&LogRecord> = self.rings.iter().flatten().collect();
        all.sort_by_key(|r| r.order);
        let skip = all.len().saturating_sub(n);
        all.into_iter().skip(skip).cloned().collect()
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }
}
