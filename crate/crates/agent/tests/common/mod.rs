#![allow(dead_code)]

use std::time::{Duration, Instant};

use nefele_agent::cluster::ClusterOptions;
use nefele_agent::proto::{CtlResponse, RequestState, RequestStatus};
use nefele_agent::Client;
use nefele_core::messaging::{DownNotice, Envelope};
use nefele_core::{Npid, ResourceVector, TaskSpec};

pub const AGENT: &str = env!("CARGO_BIN_EXE_nefele-agent");
pub const STUB: &str = env!("CARGO_BIN_EXE_nefele-stub");
pub const NEF: &str = env!("CARGO_BIN_EXE_nef");

pub fn opts(nodes: u32) -> ClusterOptions {
    ClusterOptions::new(AGENT, nodes).capacity(4000, 4 << 30)
}

pub fn sleeper(secs: &str, cpu: u64) -> TaskSpec {
    TaskSpec::new("/bin/sleep", ResourceVector::new(cpu, 1 << 20)).with_args([secs])
}

pub fn stub(args: &[&str]) -> TaskSpec {
    let mut t = TaskSpec::new(STUB, ResourceVector::new(100, 1 << 20)).with_args(args.iter().copied());
    t.await_handshake = true;
    t
}

pub fn placed(st: &RequestStatus) -> Npid {
    assert_eq!(st.state, RequestState::Placed, "{st:?}");
    st.npids[0]
}

pub async fn recv_msg(c: &Client, timeout: Duration) -> Envelope {
    let deadline = Instant::now() + timeout;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match c.recv(left).await.unwrap() {
            CtlResponse::Msg(e) => return e,
            CtlResponse::Timeout => panic!("no message within {timeout:?}"),
            _ => continue,
        }
    }
}

pub async fn recv_down(c: &Client, timeout: Duration) -> DownNotice {
    let deadline = Instant::now() + timeout;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match c.recv(left).await.unwrap() {
            CtlResponse::Down(d) => return d,
            CtlResponse::Timeout => panic!("no DOWN within {timeout:?}"),
            _ => continue,
        }
    }
}

/// Polls `f` until it returns true or the timeout passes.
pub async fn eventually<F, Fut>(timeout: Duration, mut f: F) -> bool
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = bool>,
{
    let deadline = Instant::now() + timeout;
    loop {
        if f().await {
            return true;
        }
        if Instant::now() > deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

/// Stdout lines of `npid` so far.
pub async fn log_lines(c: &Client, npid: Npid) -> Vec<String> {
    let mut rx = c.logs(npid, false, None).unwrap();
    let mut out = Vec::new();
    while let Some(r) = rx.recv().await {
        out.push(r.line);
    }
    out
}

/// First stdout line of `npid`, waiting up to `timeout` for it.
pub async fn first_line(c: &Client, npid: Npid, timeout: Duration) -> String {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(l) = log_lines(c, npid).await.into_iter().next() {
            return l;
        }
        assert!(Instant::now() < deadline, "{npid} printed nothing within {timeout:?}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}
