mod common;

use std::time::Duration;

use common::*;
use nefele_agent::cluster::DeskCluster;
use nefele_agent::http::PARTIAL_HEADER;
use nefele_agent::proto::{RequestState, RequestStatus, Scope};
use nefele_core::{ProcessRecord, SpawnKind, SpawnRequest};
use serde_json::Value;

fn base(c: &DeskCluster, id: u32) -> String {
    format!("http://{}", c.member(id).unwrap().ready.as_ref().unwrap().addrs.http)
}

async fn wait_decided(http: &reqwest::Client, url: &str) -> RequestStatus {
    for _ in 0..250 {
        let st: RequestStatus = http.get(url).send().await.unwrap().json().await.unwrap();
        if st.state != RequestState::Pending {
            return st;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("request never decided");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn spawn_poll_list_kill() {
    let c = DeskCluster::launch(opts(2)).unwrap();
    let http = reqwest::Client::new();
    let b = base(&c, 1);
    let req = SpawnRequest::new("default", SpawnKind::Spawn, vec![sleeper("30", 100)]);
    let resp = http.post(format!("{b}/v1/spawn")).json(&req).send().await.unwrap();
    assert_eq!(resp.status(), 202);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["request_id"], req.request_id.to_string());
    let st = wait_decided(&http, &format!("{b}/v1/requests/{}", req.request_id)).await;
    let npid = placed(&st);

    let resp = http.get(format!("{b}/v1/processes?scope=cluster")).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    assert!(resp.headers().get(PARTIAL_HEADER).is_none());
    let procs: Vec<ProcessRecord> = resp.json().await.unwrap();
    assert_eq!(procs.iter().map(|p| p.npid).collect::<Vec<_>>(), [npid]);

    // The HTTP listing and the control-socket listing are the same data.
    let via_socket = c.client(2).await.unwrap().ps(Scope::Cluster, None).await.unwrap().processes;
    assert_eq!(serde_json::to_value(&via_socket).unwrap(), serde_json::to_value(&procs).unwrap());

    let resp = http.delete(format!("{b}/v1/processes/{npid}?signal=9")).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    let url = format!("{b}/v1/processes/{npid}");
    assert!(eventually(Duration::from_secs(5), || async { http.delete(&url).send().await.unwrap().status() == 404 }).await);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn error_statuses() {
    let c = DeskCluster::launch(opts(1)).unwrap();
    let http = reqwest::Client::new();
    let b = base(&c, 1);
    let status = |r: reqwest::Response| r.status().as_u16();
    assert_eq!(status(http.post(format!("{b}/v1/spawn")).body("{not json").send().await.unwrap()), 400);
    let empty = SpawnRequest::new("default", SpawnKind::Cspawn, vec![]);
    assert_eq!(status(http.post(format!("{b}/v1/spawn")).json(&empty).send().await.unwrap()), 400);
    assert_eq!(status(http.get(format!("{b}/v1/requests/nope")).send().await.unwrap()), 400);
    let unknown = uuid::Uuid::new_v4();
    assert_eq!(status(http.get(format!("{b}/v1/requests/{unknown}")).send().await.unwrap()), 404);
    assert_eq!(status(http.delete(format!("{b}/v1/processes/garbage")).send().await.unwrap()), 400);
    let node = c.member(1).unwrap().ready.as_ref().unwrap().node;
    let ghost = nefele_core::Npid::new(node, 77_777).unwrap();
    assert_eq!(status(http.delete(format!("{b}/v1/processes/{ghost}")).send().await.unwrap()), 404);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn nodes_names_and_logs() {
    let c = DeskCluster::launch(opts(2)).unwrap();
    let http = reqwest::Client::new();
    let b = base(&c, 1);
    let nodes: Value = http.get(format!("{b}/v1/nodes")).send().await.unwrap().json().await.unwrap();
    assert_eq!(nodes.as_array().unwrap().len(), 2);

    let client = c.client(1).await.unwrap();
    client.attach(None).await.unwrap();
    client.register(nefele_core::messaging::NameKey::Name("api".into())).await.unwrap();
    let names: Value = http.get(format!("{b}/v1/names")).send().await.unwrap().json().await.unwrap();
    assert!(names.as_array().unwrap().iter().any(|e| e["key"]["name"] == "api"), "{names}");

    let task = nefele_core::TaskSpec::new("/bin/sh", nefele_core::ResourceVector::new(10, 1 << 20)).with_args(["-c", "echo a; echo b"]);
    let npid = placed(&client.spawn(task).await.unwrap());
    let resp = http.get(format!("{b}/v1/logs/{npid}?follow=true")).send().await.unwrap();
    assert_eq!(resp.headers()["content-type"], "application/x-ndjson");
    let text = tokio::time::timeout(Duration::from_secs(5), resp.text()).await.expect("follow ends at exit").unwrap();
    let lines: Vec<String> = text.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["line"].as_str().unwrap().to_string()).collect();
    assert_eq!(lines, ["a", "b"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn partial_header_when_member_dead() {
    let mut c = DeskCluster::launch(opts(2)).unwrap();
    let http = reqwest::Client::new();
    let b = base(&c, 1);
    c.kill(2).unwrap();
    assert!(eventually(Duration::from_secs(10), || async {
        let r = http.get(format!("{b}/v1/processes?scope=cluster")).send().await.unwrap();
        r.status() == 200 && r.headers().get(PARTIAL_HEADER).map(|v| v == "true").unwrap_or(false)
    })
    .await);
}
