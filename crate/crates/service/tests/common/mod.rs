#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use fedx_core::blob::BlobRef;
use fedx_core::data::{SiteData, TaskKind};
use fedx_core::synth::{gen_regression_sites, table1_sites, SynthParams};
use fedx_core::tensor::{Activation, ModelSpec, OptimizerKind, TrainConfig};
use fedx_service::agent::{run_agent, AgentConfig, AgentStats, Executor, RawUpdateHook};
use fedx_service::client::{Client, ClientResult};
use fedx_service::clock::{Clock, ManualClock, SystemClock};
use fedx_service::fabric::{ResultStatus, Submission, TaskFunction, TaskResult};
use fedx_service::identity::Roster;
use fedx_service::server::{spawn, spawn_with_clock, ServerConfig, ServerHandle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub const ROSTER: &str = r#"{
  "users": [
    {"user_id": "alice", "display_name": "Alice", "institution": "Coordinating Center"},
    {"user_id": "bob", "display_name": "Bob", "institution": "Site A"},
    {"user_id": "carol", "display_name": "Carol", "institution": "Site B"},
    {"user_id": "mallory", "display_name": "Mallory", "institution": "Elsewhere"}
  ],
  "groups": [
    {"group_id": "study", "members": {"alice": "orchestrator", "bob": "member", "carol": "member"}}
  ]
}"#;

pub fn roster() -> Roster {
    serde_json::from_str(ROSTER).unwrap()
}

pub fn fast_config() -> ServerConfig {
    ServerConfig {
        lease_ms: 5_000,
        heartbeat_ms: 200,
        clients_ready_timeout_ms: 5_000,
        round_timeout_ms: 60_000,
        ..ServerConfig::default()
    }
}

pub fn server(cfg: &ServerConfig) -> ServerHandle {
    spawn(cfg, roster(), "127.0.0.1:0").unwrap()
}

pub fn login(srv: &ServerHandle, user: &str) -> Client {
    let anon = Client::new(&srv.url(), None);
    let t = anon.login(user, None).unwrap();
    anon.with_token(&t.token)
}

pub struct AgentHandle {
    pub endpoint_id: String,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<ClientResult<AgentStats>>>,
}

impl AgentHandle {
    pub fn stop(mut self) -> AgentStats {
        self.stop.store(true, Ordering::Relaxed);
        self.thread.take().unwrap().join().unwrap().unwrap()
    }
}

impl Drop for AgentHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Starts an agent thread and waits until its endpoint is registered.
pub fn agent(client: &Client, endpoint_id: &str, site: SiteData, hook: Option<RawUpdateHook>) -> AgentHandle {
    let stop = Arc::new(AtomicBool::new(false));
    let mut cfg = AgentConfig::new(endpoint_id);
    cfg.poll_wait_ms = 300;
    cfg.heartbeat_ms = 100;
    let (c, s) = (client.clone(), stop.clone());
    let thread = std::thread::spawn(move || {
        let mut exec = Executor::new(site);
        exec.on_raw_update = hook;
        run_agent(&c, &cfg, &mut exec, s)
    });
    let t0 = Instant::now();
    while client.endpoint(endpoint_id).is_err() {
        assert!(t0.elapsed() < Duration::from_secs(10), "endpoint {endpoint_id} never registered");
        std::thread::sleep(Duration::from_millis(20));
    }
    AgentHandle { endpoint_id: endpoint_id.into(), stop, thread: Some(thread) }
}

/// Two small regression sites, "anl" and "broad".
pub fn regression_sites(seed: u64) -> Vec<SiteData> {
    gen_regression_sites(&table1_sites(0.004, 4, 0.5), &SynthParams::default(), seed).unwrap()
}

pub fn small_model() -> ModelSpec {
    ModelSpec::new(vec![4, 8, 1], Activation::Relu, vec![true], TaskKind::Regression).unwrap()
}

pub fn small_train() -> TrainConfig {
    TrainConfig { local_epochs: 2, batch_size: 16, optimizer: OptimizerKind::Adam, lr0: 0.01, lr_decay: 0.975, trainable_mask: None }
}

pub fn config(clients: &[(&str, &str, &str)], rounds: u32) -> Value {
    json!({
        "group_id": "study",
        "clients": clients.iter().map(|(c, e, d)| json!({"client_id": c, "endpoint_id": e, "dataset_ref": d})).collect::<Vec<_>>(),
        "model": small_model(),
        "train": small_train(),
        "rounds": rounds,
        "aggregator": "fedavg",
        "dp": {"enabled": false, "epsilon": 0.1, "clip": 1.0, "mechanism": "laplace"},
        "quorum": {"policy": "fail_fast"},
        "cross_site": false,
        "seed": 7
    })
}

/// Every fabric and orchestrator route, with a plausible body.
pub fn routes() -> Vec<(&'static str, String, Vec<u8>)> {
    let cfg = serde_json::to_vec(&config(&[("a", "ep-a", "anl")], 1)).unwrap();
    let hash = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";
    vec![
        ("GET", "/endpoints".into(), vec![]),
        ("POST", "/endpoints/register".into(), br#"{"endpoint_id":"ep-x"}"#.to_vec()),
        ("GET", "/endpoints/ep-a".into(), vec![]),
        ("POST", "/endpoints/ep-a/heartbeat".into(), b"{}".to_vec()),
        ("POST", "/tasks/poll".into(), br#"{"endpoint_id":"ep-a","wait_ms":0}"#.to_vec()),
        ("POST", "/tasks/task-00000000/result".into(), br#"{"endpoint_id":"ep-a","lease_id":"x","task_id":"task-00000000","status":"ok"}"#.to_vec()),
        ("PUT", "/blobs".into(), b"bytes".to_vec()),
        ("GET", format!("/blobs/{hash}"), vec![]),
        ("POST", "/experiments".into(), cfg),
        ("GET", "/experiments".into(), vec![]),
        ("GET", "/experiments/exp-0001".into(), vec![]),
        ("POST", "/experiments/exp-0001/start".into(), b"{}".to_vec()),
        ("POST", "/experiments/exp-0001/stop".into(), b"{}".to_vec()),
        ("GET", "/experiments/exp-0001/metrics?cursor=0".into(), vec![]),
        ("GET", "/experiments/exp-0001/crosssite".into(), vec![]),
        ("POST", "/experiments/exp-0001/crosssite".into(), br#"{"models":[]}"#.to_vec()),
    ]
}

pub fn status_of(c: &Client, method: &str, path: &str, body: &[u8]) -> u16 {
    match c.send_raw(method, path, body) {
        Ok(_) => 200,
        Err(e) => e.status().expect("server reachable"),
    }
}

/// A server with one experiment, its endpoint, and an expired token.
pub struct World {
    pub srv: fedx_service::server::ServerHandle,
    pub expired: String,
}

pub fn world() -> World {
    let clock = Arc::new(ManualClock::new(SystemClock.now_ms()));
    let srv = spawn_with_clock(&fast_config(), roster(), "127.0.0.1:0", clock.clone()).unwrap();
    let anon = Client::new(&srv.url(), None);
    let expired = anon.login("alice", Some(60)).unwrap().token;
    let bob = anon.with_token(&anon.login("bob", None).unwrap().token);
    bob.register_endpoint("ep-a", Default::default(), Some("study")).unwrap();
    let alice = anon.with_token(&anon.login("alice", None).unwrap().token);
    let id = alice.create_experiment(&config(&[("a", "ep-a", "anl")], 1)).unwrap().experiment_id;
    assert_eq!(id, "exp-0001");
    clock.advance(60_000);
    World { srv, expired }
}

#[derive(Debug)]
pub struct ChaosReport {
    pub tasks: usize,
    pub crashes: u32,
    pub redelivered: usize,
    pub double_completions: usize,
    pub lost: usize,
    pub accepted: usize,
    pub completions: u64,
    pub elapsed: Duration,
}

/// Workers that crash mid-task, answer after their lease ran out, answer
/// twice, or answer normally, all against the live HTTP surface.
pub fn chaos(tasks: usize, seed: u64) -> ChaosReport {
    let cfg = ServerConfig { lease_ms: 250, ..fast_config() };
    let srv = server(&cfg);
    let owners = [("bob", "ep-0"), ("bob", "ep-1"), ("carol", "ep-2"), ("carol", "ep-3")];
    let clients: HashMap<&str, _> = [("bob", login(&srv, "bob")), ("carol", login(&srv, "carol"))].into();
    for (user, ep) in owners {
        clients[user].register_endpoint(ep, Default::default(), None).unwrap();
    }
    let fabric = srv.state.fabric.clone();
    let model = BlobRef::of(b"m");
    let ids: Vec<String> = (0..tasks).map(|i| fabric.enqueue("chaos", TaskFunction::Train, 0, model.clone(), "{}".into(), owners[i % 4].1)).collect();

    let accepted: Arc<Mutex<HashMap<String, u32>>> = Arc::default();
    let done = Arc::new(AtomicBool::new(false));
    let t0 = Instant::now();
    let workers: Vec<_> = (0..8)
        .map(|w| {
            let (user, ep) = owners[w % 4];
            let (client, accepted, done) = (clients[user].clone(), accepted.clone(), done.clone());
            std::thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(w as u64));
                let mut crashes = 0;
                while !done.load(Ordering::Relaxed) {
                    let Some(env) = client.poll(ep, 100).unwrap() else { continue };
                    let roll: f64 = rng.random();
                    let sub = Submission {
                        endpoint_id: ep.into(),
                        lease_id: env.lease_id.clone(),
                        result: TaskResult { task_id: env.task_id.clone(), status: ResultStatus::Ok, result_blob: None, metrics_json: "{}".into(), error: None },
                    };
                    if roll < 0.15 {
                        crashes += 1;
                        continue;
                    }
                    let wait = if roll < 0.25 { 300 } else { rng.random_range(0..20) };
                    std::thread::sleep(Duration::from_millis(wait));
                    let repeats = if roll > 0.9 { 2 } else { 1 };
                    for _ in 0..repeats {
                        if client.submit(&sub).is_ok() {
                            *accepted.lock().unwrap().entry(env.task_id.clone()).or_default() += 1;
                        }
                    }
                }
                crashes
            })
        })
        .collect();
    while fabric.completions() < tasks as u64 && t0.elapsed() < Duration::from_secs(100) {
        std::thread::sleep(Duration::from_millis(50));
    }
    done.store(true, Ordering::Relaxed);
    let crashes: u32 = workers.into_iter().map(|w| w.join().unwrap()).sum();
    let accepted = accepted.lock().unwrap();
    ChaosReport {
        tasks,
        crashes,
        redelivered: ids.iter().filter(|id| fabric.task_info(id).unwrap().deliveries > 1).count(),
        double_completions: accepted.values().filter(|n| **n > 1).count(),
        lost: ids.iter().filter(|id| fabric.result(id).is_none()).count(),
        accepted: accepted.len(),
        completions: fabric.completions(),
        elapsed: t0.elapsed(),
    }
}

/// Random invalid tokens against random routes; returns (rejected, total).
pub fn fuzz_tokens(w: &World, cases: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let routes = routes();
    let mut rejected = 0;
    for i in 0..cases {
        let token = match i % 5 {
            0 => None,
            1 => Some(w.expired.clone()),
            2 => Some((0..32).map(|_| char::from_digit(rng.random_range(0..16), 16).unwrap()).collect()),
            3 => Some((0..rng.random_range(0..64)).map(|_| rng.random_range(b' '..=b'~') as char).collect()),
            _ => Some(String::new()),
        };
        let (m, p, _) = &routes[rng.random_range(0..routes.len())];
        let body: Vec<u8> = (0..rng.random_range(0..64)).map(|_| rng.random()).collect();
        if status_of(&Client::new(&w.srv.url(), token), m, p, &body) == 401 {
            rejected += 1;
        }
    }
    (rejected, cases)
}
