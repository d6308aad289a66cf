mod common;

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use fedx_core::blob::{sha256_hex, BlobRef};
use fedx_core::federation::{run_federation, FederationConfig};
use fedx_core::privacy::DpConfig;
use fedx_core::tensor::{Activation, ModelSpec, ModelSnapshot};
use fedx_service::agent::RawUpdateHook;
use fedx_service::experiment::*;
use fedx_service::metrics_log::{read_jsonl, MetricPhase};
use fedx_service::server::ServerConfig;
use proptest::prelude::*;
use serde_json::json;

const WAIT: Duration = Duration::from_secs(120);

fn legal_edge(from: &Phase, to: &Phase, rounds: u32, cross_site: bool) -> bool {
    use Phase::*;
    match (from, to) {
        (Completed, _) | (Failed { .. }, _) => false,
        (_, Failed { .. }) => true,
        (Created, ClientsReady) => true,
        (ClientsReady, Running { round: 0 }) => true,
        (Running { round: a }, Running { round: b }) => *b == a + 1 && *b < rounds,
        (Running { round }, CrossSite) => cross_site && round + 1 == rounds,
        (Running { round }, Completed) => !cross_site && round + 1 == rounds,
        (CrossSite, Completed) => cross_site,
        _ => false,
    }
}

fn event() -> impl Strategy<Value = Event> {
    prop_oneof![
        Just(Event::ClientsOnline),
        Just(Event::BeginTraining),
        Just(Event::RoundDone),
        Just(Event::CrossSiteDone),
        "[a-z]{1,8}".prop_map(Event::Fail),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 2000, failure_persistence: None, ..ProptestConfig::default() })]
    #[test]
    fn random_event_sequences_stay_on_the_graph(rounds in 1u32..6, cross_site in any::<bool>(), events in prop::collection::vec(event(), 0..20)) {
        let mut phase = Phase::Created;
        for ev in &events {
            if let Ok(next) = transition(&phase, ev, rounds, cross_site) {
                prop_assert!(legal_edge(&phase, &next, rounds, cross_site), "{:?} -{:?}-> {:?}", phase, ev, next);
                phase = next;
            }
            if let Phase::Running { round } = phase {
                prop_assert!(round < rounds);
            }
        }
    }
}

#[test]
fn happy_path_length_and_terminal_absorption() {
    for (rounds, cross_site) in [(1, false), (3, false), (3, true)] {
        let mut phase = Phase::Created;
        let mut events = vec![Event::ClientsOnline, Event::BeginTraining];
        events.extend((0..rounds).map(|_| Event::RoundDone));
        if cross_site {
            events.push(Event::CrossSiteDone);
        }
        for ev in &events {
            phase = transition(&phase, ev, rounds, cross_site).unwrap();
        }
        assert_eq!(phase, Phase::Completed);
        for ev in [Event::ClientsOnline, Event::RoundDone, Event::Fail("x".into())] {
            assert!(transition(&phase, &ev, rounds, cross_site).is_err());
        }
    }
    let failed = transition(&Phase::Running { round: 1 }, &Event::Fail("boom".into()), 3, false).unwrap();
    assert_eq!(failed, Phase::Failed { reason: "boom".into() });
    assert!(transition(&failed, &Event::RoundDone, 3, false).is_err());
}

#[test]
fn weighted_column_matches_brute_force() {
    use fedx_core::federation::EvalReport;
    let cell = |id: &str, m: f64, n: u64| CrossSiteCell {
        client_id: id.into(),
        report: Some(EvalReport { loss: m, metric_name: "mse".into(), metric_value: m, n_samples: n, roc: None, confusion: None }),
        error: None,
    };
    let cells = [cell("anl", 109.95, 7905), cell("broad", 224.48, 4143)];
    let brute = (109.95 * 7905.0 + 224.48 * 4143.0) / (7905.0 + 4143.0);
    assert!((weighted_column(&cells).unwrap() - brute).abs() < 1e-9);
    assert!((weighted_column(&cells).unwrap() - 149.33).abs() < 0.01);
    let failed = CrossSiteCell { client_id: "x".into(), report: None, error: Some("down".into()) };
    assert_eq!(weighted_column(std::slice::from_ref(&failed)), None);
    assert!((weighted_column(&[cells[0].clone(), failed]).unwrap() - 109.95).abs() < 1e-12);
}

#[test]
fn validation_enumerates_every_violation() {
    let srv = common::server(&common::fast_config());
    srv.state.fabric.register("mallory", "ep-m", Default::default()).unwrap();
    let bob = common::login(&srv, "bob");
    bob.register_endpoint("ep-b", Default::default(), Some("study")).unwrap();
    let alice = common::login(&srv, "alice");
    let mut cfg = common::config(&[("a", "ep-missing", "anl"), ("b", "ep-m", "broad"), ("a", "ep-b", "")], 0);
    cfg["model"]["layer_sizes"] = json!([4]);
    cfg["dp"] = json!({"enabled": true, "epsilon": -1.0, "clip": 1.0, "mechanism": "laplace"});
    cfg["quorum"] = json!({"policy": "min_k", "k": 5});
    cfg["fine_tune"] = json!({"epochs": 0});
    let err = alice.create_experiment(&cfg).unwrap_err();
    assert_eq!(err.status(), Some(400));
    assert_eq!(err.code(), "validation");
    let fields: BTreeSet<String> = match &err {
        fedx_service::client::ClientError::Api { body, .. } => body["errors"].as_array().unwrap().iter().map(|e| e["field"].as_str().unwrap().to_string()).collect(),
        _ => unreachable!(),
    };
    let expected: BTreeSet<String> = [
        "rounds",
        "clients[0].endpoint_id",
        "clients[1].endpoint_id",
        "clients[2].client_id",
        "clients[2].dataset_ref",
        "model",
        "dp",
        "quorum.k",
        "fine_tune.epochs",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    assert_eq!(fields, expected);

    let ok = alice.create_experiment(&common::config(&[("a", "ep-b", "anl")], 2)).unwrap();
    assert_eq!(ok.phase, Phase::Created);
    assert!(srv.state.blobs.contains(&ok.initial_global.sha256_hex));
    let mut dup = common::config(&[("a", "ep-b", "anl")], 2);
    dup["experiment_id"] = json!(ok.experiment_id);
    assert_eq!(alice.create_experiment(&dup).unwrap_err().status(), Some(409));
}

fn plain_model() -> ModelSpec {
    ModelSpec::plain(vec![4, 8, 1], Activation::Relu, fedx_core::data::TaskKind::Regression).unwrap()
}

#[test]
fn zero_learning_rate_leaves_global_unchanged() {
    let srv = common::server(&common::fast_config());
    let sites = common::regression_sites(1);
    let bob = common::login(&srv, "bob");
    let _a = common::agent(&bob, "ep-a", sites[0].clone(), None);
    let alice = common::login(&srv, "alice");
    let mut cfg = common::config(&[("anl", "ep-a", "anl")], 3);
    cfg["model"] = serde_json::to_value(plain_model()).unwrap();
    cfg["train"]["lr0"] = json!(0.0);
    let id = alice.create_experiment(&cfg).unwrap().experiment_id;
    alice.start_experiment(&id).unwrap();
    let view = alice.wait_finished(&id, WAIT).unwrap();
    assert_eq!(view.phase, Phase::Completed);
    assert_eq!(view.history.len(), 3);
    assert_eq!(view.current_global, view.initial_global);
    assert_eq!(alice.start_experiment(&id).unwrap_err().status(), Some(409));
}

fn federation_config(cfg: &serde_json::Value) -> FederationConfig {
    FederationConfig {
        model: serde_json::from_value(cfg["model"].clone()).unwrap(),
        train: serde_json::from_value(cfg["train"].clone()).unwrap(),
        rounds: cfg["rounds"].as_u64().unwrap() as u32,
        seed: cfg["seed"].as_u64().unwrap(),
        dp: serde_json::from_value(cfg["dp"].clone()).unwrap(),
        aggregate_bn_stats: true,
    }
}

#[test]
fn networked_run_is_deterministic_and_matches_in_process_driver() {
    let srv = common::server(&common::fast_config());
    let sites = common::regression_sites(2);
    let bob = common::login(&srv, "bob");
    let carol = common::login(&srv, "carol");
    let _a = common::agent(&bob, "ep-a", sites[0].clone(), None);
    let _b = common::agent(&carol, "ep-b", sites[1].clone(), None);
    let alice = common::login(&srv, "alice");
    for dp in [false, true] {
        let mut cfg = common::config(&[("anl", "ep-a", "anl"), ("broad", "ep-b", "broad")], 3);
        if dp {
            cfg["dp"] = serde_json::to_value(DpConfig::laplace(50.0, 1.0)).unwrap();
        }
        let mut finals = Vec::new();
        for _ in 0..2 {
            let id = alice.create_experiment(&cfg).unwrap().experiment_id;
            alice.start_experiment(&id).unwrap();
            let view = alice.wait_finished(&id, WAIT).unwrap();
            assert_eq!(view.phase, Phase::Completed, "{view:?}");
            finals.push(view.current_global.clone());
        }
        assert_eq!(finals[0], finals[1]);
        let local = run_federation(&federation_config(&cfg), &sites).unwrap();
        assert_eq!(finals[0], BlobRef::of(&local.global.to_bytes()), "dp = {dp}");
    }
}

#[test]
fn offline_endpoint_fails_fast_naming_it() {
    let cfg = ServerConfig { clients_ready_timeout_ms: 800, ..common::fast_config() };
    let srv = common::server(&cfg);
    let sites = common::regression_sites(3);
    let bob = common::login(&srv, "bob");
    let carol = common::login(&srv, "carol");
    let _a = common::agent(&bob, "ep-a", sites[0].clone(), None);
    carol.register_endpoint("ep-silent", Default::default(), None).unwrap();
    let alice = common::login(&srv, "alice");
    let id = alice.create_experiment(&common::config(&[("anl", "ep-a", "anl"), ("broad", "ep-silent", "broad")], 2)).unwrap().experiment_id;
    std::thread::sleep(Duration::from_millis(700));
    alice.start_experiment(&id).unwrap();
    let view = alice.wait_finished(&id, WAIT).unwrap();
    match view.phase {
        Phase::Failed { reason } => assert!(reason.contains("ep-silent") && !reason.contains("ep-a"), "{reason}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn task_failure_policy() {
    let srv = common::server(&common::fast_config());
    let sites = common::regression_sites(4);
    let bob = common::login(&srv, "bob");
    let carol = common::login(&srv, "carol");
    let _a = common::agent(&bob, "ep-a", sites[0].clone(), None);
    let _b = common::agent(&carol, "ep-b", sites[1].clone(), None);
    let alice = common::login(&srv, "alice");
    let clients = [("anl", "ep-a", "anl"), ("broad", "ep-b", "not-here")];

    let id = alice.create_experiment(&common::config(&clients, 2)).unwrap().experiment_id;
    alice.start_experiment(&id).unwrap();
    match alice.wait_finished(&id, WAIT).unwrap().phase {
        Phase::Failed { reason } => assert!(reason.contains("client broad failed") && reason.contains("not-here"), "{reason}"),
        other => panic!("{other:?}"),
    }

    let mut cfg = common::config(&clients, 2);
    cfg["quorum"] = json!({"policy": "min_k", "k": 1});
    let id = alice.create_experiment(&cfg).unwrap().experiment_id;
    alice.start_experiment(&id).unwrap();
    let view = alice.wait_finished(&id, WAIT).unwrap();
    assert_eq!(view.phase, Phase::Completed);
    assert!(view.history.iter().all(|r| r.participants == ["anl"]));
}

#[test]
fn metrics_feed_is_gap_free_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServerConfig { metrics_dir: Some(dir.path().to_path_buf()), ..common::fast_config() };
    let srv = common::server(&cfg);
    let sites = common::regression_sites(5);
    let bob = common::login(&srv, "bob");
    let carol = common::login(&srv, "carol");
    let _a = common::agent(&bob, "ep-a", sites[0].clone(), None);
    let _b = common::agent(&carol, "ep-b", sites[1].clone(), None);
    let alice = common::login(&srv, "alice");
    let id = alice.create_experiment(&common::config(&[("anl", "ep-a", "anl"), ("broad", "ep-b", "broad")], 5)).unwrap().experiment_id;

    let empty = carol.metrics(&id, 0).unwrap();
    assert!(empty.records.is_empty());
    assert_eq!(empty.cursor, 0);
    assert_eq!(carol.metrics(&id, empty.cursor).unwrap(), empty);

    alice.start_experiment(&id).unwrap();
    let mut streamed = Vec::new();
    let mut cursor = 0;
    loop {
        let page = carol.metrics(&id, cursor).unwrap();
        streamed.extend(page.records);
        cursor = page.cursor;
        if carol.experiment(&id).unwrap().phase.is_terminal() && carol.metrics(&id, cursor).unwrap().records.is_empty() {
            break;
        }
        std::thread::sleep(Duration::from_millis(30));
    }
    assert_eq!(streamed.len(), 2 * 2 * 5);
    assert!(streamed.iter().enumerate().all(|(i, r)| r.seq == i as u64));
    for client in ["anl", "broad"] {
        let rounds: Vec<u32> = streamed.iter().filter(|r| r.client_id == client && r.phase == MetricPhase::Train).map(|r| r.round).collect();
        assert_eq!(rounds, vec![0, 1, 2, 3, 4]);
        assert_eq!(streamed.iter().filter(|r| r.client_id == client && r.phase == MetricPhase::Validate).count(), 5);
    }
    assert!(streamed.iter().all(|r| chrono::DateTime::parse_from_rfc3339(&r.timestamp).is_ok()));
    assert_eq!(carol.metrics(&id, 0).unwrap().records, streamed);
    assert_eq!(carol.metrics(&id, 7).unwrap().records, streamed[7..]);
    let on_disk = read_jsonl(&dir.path().join(format!("{id}.jsonl"))).unwrap();
    assert_eq!(on_disk, streamed);
    assert_eq!(carol.metrics("exp-none", 0).unwrap_err().status(), Some(404));
}

#[test]
fn cross_site_matrix_with_fine_tuning_and_explicit_models() {
    let srv = common::server(&common::fast_config());
    let sites = common::regression_sites(6);
    let bob = common::login(&srv, "bob");
    let carol = common::login(&srv, "carol");
    let _a = common::agent(&bob, "ep-a", sites[0].clone(), None);
    let _b = common::agent(&carol, "ep-b", sites[1].clone(), None);
    let alice = common::login(&srv, "alice");
    let mut cfg = common::config(&[("anl", "ep-a", "anl"), ("broad", "ep-b", "broad")], 2);
    cfg["cross_site"] = json!(true);
    cfg["fine_tune"] = json!({"epochs": 5});
    let id = alice.create_experiment(&cfg).unwrap().experiment_id;
    assert_eq!(alice.crosssite(&id).unwrap_err().status(), Some(404));
    alice.start_experiment(&id).unwrap();
    let view = alice.wait_finished(&id, WAIT).unwrap();
    assert_eq!(view.phase, Phase::Completed);
    let m = carol.crosssite(&id).unwrap();
    assert_eq!(m.clients, ["anl", "broad"]);
    assert_eq!(m.rows.iter().map(|r| r.model.as_str()).collect::<Vec<_>>(), ["global", "global+ft"]);
    for row in &m.rows {
        let cells: Vec<_> = row.cells.iter().map(|c| c.report.clone().unwrap()).collect();
        let brute = cells.iter().map(|r| r.n_samples as f64 * r.metric_value).sum::<f64>() / cells.iter().map(|r| r.n_samples as f64).sum::<f64>();
        assert!((row.weighted_average.unwrap() - brute).abs() < 1e-9);
        assert!(cells.iter().all(|r| r.metric_name == "mse"));
        assert_eq!(cells[0].n_samples as usize, sites[0].test.len());
    }
    let feed = carol.metrics(&id, 0).unwrap().records;
    assert_eq!(feed.iter().filter(|r| r.phase == MetricPhase::CrossSite).count(), 4);

    let junk = alice.put_blob(b"not a model").unwrap();
    let models = vec![
        CrossSiteModel { name: "final".into(), blob: view.current_global.clone(), fine_tune: false },
        CrossSiteModel { name: "broken".into(), blob: junk, fine_tune: false },
    ];
    let explicit = alice.run_crosssite(&id, models.clone()).unwrap();
    assert_eq!(explicit.rows[0].cells, m.rows[0].cells);
    assert!(explicit.rows[1].cells.iter().all(|c| c.report.is_none() && c.error.is_some()));
    assert_eq!(explicit.rows[1].weighted_average, None);
    assert_eq!(alice.run_crosssite(&id, models).unwrap(), explicit);
    assert_eq!(carol.run_crosssite(&id, vec![]).unwrap_err().status(), Some(403));
}

#[test]
fn raw_updates_never_reach_the_server() {
    let srv = common::server(&common::fast_config());
    let sites = common::regression_sites(7);
    let raw: Arc<Mutex<Vec<String>>> = Arc::default();
    let hook: RawUpdateHook = {
        let raw = raw.clone();
        Arc::new(move |_env, snap: &ModelSnapshot| {
            let mut r = raw.lock().unwrap();
            r.push(sha256_hex(&snap.to_bytes()));
            r.push(sha256_hex(&snap.params.to_bytes()));
        })
    };
    let bob = common::login(&srv, "bob");
    let carol = common::login(&srv, "carol");
    let _a = common::agent(&bob, "ep-a", sites[0].clone(), Some(hook.clone()));
    let _b = common::agent(&carol, "ep-b", sites[1].clone(), Some(hook));
    let alice = common::login(&srv, "alice");
    let mut cfg = common::config(&[("anl", "ep-a", "anl"), ("broad", "ep-b", "broad")], 5);
    cfg["dp"] = serde_json::to_value(DpConfig::laplace(1.0, 1.0)).unwrap();
    let id = alice.create_experiment(&cfg).unwrap().experiment_id;
    alice.start_experiment(&id).unwrap();
    assert_eq!(alice.wait_finished(&id, WAIT).unwrap().phase, Phase::Completed);
    let raw = raw.lock().unwrap();
    assert_eq!(raw.len(), 2 * 2 * 5);
    let stored: BTreeSet<String> = srv.state.blobs.hashes().unwrap().into_iter().collect();
    assert!(stored.len() >= 2 * 5 + 5);
    assert!(raw.iter().all(|h| !stored.contains(h)));
}
