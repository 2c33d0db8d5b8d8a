use std::net::SocketAddr;
use std::time::Duration;

use evidal_core::active::{run_experiment, ALConfig, ActiveLearner, DatasetOracle, QueryStrategy, RoundRecord};
use evidal_core::datagen::{generate_gaussian_mixture, MixtureSpec, PoolDataset};
use evidal_core::network::{init_model, EvidenceActivation, ModelState, NetworkConfig};
use evidal_service::{serve, AppState, QueueItem, Session, Status};
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};

fn pool() -> PoolDataset {
    let spec = MixtureSpec { n: 500, num_classes: 4, dim: 5, overlap_factor: 4.0, ..MixtureSpec::nct_toy(21) };
    generate_gaussian_mixture(&spec).unwrap()
}

fn model(pool: &PoolDataset) -> ModelState {
    init_model(&NetworkConfig {
        input_dim: pool.dim,
        hidden_dims: vec![16],
        embedding_dim: 8,
        projection_dim: 4,
        num_classes: pool.num_classes,
        evidence_activation: EvidenceActivation::Softplus,
        seed: 5,
    })
    .unwrap()
}

fn config(strategy: QueryStrategy) -> ALConfig {
    ALConfig { strategy, epochs_per_round: 3, max_budget_fraction: 0.05, seed: 8, ..ALConfig::default() }
}

async fn start(state: AppState) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, state));
    addr
}

async fn start_run(strategy: QueryStrategy) -> (SocketAddr, PoolDataset) {
    let pool = pool();
    let learner = ActiveLearner::new(config(strategy), &pool, model(&pool)).unwrap();
    let session = Session::new(pool.clone(), learner).unwrap();
    (start(AppState::attached(session)).await, pool)
}

async fn status(c: &Client, addr: SocketAddr) -> Status {
    c.get(format!("http://{addr}/api/status")).send().await.unwrap().json().await.unwrap()
}

async fn wait_idle(c: &Client, addr: SocketAddr) -> Status {
    for _ in 0..2000 {
        let s = status(c, addr).await;
        if s.phase != evidal_service::Phase::Training {
            return s;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    panic!("training never finished");
}

async fn post_label(c: &Client, addr: SocketAddr, body: Value) -> reqwest::Response {
    c.post(format!("http://{addr}/api/labels")).json(&body).send().await.unwrap()
}

fn without_time(h: &[RoundRecord]) -> Vec<RoundRecord> {
    h.iter().cloned().map(|r| RoundRecord { wall_time: 0.0, ..r }).collect()
}

#[tokio::test]
async fn detached_server_answers_503() {
    let addr = start(AppState::detached()).await;
    let c = Client::new();
    for path in ["status", "queue", "history"] {
        let r = c.get(format!("http://{addr}/api/{path}")).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::SERVICE_UNAVAILABLE, "{path}");
    }
    let r = post_label(&c, addr, json!({"sample_id": 0, "label": 0})).await;
    assert_eq!(r.status(), StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn fresh_run_status_and_queue() {
    let (addr, pool) = start_run(QueryStrategy::UncertaintyTopk).await;
    let c = Client::new();
    let s = status(&c, addr).await;
    assert_eq!((s.round, s.labels_fraction, s.num_classes), (0, 0.0, 4));
    assert_eq!(s.quota_remaining, 4); // ceil(0.01 * 400)
    assert!(s.last_round.is_none());
    let h: Vec<Value> = c.get(format!("http://{addr}/api/history")).send().await.unwrap().json().await.unwrap();
    assert!(h.is_empty());

    let q: Vec<QueueItem> = c.get(format!("http://{addr}/api/queue?limit=2")).send().await.unwrap().json().await.unwrap();
    assert_eq!(q.len(), 2);
    let all: Vec<QueueItem> = c.get(format!("http://{addr}/api/queue?limit=99")).send().await.unwrap().json().await.unwrap();
    assert_eq!(all.len(), 4);
    for item in &all {
        assert_eq!(item.round, 1);
        assert_eq!(item.display, [item.features[0], item.features[1]]);
        assert_eq!(item.features, pool.features(item.sample_id));
        assert!((0.0..=1.0).contains(&item.uncertainty));
        assert!((item.belief.iter().sum::<f64>() + item.uncertainty - 1.0).abs() < 1e-12);
    }
}

#[tokio::test]
async fn submission_rules() {
    let (addr, pool) = start_run(QueryStrategy::UncertaintyTopk).await;
    let c = Client::new();
    let q: Vec<QueueItem> = c.get(format!("http://{addr}/api/queue")).send().await.unwrap().json().await.unwrap();
    let first = q[0].sample_id;

    let r = post_label(&c, addr, json!({"sample_id": first, "label": 4})).await;
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let r = post_label(&c, addr, json!({"sample_id": first, "label": -1})).await;
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let r = c.post(format!("http://{addr}/api/labels")).body("{not json").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);

    let outsider = pool.train_pool_ids().into_iter().find(|id| q.iter().all(|i| i.sample_id != *id)).unwrap();
    let r = post_label(&c, addr, json!({"sample_id": outsider, "label": 0})).await;
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let r = post_label(&c, addr, json!({"sample_id": first, "label": 0, "round": 2})).await;
    assert_eq!(r.status(), StatusCode::CONFLICT);

    let r = post_label(&c, addr, json!({"sample_id": first, "label": 1, "annotator": "a", "timestamp": "t"})).await;
    assert_eq!(r.status(), StatusCode::OK);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body, json!({"accepted": true, "quota_remaining": 3}));
    assert_eq!(status(&c, addr).await.quota_remaining, 3);

    // first write wins
    let r = post_label(&c, addr, json!({"sample_id": first, "label": 2})).await;
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let rest: Vec<QueueItem> = c.get(format!("http://{addr}/api/queue")).send().await.unwrap().json().await.unwrap();
    assert_eq!(rest.len(), 3);
    assert!(rest.iter().all(|i| i.sample_id != first));

    for item in &rest {
        let r = post_label(&c, addr, json!({"sample_id": item.sample_id, "label": 0})).await;
        assert_eq!(r.status(), StatusCode::OK);
    }
    // the round may still be training; either way the queue is not open for round 1
    let s = wait_idle(&c, addr).await;
    assert_eq!(s.round, 1);
    assert_eq!(s.labels_fraction, 0.01);
    let r = post_label(&c, addr, json!({"sample_id": first, "label": 0})).await;
    assert_eq!(r.status(), StatusCode::CONFLICT);
}

#[tokio::test]
async fn training_phase_rejects_labels() {
    let (addr, _) = start_run(QueryStrategy::Random).await;
    let c = Client::new();
    let q: Vec<QueueItem> = c.get(format!("http://{addr}/api/queue")).send().await.unwrap().json().await.unwrap();
    for item in &q[..q.len() - 1] {
        post_label(&c, addr, json!({"sample_id": item.sample_id, "label": 0})).await;
    }
    let last = q.last().unwrap().sample_id;
    let r = post_label(&c, addr, json!({"sample_id": last, "label": 0})).await;
    assert_eq!(r.json::<Value>().await.unwrap()["quota_remaining"], 0);
    let s = status(&c, addr).await;
    if s.phase == evidal_service::Phase::Training {
        let r = post_label(&c, addr, json!({"sample_id": last, "label": 0})).await;
        assert_eq!(r.status(), StatusCode::CONFLICT);
        let r = c.get(format!("http://{addr}/api/queue")).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::CONFLICT);
        assert_eq!(s.quota_remaining, 0);
    }
    let s = wait_idle(&c, addr).await;
    assert_eq!(s.round, 1);
}

/// Field names allowed on the wire; none of them carries ground truth.
fn audit(v: &Value, allowed: &[&str]) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                assert!(allowed.contains(&k.as_str()), "unexpected field `{k}`");
                audit(child, allowed);
            }
        }
        Value::Array(a) => a.iter().for_each(|c| audit(c, allowed)),
        _ => {}
    }
}

async fn replay_ground_truth(strategy: QueryStrategy) {
    let (addr, pool) = start_run(strategy).await;
    let c = Client::new();
    let queue_fields = ["sample_id", "features", "display", "belief", "uncertainty", "round"];
    let status_fields = [
        "round", "labels_fraction", "quota_remaining", "K", "phase", "strategy", "total_rounds", "last_round", "error",
        "labels_used", "seed", "accuracy", "weighted_f1", "mean_u_correct", "mean_u_incorrect", "queried_ids",
        "wall_time",
    ];
    loop {
        let s: Value = c.get(format!("http://{addr}/api/status")).send().await.unwrap().json().await.unwrap();
        audit(&s, &status_fields);
        if s["phase"] == "finished" {
            break;
        }
        assert_eq!(s["phase"], "awaiting_labels");
        let q: Value = c.get(format!("http://{addr}/api/queue")).send().await.unwrap().json().await.unwrap();
        audit(&q, &queue_fields);
        let items: Vec<QueueItem> = serde_json::from_value(q).unwrap();
        if strategy == QueryStrategy::UncertaintyTopk && s["round"] != 0 {
            assert!(items.windows(2).all(|w| w[0].uncertainty >= w[1].uncertainty));
        }
        for item in items {
            let label = pool.sample(item.sample_id).label.unwrap();
            let r = post_label(&c, addr, json!({"sample_id": item.sample_id, "label": label, "annotator": "script"})).await;
            assert_eq!(r.status(), StatusCode::OK);
        }
        wait_idle(&c, addr).await;
    }
    let via_http: Vec<RoundRecord> = c.get(format!("http://{addr}/api/history")).send().await.unwrap().json().await.unwrap();
    let direct = run_experiment(&config(strategy), &pool, model(&pool), &mut DatasetOracle).unwrap();
    assert_eq!(via_http.len(), 5);
    assert_eq!(without_time(&via_http), without_time(&direct));
    for (a, b) in via_http.iter().zip(&direct) {
        assert_eq!(evidal_core::active::csv_row(a), evidal_core::active::csv_row(b));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_annotator_matches_dataset_oracle_topk() {
    replay_ground_truth(QueryStrategy::UncertaintyTopk).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_annotator_matches_dataset_oracle_random() {
    replay_ground_truth(QueryStrategy::Random).await;
}
