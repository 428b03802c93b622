use std::sync::Arc;

use pairsearch_core::catalog::ObjectSet;
use pairsearch_core::embed::{simulate_triplets, GaussianEmbedding, TripletStore};
use pairsearch_core::embed::TrainConfig;
use pairsearch_service::{serve_on, Catalog, DataDir, Query, Service, ServiceConfig, Started, Stepped};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};

const SIGMA: f64 = 0.05;

async fn spawn(service: Service) -> (String, Arc<Service>) {
    let service = Arc::new(service);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(serve_on(service.clone(), listener));
    (base, service)
}

fn planted(n: usize, seed: u64) -> ObjectSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ObjectSet::new(2, (0..2 * n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn exact_embedding(truth: &ObjectSet) -> GaussianEmbedding {
    GaussianEmbedding::new(truth.len(), truth.dim(), truth.data().to_vec(), vec![-8.0; truth.data().len()]).unwrap()
}

#[derive(Clone, Copy, PartialEq)]
enum Client {
    Probit,
    Random,
}

struct Outcome {
    steps: usize,
    found: bool,
    triplets_added: usize,
}

/// Plays one session against the API. The probit client picks the candidate
/// whose noisy distance to the target is smallest; the random client picks
/// uniformly. Both confirm the target as soon as it is shown.
async fn play(http: &reqwest::Client, base: &str, truth: &ObjectSet, target: usize, client: Client, rng: &mut ChaCha8Rng) -> Outcome {
    let started: Started = http.post(format!("{base}/sessions")).json(&json!({"client_tag": "script"})).send().await.unwrap().json().await.unwrap();
    let id = started.session_id;
    let mut query: Query = started.query;
    let mut steps = 0;
    loop {
        if query.candidates.iter().any(|c| c.id == target) {
            let resp: Value =
                http.post(format!("{base}/sessions/{id}/found")).json(&json!({"target": target})).send().await.unwrap().json().await.unwrap();
            assert_eq!(resp["summary"]["steps"], steps);
            let triplets_added = resp["summary"]["triplets_added"].as_u64().unwrap() as usize;
            return Outcome { steps, found: true, triplets_added };
        }
        let chosen = match client {
            Client::Random => query.candidates[rng.random_range(0..query.candidates.len())].id,
            Client::Probit => {
                let x_t = truth.row(target);
                let mut score = |c: usize| {
                    let d: f64 = truth.row(c).iter().zip(x_t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    d + SIGMA * rng.sample::<f64, _>(StandardNormal)
                };
                let scored: Vec<(f64, usize)> = query.candidates.iter().map(|c| (score(c.id), c.id)).collect();
                scored.into_iter().min_by(|a, b| a.0.total_cmp(&b.0)).unwrap().1
            }
        };
        let step: Stepped = http
            .post(format!("{base}/sessions/{id}/answer"))
            .json(&json!({"query_id": query.query_id, "chosen": chosen}))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        steps += 1;
        match step.query {
            Some(q) => {
                assert_eq!(q.step, steps + 1);
                query = q;
            }
            None => return Outcome { steps, found: false, triplets_added: 0 },
        }
    }
}

async fn mean_steps(http: &reqwest::Client, base: &str, truth: &ObjectSet, client: Client, sessions: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0;
    for _ in 0..sessions {
        let target = rng.random_range(0..truth.len());
        total += play(http, base, truth, target, client, &mut rng).await.steps;
    }
    total as f64 / sessions as f64
}

#[tokio::test(flavor = "multi_thread")]
async fn probit_client_beats_random_client_and_store_grows_by_three_per_step() {
    let truth = planted(200, 1);
    let cfg = ServiceConfig { candidates: 4, sigma_eps: Some(SIGMA), ..ServiceConfig::default() };
    let svc = Service::in_memory(cfg, Catalog::from_objects(&truth), Some(exact_embedding(&truth)), TripletStore::new(200)).unwrap();
    let (base, svc) = spawn(svc).await;
    let http = reqwest::Client::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut probit = 0;
    for _ in 0..50 {
        let before = svc.store_len();
        let target = rng.random_range(0..200);
        let out = play(&http, &base, &truth, target, Client::Probit, &mut rng).await;
        assert!(out.found);
        assert_eq!(out.triplets_added, 3 * out.steps);
        assert_eq!(svc.store_len() - before, 3 * out.steps);
        probit += out.steps;
    }
    let random = mean_steps(&http, &base, &truth, Client::Random, 50, 3).await;
    let probit = probit as f64 / 50.0;
    assert!(probit < random, "probit {probit}, random {random}");
    let health: Value = http.get(format!("{base}/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(health["triplets"].as_u64().unwrap() as usize, svc.store_len());
}

#[tokio::test(flavor = "multi_thread")]
async fn retraining_on_planted_triplets_helps_and_pins_running_sessions() {
    let truth = planted(100, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store = TripletStore::from_triplets(100, simulate_triplets(&truth, 20_000, 0.0, &mut rng).unwrap()).unwrap();
    let train = TrainConfig { dim: 2, epochs: 30, ..TrainConfig::default() };
    let cfg = ServiceConfig { candidates: 4, train, ..ServiceConfig::default() };
    let (base, _svc) = spawn(Service::in_memory(cfg, Catalog::from_objects(&truth), None, store).unwrap()).await;
    let http = reqwest::Client::new();

    let before = mean_steps(&http, &base, &truth, Client::Probit, 50, 6).await;
    let pinned: Started = http.post(format!("{base}/sessions")).send().await.unwrap().json().await.unwrap();
    assert_eq!(pinned.version, 0);

    let summary: Value = http.post(format!("{base}/admin/retrain")).send().await.unwrap().json().await.unwrap();
    assert_eq!(summary["version"], 1);

    let info: Value = http.get(format!("{base}/sessions/{}", pinned.session_id)).send().await.unwrap().json().await.unwrap();
    assert_eq!(info["version"], 0);
    let c = pinned.query.candidates[0].id;
    let step: Value = http
        .post(format!("{base}/sessions/{}/answer", pinned.session_id))
        .json(&json!({"query_id": pinned.query.query_id, "chosen": c}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(step["status"], "running");
    let fresh: Started = http.post(format!("{base}/sessions")).send().await.unwrap().json().await.unwrap();
    assert_eq!(fresh.version, 1);

    let after = mean_steps(&http, &base, &truth, Client::Probit, 50, 7).await;
    assert!(after < before, "before retrain {before}, after {after}");
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_use_the_json_envelope() {
    let truth = planted(30, 8);
    let svc = Service::in_memory(ServiceConfig::default(), Catalog::numbered(30), Some(exact_embedding(&truth)), TripletStore::new(30)).unwrap();
    let (base, _svc) = spawn(svc).await;
    let http = reqwest::Client::new();
    let expect = |status: u16, code: &'static str| {
        move |resp: reqwest::Response| async move {
            assert_eq!(resp.status().as_u16(), status);
            let body: Value = resp.json().await.unwrap();
            assert_eq!(body["error"], code);
            assert!(body["detail"].as_str().is_some_and(|d| !d.is_empty()));
        }
    };
    expect(404, "not_found")(http.get(format!("{base}/objects/30")).send().await.unwrap()).await;
    expect(400, "bad_request")(http.get(format!("{base}/objects/abc")).send().await.unwrap()).await;
    expect(404, "not_found")(http.post(format!("{base}/sessions/99/answer")).json(&json!({"query_id": 1, "chosen": 0})).send().await.unwrap()).await;
    expect(400, "bad_request")(http.post(format!("{base}/sessions")).body("{not json").send().await.unwrap()).await;
    expect(409, "conflict")(http.post(format!("{base}/admin/retrain")).send().await.unwrap()).await;

    let started: Started = http.post(format!("{base}/sessions")).send().await.unwrap().json().await.unwrap();
    let q = started.query;
    let answer = |query_id: u64, chosen: usize| {
        http.post(format!("{base}/sessions/{}/answer", started.session_id)).json(&json!({"query_id": query_id, "chosen": chosen})).send()
    };
    let outsider = (0..30).find(|i| q.candidates.iter().all(|c| c.id != *i)).unwrap();
    expect(400, "bad_request")(answer(q.query_id, outsider).await.unwrap()).await;
    assert_eq!(answer(q.query_id, q.candidates[0].id).await.unwrap().status().as_u16(), 200);
    expect(409, "conflict")(answer(q.query_id, q.candidates[0].id).await.unwrap()).await;

    let object: Value = http.get(format!("{base}/objects/3")).send().await.unwrap().json().await.unwrap();
    assert_eq!(object, json!({"id": 3, "label": "object 3", "image_ref": ""}));
    let listing: Value = http.get(format!("{base}/sessions")).send().await.unwrap().json().await.unwrap();
    assert_eq!(listing.as_array().unwrap().len(), 1);
    assert_eq!(listing[0]["step"], 1);

    let (base, _svc) = spawn(Service::unloaded(ServiceConfig::default())).await;
    expect(503, "unavailable")(http.post(format!("{base}/sessions")).send().await.unwrap()).await;
    let health: Value = http.get(format!("{base}/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(health["status"], "unloaded");
}

#[tokio::test(flavor = "multi_thread")]
async fn restart_restores_version_and_counters() {
    let dir = tempfile::tempdir().unwrap();
    let truth = planted(60, 9);
    let cfg = ServiceConfig { candidates: 2, train: TrainConfig { epochs: 5, ..TrainConfig::default() }, ..ServiceConfig::default() };
    let (counts, version, completed) = {
        let svc = Service::open(cfg.clone(), Catalog::numbered(60), DataDir::new(dir.path()).unwrap()).unwrap();
        let (base, svc) = spawn(svc).await;
        let http = reqwest::Client::new();
        mean_steps(&http, &base, &truth, Client::Probit, 5, 10).await;
        http.post(format!("{base}/admin/retrain")).send().await.unwrap().error_for_status().unwrap();
        mean_steps(&http, &base, &truth, Client::Probit, 3, 11).await;
        (svc.counts(), svc.version(), svc.sessions_completed())
    };
    assert_eq!(version, 1);
    assert_eq!(completed, 8);
    let reopened = Service::open(cfg, Catalog::numbered(60), DataDir::new(dir.path()).unwrap()).unwrap();
    assert_eq!(reopened.version(), version);
    assert_eq!(reopened.counts(), counts);
    assert_eq!(reopened.sessions_completed(), completed);
    assert!(reopened.current_model().unwrap().sigma_eps > 0.0);
}
