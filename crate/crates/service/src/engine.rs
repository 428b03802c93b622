use std::collections::HashMap;
use std::io::Read;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::DVector;
use pairsearch_core::belief::GaussianBelief;
use pairsearch_core::catalog::{KdTree, ObjectSet};
use pairsearch_core::embed::{train, GaussianEmbedding, TripletObservation, TripletStore};
use pairsearch_core::learn2search::estimate_answer_noise;
use pairsearch_core::rng::{self, Purpose};
use pairsearch_core::search::{SearchConfig, SearchSession, SearchSpace, StopRule};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::error::ServiceError;
use crate::persist::{DataDir, Meta};

type Result<T> = std::result::Result<T, ServiceError>;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// What users see of each object.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    labels: Vec<String>,
    image_refs: Vec<String>,
}

impl Catalog {
    pub fn new(labels: Vec<String>, image_refs: Vec<String>) -> Result<Self> {
        if labels.len() != image_refs.len() {
            return Err(ServiceError::BadRequest(format!(
                "{} labels but {} image refs",
                labels.len(),
                image_refs.len()
            )));
        }
        Ok(Catalog { labels, image_refs })
    }

    /// Objects labelled `object 0`, `object 1`, … without images.
    pub fn numbered(n: usize) -> Self {
        Catalog { labels: (0..n).map(|i| format!("object {i}")).collect(), image_refs: vec![String::new(); n] }
    }

    pub fn from_objects(objects: &ObjectSet) -> Self {
        let n = objects.len();
        Catalog {
            labels: (0..n).map(|i| objects.label(i).map_or_else(|| format!("object {i}"), str::to_string)).collect(),
            image_refs: (0..n).map(|i| objects.image_ref(i).unwrap_or("").to_string()).collect(),
        }
    }

    /// Reads `id,label[,image_ref,…]` with a header row; further columns
    /// (e.g. features) are ignored. Ids must cover `0..n-1`.
    pub fn read_csv<R: Read>(reader: R) -> pairsearch_core::Result<Self> {
        use pairsearch_core::Error;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 || &headers[0] != "id" || &headers[1] != "label" {
            return Err(Error::Parse { line: 1, detail: "expected header `id,label[,image_ref]`".into() });
        }
        let has_image = headers.get(2) == Some("image_ref");
        let mut rows: Vec<Option<(String, String)>> = Vec::new();
        for (idx, record) in rdr.records().enumerate() {
            let record = record?;
            let line = idx + 2;
            let id: usize =
                record[0].parse().map_err(|_| Error::Parse { line, detail: format!("bad id `{}`", &record[0]) })?;
            if id >= rows.len() {
                rows.resize(id + 1, None);
            }
            if rows[id].is_some() {
                return Err(Error::Parse { line, detail: format!("duplicate id {id}") });
            }
            let image = if has_image { record.get(2).unwrap_or("").to_string() } else { String::new() };
            rows[id] = Some((record.get(1).unwrap_or("").to_string(), image));
        }
        let mut labels = Vec::with_capacity(rows.len());
        let mut image_refs = Vec::with_capacity(rows.len());
        for (id, row) in rows.into_iter().enumerate() {
            let (l, i) = row.ok_or_else(|| Error::Parse { line: 0, detail: format!("missing id {id}") })?;
            labels.push(l);
            image_refs.push(i);
        }
        Ok(Catalog { labels, image_refs })
    }

    pub fn load_csv(path: impl AsRef<Path>) -> pairsearch_core::Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn candidate(&self, id: usize) -> Option<Candidate> {
        Some(Candidate { id, label: self.labels.get(id)?.clone(), image_ref: self.image_refs[id].clone() })
    }
}

/// One immutable embedding version with its lookup index. Sessions hold an
/// `Arc` to the version they started on.
#[derive(Debug)]
pub struct ModelVersion {
    pub version: u64,
    pub sigma_eps: f64,
    embedding: GaussianEmbedding,
    means: ObjectSet,
    variances: Vec<f64>,
    index: KdTree,
}

impl ModelVersion {
    fn new(version: u64, embedding: GaussianEmbedding, sigma_eps: f64) -> pairsearch_core::Result<Self> {
        let means = embedding.means_as_objects()?;
        let index = KdTree::build(&means);
        let variances = embedding.variances();
        Ok(ModelVersion { version, sigma_eps, embedding, means, variances, index })
    }

    pub fn embedding(&self) -> &GaussianEmbedding {
        &self.embedding
    }

    pub fn space(&self) -> SearchSpace<'_> {
        SearchSpace { objects: &self.means, index: &self.index, variances: Some(&self.variances) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: usize,
    pub label: String,
    pub image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: u64,
    /// 1-based number of this query within its session.
    pub step: usize,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionState {
    Running,
    Found,
    /// The step budget ran out; the user may still confirm a target.
    StepLimit,
    /// Too few unshown objects remain for another query.
    Exhausted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Started {
    pub session_id: u64,
    pub version: u64,
    pub query: Query,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stepped {
    pub status: SessionState,
    pub query: Option<Query>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoundSummary {
    pub session_id: u64,
    pub target: usize,
    /// Answered queries.
    pub steps: usize,
    pub triplets_added: usize,
    pub version: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: u64,
    pub client_tag: Option<String>,
    pub step: usize,
    pub status: SessionState,
    pub version: u64,
    pub created_unix: u64,
    pub idle_secs: u64,
    pub query: Option<Query>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrainSummary {
    pub version: u64,
    pub triplets: usize,
    pub sigma_eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: u64,
    pub objects: usize,
    pub triplets: usize,
    pub sessions: usize,
}

struct SessionRecord {
    client_tag: Option<String>,
    model: Arc<ModelVersion>,
    search: SearchSession,
    outstanding: Option<Query>,
    last_candidates: Vec<usize>,
    /// `(winner, loser, step)` for every pairwise outcome.
    outcomes: Vec<(usize, usize, usize)>,
    steps: usize,
    state: SessionState,
    created: SystemTime,
    touched: Instant,
}

/// The session engine behind the HTTP layer. All methods are synchronous
/// and safe to call from several threads.
pub struct Service {
    config: ServiceConfig,
    catalog: Option<Catalog>,
    model: RwLock<Option<Arc<ModelVersion>>>,
    store: Mutex<TripletStore>,
    sessions: Mutex<HashMap<u64, Arc<Mutex<SessionRecord>>>>,
    next_session: AtomicU64,
    next_query: AtomicU64,
    completed: AtomicU64,
    data: Option<DataDir>,
}

impl Service {
    /// A service without a catalog; every session request is refused.
    pub fn unloaded(config: ServiceConfig) -> Self {
        Service {
            config,
            catalog: None,
            model: RwLock::new(None),
            store: Mutex::new(TripletStore::new(0)),
            sessions: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
            next_query: AtomicU64::new(1),
            completed: AtomicU64::new(0),
            data: None,
        }
    }

    /// In-memory service. Without an embedding, objects start near the
    /// origin with unit variance.
    pub fn in_memory(
        config: ServiceConfig,
        catalog: Catalog,
        embedding: Option<GaussianEmbedding>,
        store: TripletStore,
    ) -> Result<Self> {
        Self::assemble(config, catalog, embedding, store, Meta::default(), None)
    }

    /// Service persisted under `data`. Existing triplets, embedding and
    /// counters are picked up from there.
    pub fn open(config: ServiceConfig, catalog: Catalog, data: DataDir) -> Result<Self> {
        let store = data.load_store(catalog.len())?;
        let embedding = data.load_embedding()?;
        let meta = data.load_meta()?.unwrap_or_default();
        Self::assemble(config, catalog, embedding, store, meta, Some(data))
    }

    fn assemble(
        config: ServiceConfig,
        catalog: Catalog,
        embedding: Option<GaussianEmbedding>,
        store: TripletStore,
        meta: Meta,
        data: Option<DataDir>,
    ) -> Result<Self> {
        config.validate().map_err(ServiceError::BadRequest)?;
        let n = catalog.len();
        if n < config.candidates {
            return Err(ServiceError::BadRequest(format!("catalog has {n} objects, fewer than one query")));
        }
        if store.num_objects() != n {
            return Err(ServiceError::BadRequest(format!("store covers {} objects, catalog {n}", store.num_objects())));
        }
        let embedding = match embedding {
            Some(e) => e,
            None => GaussianEmbedding::initial(n, config.train.dim, &mut rng::stream(config.seed, Purpose::Train, 0))?,
        };
        if embedding.len() != n || embedding.dim() != config.train.dim {
            return Err(ServiceError::BadRequest(format!(
                "embedding is {}×{}, expected {n}×{}",
                embedding.len(),
                embedding.dim(),
                config.train.dim
            )));
        }
        let sigma = config.sigma_eps.unwrap_or(if meta.sigma_eps > 0.0 { meta.sigma_eps } else { 1.0 });
        let model = ModelVersion::new(meta.version, embedding, sigma)?;
        Ok(Service {
            catalog: Some(catalog),
            model: RwLock::new(Some(Arc::new(model))),
            store: Mutex::new(store),
            sessions: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
            next_query: AtomicU64::new(1),
            completed: AtomicU64::new(meta.sessions_completed),
            data,
            config,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn current_model(&self) -> Option<Arc<ModelVersion>> {
        self.model.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn version(&self) -> u64 {
        self.current_model().map_or(0, |m| m.version)
    }

    pub fn store_len(&self) -> usize {
        lock(&self.store).len()
    }

    /// Per-object triplet counts.
    pub fn counts(&self) -> Vec<usize> {
        lock(&self.store).counts().to_vec()
    }

    pub fn sessions_completed(&self) -> u64 {
        self.completed.load(Ordering::SeqCst)
    }

    pub fn health(&self) -> Health {
        Health {
            status: if self.catalog.is_some() { "ok" } else { "unloaded" }.to_string(),
            version: self.version(),
            objects: self.catalog.as_ref().map_or(0, Catalog::len),
            triplets: self.store_len(),
            sessions: lock(&self.sessions).len(),
        }
    }

    pub fn object(&self, id: usize) -> Result<Candidate> {
        let catalog = self.catalog.as_ref().ok_or_else(|| ServiceError::Unavailable("no catalog loaded".into()))?;
        catalog.candidate(id).ok_or_else(|| ServiceError::NotFound(format!("object {id}")))
    }

    pub fn create_session(&self, client_tag: Option<String>) -> Result<Started> {
        self.expire_idle(Instant::now());
        let (Some(catalog), Some(model)) = (self.catalog.as_ref(), self.current_model()) else {
            return Err(ServiceError::Unavailable("no catalog loaded".into()));
        };
        let id = self.next_session.fetch_add(1, Ordering::SeqCst);
        let mut cfg = SearchConfig::new(model.sigma_eps, StopRule::TargetInQuery, self.config.max_steps, self.config.seed)?;
        cfg.use_effective_noise = self.config.use_effective_noise;
        let belief = GaussianBelief::isotropic(DVector::zeros(model.embedding.dim()), 1.0)?;
        let stream = rng::stream(self.config.seed ^ model.version.wrapping_mul(0x9e37_79b9_7f4a_7c15), Purpose::Search, id);
        let mut rec = SessionRecord {
            client_tag,
            search: SearchSession::with_rng(belief, cfg, stream),
            model: model.clone(),
            outstanding: None,
            last_candidates: Vec::new(),
            outcomes: Vec::new(),
            steps: 0,
            state: SessionState::Running,
            created: SystemTime::now(),
            touched: Instant::now(),
        };
        let query = self.next_query(&mut rec, catalog)?;
        lock(&self.sessions).insert(id, Arc::new(Mutex::new(rec)));
        log::debug!("session {id} started on version {}", model.version);
        Ok(Started { session_id: id, version: model.version, query })
    }

    fn next_query(&self, rec: &mut SessionRecord, catalog: &Catalog) -> Result<Query> {
        let space = rec.model.space();
        let mut ids = Vec::with_capacity(self.config.candidates);
        for _ in 0..self.config.candidates / 2 {
            let (i, j) = rec.search.draw_pair(&space)?;
            ids.extend([i, j]);
        }
        let query = Query {
            query_id: self.next_query.fetch_add(1, Ordering::SeqCst),
            step: rec.steps + 1,
            candidates: ids.iter().map(|&id| catalog.candidate(id).expect("embedding and catalog agree")).collect(),
        };
        rec.outstanding = Some(query.clone());
        Ok(query)
    }

    fn session(&self, id: u64) -> Result<Arc<Mutex<SessionRecord>>> {
        lock(&self.sessions).get(&id).cloned().ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    pub fn session_info(&self, id: u64) -> Result<SessionInfo> {
        let rec = self.session(id)?;
        let rec = lock(&rec);
        Ok(info(id, &rec))
    }

    pub fn list_sessions(&self) -> Vec<SessionInfo> {
        let all: Vec<_> = lock(&self.sessions).iter().map(|(id, r)| (*id, r.clone())).collect();
        let mut out: Vec<SessionInfo> = all.into_iter().map(|(id, r)| info(id, &lock(&r))).collect();
        out.sort_by_key(|s| s.session_id);
        out
    }

    /// The user picked `chosen` among the candidates of query `query_id`.
    /// Each other candidate loses to it; the losers are applied in
    /// ascending id order.
    pub fn answer(&self, id: u64, query_id: u64, chosen: usize) -> Result<Stepped> {
        let catalog = self.catalog.as_ref().ok_or_else(|| ServiceError::Unavailable("no catalog loaded".into()))?;
        let rec = self.session(id)?;
        let mut rec = lock(&rec);
        if rec.state != SessionState::Running {
            return Err(ServiceError::Conflict(format!("session {id} is closed")));
        }
        let query = match &rec.outstanding {
            Some(q) if q.query_id == query_id => q.clone(),
            _ => return Err(ServiceError::Conflict(format!("query {query_id} is stale or unknown"))),
        };
        let candidates: Vec<usize> = query.candidates.iter().map(|c| c.id).collect();
        if !candidates.contains(&chosen) {
            return Err(ServiceError::BadRequest(format!("{chosen} is not a candidate of query {query_id}")));
        }
        let mut losers: Vec<usize> = candidates.iter().copied().filter(|&c| c != chosen).collect();
        losers.sort_unstable();
        let model = rec.model.clone();
        let space = model.space();
        for &loser in &losers {
            if let Err(e) = rec.search.apply_comparison(&space, chosen, loser) {
                log::warn!("session {id}: skipping update {chosen} over {loser}: {e}");
            }
            let step = rec.steps;
            rec.outcomes.push((chosen, loser, step));
        }
        rec.steps += 1;
        rec.outstanding = None;
        rec.last_candidates = candidates;
        rec.touched = Instant::now();
        let remaining = model.embedding.len() - rec.search.used().len();
        if rec.steps >= self.config.max_steps {
            rec.state = SessionState::StepLimit;
        } else if remaining < self.config.candidates {
            rec.state = SessionState::Exhausted;
        }
        let query = match rec.state {
            SessionState::Running => Some(self.next_query(&mut rec, catalog)?),
            _ => None,
        };
        Ok(Stepped { status: rec.state, query })
    }

    /// Closes a session with its confirmed target and commits its outcomes
    /// as triplets. Outcomes involving the target itself are dropped.
    pub fn found(&self, id: u64, target: usize) -> Result<FoundSummary> {
        let rec = self.session(id)?;
        let mut rec = lock(&rec);
        if rec.state == SessionState::Found {
            return Err(ServiceError::Conflict(format!("session {id} is already closed")));
        }
        let shown = match &rec.outstanding {
            Some(q) => q.candidates.iter().map(|c| c.id).collect(),
            None => rec.last_candidates.clone(),
        };
        if !shown.contains(&target) {
            return Err(ServiceError::BadRequest(format!("{target} was not among the last candidates")));
        }
        let triplets = rec
            .outcomes
            .iter()
            .filter(|(w, l, _)| *w != target && *l != target)
            .map(|&(w, l, step)| TripletObservation::new(w, l, target, id, step as u64))
            .collect::<pairsearch_core::Result<Vec<_>>>()?;
        {
            let mut store = lock(&self.store);
            store.extend(&triplets)?;
            let completed = self.completed.fetch_add(1, Ordering::SeqCst) + 1;
            if let Some(data) = &self.data {
                data.append_triplets(&triplets)?;
                data.save_meta(&Meta { version: self.version(), sigma_eps: rec.model.sigma_eps, sessions_completed: completed })?;
            }
        }
        rec.state = SessionState::Found;
        rec.outstanding = None;
        rec.touched = Instant::now();
        Ok(FoundSummary { session_id: id, target, steps: rec.steps, triplets_added: triplets.len(), version: rec.model.version })
    }

    /// Retrains the embedding on all triplets, warm-started from the current
    /// version. Sessions already running keep the version they started on.
    pub fn retrain(&self) -> Result<RetrainSummary> {
        let store = lock(&self.store);
        if store.is_empty() {
            return Err(ServiceError::Conflict("no triplets to train on".into()));
        }
        let current = self.current_model().ok_or_else(|| ServiceError::Unavailable("no catalog loaded".into()))?;
        let mut cfg = self.config.train.clone();
        cfg.rng_seed ^= (current.version + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let (embedding, _) = train(&store, &cfg, Some(current.embedding.clone()))
            .map_err(|e| ServiceError::Internal(format!("training failed, keeping version {}: {e}", current.version)))?;
        let means = embedding.means_as_objects()?;
        let sigma = match self.config.sigma_eps {
            Some(s) => s,
            None => estimate_answer_noise(&means, store.triplets())?,
        };
        let model = ModelVersion::new(current.version + 1, embedding, sigma)?;
        if let Some(data) = &self.data {
            data.save_embedding(&model.embedding)?;
            data.save_meta(&Meta {
                version: model.version,
                sigma_eps: sigma,
                sessions_completed: self.completed.load(Ordering::SeqCst),
            })?;
        }
        let summary = RetrainSummary { version: model.version, triplets: store.len(), sigma_eps: sigma };
        *self.model.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(model));
        log::info!("retrained on {} triplets: version {}, σ_ε = {sigma:.4}", summary.triplets, summary.version);
        Ok(summary)
    }

    /// Drops sessions idle for longer than the configured expiry. Returns
    /// how many were removed.
    pub fn expire_idle(&self, now: Instant) -> usize {
        let expiry = self.config.idle_expiry;
        let mut sessions = lock(&self.sessions);
        let before = sessions.len();
        sessions.retain(|_, r| now.saturating_duration_since(lock(r).touched) <= expiry);
        before - sessions.len()
    }
}

fn info(id: u64, rec: &SessionRecord) -> SessionInfo {
    SessionInfo {
        session_id: id,
        client_tag: rec.client_tag.clone(),
        step: rec.steps,
        status: rec.state,
        version: rec.model.version,
        created_unix: rec.created.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        idle_secs: rec.touched.elapsed().as_secs(),
        query: rec.outstanding.clone(),
    }
}
