//! Searching without features: alternate searches on the current learned
//! embedding with retraining on the triplets those searches produced.
//!
//! Two changes to plain search apply when objects are uncertain: lookups use
//! the Mahalanobis distance under each object's variance, and the answer
//! noise is inflated by the objects' spread along the query normal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::GaussianBelief;
use crate::catalog::{KdTree, ObjectSet};
use crate::embed::{train, GaussianEmbedding, TrainConfig, TripletObservation, TripletStore};
use crate::geometry::bisect;
use crate::oracle::{OracleConfig, SimulatedOracle};
use crate::rng::{self, Purpose};
use crate::search::{drive_session, SearchConfig, SearchSession, SearchSpace, SimulatedUser, StopRule};
use crate::stats::{mean_and_covariance, sorted_eigen};
use crate::{Error, Result};

/// `√(σ_ε² + wᵀΨ_i w + wᵀΨ_j w)` for diagonal `Ψ`.
pub fn effective_noise(psi_i: &[f64], psi_j: &[f64], w: &[f64], sigma_eps: f64) -> Result<f64> {
    if psi_i.len() != w.len() || psi_j.len() != w.len() {
        return Err(Error::DimensionMismatch { expected: w.len(), got: psi_i.len().min(psi_j.len()) });
    }
    if psi_i.iter().chain(psi_j).any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("variances must be non-negative".into()));
    }
    Ok((sigma_eps * sigma_eps + spread_along(psi_i, w) + spread_along(psi_j, w)).sqrt())
}

fn spread_along(psi: &[f64], w: &[f64]) -> f64 {
    psi.iter().zip(w).map(|(p, x)| p * x * x).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    /// Learned embedding, retrained on the schedule.
    GaussEmbed,
    /// Search directly on the true features.
    GroundTruth,
    /// A fixed random embedding (`ν ~ N(0, I)`, `Ψ = I`), never trained.
    RandomFixed,
}

impl EmbeddingMode {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingMode::GaussEmbed => "gauss-embed",
            EmbeddingMode::GroundTruth => "ground-truth",
            EmbeddingMode::RandomFixed => "random-fixed",
        }
    }
}

/// Retrain points `1, 2, 4, …, 2^max_pow` (episode counts).
pub fn power_schedule(max_pow: u32) -> Vec<usize> {
    (0..=max_pow).map(|k| 1usize << k).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlindConfig {
    pub mode: EmbeddingMode,
    pub episodes: usize,
    /// Retrain after these episode counts.
    pub schedule: Vec<usize>,
    pub train: TrainConfig,
    /// Answer noise assumed when searching the learned embedding. `None`
    /// re-estimates it from the stored triplets after every retrain (1.0
    /// before the first one).
    pub embed_sigma_eps: Option<f64>,
    /// Simulated user, answering from the true features.
    pub oracle: OracleConfig,
    pub window: usize,
    pub seed: u64,
    /// Defaults to the catalog size, i.e. until the catalog is exhausted.
    pub max_steps: Option<usize>,
    pub use_effective_noise: bool,
}

impl BlindConfig {
    pub fn new(mode: EmbeddingMode, episodes: usize, train: TrainConfig, oracle: OracleConfig, seed: u64) -> Self {
        BlindConfig {
            mode,
            episodes,
            schedule: power_schedule(13),
            train,
            embed_sigma_eps: None,
            oracle,
            window: 1000,
            seed,
            max_steps: None,
            use_effective_noise: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub target: usize,
    pub queries: usize,
    /// Mean over the trailing window (shorter at the start).
    pub window_mean: f64,
}

#[derive(Debug, Clone)]
pub struct BlindRun {
    pub mode: EmbeddingMode,
    pub rows: Vec<EpisodeRow>,
    /// Embedding after each retrain, keyed by episode count.
    pub snapshots: Vec<(usize, GaussianEmbedding)>,
    pub store: TripletStore,
    /// Mean `wᵀΨw` over the queries of each episode (zero without variances).
    pub query_spread: Vec<f64>,
}

impl BlindRun {
    pub fn queries(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.queries).collect()
    }
}

/// Mean of `values[center - window/2 .. center + window/2]`, clipped to the
/// available range. `center` is a 1-based episode number.
pub fn centered_window_mean(values: &[usize], center: usize, window: usize) -> f64 {
    let lo = center.saturating_sub(window / 2);
    let hi = (center + window / 2).min(values.len());
    let slice = &values[lo.min(hi)..hi];
    if slice.is_empty() {
        return f64::NAN;
    }
    slice.iter().sum::<usize>() as f64 / slice.len() as f64
}

/// Framework state: the current embedding, its index, and the triplets.
pub struct Learn2SearchState {
    pub embedding: GaussianEmbedding,
    pub store: TripletStore,
    means: ObjectSet,
    variances: Vec<f64>,
    index: KdTree,
    /// Answer noise in embedding units.
    pub sigma_eps: f64,
    pub episode: usize,
}

impl Learn2SearchState {
    pub fn new(embedding: GaussianEmbedding, store: TripletStore) -> Result<Self> {
        let means = embedding.means_as_objects()?;
        let index = KdTree::build(&means);
        let variances = embedding.variances();
        Ok(Learn2SearchState { embedding, store, means, variances, index, sigma_eps: 1.0, episode: 0 })
    }

    pub fn space(&self) -> SearchSpace<'_> {
        SearchSpace { objects: &self.means, index: &self.index, variances: Some(&self.variances) }
    }

    /// Swaps in a new embedding and rebuilds the index over its means.
    pub fn replace_embedding(&mut self, embedding: GaussianEmbedding) -> Result<()> {
        self.means = embedding.means_as_objects()?;
        self.index = KdTree::build(&self.means);
        self.variances = embedding.variances();
        self.embedding = embedding;
        Ok(())
    }

    /// Retrains from the current embedding on all stored triplets, then
    /// re-fits the answer noise to the new means.
    pub fn retrain(&mut self, config: &TrainConfig) -> Result<()> {
        let (emb, _) = train(&self.store, config, Some(self.embedding.clone()))?;
        self.replace_embedding(emb)?;
        self.sigma_eps = estimate_answer_noise(&self.means, self.store.triplets())?;
        Ok(())
    }
}

fn mean_spread(space: &SearchSpace<'_>, log: &[crate::search::QueryRecord]) -> f64 {
    let Some(var) = space.variances else { return 0.0 };
    let d = space.objects.dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for r in log {
        if let Ok(h) = bisect(space.objects.row(r.i), space.objects.row(r.j)) {
            total += spread_along(&var[r.i * d..(r.i + 1) * d], h.normal());
            total += spread_along(&var[r.j * d..(r.j + 1) * d], h.normal());
            count += 2;
        }
    }
    if count == 0 { 0.0 } else { total / count as f64 }
}

/// Runs `cfg.episodes` searches with uniformly drawn targets. Answers come
/// from a simulated user who sees `truth`; every answered query whose pair
/// excludes the target becomes the triplet `(winner, loser; target)`.
pub fn run_blind(truth: &ObjectSet, cfg: &BlindConfig) -> Result<BlindRun> {
    let n = truth.len();
    if n < 3 {
        return Err(Error::NotEnoughObjects);
    }
    if cfg.window == 0 || cfg.window > cfg.episodes.max(1) {
        return Err(Error::InvalidArgument(format!("window {} must be in 1..={}", cfg.window, cfg.episodes)));
    }
    let mut init_rng = rng::stream(cfg.seed, Purpose::Train, u64::MAX >> 16);
    let embedding = match cfg.mode {
        EmbeddingMode::GaussEmbed => GaussianEmbedding::initial(n, cfg.train.dim, &mut init_rng)?,
        EmbeddingMode::RandomFixed => {
            let nu = (0..n * cfg.train.dim).map(|_| init_rng.sample(rand_distr::StandardNormal)).collect();
            GaussianEmbedding::new(n, cfg.train.dim, nu, vec![0.0; n * cfg.train.dim])?
        }
        EmbeddingMode::GroundTruth => GaussianEmbedding::prior(n, truth.dim())?,
    };
    let mut state = Learn2SearchState::new(embedding, TripletStore::new(n))?;
    let truth_index = KdTree::build(truth);
    let max_steps = cfg.max_steps.unwrap_or(n);
    let mut target_rng = rng::stream(cfg.seed, Purpose::Target, 0);
    let mut rows: Vec<EpisodeRow> = Vec::with_capacity(cfg.episodes);
    let mut snapshots = Vec::new();
    let mut query_spread = Vec::with_capacity(cfg.episodes);
    let mut window_sum = 0usize;

    for episode in 1..=cfg.episodes {
        let target = target_rng.random_range(0..n);
        let (space, belief, sigma) = match cfg.mode {
            EmbeddingMode::GroundTruth => (
                SearchSpace::euclidean(truth, &truth_index),
                GaussianBelief::from_objects(truth, 1e-6)?,
                match cfg.oracle.noise {
                    crate::oracle::Noise::Probit { sigma } => sigma,
                    crate::oracle::Noise::Noiseless => 1e-3,
                },
            ),
            _ => (
                state.space(),
                GaussianBelief::isotropic(nalgebra::DVector::zeros(state.embedding.dim()), 1.0)?,
                cfg.embed_sigma_eps.unwrap_or(state.sigma_eps),
            ),
        };
        let mut search_cfg = SearchConfig::new(sigma, StopRule::TargetInQuery, max_steps, cfg.seed)?;
        search_cfg.use_effective_noise = cfg.use_effective_noise;
        let mut session = SearchSession::for_episode(belief, search_cfg, episode as u64);
        let mut user = SimulatedUser {
            oracle: SimulatedOracle::for_episode(cfg.oracle, episode as u64),
            truth,
            target,
        };
        let result = drive_session(&mut session, &space, &mut user)?;
        query_spread.push(mean_spread(&space, &result.log));

        let mut fresh = Vec::new();
        for (step, r) in result.log.iter().enumerate() {
            let Some(winner) = r.winner else { continue };
            if r.i == target || r.j == target {
                continue;
            }
            let loser = if winner == r.i { r.j } else { r.i };
            fresh.push(TripletObservation::new(winner, loser, target, episode as u64, step as u64)?);
        }
        state.store.extend(&fresh)?;
        state.episode = episode;

        window_sum += result.queries_used;
        if episode > cfg.window {
            window_sum -= rows[episode - 1 - cfg.window].queries;
        }
        rows.push(EpisodeRow {
            episode,
            target,
            queries: result.queries_used,
            window_mean: window_sum as f64 / episode.min(cfg.window) as f64,
        });

        if cfg.mode == EmbeddingMode::GaussEmbed && cfg.schedule.contains(&episode) && !state.store.is_empty() {
            let mut train_cfg = cfg.train.clone();
            train_cfg.rng_seed = cfg.train.rng_seed ^ (episode as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            state.retrain(&train_cfg)?;
            log::info!("episode {episode}: retrained on {} triplets, σ_ε = {:.4}", state.store.len(), state.sigma_eps);
            snapshots.push((episode, state.embedding.clone()));
        }
    }

    Ok(BlindRun { mode: cfg.mode, rows, snapshots, store: state.store, query_spread })
}

/// Maximum-likelihood answer noise for `triplets` under fixed `means`:
/// the `σ` maximising `Σ log Φ(g_t / σ)`, where `g_t` is the signed distance
/// of the reference to the bisecting hyperplane of the pair. Searched on a
/// log scale within `[1e-3, 1e3]`.
pub fn estimate_answer_noise(means: &ObjectSet, triplets: &[TripletObservation]) -> Result<f64> {
    let margins: Vec<f64> = triplets
        .iter()
        .filter_map(|t| {
            let h = bisect(means.get(t.i).ok()?, means.get(t.j).ok()?).ok()?;
            crate::geometry::signed_distance(&h, means.row(t.k)).ok()
        })
        .collect();
    if margins.is_empty() {
        return Err(Error::InvalidArgument("no usable triplets for noise estimation".into()));
    }
    let loglik = |log_sigma: f64| {
        let inv = (-log_sigma).exp();
        margins.iter().map(|g| crate::numeric::log_normal_cdf(g * inv)).sum::<f64>()
    };
    // the log-likelihood is unimodal in log σ; golden-section search
    let (mut lo, mut hi) = ((1e-3f64).ln(), (1e3f64).ln());
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut a = hi - ratio * (hi - lo);
    let mut b = lo + ratio * (hi - lo);
    let (mut fa, mut fb) = (loglik(a), loglik(b));
    for _ in 0..100 {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + ratio * (hi - lo);
            fb = loglik(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - ratio * (hi - lo);
            fa = loglik(a);
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Smallest number of leading principal directions of the means'
/// covariance that carry at least `energy` of the total variance.
pub fn estimate_dim(means: &ObjectSet, energy: f64) -> Result<usize> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::InvalidArgument(format!("energy {energy} must be in (0, 1]")));
    }
    if means.len() < 2 {
        return Err(Error::NotEnoughObjects);
    }
    let (_, cov) = mean_and_covariance(means.data(), means.dim());
    let (values, _) = sorted_eigen(cov);
    let values: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Ok(1);
    }
    let mut acc = 0.0;
    for (k, v) in values.iter().enumerate() {
        acc += v;
        if acc >= energy * total * (1.0 - 1e-12) {
            return Ok(k + 1);
        }
    }
    Ok(values.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{nearest_unused_mahalanobis, ExclusionSet, MahalanobisConfig};
    use crate::oracle::Noise;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn effective_noise_cases() {
        let w = [0.6, 0.8];
        assert_eq!(effective_noise(&[0.0, 0.0], &[0.0, 0.0], &w, 0.3).unwrap(), 0.3);
        assert!((effective_noise(&[1.5, 1.5], &[1.5, 1.5], &w, 1.0).unwrap() - 2.0).abs() < 1e-12);
        let base = effective_noise(&[0.2, 0.3], &[0.1, 0.4], &w, 1.0).unwrap();
        assert!(effective_noise(&[0.25, 0.3], &[0.1, 0.4], &w, 1.0).unwrap() > base);
        assert!(effective_noise(&[0.2, 0.3], &[0.1, 0.45], &w, 1.0).unwrap() > base);
        assert!(effective_noise(&[-0.1, 0.3], &[0.1, 0.4], &w, 1.0).is_err());
    }

    #[test]
    fn dimension_of_an_exact_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let basis: Vec<Vec<f64>> = (0..3).map(|_| (0..100).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let mut data = Vec::with_capacity(200 * 100);
        for _ in 0..200 {
            let c: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            data.extend((0..100).map(|k| (0..3).map(|b| c[b] * basis[b][k]).sum::<f64>()));
        }
        let means = ObjectSet::new(100, data).unwrap();
        assert_eq!(estimate_dim(&means, 0.98).unwrap(), 3);
    }

    #[test]
    fn dimension_of_isotropic_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let means = ObjectSet::new(10, (0..100_000).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        assert_eq!(estimate_dim(&means, 0.98).unwrap(), 10);
        assert!(estimate_dim(&means, 0.0).is_err());
    }

    #[test]
    fn mahalanobis_lookup_prefers_uncertain_objects() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400;
        let means = ObjectSet::new(2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let index = KdTree::build(&means);
        let variances: Vec<f64> = (0..n).flat_map(|id| if id % 4 == 0 { [4.0, 4.0] } else { [0.05, 0.05] }).collect();
        let cfg = MahalanobisConfig::default();
        let (mut maha, mut eucl) = (0, 0);
        for _ in 0..1000 {
            let z = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            if nearest_unused_mahalanobis(&index, &means, &z, &ExclusionSet::new(), &variances, &cfg).unwrap() % 4 == 0 {
                maha += 1;
            }
            if index.nearest_unused(&z, &ExclusionSet::new()).unwrap() % 4 == 0 {
                eucl += 1;
            }
        }
        // binomial standard error at p≈0.25 over 1000 draws is ≈0.014
        assert!(maha as f64 / 1000.0 > eucl as f64 / 1000.0 + 0.1, "{maha} vs {eucl}");
    }

    #[test]
    fn blind_bookkeeping() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = ObjectSet::new(2, (0..80).map(|_| rng.random::<f64>()).collect()).unwrap();
        let train = TrainConfig { dim: 2, epochs: 5, ..TrainConfig::default() };
        let oracle = OracleConfig { noise: Noise::Probit { sigma: 0.05 }, rng_seed: 1 };
        let mut cfg = BlindConfig::new(EmbeddingMode::GaussEmbed, 20, train, oracle, 5);
        cfg.window = 5;
        let run = run_blind(&truth, &cfg).unwrap();
        assert_eq!(run.rows.len(), 20);
        let found_in_query = run.rows.len();
        let queries: usize = run.rows.iter().map(|r| r.queries).sum();
        // every episode ends with the query that contains the target
        assert_eq!(run.store.len(), queries - found_in_query);
        assert_eq!(run.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 4, 8, 16]);
        let last5: f64 = run.rows[15..].iter().map(|r| r.queries as f64).sum::<f64>() / 5.0;
        assert!((run.rows[19].window_mean - last5).abs() < 1e-12);
        let again = run_blind(&truth, &cfg).unwrap();
        assert_eq!(run.queries(), again.queries());
    }

    #[test]
    fn window_helper() {
        let v: Vec<usize> = (1..=10).collect();
        assert_eq!(centered_window_mean(&v, 5, 4), (4 + 5 + 6 + 7) as f64 / 4.0);
        assert_eq!(centered_window_mean(&v, 10, 4), (9 + 10) as f64 / 2.0);
    }
}
