//! Search sessions over a catalog.
//!
//! A [`SearchSession`] holds the Gaussian belief, the set of objects already
//! shown, and the query log. Each step samples a point from the belief,
//! mirrors it across the information-maximising hyperplane, snaps both points
//! to the nearest unused objects, asks for an answer and folds it into the
//! belief.
//!
//! [`convergence_sim`] and [`dense_search`] run the same update on a dense
//! feature space (every point is a valid query), where the posterior provably
//! concentrates on the target.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{
    adf_update_detailed, optimal_hyperplane_warm, AdfIntermediates, DensityScorer, GaussianBelief, Outcome,
};
use crate::catalog::{nearest_unused_mahalanobis, ExclusionSet, KdTree, MahalanobisConfig, ObjectSet};
use crate::geometry::{bisect, reflect};
use crate::learn2search::effective_noise;
use crate::numeric::normal_cdf;
use crate::oracle::{answer_prob, Noise, OracleConfig, SimulatedOracle};
use crate::rng::{self, Purpose, SearchRng};
use crate::{Error, Result};

const MAX_RESAMPLES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// Stop as soon as the target is one of the queried objects.
    TargetInQuery,
    /// Stop once the target has the highest posterior density among all
    /// objects.
    ArgmaxPosterior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Answer noise assumed by the belief update.
    pub sigma_eps: f64,
    pub stop_rule: StopRule,
    pub max_steps: usize,
    pub rng_seed: u64,
    /// With per-object variances, inflate the noise by the objects' spread
    /// along the query normal.
    pub use_effective_noise: bool,
    pub mahalanobis: MahalanobisConfig,
}

impl SearchConfig {
    pub fn new(sigma_eps: f64, stop_rule: StopRule, max_steps: usize, rng_seed: u64) -> Result<Self> {
        if max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be at least 1".into()));
        }
        if !(sigma_eps >= 0.0 && sigma_eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid σ_ε {sigma_eps}")));
        }
        Ok(SearchConfig {
            sigma_eps,
            stop_rule,
            max_steps,
            rng_seed,
            use_effective_noise: true,
            mahalanobis: MahalanobisConfig::default(),
        })
    }

    /// `10·⌈log₂ n⌉`, the simulation default.
    pub fn default_max_steps(n: usize) -> usize {
        10 * (n.max(2) as f64).log2().ceil() as usize
    }
}

/// The objects a session searches over.
#[derive(Debug, Clone, Copy)]
pub struct SearchSpace<'a> {
    /// Feature vectors, or embedding means in the blind setting.
    pub objects: &'a ObjectSet,
    pub index: &'a KdTree,
    /// Row-major per-object diagonal variances. When present, lookups use
    /// the Mahalanobis distance and updates may use the effective noise.
    pub variances: Option<&'a [f64]>,
}

impl<'a> SearchSpace<'a> {
    pub fn euclidean(objects: &'a ObjectSet, index: &'a KdTree) -> Self {
        SearchSpace { objects, index, variances: None }
    }

    fn variance(&self, id: usize) -> Option<&'a [f64]> {
        let d = self.objects.dim();
        self.variances.map(|v| &v[id * d..(id + 1) * d])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status", content = "target")]
pub enum Status {
    Running,
    Found(usize),
    /// Fewer than two unused objects remain.
    Exhausted,
    /// `max_steps` queries were asked without success.
    StepLimit,
}

/// One logged query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub i: usize,
    pub j: usize,
    pub winner: Option<usize>,
    pub t_select: Duration,
    pub t_update: Duration,
}

/// Line-delimited episode log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLogRecord {
    pub session: u64,
    pub step: usize,
    pub i: usize,
    pub j: usize,
    pub winner: Option<usize>,
    pub t_select_us: f64,
    pub t_update_us: f64,
}

/// Produces answers to comparison queries.
pub trait AnswerSource {
    /// Winner of the comparison between `i` and `j`.
    fn answer(&mut self, i: usize, j: usize) -> Result<usize>;

    /// The target, when the source knows it (simulations only).
    fn target(&self) -> Option<usize> {
        None
    }
}

/// Probit-noise answers computed from ground-truth features.
pub struct SimulatedUser<'a> {
    pub oracle: SimulatedOracle,
    pub truth: &'a ObjectSet,
    pub target: usize,
}

impl AnswerSource for SimulatedUser<'_> {
    fn answer(&mut self, i: usize, j: usize) -> Result<usize> {
        let x_t = self.truth.get(self.target)?;
        self.oracle.sample_answer(i, j, x_t, self.truth)
    }

    fn target(&self) -> Option<usize> {
        Some(self.target)
    }
}

fn lookup(
    space: &SearchSpace<'_>,
    z: &[f64],
    excluded: &ExclusionSet,
    mahalanobis: &MahalanobisConfig,
) -> Result<usize> {
    match space.variances {
        Some(var) => nearest_unused_mahalanobis(space.index, space.objects, z, excluded, var, mahalanobis),
        None => space.index.nearest_unused(z, excluded),
    }
}

/// Query generation: sample `z₁ ~ N(μ, Σ)`, reflect it across the optimal
/// hyperplane to `z₂`, and return the nearest unused objects to each.
/// If `z₂`'s nearest unused object is the one already chosen for `z₁`, the
/// next-nearest unused object is used instead.
pub fn sample_mirror<R: Rng + ?Sized>(
    belief: &GaussianBelief,
    space: &SearchSpace<'_>,
    excluded: &ExclusionSet,
    rng: &mut R,
    warm: Option<&DVector<f64>>,
    mahalanobis: &MahalanobisConfig,
) -> Result<(usize, usize)> {
    let n = space.objects.len();
    let unused = n - excluded.iter().filter(|&id| id < n).count();
    if unused < 2 {
        return Err(Error::NotEnoughObjects);
    }
    let h = optimal_hyperplane_warm(belief, warm)?;
    for _ in 0..=MAX_RESAMPLES {
        let z1 = belief.sample(rng)?;
        let z2 = reflect(z1.as_slice(), &h)?;
        let i = lookup(space, z1.as_slice(), excluded, mahalanobis)?;
        let mut without_i = excluded.clone();
        without_i.insert(i);
        match lookup(space, &z2, &without_i, mahalanobis) {
            Ok(j) => return Ok((i, j)),
            Err(Error::AllExcluded) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::NotEnoughObjects)
}

/// The search state machine. One query is outstanding at a time.
#[derive(Debug, Clone)]
pub struct SearchSession {
    belief: GaussianBelief,
    used: ExclusionSet,
    log: Vec<QueryRecord>,
    status: Status,
    config: SearchConfig,
    rng: SearchRng,
    warm: Option<DVector<f64>>,
    pending: Option<(usize, usize)>,
}

impl SearchSession {
    pub fn new(belief: GaussianBelief, config: SearchConfig) -> Self {
        let rng = rng::stream(config.rng_seed, Purpose::Search, 0);
        Self::with_rng(belief, config, rng)
    }

    /// Session using the search stream reserved for `episode`.
    pub fn for_episode(belief: GaussianBelief, config: SearchConfig, episode: u64) -> Self {
        let rng = rng::stream(config.rng_seed, Purpose::Search, episode);
        Self::with_rng(belief, config, rng)
    }

    pub fn with_rng(belief: GaussianBelief, config: SearchConfig, rng: SearchRng) -> Self {
        SearchSession {
            belief,
            used: ExclusionSet::new(),
            log: Vec::new(),
            status: Status::Running,
            config,
            rng,
            warm: None,
            pending: None,
        }
    }

    pub fn belief(&self) -> &GaussianBelief {
        &self.belief
    }

    pub fn used(&self) -> &ExclusionSet {
        &self.used
    }

    /// Number of queries asked so far.
    pub fn step_count(&self) -> usize {
        self.log.len()
    }

    pub fn log(&self) -> &[QueryRecord] {
        &self.log
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }

    pub fn pending(&self) -> Option<(usize, usize)> {
        self.pending
    }

    fn ensure_running(&self) -> Result<()> {
        if self.status != Status::Running {
            return Err(Error::SessionClosed);
        }
        Ok(())
    }

    /// Samples a fresh pair of unused objects and marks both as used without
    /// making it the outstanding query. Used to assemble multi-candidate
    /// queries.
    pub fn draw_pair(&mut self, space: &SearchSpace<'_>) -> Result<(usize, usize)> {
        self.ensure_running()?;
        let (i, j) = sample_mirror(
            &self.belief,
            space,
            &self.used,
            &mut self.rng,
            self.warm.as_ref(),
            &self.config.mahalanobis,
        )?;
        self.used.insert(i);
        self.used.insert(j);
        Ok((i, j))
    }

    /// Generates the next query and makes it the outstanding one.
    pub fn propose(&mut self, space: &SearchSpace<'_>) -> Result<(usize, usize)> {
        if let Some(p) = self.pending {
            return Err(Error::Protocol(format!("query {p:?} is still unanswered")));
        }
        let started = Instant::now();
        let pair = self.draw_pair(space)?;
        let t_select = started.elapsed();
        self.pending = Some(pair);
        self.log.push(QueryRecord { i: pair.0, j: pair.1, winner: None, t_select, t_update: Duration::ZERO });
        Ok(pair)
    }

    /// Folds "`winner` is closer to the target than `loser`" into the belief.
    pub fn apply_comparison(&mut self, space: &SearchSpace<'_>, winner: usize, loser: usize) -> Result<AdfIntermediates> {
        let x_w = space.objects.get(winner)?;
        let x_l = space.objects.get(loser)?;
        let h = bisect(x_w, x_l)?;
        let sigma = match (self.config.use_effective_noise, space.variance(winner), space.variance(loser)) {
            (true, Some(pw), Some(pl)) => effective_noise(pw, pl, h.normal(), self.config.sigma_eps)?,
            _ => self.config.sigma_eps,
        };
        let (belief, k) = adf_update_detailed(&self.belief, &h, Outcome::Positive, sigma)?;
        self.belief = belief;
        Ok(k)
    }

    /// Records the answer to the outstanding query and evaluates the stop
    /// rule. `target` enables the stop rules in simulations.
    pub fn answer(&mut self, space: &SearchSpace<'_>, pair: (usize, usize), winner: usize, target: Option<usize>) -> Result<Status> {
        self.ensure_running()?;
        let Some(pending) = self.pending else {
            return Err(Error::Protocol("no outstanding query".into()));
        };
        if pending != pair && pending != (pair.1, pair.0) {
            return Err(Error::Protocol(format!("answer for {pair:?} but the outstanding query is {pending:?}")));
        }
        let loser = if winner == pending.0 {
            pending.1
        } else if winner == pending.1 {
            pending.0
        } else {
            return Err(Error::Protocol(format!("winner {winner} is not part of the query {pending:?}")));
        };
        let started = Instant::now();
        self.apply_comparison(space, winner, loser)?;
        let t_update = started.elapsed();
        self.pending = None;
        let record = self.log.last_mut().expect("outstanding query is logged");
        record.winner = Some(winner);
        record.t_update = t_update;
        if self.warm.is_none() || self.belief.dim() > crate::numeric::DENSE_EIGEN_MAX_DIM {
            self.warm = crate::belief::top_direction(self.belief.covariance()).ok();
        }
        self.evaluate_stop(space, pending, target)?;
        Ok(self.status)
    }

    fn evaluate_stop(&mut self, space: &SearchSpace<'_>, pair: (usize, usize), target: Option<usize>) -> Result<()> {
        if let Some(t) = target {
            let found = match self.config.stop_rule {
                StopRule::TargetInQuery => pair.0 == t || pair.1 == t,
                StopRule::ArgmaxPosterior => argmax_density(&self.belief, space.objects)? == t,
            };
            if found {
                self.status = Status::Found(t);
                return Ok(());
            }
        }
        if self.log.len() >= self.config.max_steps {
            self.status = Status::StepLimit;
        } else if space.objects.len() - self.used.len() < 2 {
            self.status = Status::Exhausted;
        }
        Ok(())
    }

    /// Marks the session as found (e.g. a user recognised the target).
    pub fn mark_found(&mut self, target: usize) {
        self.pending = None;
        self.status = Status::Found(target);
    }

    /// One full query/answer/update round.
    pub fn step(&mut self, space: &SearchSpace<'_>, source: &mut dyn AnswerSource) -> Result<Status> {
        self.ensure_running()?;
        let pair = self.propose(space)?;
        let winner = source.answer(pair.0, pair.1)?;
        self.answer(space, pair, winner, source.target())
    }
}

/// Object with the highest posterior density (smallest id on ties).
pub fn argmax_density(belief: &GaussianBelief, objects: &ObjectSet) -> Result<usize> {
    let scorer = DensityScorer::new(belief)?;
    let mut best = (f64::NEG_INFINITY, 0);
    for (id, row) in objects.rows().enumerate() {
        let s = scorer.score(row)?;
        if s > best.0 {
            best = (s, id);
        }
    }
    Ok(best.1)
}

/// Summary of one simulated episode.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub target: usize,
    pub queries_used: usize,
    pub success: bool,
    pub status: Status,
    pub select_times: Vec<Duration>,
    pub update_times: Vec<Duration>,
    pub log: Vec<QueryRecord>,
}

impl EpisodeResult {
    pub fn mean_step_time(&self) -> Duration {
        let total: Duration = self.select_times.iter().chain(&self.update_times).sum();
        total / self.queries_used.max(1) as u32
    }

    pub fn log_records(&self, session: u64) -> Vec<EpisodeLogRecord> {
        self.log
            .iter()
            .enumerate()
            .map(|(step, r)| EpisodeLogRecord {
                session,
                step: step + 1,
                i: r.i,
                j: r.j,
                winner: r.winner,
                t_select_us: r.t_select.as_secs_f64() * 1e6,
                t_update_us: r.t_update.as_secs_f64() * 1e6,
            })
            .collect()
    }
}

/// Drives a session until it stops, answering with `source`.
pub fn drive_session(
    session: &mut SearchSession,
    space: &SearchSpace<'_>,
    source: &mut dyn AnswerSource,
) -> Result<EpisodeResult> {
    while session.status() == Status::Running {
        session.step(space, source)?;
    }
    let status = session.status();
    let log = session.log().to_vec();
    Ok(EpisodeResult {
        target: source.target().unwrap_or(usize::MAX),
        queries_used: log.len(),
        success: matches!(status, Status::Found(_)),
        status,
        select_times: log.iter().map(|r| r.t_select).collect(),
        update_times: log.iter().map(|r| r.t_update).collect(),
        log,
    })
}

/// Non-blind episode: the search sees the true features, starts from their
/// empirical mean and covariance, and is answered by a simulated oracle.
pub fn run_episode(
    objects: &ObjectSet,
    index: &KdTree,
    target: usize,
    config: &SearchConfig,
    oracle: OracleConfig,
    episode: u64,
) -> Result<EpisodeResult> {
    objects.get(target)?;
    let belief = GaussianBelief::from_objects(objects, 1e-6)?;
    let mut session = SearchSession::for_episode(belief, config.clone(), episode);
    let mut user = SimulatedUser { oracle: SimulatedOracle::for_episode(oracle, episode), truth: objects, target };
    drive_session(&mut session, &SearchSpace::euclidean(objects, index), &mut user)
}

/// `√(2/π)`.
pub const CONVERGENCE_C: f64 = 0.797_884_560_802_865_4;

/// One-dimensional dense-space search with `σ_ε = 1` and every query
/// hyperplane through the current mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceSim {
    pub mu: f64,
    pub sigma2: f64,
    pub m: usize,
}

impl ConvergenceSim {
    pub fn new(mu0: f64, sigma0sq: f64) -> Result<Self> {
        if !(sigma0sq > 0.0 && sigma0sq.is_finite()) || !mu0.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid initial belief ({mu0}, {sigma0sq})")));
        }
        Ok(ConvergenceSim { mu: mu0, sigma2: sigma0sq, m: 0 })
    }

    /// Draws the answer `z ∈ {±1}` with `P(z = 1) = Φ(x_t - μ)` and applies
    /// `μ += α σ² z`, `σ² += β σ⁴`.
    pub fn advance<R: Rng + ?Sized>(&mut self, x_t: f64, rng: &mut R) {
        let p_up = normal_cdf(x_t - self.mu);
        let z = if rng.random::<f64>() < p_up { 1.0 } else { -1.0 };
        let alpha = CONVERGENCE_C / (self.sigma2 + 1.0).sqrt();
        let beta = -CONVERGENCE_C * CONVERGENCE_C / (self.sigma2 + 1.0);
        self.mu += alpha * self.sigma2 * z;
        self.sigma2 += beta * self.sigma2 * self.sigma2;
        self.m += 1;
    }
}

/// Trajectory `(μ_m, σ²_m)` for `m = 0..=steps`.
pub fn convergence_sim<R: Rng + ?Sized>(x_t: f64, mu0: f64, sigma0sq: f64, steps: usize, rng: &mut R) -> Result<Vec<(f64, f64)>> {
    let mut sim = ConvergenceSim::new(mu0, sigma0sq)?;
    let mut out = Vec::with_capacity(steps + 1);
    out.push((sim.mu, sim.sigma2));
    for _ in 0..steps {
        sim.advance(x_t, rng);
        out.push((sim.mu, sim.sigma2));
    }
    Ok(out)
}

/// Per-step state of [`dense_search`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseStep {
    pub trace: f64,
    pub error: f64,
}

/// Multivariate search in a dense space: the sampled point and its mirror
/// image are queried directly, answers follow the probit model around `x_t`.
pub fn dense_search<R: Rng + ?Sized>(
    x_t: &[f64],
    initial: GaussianBelief,
    sigma_eps: f64,
    steps: usize,
    rng: &mut R,
) -> Result<(GaussianBelief, Vec<DenseStep>)> {
    if x_t.len() != initial.dim() {
        return Err(Error::DimensionMismatch { expected: initial.dim(), got: x_t.len() });
    }
    let noise = Noise::probit(sigma_eps)?;
    let mut belief = initial;
    let mut trajectory = Vec::with_capacity(steps);
    for _ in 0..steps {
        let h_star = crate::belief::optimal_hyperplane(&belief)?;
        let mut attempt = 0;
        let h = loop {
            let z1 = belief.sample(rng)?;
            let z2 = reflect(z1.as_slice(), &h_star)?;
            match bisect(z1.as_slice(), &z2) {
                Ok(h) => break h,
                Err(Error::CoincidentPoints { .. }) if attempt < MAX_RESAMPLES => attempt += 1,
                Err(e) => return Err(e),
            }
        };
        let p = answer_prob(&h, x_t, noise)?;
        let outcome = if rng.random::<f64>() < p { Outcome::Positive } else { Outcome::Negative };
        belief = adf_update_detailed(&belief, &h, outcome, sigma_eps)?.0;
        let err = belief.mean().iter().zip(x_t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        trajectory.push(DenseStep { trace: belief.trace(), error: err });
    }
    Ok((belief, trajectory))
}
