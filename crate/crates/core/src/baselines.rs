//! Discrete-posterior strategies used as benchmarks.
//!
//! All three keep an explicit probability for every object being the target
//! and update it with Bayes' rule under the probit answer model. They differ
//! in how the next pair is picked:
//!
//! * [`select_ig`]: maximal expected information gain over all pairs, scored
//!   exactly.
//! * [`select_ec2`]: an edge-cutting surrogate. Every pair of candidate
//!   targets `(a, b)` is an edge of weight `p_a p_b`; a query cuts it when
//!   the two candidates would produce different answers. The score is the
//!   expected cut weight
//!   `Σ_{a≠b} p_a p_b L_a (1 − L_b) = S₁ S₀ − Σ_a p_a² L_a (1 − L_a)`,
//!   with `L_a` the probability of the first object winning if `a` were the
//!   target, `S₁ = Σ p_a L_a`, `S₀ = Σ p_a (1 − L_a)`. This is our own
//!   stand-in for a fast EC² approximation, not a reproduction of one.
//! * [`select_random`]: a uniform pair of unused objects.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{ExclusionSet, ObjectSet};
use crate::geometry::bisect;
use crate::numeric::binary_entropy;
use crate::oracle::{answer_prob, Noise, OracleConfig, SimulatedOracle};
use crate::rng::{self, Purpose};
use crate::search::{EpisodeResult, QueryRecord, Status};
use crate::{Error, Result};

/// Largest catalog the exhaustive baselines are run on.
pub const EXHAUSTIVE_MAX_N: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePosterior {
    p: Vec<f64>,
}

impl DiscretePosterior {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::NotEnoughObjects);
        }
        Ok(DiscretePosterior { p: vec![1.0 / n as f64; n] })
    }

    pub fn new(p: Vec<f64>) -> Result<Self> {
        let total: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("posterior must be non-negative and sum to 1".into()));
        }
        Ok(DiscretePosterior { p })
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Most probable object (smallest id on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, v) in self.p.iter().enumerate() {
            if *v > self.p[best] {
                best = k;
            }
        }
        best
    }

    /// Most probable object, ties broken uniformly at random.
    pub fn argmax_random<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let best = self.p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<usize> = (0..self.p.len()).filter(|&k| self.p[k] == best).collect();
        ties[rng.random_range(0..ties.len())]
    }

    /// Entropy in bits.
    pub fn entropy(&self) -> f64 {
        -self.p.iter().filter(|v| **v > 0.0).map(|v| v * v.log2()).sum::<f64>()
    }

    /// Multiplies in the likelihoods and renormalises.
    pub fn apply_likelihood(&mut self, lik: impl Iterator<Item = f64>) -> Result<()> {
        let mut total = 0.0;
        for (p, l) in self.p.iter_mut().zip(lik) {
            *p *= l;
            total += *p;
        }
        if !(total > f64::MIN_POSITIVE) {
            return Err(Error::MassUnderflow);
        }
        for p in &mut self.p {
            *p /= total;
        }
        Ok(())
    }
}

/// Probability that `i` beats `j` for every candidate target.
pub fn win_probabilities(i: usize, j: usize, features: &ObjectSet, noise: Noise) -> Result<Vec<f64>> {
    let h = bisect(features.get(i)?, features.get(j)?)?;
    features.rows().map(|x_t| answer_prob(&h, x_t, noise)).collect()
}

/// Bayes' rule for the answer "`winner` is closer than the other one".
pub fn bayes_update(
    post: &DiscretePosterior,
    i: usize,
    j: usize,
    winner: usize,
    features: &ObjectSet,
    noise: Noise,
) -> Result<DiscretePosterior> {
    if winner != i && winner != j {
        return Err(Error::InvalidArgument(format!("winner {winner} is not in ({i}, {j})")));
    }
    if post.len() != features.len() {
        return Err(Error::DimensionMismatch { expected: features.len(), got: post.len() });
    }
    let lik = win_probabilities(winner, if winner == i { j } else { i }, features, noise)?;
    let mut next = post.clone();
    next.apply_likelihood(lik.into_iter())?;
    Ok(next)
}

/// `P(first wins | target)` for every pair `a < b` and every target, so that
/// exhaustive scoring does not recompute hyperplanes.
#[derive(Debug, Clone)]
pub struct PairLikelihoods {
    n: usize,
    pairs: Vec<(usize, usize)>,
    table: Vec<f64>,
}

impl PairLikelihoods {
    pub fn build(features: &ObjectSet, noise: Noise) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::NotEnoughObjects);
        }
        let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
        let mut table = Vec::with_capacity(n * n * (n - 1) / 2);
        for a in 0..n {
            for b in a + 1..n {
                match win_probabilities(a, b, features, noise) {
                    Ok(l) => table.extend(l),
                    // duplicated objects: the answer is a coin flip for every target
                    Err(Error::CoincidentPoints { .. }) => table.extend(std::iter::repeat_n(0.5, n)),
                    Err(e) => return Err(e),
                }
                pairs.push((a, b));
            }
        }
        Ok(PairLikelihoods { n, pairs, table })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.table[k * self.n..(k + 1) * self.n]
    }

    fn index(&self, a: usize, b: usize) -> usize {
        // position of (a, b), a < b, in row-major upper-triangular order
        a * (2 * self.n - a - 1) / 2 + (b - a - 1)
    }

    /// `P(winner beats loser | t)` for every `t`.
    pub fn winner_likelihood(&self, winner: usize, loser: usize) -> impl Iterator<Item = f64> + '_ {
        let (a, b) = if winner < loser { (winner, loser) } else { (loser, winner) };
        let flip = winner > loser;
        self.row(self.index(a, b)).iter().map(move |&l| if flip { 1.0 - l } else { l })
    }
}

/// Expected information gain in bits of asking pair number `k`.
pub fn information_gain(post: &DiscretePosterior, lik: &PairLikelihoods, k: usize) -> f64 {
    let row = lik.row(k);
    let mut p_yes = 0.0;
    let mut noise = 0.0;
    for (p, l) in post.p.iter().zip(row) {
        if *p > 0.0 {
            p_yes += p * l;
            noise += p * binary_entropy(*l);
        }
    }
    binary_entropy(p_yes.clamp(0.0, 1.0)) - noise
}

/// Expected weight of cut edges for pair number `k`.
pub fn edge_cut(post: &DiscretePosterior, lik: &PairLikelihoods, k: usize) -> f64 {
    let row = lik.row(k);
    let (mut s1, mut s0, mut same) = (0.0, 0.0, 0.0);
    for (p, l) in post.p.iter().zip(row) {
        s1 += p * l;
        s0 += p * (1.0 - l);
        same += p * p * l * (1.0 - l);
    }
    s1 * s0 - same
}

fn best_pair(lik: &PairLikelihoods, score: impl Fn(usize) -> f64) -> (usize, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for k in 0..lik.pairs.len() {
        let s = score(k);
        if s > best.0 {
            best = (s, k);
        }
    }
    lik.pairs[best.1]
}

/// Pair with the largest expected information gain (lexicographic first on
/// ties).
pub fn select_ig(post: &DiscretePosterior, lik: &PairLikelihoods) -> (usize, usize) {
    best_pair(lik, |k| information_gain(post, lik, k))
}

/// Pair with the largest expected cut weight (lexicographic first on ties).
pub fn select_ec2(post: &DiscretePosterior, lik: &PairLikelihoods) -> (usize, usize) {
    best_pair(lik, |k| edge_cut(post, lik, k))
}

/// Uniformly random distinct pair of objects outside `excluded`.
pub fn select_random<R: Rng + ?Sized>(n: usize, excluded: &ExclusionSet, rng: &mut R) -> Result<(usize, usize)> {
    let free: Vec<usize> = (0..n).filter(|id| !excluded.contains(*id)).collect();
    if free.len() < 2 {
        return Err(Error::NotEnoughObjects);
    }
    let a = rng.random_range(0..free.len());
    let mut b = rng.random_range(0..free.len() - 1);
    if b >= a {
        b += 1;
    }
    Ok((free[a], free[b]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    GaussSearch,
    Ig,
    /// The edge-cutting surrogate.
    Eff,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::GaussSearch, Strategy::Ig, Strategy::Eff, Strategy::Random];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::GaussSearch => "gauss-search",
            Strategy::Ig => "ig",
            Strategy::Eff => "eff",
            Strategy::Random => "random",
        }
    }

    pub fn is_exhaustive(self) -> bool {
        matches!(self, Strategy::Ig | Strategy::Eff)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

/// Runs one discrete-posterior episode until the posterior's argmax (ties
/// broken at random) is the target or `max_steps` queries were asked.
/// Unlike the Gaussian search, these strategies may repeat objects; random
/// pairs are drawn from the whole catalog. `lik` must be built for
/// `features` with the model noise; it is required for IG and Eff.
#[allow(clippy::too_many_arguments)]
pub fn run_baseline_episode(
    strategy: Strategy,
    features: &ObjectSet,
    lik: Option<&PairLikelihoods>,
    target: usize,
    model_noise: Noise,
    oracle: OracleConfig,
    max_steps: usize,
    seed: u64,
    episode: u64,
) -> Result<EpisodeResult> {
    features.get(target)?;
    let n = features.len();
    let lik = match (strategy, lik) {
        (Strategy::Ig | Strategy::Eff, Some(l)) => Some(l),
        (Strategy::Ig | Strategy::Eff, None) => {
            return Err(Error::InvalidArgument("exhaustive strategies need the likelihood table".into()))
        }
        (Strategy::Random, _) => None,
        (Strategy::GaussSearch, _) => {
            return Err(Error::InvalidArgument("gauss-search episodes run through the search module".into()))
        }
    };
    let mut post = DiscretePosterior::uniform(n)?;
    let everything = ExclusionSet::new();
    let mut rng = rng::stream(seed, Purpose::Search, episode);
    let mut user = SimulatedOracle::for_episode(oracle, episode);
    let mut log = Vec::new();
    let mut status = Status::Running;
    while status == Status::Running {
        let started = Instant::now();
        let pair = match strategy {
            Strategy::Ig => select_ig(&post, lik.unwrap()),
            Strategy::Eff => select_ec2(&post, lik.unwrap()),
            _ => select_random(n, &everything, &mut rng)?,
        };
        let t_select = started.elapsed();
        let winner = user.sample_answer(pair.0, pair.1, features.row(target), features)?;
        let loser = if winner == pair.0 { pair.1 } else { pair.0 };
        let started = Instant::now();
        match lik {
            Some(l) => post.apply_likelihood(l.winner_likelihood(winner, loser))?,
            None => post = bayes_update(&post, pair.0, pair.1, winner, features, model_noise)?,
        }
        let t_update = started.elapsed();
        log.push(QueryRecord { i: pair.0, j: pair.1, winner: Some(winner), t_select, t_update });
        if post.argmax_random(&mut rng) == target {
            status = Status::Found(target);
        } else if log.len() >= max_steps {
            status = Status::StepLimit;
        }
    }
    Ok(EpisodeResult {
        target,
        queries_used: log.len(),
        success: matches!(status, Status::Found(_)),
        status,
        select_times: log.iter().map(|r: &QueryRecord| r.t_select).collect(),
        update_times: log.iter().map(|r| r.t_update).collect::<Vec<Duration>>(),
        log,
    })
}
