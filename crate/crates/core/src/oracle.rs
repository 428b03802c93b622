//! Simulated comparison answers under the probit model.
//!
//! Asked "which of `i`, `j` is closer to the target?", the oracle answers `i`
//! with probability `Φ((x_tᵀw + b)/σ_ε)` where `(w, b)` is the bisecting
//! hyperplane of `x_i` and `x_j`, oriented towards `x_i`.

use rand::Rng;

use crate::catalog::ObjectSet;
use crate::geometry::{bisect, signed_distance, Hyperplane};
use crate::numeric::normal_cdf;
use crate::rng::{self, Purpose, SearchRng};
use crate::{Error, Result};

/// Answer noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    /// Additive Gaussian noise with standard deviation `sigma` on the signed
    /// distance to the bisecting hyperplane.
    Probit { sigma: f64 },
    /// The `σ_ε → 0` limit: the strictly closer object always wins, ties are
    /// coin flips.
    Noiseless,
}

impl Noise {
    pub fn probit(sigma: f64) -> Result<Noise> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("σ_ε must be positive, got {sigma}")));
        }
        Ok(Noise::Probit { sigma })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub noise: Noise,
    pub rng_seed: u64,
}

/// Probability that the answer is the object on the positive side of `h`.
pub fn answer_prob(h: &Hyperplane, x_t: &[f64], noise: Noise) -> Result<f64> {
    let s = signed_distance(h, x_t)?;
    Ok(match noise {
        Noise::Probit { sigma } => normal_cdf(s / sigma),
        Noise::Noiseless if s > 0.0 => 1.0,
        Noise::Noiseless if s < 0.0 => 0.0,
        Noise::Noiseless => 0.5,
    })
}

/// A simulated user answering with respect to a fixed ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedOracle {
    noise: Noise,
    rng: SearchRng,
    draws: u64,
}

impl SimulatedOracle {
    pub fn new(cfg: OracleConfig) -> Self {
        Self::with_rng(cfg.noise, rng::stream(cfg.rng_seed, Purpose::Oracle, 0))
    }

    /// The oracle stream reserved for one search episode.
    pub fn for_episode(cfg: OracleConfig, episode: u64) -> Self {
        Self::with_rng(cfg.noise, rng::stream(cfg.rng_seed, Purpose::Oracle, episode))
    }

    pub fn with_rng(noise: Noise, rng: SearchRng) -> Self {
        SimulatedOracle { noise, rng, draws: 0 }
    }

    pub fn noise(&self) -> Noise {
        self.noise
    }

    /// Number of answers drawn so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Draws the winner of the comparison `(i, j)` for target position `x_t`.
    pub fn sample_answer(&mut self, i: usize, j: usize, x_t: &[f64], features: &ObjectSet) -> Result<usize> {
        if i == j {
            return Err(Error::InvalidArgument(format!("comparison of object {i} with itself")));
        }
        let h = bisect(features.get(i)?, features.get(j)?)?;
        let p = answer_prob(&h, x_t, self.noise)?;
        self.draws += 1;
        let u: f64 = self.rng.random();
        Ok(if u < p { i } else { j })
    }
}

/// Outcome of [`calibrate_sigma`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub sigma: f64,
    /// Closed-form flip rate averaged over the sampled triples.
    pub analytic_rate: f64,
    /// Rate of simulated answers disagreeing with the noiseless answer.
    pub measured_rate: f64,
    pub samples: usize,
}

/// Sampled `(i, j, t)` comparison distances used by the calibration.
#[derive(Debug, Clone)]
pub struct CalibrationSample {
    /// `|wᵀx_t + b|` per triple.
    pub distances: Vec<f64>,
}

impl CalibrationSample {
    /// Draws `samples` triples with `i ≠ j` and `t ∉ {i, j}` uniformly
    /// (`t` may coincide with `i` or `j` only when `n = 2`).
    pub fn draw(features: &ObjectSet, samples: usize, rng: &mut SearchRng) -> Result<Self> {
        let n = features.len();
        let mut distances = Vec::with_capacity(samples);
        while distances.len() < samples {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            let t = rng.random_range(0..n);
            if i == j || (n > 2 && (t == i || t == j)) {
                continue;
            }
            let h = match bisect(features.row(i), features.row(j)) {
                Ok(h) => h,
                Err(Error::CoincidentPoints { .. }) => continue,
                Err(e) => return Err(e),
            };
            distances.push(signed_distance(&h, features.row(t))?.abs());
        }
        Ok(CalibrationSample { distances })
    }

    /// Mean of `1 - Φ(|s|/σ)`: the probability that the noisy answer differs
    /// from the noiseless one.
    pub fn flip_rate(&self, sigma: f64) -> f64 {
        let total: f64 = self.distances.iter().map(|&s| if s == 0.0 { 0.5 } else { normal_cdf(-s / sigma) }).sum();
        total / self.distances.len() as f64
    }
}

/// Finds `σ_ε` so that a fraction `target_flip_rate` of answers over uniform
/// random triples disagree with the noiseless answer. Bisection runs on
/// `log σ` against the closed-form flip rate; the returned
/// [`Calibration::measured_rate`] is an independent simulation on the same
/// triples.
/// Default number of sampled triples for calibration.
pub const CALIBRATION_SAMPLES: usize = 100_000;

pub fn calibrate_sigma(features: &ObjectSet, target_flip_rate: f64, samples: usize, seed: u64) -> Result<Calibration> {
    if !(target_flip_rate > 0.0 && target_flip_rate < 0.5) {
        return Err(Error::InvalidArgument(format!("flip rate must lie in (0, 0.5), got {target_flip_rate}")));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("calibration needs at least one sample".into()));
    }
    let mut rng = rng::stream(seed, Purpose::Data, 0xCA1);
    let sample = CalibrationSample::draw(features, samples, &mut rng)?;
    let floor = sample.distances.iter().filter(|&&s| s == 0.0).count() as f64 * 0.5 / samples as f64;
    if target_flip_rate <= floor {
        return Err(Error::UnreachableFlipRate { target: target_flip_rate, low: floor, high: 0.5 });
    }
    let scale = sample.distances.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let (mut lo, mut hi) = (scale * 1e-12, scale);
    while sample.flip_rate(hi) < target_flip_rate {
        hi *= 2.0;
        if hi > scale * 1e12 {
            return Err(Error::UnreachableFlipRate { target: target_flip_rate, low: floor, high: sample.flip_rate(hi) });
        }
    }
    if sample.flip_rate(lo) > target_flip_rate {
        return Err(Error::UnreachableFlipRate { target: target_flip_rate, low: sample.flip_rate(lo), high: 0.5 });
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if sample.flip_rate(mid) < target_flip_rate {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-12 {
            break;
        }
    }
    let sigma = (lo * hi).sqrt();
    let flips = sample
        .distances
        .iter()
        .filter(|&&s| {
            // noisy answer agrees with the noiseless one iff s + ε keeps its sign
            let eps: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma;
            s + eps < 0.0 || (s == 0.0 && rng.random::<bool>())
        })
        .count();
    Ok(Calibration {
        sigma,
        analytic_rate: sample.flip_rate(sigma),
        measured_rate: flips as f64 / samples as f64,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn hypercube(n: usize, d: usize, seed: u64) -> ObjectSet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ObjectSet::new(d, (0..n * d).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn on_plane_is_a_coin_flip() {
        let h = bisect(&[1.0, 0.0], &[-1.0, 0.0]).unwrap();
        assert_eq!(answer_prob(&h, &[0.0, 3.0], Noise::Probit { sigma: 0.7 }).unwrap(), 0.5);
        assert_eq!(answer_prob(&h, &[0.0, 3.0], Noise::Noiseless).unwrap(), 0.5);
    }

    #[test]
    fn hand_evaluated_probability() {
        // x_i = 0, x_j = 2 → w = -1, b = 1; x_t = 0 → Φ(1)
        let h = bisect(&[0.0], &[2.0]).unwrap();
        assert_eq!(h.normal(), &[-1.0]);
        assert_eq!(h.offset(), 1.0);
        let p = answer_prob(&h, &[0.0], Noise::Probit { sigma: 1.0 }).unwrap();
        let reference = Normal::new(0.0, 1.0).unwrap().cdf(1.0);
        // the reference implementation is accurate to about 1e-11
        assert!((p - reference).abs() < 1e-10, "{p} vs {reference}");
        assert!((p - 0.8413).abs() < 1e-4);
    }

    #[test]
    fn small_noise_approaches_certainty() {
        let h = bisect(&[1.0], &[0.0]).unwrap();
        let p = answer_prob(&h, &[0.6], Noise::Probit { sigma: 1e-6 }).unwrap();
        assert!(p > 1.0 - 1e-12);
        assert_eq!(answer_prob(&h, &[0.6], Noise::Noiseless).unwrap(), 1.0);
    }

    #[test]
    fn negated_plane_complements_probability() {
        let h = bisect(&[0.3, 0.1], &[-0.5, 0.8]).unwrap();
        let noise = Noise::Probit { sigma: 0.4 };
        let p = answer_prob(&h, &[0.2, 0.2], noise).unwrap();
        let q = answer_prob(&h.negated(), &[0.2, 0.2], noise).unwrap();
        assert!((p + q - 1.0).abs() < 1e-12);
    }

    #[test]
    fn answer_depends_only_on_hyperplane() {
        // (0,2) and (-1,3) share the bisector x = 1
        let noise = Noise::Probit { sigma: 0.5 };
        let a = answer_prob(&bisect(&[0.0], &[2.0]).unwrap(), &[0.7], noise).unwrap();
        let b = answer_prob(&bisect(&[-1.0], &[3.0]).unwrap(), &[0.7], noise).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn empirical_answers_match_probability() {
        let features = ObjectSet::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.2], vec![0.3, 0.4]]).unwrap();
        let cfg = OracleConfig { noise: Noise::Probit { sigma: 0.3 }, rng_seed: 5 };
        let mut oracle = SimulatedOracle::new(cfg);
        let x_t = features.row(2).to_vec();
        let p = answer_prob(&bisect(features.row(0), features.row(1)).unwrap(), &x_t, cfg.noise).unwrap();
        let draws = 100_000;
        let wins = (0..draws).filter(|_| oracle.sample_answer(0, 1, &x_t, &features).unwrap() == 0).count();
        let mean = wins as f64 / draws as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((mean - p).abs() < 3.0 * se, "{mean} vs {p}");
    }

    #[test]
    fn noiseless_answers_pick_the_closer_object() {
        let features = hypercube(30, 3, 2);
        let mut oracle = SimulatedOracle::new(OracleConfig { noise: Noise::Noiseless, rng_seed: 1 });
        for i in 0..30 {
            for j in 0..30 {
                if i == j {
                    continue;
                }
                let t = features.row((i + j) % 30).to_vec();
                let w = oracle.sample_answer(i, j, &t, &features).unwrap();
                let di = crate::geometry::dist2(features.row(i), &t);
                let dj = crate::geometry::dist2(features.row(j), &t);
                if di != dj {
                    assert_eq!(w, if di < dj { i } else { j });
                }
            }
        }
    }

    #[test]
    fn same_seed_same_answers() {
        let features = hypercube(20, 2, 3);
        let cfg = OracleConfig { noise: Noise::Probit { sigma: 0.2 }, rng_seed: 9 };
        let run = || {
            let mut o = SimulatedOracle::new(cfg);
            (0..50).map(|k| o.sample_answer(k % 20, (k + 1) % 20, features.row(5), &features).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
        let mut o = SimulatedOracle::new(cfg);
        assert!(o.sample_answer(1, 1, features.row(0), &features).is_err());
        assert!(o.sample_answer(1, 99, features.row(0), &features).is_err());
    }

    #[test]
    fn calibration_hits_target_rate() {
        let features = hypercube(1000, 5, 4);
        let cal = calibrate_sigma(&features, 0.10, 100_000, 1).unwrap();
        assert!((cal.analytic_rate - 0.10).abs() < 1e-9);
        assert!((0.095..=0.105).contains(&cal.measured_rate), "{cal:?}");
        let wider = calibrate_sigma(&features, 0.25, 100_000, 1).unwrap();
        assert!(wider.sigma > cal.sigma);
    }

    #[test]
    fn flip_rate_is_monotone_in_sigma() {
        let features = hypercube(100, 5, 5);
        let mut rng = rng::stream(3, Purpose::Data, 0);
        let sample = CalibrationSample::draw(&features, 5000, &mut rng).unwrap();
        let mut last = 0.0;
        for k in 1..40 {
            let r = sample.flip_rate(0.01 * k as f64);
            assert!(r > last);
            last = r;
        }
    }

    #[test]
    fn calibration_rejects_bad_targets() {
        let features = hypercube(50, 2, 6);
        assert!(calibrate_sigma(&features, 0.0, 1000, 1).is_err());
        assert!(calibrate_sigma(&features, 0.5, 1000, 1).is_err());
    }
}
