//! Variational Gaussian embedding learned from triplet comparisons.
//!
//! Every object gets a diagonal Gaussian `N(ν_i, diag Ψ_i)`. Training
//! maximises
//!
//! ```text
//! ELBO = Σ_T E_q[log Φ(g(x̂_i, x̂_j, x̂_k))] − Σ_i KL(N(ν_i, Ψ_i) ‖ N(0, I))
//! ```
//!
//! where `g` is the signed distance of `x̂_k` to the bisecting hyperplane of
//! `x̂_i`, `x̂_j` (positive on `x̂_i`'s side) and `x̂ = ν + √Ψ ⊙ ε`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::catalog::ObjectSet;
use crate::geometry::dist2;
use crate::numeric::{inv_mills, log_normal_cdf, DEGENERACY_TOL};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// "Object `i` is closer to `k` than object `j` is."
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripletObservation {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    /// Episode or session that produced the triplet.
    pub source: u64,
    #[serde(rename = "ts")]
    pub timestamp: u64,
}

impl TripletObservation {
    pub fn new(i: usize, j: usize, k: usize, source: u64, timestamp: u64) -> Result<Self> {
        if i == j || i == k || j == k {
            return Err(Error::InvalidArgument(format!("triplet ids must be distinct, got ({i}, {j}; {k})")));
        }
        Ok(TripletObservation { i, j, k, source, timestamp })
    }

    fn validate(&self, n: usize) -> Result<()> {
        for id in [self.i, self.j, self.k] {
            if id >= n {
                return Err(Error::UnknownObject { id, n });
            }
        }
        if self.i == self.j || self.i == self.k || self.j == self.k {
            return Err(Error::InvalidArgument(format!("triplet ids must be distinct, got ({}, {}; {})", self.i, self.j, self.k)));
        }
        Ok(())
    }
}

/// Append-only triplet log with per-object participation counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletStore {
    n: usize,
    triplets: Vec<TripletObservation>,
    counts: Vec<usize>,
}

impl TripletStore {
    pub fn new(n: usize) -> Self {
        TripletStore { n, triplets: Vec::new(), counts: vec![0; n] }
    }

    pub fn from_triplets(n: usize, triplets: impl IntoIterator<Item = TripletObservation>) -> Result<Self> {
        let mut store = TripletStore::new(n);
        for t in triplets {
            store.push(t)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, t: TripletObservation) -> Result<()> {
        t.validate(self.n)?;
        for id in [t.i, t.j, t.k] {
            self.counts[id] += 1;
        }
        self.triplets.push(t);
        Ok(())
    }

    pub fn extend(&mut self, ts: &[TripletObservation]) -> Result<()> {
        for t in ts {
            t.validate(self.n)?;
        }
        for t in ts {
            self.push(*t)?;
        }
        Ok(())
    }

    pub fn num_objects(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplets(&self) -> &[TripletObservation] {
        &self.triplets
    }

    /// Number of stored triplets object `id` takes part in.
    pub fn count(&self, id: usize) -> usize {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn write_jsonl<W: Write>(&self, writer: W) -> Result<()> {
        write_triplets_jsonl(writer, &self.triplets)
    }

    pub fn read_jsonl<R: Read>(n: usize, reader: R) -> Result<Self> {
        Self::from_triplets(n, read_triplets_jsonl(reader)?)
    }

    pub fn load(n: usize, path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(n, std::fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

pub fn write_triplets_jsonl<W: Write>(mut writer: W, triplets: &[TripletObservation]) -> Result<()> {
    for t in triplets {
        serde_json::to_writer(&mut writer, t)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_triplets_jsonl<R: Read>(reader: R) -> Result<Vec<TripletObservation>> {
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TripletObservation = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno + 1, detail: e.to_string() })?;
        out.push(t);
    }
    Ok(out)
}

/// Per-object diagonal Gaussians, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEmbedding {
    n: usize,
    dim: usize,
    nu: Vec<f64>,
    log_psi: Vec<f64>,
}

impl GaussianEmbedding {
    pub fn new(n: usize, dim: usize, nu: Vec<f64>, log_psi: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be at least 1".into()));
        }
        for (name, v) in [("means", &nu), ("log-variances", &log_psi)] {
            if v.len() != n * dim {
                return Err(Error::DimensionMismatch { expected: n * dim, got: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(GaussianEmbedding { n, dim, nu, log_psi })
    }

    /// The prior itself: `ν = 0`, `Ψ = I`.
    pub fn prior(n: usize, dim: usize) -> Result<Self> {
        Self::new(n, dim, vec![0.0; n * dim], vec![0.0; n * dim])
    }

    /// Training start point: `ν ~ N(0, 10⁻⁴ I)`, `Ψ = I`.
    pub fn initial<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let nu = (0..n * dim).map(|_| 1e-2 * rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(n, dim, nu, vec![0.0; n * dim])
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self, id: usize) -> &[f64] {
        &self.nu[id * self.dim..(id + 1) * self.dim]
    }

    pub fn log_variance(&self, id: usize) -> &[f64] {
        &self.log_psi[id * self.dim..(id + 1) * self.dim]
    }

    pub fn means(&self) -> &[f64] {
        &self.nu
    }

    pub fn log_variances(&self) -> &[f64] {
        &self.log_psi
    }

    /// `Ψ` entries, row-major.
    pub fn variances(&self) -> Vec<f64> {
        self.log_psi.iter().map(|l| l.exp()).collect()
    }

    pub fn means_as_objects(&self) -> Result<ObjectSet> {
        ObjectSet::new(self.dim, self.nu.clone())
    }

    /// `Σ_i KL(N(ν_i, Ψ_i) ‖ N(0, I))`.
    pub fn kl(&self) -> f64 {
        self.nu.iter().zip(&self.log_psi).map(|(m, l)| 0.5 * (l.exp() + m * m - 1.0 - l)).sum()
    }

    /// Text snapshot: a `n D` header, then `id ν… logΨ…` per line.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.n, self.dim)?;
        for id in 0..self.n {
            write!(w, "{id}")?;
            for v in self.mean(id).iter().chain(self.log_variance(id)) {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let header = lines.next().ok_or(Error::Parse { line: 1, detail: "missing header".into() })??;
        let parse_err = |line: usize, detail: String| Error::Parse { line, detail };
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|e| parse_err(1, format!("{e}"))))
            .collect::<Result<_>>()?;
        let [n, dim] = dims[..] else {
            return Err(parse_err(1, "header must be `n D`".into()));
        };
        let mut nu = vec![0.0; n * dim];
        let mut log_psi = vec![0.0; n * dim];
        let mut seen = vec![false; n];
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let id: usize = fields
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|e| parse_err(lineno, format!("bad id: {e}")))?;
            if id >= n || seen[id] {
                return Err(parse_err(lineno, format!("unexpected id {id}")));
            }
            seen[id] = true;
            let values: Vec<f64> = fields
                .map(|s| s.parse().map_err(|e| parse_err(lineno, format!("bad value {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            if values.len() != 2 * dim {
                return Err(parse_err(lineno, format!("expected {} values, got {}", 2 * dim, values.len())));
            }
            nu[id * dim..(id + 1) * dim].copy_from_slice(&values[..dim]);
            log_psi[id * dim..(id + 1) * dim].copy_from_slice(&values[dim..]);
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(parse_err(0, format!("object {missing} missing from snapshot")));
        }
        Self::new(n, dim, nu, log_psi)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_snapshot(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_snapshot(std::fs::File::open(path)?)
    }
}

/// Gradient with respect to every mean and log-variance entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGradient {
    pub nu: Vec<f64>,
    pub log_psi: Vec<f64>,
}

impl EmbeddingGradient {
    fn zeros(len: usize) -> Self {
        EmbeddingGradient { nu: vec![0.0; len], log_psi: vec![0.0; len] }
    }

    pub fn max_abs(&self) -> f64 {
        self.nu.iter().chain(&self.log_psi).fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Standard-normal draws for every (triplet, sample, role) of a batch,
/// laid out as `[triplet][sample][i, j, k][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenNoise {
    samples: usize,
    dim: usize,
    eps: Vec<f64>,
}

impl FrozenNoise {
    pub fn draw<R: Rng + ?Sized>(batch_len: usize, samples: usize, dim: usize, rng: &mut R) -> Self {
        let eps = (0..batch_len * samples * 3 * dim).map(|_| rng.sample(StandardNormal)).collect();
        FrozenNoise { samples, dim, eps }
    }

    fn slot(&self, t: usize, s: usize) -> &[f64] {
        let w = 3 * self.dim;
        let start = (t * self.samples + s) * w;
        &self.eps[start..start + w]
    }
}

/// Work done by the likelihood part of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    /// Sampled triplet terms evaluated.
    pub triplet_evals: u64,
    /// Sampled triplets skipped because the pair coincided.
    pub skipped: u64,
}

fn check_batch(emb: &GaussianEmbedding, batch: &[TripletObservation]) -> Result<()> {
    for t in batch {
        t.validate(emb.n)?;
    }
    Ok(())
}

/// Sampled positions for one triplet, `[x̂_i, x̂_j, x̂_k]` concatenated.
fn sampled(emb: &GaussianEmbedding, t: &TripletObservation, eps: &[f64], out: &mut [f64]) {
    let d = emb.dim;
    for (r, id) in [t.i, t.j, t.k].into_iter().enumerate() {
        for c in 0..d {
            let p = id * d + c;
            out[r * d + c] = emb.nu[p] + (0.5 * emb.log_psi[p]).exp() * eps[r * d + c];
        }
    }
}

/// Log-likelihood of one sampled triplet, and optionally its gradient
/// accumulated into `grad` with weight `weight`. `None` when the sampled
/// pair is degenerate.
fn triplet_term(
    emb: &GaussianEmbedding,
    t: &TripletObservation,
    eps: &[f64],
    buf: &mut [f64],
    grad: Option<(&mut EmbeddingGradient, f64)>,
) -> Option<f64> {
    let d = emb.dim;
    sampled(emb, t, eps, buf);
    let (xi, rest) = buf.split_at(d);
    let (xj, xk) = rest.split_at(d);
    let len2 = dist2(xi, xj);
    if len2.sqrt() < DEGENERACY_TOL {
        return None;
    }
    let len = len2.sqrt();
    let a = dist2(xj, xk) - dist2(xi, xk);
    let g = a / (2.0 * len);
    let value = log_normal_cdf(g);
    if let Some((grad, weight)) = grad {
        let coef = weight * inv_mills(g);
        let corr = a / (2.0 * len2 * len);
        for c in 0..d {
            let diff = xi[c] - xj[c];
            let gi = -(xi[c] - xk[c]) / len - corr * diff;
            let gj = (xj[c] - xk[c]) / len + corr * diff;
            let gk = diff / len;
            for (r, (id, gx)) in [(t.i, gi), (t.j, gj), (t.k, gk)].into_iter().enumerate() {
                let p = id * d + c;
                grad.nu[p] += coef * gx;
                grad.log_psi[p] += coef * gx * 0.5 * (0.5 * emb.log_psi[p]).exp() * eps[r * d + c];
            }
        }
    }
    Some(value)
}

fn add_kl_gradient(emb: &GaussianEmbedding, grad: &mut EmbeddingGradient) {
    for p in 0..emb.nu.len() {
        grad.nu[p] -= emb.nu[p];
        grad.log_psi[p] -= 0.5 * (emb.log_psi[p].exp() - 1.0);
    }
}

fn likelihood_scale(batch_len: usize, total: usize) -> f64 {
    if batch_len == 0 {
        0.0
    } else {
        total.max(batch_len) as f64 / batch_len as f64
    }
}

fn objective(
    emb: &GaussianEmbedding,
    batch: &[TripletObservation],
    total: usize,
    noise: &FrozenNoise,
    mut grad: Option<&mut EmbeddingGradient>,
    ops: &mut OpCounter,
) -> Result<f64> {
    check_batch(emb, batch)?;
    if noise.dim != emb.dim || noise.eps.len() < batch.len() * noise.samples * 3 * emb.dim {
        return Err(Error::DimensionMismatch { expected: batch.len() * noise.samples * 3 * emb.dim, got: noise.eps.len() });
    }
    let weight = likelihood_scale(batch.len(), total) / noise.samples as f64;
    let mut buf = vec![0.0; 3 * emb.dim];
    let mut loglik = 0.0;
    for (ti, t) in batch.iter().enumerate() {
        for s in 0..noise.samples {
            ops.triplet_evals += 1;
            let g = grad.as_deref_mut().map(|g| (g, weight));
            match triplet_term(emb, t, noise.slot(ti, s), &mut buf, g) {
                Some(v) => loglik += weight * v,
                None => ops.skipped += 1,
            }
        }
    }
    if let Some(g) = grad {
        add_kl_gradient(emb, g);
    }
    Ok(loglik - emb.kl())
}

/// ELBO estimate with fixed noise. The batch likelihood is rescaled by
/// `total / batch.len()` so that it estimates the full-data objective.
pub fn elbo_with_noise(emb: &GaussianEmbedding, batch: &[TripletObservation], total: usize, noise: &FrozenNoise) -> Result<f64> {
    objective(emb, batch, total, noise, None, &mut OpCounter::default())
}

/// Exact gradient of [`elbo_with_noise`] together with its value.
pub fn elbo_gradient_with_noise(
    emb: &GaussianEmbedding,
    batch: &[TripletObservation],
    total: usize,
    noise: &FrozenNoise,
) -> Result<(f64, EmbeddingGradient)> {
    let mut grad = EmbeddingGradient::zeros(emb.nu.len());
    let v = objective(emb, batch, total, noise, Some(&mut grad), &mut OpCounter::default())?;
    Ok((v, grad))
}

/// Draws noise for a batch, redrawing once for any sample whose pair
/// coincides; samples that stay degenerate are skipped.
fn draw_noise<R: Rng + ?Sized>(emb: &GaussianEmbedding, batch: &[TripletObservation], samples: usize, rng: &mut R) -> FrozenNoise {
    let mut noise = FrozenNoise::draw(batch.len(), samples, emb.dim, rng);
    let d = emb.dim;
    let mut buf = vec![0.0; 3 * d];
    for (ti, t) in batch.iter().enumerate() {
        for s in 0..samples {
            sampled(emb, t, noise.slot(ti, s), &mut buf);
            if dist2(&buf[..d], &buf[d..2 * d]).sqrt() < DEGENERACY_TOL {
                let start = (ti * samples + s) * 3 * d;
                for e in &mut noise.eps[start..start + 3 * d] {
                    *e = rng.sample(StandardNormal);
                }
                sampled(emb, t, noise.slot(ti, s), &mut buf);
                if dist2(&buf[..d], &buf[d..2 * d]).sqrt() < DEGENERACY_TOL {
                    log::warn!("skipping triplet ({}, {}; {}): sampled pair coincides", t.i, t.j, t.k);
                }
            }
        }
    }
    noise
}

/// Reparameterised Monte Carlo ELBO estimate with `samples` draws per triplet.
pub fn elbo_estimate<R: Rng + ?Sized>(
    emb: &GaussianEmbedding,
    batch: &[TripletObservation],
    total: usize,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    check_batch(emb, batch)?;
    let noise = draw_noise(emb, batch, samples.max(1), rng);
    elbo_with_noise(emb, batch, total, &noise)
}

/// Gradient of one [`elbo_estimate`] draw.
pub fn elbo_gradient<R: Rng + ?Sized>(
    emb: &GaussianEmbedding,
    batch: &[TripletObservation],
    total: usize,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, EmbeddingGradient)> {
    check_batch(emb, batch)?;
    let noise = draw_noise(emb, batch, samples.max(1), rng);
    elbo_gradient_with_noise(emb, batch, total, &noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Optimizer {
    /// Plain stochastic gradient ascent.
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Noise draws per triplet per step.
    pub samples: usize,
    pub rng_seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 2,
            epochs: 50,
            batch_size: 256,
            learning_rate: 0.01,
            samples: 1,
            rng_seed: 0,
            optimizer: Optimizer::adam(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.samples == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("dim, samples and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Objective below which training is considered diverged.
pub const DIVERGENCE_FLOOR: f64 = -1e6;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStats {
    /// Mean minibatch ELBO estimate per epoch.
    pub epoch_objective: Vec<f64>,
    pub steps: u64,
    pub ops: OpCounter,
}

/// Minibatch trainer. Epochs can be driven one at a time.
pub struct Trainer<'a> {
    emb: GaussianEmbedding,
    triplets: &'a [TripletObservation],
    config: TrainConfig,
    rng: rng::SearchRng,
    order: Vec<usize>,
    m1: Vec<f64>,
    m2: Vec<f64>,
    t: u64,
    stats: TrainStats,
}

impl<'a> Trainer<'a> {
    /// Starts from `warm` when given (its dimension must match), otherwise
    /// from a fresh initialisation.
    pub fn new(store: &'a TripletStore, config: TrainConfig, warm: Option<GaussianEmbedding>) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.rng_seed, Purpose::Train, 0);
        let emb = match warm {
            Some(w) => {
                if w.dim != config.dim || w.n != store.num_objects() {
                    return Err(Error::DimensionMismatch { expected: config.dim, got: w.dim });
                }
                w
            }
            None => GaussianEmbedding::initial(store.num_objects(), config.dim, &mut rng)?,
        };
        let len = emb.nu.len();
        Ok(Trainer {
            emb,
            triplets: store.triplets(),
            order: (0..store.len()).collect(),
            m1: vec![0.0; 2 * len],
            m2: vec![0.0; 2 * len],
            t: 0,
            config,
            rng,
            stats: TrainStats::default(),
        })
    }

    pub fn embedding(&self) -> &GaussianEmbedding {
        &self.emb
    }

    pub fn stats(&self) -> &TrainStats {
        &self.stats
    }

    fn apply(&mut self, grad: &EmbeddingGradient) {
        let lr = self.config.learning_rate;
        let len = self.emb.nu.len();
        match self.config.optimizer {
            Optimizer::Sgd => {
                for p in 0..len {
                    self.emb.nu[p] += lr * grad.nu[p];
                    self.emb.log_psi[p] += lr * grad.log_psi[p];
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                let params = self.emb.nu.iter_mut().chain(self.emb.log_psi.iter_mut());
                let grads = grad.nu.iter().chain(&grad.log_psi);
                for (((p, g), m1), m2) in params.zip(grads).zip(&mut self.m1).zip(&mut self.m2) {
                    *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                    *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                    *p += lr * (*m1 / c1) / ((*m2 / c2).sqrt() + eps);
                }
            }
        }
    }

    /// One pass over the shuffled triplets.
    pub fn run_epoch(&mut self) -> Result<f64> {
        self.order.shuffle(&mut self.rng);
        let total = self.triplets.len();
        let mut sum = 0.0;
        let mut batches = 0usize;
        let mut batch = Vec::with_capacity(self.config.batch_size);
        let epoch = self.stats.epoch_objective.len();
        let order = std::mem::take(&mut self.order);
        for chunk in order.chunks(self.config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| self.triplets[k]));
            let noise = draw_noise(&self.emb, &batch, self.config.samples, &mut self.rng);
            let mut grad = EmbeddingGradient::zeros(self.emb.nu.len());
            let value = objective(&self.emb, &batch, total, &noise, Some(&mut grad), &mut self.stats.ops)?;
            if !value.is_finite() || value < DIVERGENCE_FLOOR || !grad.max_abs().is_finite() {
                return Err(Error::Diverged { epoch, objective: value });
            }
            self.apply(&grad);
            self.stats.steps += 1;
            sum += value;
            batches += 1;
        }
        self.order = order;
        if self.emb.nu.iter().chain(&self.emb.log_psi).any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch, objective: f64::NAN });
        }
        let mean = if batches == 0 { -self.emb.kl() } else { sum / batches as f64 };
        self.stats.epoch_objective.push(mean);
        Ok(mean)
    }

    pub fn finish(self) -> (GaussianEmbedding, TrainStats) {
        (self.emb, self.stats)
    }
}

/// Trains for `config.epochs` epochs, resuming from `warm` when given.
pub fn train(store: &TripletStore, config: &TrainConfig, warm: Option<GaussianEmbedding>) -> Result<(GaussianEmbedding, TrainStats)> {
    if store.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty triplet store".into()));
    }
    let mut trainer = Trainer::new(store, config.clone(), warm)?;
    for _ in 0..config.epochs {
        trainer.run_epoch()?;
    }
    let (emb, stats) = trainer.finish();
    log::debug!(
        "trained on {} triplets: {} steps, final objective {:?}",
        store.len(),
        stats.steps,
        stats.epoch_objective.last()
    );
    Ok((emb, stats))
}

/// Fraction of triplets whose reference is strictly closer to `i` than to
/// `j` under `means`; exact ties count half.
pub fn triplet_accuracy(means: &ObjectSet, holdout: &[TripletObservation]) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::InvalidArgument("empty holdout set".into()));
    }
    let mut score = 0.0;
    for t in holdout {
        t.validate(means.len())?;
        let di = dist2(means.row(t.i), means.row(t.k));
        let dj = dist2(means.row(t.j), means.row(t.k));
        score += if di < dj {
            1.0
        } else if di == dj {
            0.5
        } else {
            0.0
        };
    }
    Ok(score / holdout.len() as f64)
}

/// `folds`-fold cross-validated triplet accuracy after a deterministic
/// shuffle. Returns one accuracy per fold.
pub fn cross_validate(store: &TripletStore, config: &TrainConfig, folds: usize) -> Result<Vec<f64>> {
    if folds < 2 || folds > store.len() {
        return Err(Error::InvalidArgument(format!("cannot split {} triplets into {folds} folds", store.len())));
    }
    let mut order: Vec<usize> = (0..store.len()).collect();
    order.shuffle(&mut rng::stream(config.rng_seed, Purpose::Data, 0));
    let all = store.triplets();
    (0..folds)
        .map(|f| {
            let (mut train_set, mut test_set) = (Vec::new(), Vec::new());
            for (pos, &k) in order.iter().enumerate() {
                if pos % folds == f { test_set.push(all[k]) } else { train_set.push(all[k]) }
            }
            let fold_store = TripletStore::from_triplets(store.num_objects(), train_set)?;
            let (emb, _) = train(&fold_store, config, None)?;
            triplet_accuracy(&emb.means_as_objects()?, &test_set)
        })
        .collect()
}

/// Triplets `(i, j; k)` over random distinct objects, answered by the probit
/// oracle on `truth` (noiseless when `sigma` is zero).
pub fn simulate_triplets<R: Rng + ?Sized>(truth: &ObjectSet, count: usize, sigma: f64, rng: &mut R) -> Result<Vec<TripletObservation>> {
    let n = truth.len();
    if n < 3 {
        return Err(Error::NotEnoughObjects);
    }
    let noise = if sigma > 0.0 { crate::oracle::Noise::probit(sigma)? } else { crate::oracle::Noise::Noiseless };
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        if a == b || a == k || b == k {
            continue;
        }
        let Ok(h) = crate::geometry::bisect(truth.row(a), truth.row(b)) else { continue };
        let p = crate::oracle::answer_prob(&h, truth.row(k), noise)?;
        let (i, j) = if rng.random::<f64>() < p { (a, b) } else { (b, a) };
        out.push(TripletObservation::new(i, j, k, 0, out.len() as u64)?);
    }
    Ok(out)
}
