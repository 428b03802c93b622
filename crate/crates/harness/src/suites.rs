use std::fs;
use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use pairsearch_core::baselines::{run_baseline_episode, PairLikelihoods, Strategy, EXHAUSTIVE_MAX_N};
use pairsearch_core::catalog::{KdTree, ObjectSet};
use pairsearch_core::embed::{simulate_triplets, train, triplet_accuracy, read_triplets_jsonl, TripletStore};
use pairsearch_core::learn2search::{estimate_dim, run_blind, BlindConfig, EmbeddingMode};
use pairsearch_core::oracle::{calibrate_sigma, Calibration, Noise, OracleConfig, CALIBRATION_SAMPLES};
use pairsearch_core::rng::{self, Purpose};
use pairsearch_core::search::{convergence_sim, run_episode, EpisodeResult, SearchConfig};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_hypercube, load_dataset};
use crate::metrics::{write_rows, MetricsRow};
use crate::spec::{Dataset, ExperimentSpec};

fn micros(times: &[Duration]) -> f64 {
    if times.is_empty() {
        return 0.0;
    }
    times.iter().map(Duration::as_secs_f64).sum::<f64>() * 1e6 / times.len() as f64
}

/// Answer noise for `features`: the fixed value if given, otherwise
/// calibrated to the flip rate. A zero flip rate means noiseless answers.
pub fn answer_noise(spec: &ExperimentSpec, features: &ObjectSet) -> Result<Noise> {
    if let Some(s) = spec.sigma_eps {
        return Ok(Noise::probit(s)?);
    }
    if spec.flip_rate == 0.0 {
        return Ok(Noise::Noiseless);
    }
    Ok(Noise::probit(calibrate_sigma(features, spec.flip_rate, CALIBRATION_SAMPLES, spec.seed)?.sigma)?)
}

fn model_sigma(noise: Noise) -> f64 {
    match noise {
        Noise::Probit { sigma } => sigma,
        Noise::Noiseless => 1e-3,
    }
}

fn scaling_datasets(spec: &ExperimentSpec) -> Result<Vec<ObjectSet>> {
    match &spec.dataset {
        Dataset::Hypercube { d, .. } => spec.sizes.iter().map(|&n| gen_hypercube(n, *d, spec.seed)).collect(),
        csv @ Dataset::Csv { .. } => Ok(vec![load_dataset(csv, spec.seed)?]),
    }
}

/// Query counts and per-step times for every strategy on every catalog
/// size. The exhaustive strategies are skipped above
/// [`EXHAUSTIVE_MAX_N`] objects. Episode 0 warms caches and is discarded.
pub fn run_scaling_suite(spec: &ExperimentSpec) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for features in scaling_datasets(spec)? {
        let (n, d) = (features.len(), features.dim());
        let noise = answer_noise(spec, &features)?;
        let oracle = OracleConfig { noise, rng_seed: spec.seed };
        let max_steps = spec.max_steps.unwrap_or_else(|| SearchConfig::default_max_steps(n));
        let mut target_rng = rng::stream(spec.seed, Purpose::Target, n as u64);
        let targets: Vec<usize> = (0..=spec.episodes).map(|_| target_rng.random_range(0..n)).collect();
        let index = KdTree::build(&features);
        let needs_table = spec.strategies.iter().any(|s| s.is_exhaustive()) && n <= EXHAUSTIVE_MAX_N;
        let lik = if needs_table { Some(PairLikelihoods::build(&features, Noise::probit(model_sigma(noise))?)?) } else { None };
        let search_cfg = SearchConfig::new(model_sigma(noise), spec.stop_rule, max_steps, spec.seed)?;

        for &strategy in &spec.strategies {
            if strategy.is_exhaustive() && n > EXHAUSTIVE_MAX_N {
                log::info!("skipping {} at n = {n}", strategy.name());
                continue;
            }
            let run = |episode: usize| -> pairsearch_core::Result<EpisodeResult> {
                let target = targets[episode];
                match strategy {
                    Strategy::GaussSearch => run_episode(&features, &index, target, &search_cfg, oracle, episode as u64),
                    _ => run_baseline_episode(
                        strategy,
                        &features,
                        lik.as_ref(),
                        target,
                        Noise::probit(model_sigma(noise))?,
                        oracle,
                        max_steps,
                        spec.seed,
                        episode as u64,
                    ),
                }
            };
            run(0)?;
            let results: Vec<EpisodeResult> = (1..=spec.episodes).into_par_iter().map(run).collect::<pairsearch_core::Result<_>>()?;
            rows.extend(results.into_iter().enumerate().map(|(k, r)| MetricsRow {
                strategy: strategy.name().to_string(),
                n,
                d,
                episode: k + 1,
                queries: r.queries_used,
                t_select_us: Some(micros(&r.select_times)),
                t_update_us: Some(micros(&r.update_times)),
                window_mean: None,
            }));
            log::info!("{} at n = {n}: done", strategy.name());
        }
    }
    Ok(rows)
}

/// Runs the blind-setting framework once per embedding mode. Writes the
/// per-episode CSV and the retrain snapshots of each mode under `out`.
pub fn run_blind_suite(spec: &ExperimentSpec, out: Option<&Path>) -> Result<Vec<MetricsRow>> {
    let truth = load_dataset(&spec.dataset, spec.seed)?;
    let oracle = OracleConfig { noise: answer_noise(spec, &truth)?, rng_seed: spec.seed };
    let mut rows = Vec::new();
    for &mode in &spec.blind.modes {
        let mut cfg = BlindConfig::new(mode, spec.blind.episodes, spec.train.clone(), oracle, spec.seed);
        cfg.schedule = spec.blind.schedule.clone();
        cfg.window = spec.window;
        cfg.max_steps = spec.max_steps;
        let run = run_blind(&truth, &cfg)?;
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            write_rows(fs::File::create(dir.join(format!("blind-{}.csv", mode.name())))?, &run.rows)?;
            for (episode, emb) in &run.snapshots {
                emb.save(dir.join(format!("{}-snapshot-{episode}.txt", mode.name())))?;
            }
        }
        rows.extend(run.rows.iter().map(|r| MetricsRow {
            strategy: mode.name().to_string(),
            n: truth.len(),
            d: truth.dim(),
            episode: r.episode,
            queries: r.queries,
            t_select_us: None,
            t_update_us: None,
            window_mean: Some(r.window_mean),
        }));
        log::info!("blind {}: final window mean {:.2}", mode.name(), run.rows.last().map_or(0.0, |r| r.window_mean));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub run: usize,
    pub m: usize,
    pub mean: f64,
    pub variance: f64,
    pub abs_error: f64,
}

/// One-dimensional dense-space traces of the posterior mean and variance.
pub fn run_convergence_suite(spec: &ExperimentSpec) -> Result<Vec<ConvergenceRow>> {
    let c = &spec.convergence;
    (0..c.runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = rng::stream(spec.seed, Purpose::Search, run as u64);
            let trace = convergence_sim(c.target, c.prior_mean, c.prior_variance, c.steps, &mut rng)?;
            Ok(trace
                .into_iter()
                .enumerate()
                .map(|(m, (mean, variance))| ConvergenceRow { run, m, mean, variance, abs_error: (mean - c.target).abs() })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()
        .map(|runs| runs.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub d: usize,
    pub flip_rate: f64,
    pub sigma: f64,
    pub analytic_rate: f64,
    pub measured_rate: f64,
    pub samples: usize,
}

pub fn run_calibration(spec: &ExperimentSpec) -> Result<CalibrationReport> {
    let features = load_dataset(&spec.dataset, spec.seed)?;
    if spec.flip_rate == 0.0 {
        bail!("calibration needs a positive flip rate");
    }
    let Calibration { sigma, analytic_rate, measured_rate, samples } =
        calibrate_sigma(&features, spec.flip_rate, CALIBRATION_SAMPLES, spec.seed)?;
    Ok(CalibrationReport { n: features.len(), d: features.dim(), flip_rate: spec.flip_rate, sigma, analytic_rate, measured_rate, samples })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedReport {
    pub n: usize,
    pub train_triplets: usize,
    pub holdout_triplets: usize,
    pub dim: usize,
    pub epochs: usize,
    pub holdout_accuracy: f64,
    pub estimated_dim: usize,
    pub final_objective: f64,
}

/// Trains an embedding on simulated (or supplied) triplets and scores it on
/// a held-out share. The embedding is saved to `out/embedding.txt`.
pub fn run_embed_eval(spec: &ExperimentSpec, out: Option<&Path>) -> Result<EmbedReport> {
    let truth = load_dataset(&spec.dataset, spec.seed)?;
    let n = truth.len();
    let triplets = match &spec.embed.triplet_file {
        Some(path) => read_triplets_jsonl(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?)?,
        None => {
            let sigma = match answer_noise(spec, &truth)? {
                Noise::Probit { sigma } => sigma,
                Noise::Noiseless => 0.0,
            };
            let mut rng = rng::stream(spec.seed, Purpose::Data, u64::MAX >> 17);
            simulate_triplets(&truth, spec.embed.triplets, sigma, &mut rng)?
        }
    };
    let holdout = ((triplets.len() as f64) * spec.embed.holdout_fraction).round() as usize;
    if holdout == 0 || holdout >= triplets.len() {
        bail!("{} triplets cannot be split with holdout fraction {}", triplets.len(), spec.embed.holdout_fraction);
    }
    let (fit, test) = triplets.split_at(triplets.len() - holdout);
    let store = TripletStore::from_triplets(n, fit.iter().copied())?;
    let (emb, stats) = train(&store, &spec.train, None)?;
    let means = emb.means_as_objects()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        emb.save(dir.join("embedding.txt"))?;
    }
    Ok(EmbedReport {
        n,
        train_triplets: fit.len(),
        holdout_triplets: test.len(),
        dim: emb.dim(),
        epochs: spec.train.epochs,
        holdout_accuracy: triplet_accuracy(&means, test)?,
        estimated_dim: estimate_dim(&means, spec.embed.energy)?,
        final_objective: stats.epoch_objective.last().copied().unwrap_or(f64::NAN),
    })
}

/// Window means of a blind run at the given (1-based) episode centres.
pub fn window_means(rows: &[MetricsRow], mode: EmbeddingMode, centres: &[usize], window: usize) -> Vec<f64> {
    let queries: Vec<usize> = rows.iter().filter(|r| r.strategy == mode.name()).map(|r| r.queries).collect();
    centres.iter().map(|&c| pairsearch_core::learn2search::centered_window_mean(&queries, c, window)).collect()
}
