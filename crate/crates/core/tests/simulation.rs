use pairsearch_core::baselines::{run_baseline_episode, PairLikelihoods, Strategy};
use pairsearch_core::catalog::ObjectSet;
use pairsearch_core::embed::TrainConfig;
use pairsearch_core::learn2search::{power_schedule, run_blind, BlindConfig, EmbeddingMode};
use pairsearch_core::oracle::{calibrate_sigma, Noise, OracleConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hypercube(n: usize, d: usize, seed: u64) -> ObjectSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ObjectSet::new(d, (0..n * d).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn mean(v: &[usize]) -> f64 {
    v.iter().sum::<usize>() as f64 / v.len() as f64
}

fn sd(v: &[usize]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (*x as f64 - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[test]
fn edge_cutting_sits_between_information_gain_and_random() {
    let x = hypercube(50, 5, 21);
    let sigma = calibrate_sigma(&x, 0.10, 100_000, 21).unwrap().sigma;
    let noise = Noise::probit(sigma).unwrap();
    let lik = PairLikelihoods::build(&x, noise).unwrap();
    let oracle = OracleConfig { noise, rng_seed: 22 };
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let targets: Vec<usize> = (0..200).map(|_| rng.random_range(0..50)).collect();
    let run = |s: Strategy| -> Vec<usize> {
        targets
            .iter()
            .enumerate()
            .map(|(e, &t)| run_baseline_episode(s, &x, Some(&lik), t, noise, oracle, 500, 24, e as u64).unwrap().queries_used)
            .collect()
    };
    let (ig, eff, random) = (run(Strategy::Ig), run(Strategy::Eff), run(Strategy::Random));
    let (m_ig, m_eff, m_rand) = (mean(&ig), mean(&eff), mean(&random));
    let slack = 2.0 * (sd(&ig) + sd(&eff)) / (targets.len() as f64).sqrt();
    assert!(m_eff >= m_ig - slack && m_eff < m_rand, "IG {m_ig}, Eff {m_eff}, Random {m_rand}");
}

fn blind(n: usize, episodes: usize, schedule: Vec<usize>, seed: u64) -> pairsearch_core::learn2search::BlindRun {
    let truth = hypercube(n, 3, seed);
    let sigma = calibrate_sigma(&truth, 0.10, 20_000, seed).unwrap().sigma;
    let train = TrainConfig { dim: 3, epochs: 40, rng_seed: seed, ..TrainConfig::default() };
    let oracle = OracleConfig { noise: Noise::probit(sigma).unwrap(), rng_seed: seed };
    let mut cfg = BlindConfig::new(EmbeddingMode::GaussEmbed, episodes, train, oracle, seed);
    cfg.schedule = schedule;
    cfg.window = 100;
    run_blind(&truth, &cfg).unwrap()
}

#[test]
fn query_spread_shrinks_as_the_embedding_firms_up() {
    let run = blind(150, 400, power_schedule(8), 31);
    let early = run.query_spread[2..20].iter().sum::<f64>() / 18.0;
    let late = run.query_spread[300..].iter().sum::<f64>() / 100.0;
    assert!(late < early, "early {early}, late {late}");
    assert_eq!(run.snapshots.len(), 9);
}

#[test]
fn stored_triplets_point_back_to_their_episode() {
    let run = blind(80, 120, power_schedule(5), 32);
    for t in run.store.triplets() {
        let row = &run.rows[t.source as usize - 1];
        assert_eq!(row.target, t.k);
        assert!((t.timestamp as usize) < row.queries);
        assert!(t.i != t.k && t.j != t.k);
    }
    // every answered query yields a triplet, except the one showing the target
    let answered: usize = run.queries().iter().sum();
    let found = run.rows.iter().filter(|r| r.queries < 80).count();
    assert!(run.store.len() <= answered && run.store.len() + found >= answered);
}

#[test]
fn without_retraining_there_is_no_improvement() {
    let run = blind(150, 600, Vec::new(), 33);
    assert!(run.snapshots.is_empty());
    let q = run.queries();
    let (first, second) = q.split_at(300);
    let se = (sd(first).powi(2) / 300.0 + sd(second).powi(2) / 300.0).sqrt();
    let gap = mean(first) - mean(second);
    assert!(gap.abs() < 3.0 * se, "first half {}, second half {}", mean(first), mean(second));
}
