use anyhow::{bail, Result};
use pairsearch_core::catalog::ObjectSet;
use pairsearch_core::rng::{self, Purpose};
use rand::Rng;

use crate::spec::Dataset;

/// `n` i.i.d. uniform points in `[0, 1]^d`, fixed by `seed`.
pub fn gen_hypercube(n: usize, d: usize, seed: u64) -> Result<ObjectSet> {
    if n < 2 || d == 0 {
        bail!("need at least two objects and one dimension, got n = {n}, d = {d}");
    }
    let mut rng = rng::stream(seed, Purpose::Data, ((d as u64) << 32) | n as u64);
    let data = (0..n * d).map(|_| rng.random::<f64>()).collect();
    Ok(ObjectSet::new(d, data)?.with_labels((0..n).map(|i| format!("object {i}")).collect())?)
}

pub fn load_dataset(dataset: &Dataset, seed: u64) -> Result<ObjectSet> {
    match dataset {
        Dataset::Hypercube { n, d } => gen_hypercube(*n, *d, seed),
        Dataset::Csv { path, standardize } => {
            let set = ObjectSet::load_csv(path)?;
            Ok(if *standardize { set.standardized() } else { set })
        }
    }
}
