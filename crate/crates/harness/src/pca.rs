use anyhow::{bail, Result};
use pairsearch_core::catalog::ObjectSet;
use pairsearch_core::stats::{mean_and_covariance, sorted_eigen};

/// Coordinates of the centred rows along the top `k` principal directions.
pub fn pca_project(points: &ObjectSet, k: usize) -> Result<ObjectSet> {
    let (n, d) = (points.len(), points.dim());
    if k == 0 || k > d || n < k {
        bail!("cannot project {n} points in {d} dimensions onto {k} components");
    }
    let (mean, cov) = mean_and_covariance(points.data(), d);
    let (_, vectors) = sorted_eigen(cov);
    let mut out = Vec::with_capacity(n * k);
    for row in points.rows() {
        for c in 0..k {
            out.push((0..d).map(|r| (row[r] - mean[r]) * vectors[(r, c)]).sum());
        }
    }
    Ok(ObjectSet::new(k, out)?)
}
