//! Small statistics helpers over row-major data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Mean and (population) covariance of the rows of a row-major matrix.
pub fn mean_and_covariance(data: &[f64], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = data.len() / dim;
    let mut mean = DVector::zeros(dim);
    for row in data.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for row in data.chunks_exact(dim) {
        for r in 0..dim {
            let dr = row[r] - mean[r];
            for c in 0..=r {
                cov[(r, c)] += dr * (row[c] - mean[c]);
            }
        }
    }
    for r in 0..dim {
        for c in 0..r {
            cov[(c, r)] = cov[(r, c)];
        }
    }
    cov /= n as f64;
    (mean, cov)
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue.
pub fn sorted_eigen(matrix: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(matrix);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = eig.eigenvectors.select_columns(&order);
    (values, vectors)
}

/// Median of a slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
