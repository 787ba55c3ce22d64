use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues at or below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    /// `N × k'` coordinates of the centered inputs on the retained axes.
    pub coordinates: Vec<Vec<f64>>,
    /// `k' × F` unit axes, descending variance. Each axis has its
    /// largest-magnitude loading positive.
    pub axes: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Share of the total variance carried by each retained axis.
    pub explained_variance_ratio: Vec<f64>,
    /// Fewer than the requested `k` axes carry variance.
    pub rank_deficient: bool,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues and the matching eigenvectors as columns of a row-major
/// `n × n` matrix, unsorted.
pub(crate) fn symmetric_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Projects mean-centered `vectors` onto their top `k` principal axes.
pub fn pca_project(vectors: &[Vec<f64>], k: usize) -> Result<PcaProjection> {
    let n = vectors.len();
    if k == 0 || n < k {
        return Err(Error::InvalidInput(format!("PCA needs at least k = {k} > 0 rows, got {n}")));
    }
    let f = vectors[0].len();
    if f == 0 || vectors.iter().any(|r| r.len() != f) {
        return Err(Error::InvalidInput("PCA rows must share a non-zero width".into()));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("PCA input contains non-finite values".into()));
    }
    let mean: Vec<f64> = (0..f).map(|j| vectors.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; f * f];
    for r in &centered {
        for i in 0..f {
            for j in i..f {
                cov[i * f + j] += r[i] * r[j];
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..f {
        for j in i..f {
            cov[i * f + j] /= denom;
            cov[j * f + i] = cov[i * f + j];
        }
    }

    let (values, vecs) = symmetric_eigen(cov, f);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let largest = values[order[0]].max(0.0);

    let mut axes = Vec::new();
    let mut eigenvalues = Vec::new();
    for &i in order.iter().take(k) {
        let lambda = values[i];
        if largest == 0.0 || lambda <= RANK_TOLERANCE * largest {
            break;
        }
        let mut axis: Vec<f64> = (0..f).map(|r| vecs[r * f + i]).collect();
        let lead = axis.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(axis);
        eigenvalues.push(lambda);
    }
    let coordinates = centered
        .iter()
        .map(|r| axes.iter().map(|a| a.iter().zip(r).map(|(x, y)| x * y).sum()).collect())
        .collect();
    Ok(PcaProjection {
        coordinates,
        explained_variance_ratio: eigenvalues.iter().map(|l| l / total).collect(),
        rank_deficient: axes.len() < k,
        axes,
        eigenvalues,
    })
}
