//! Unbiased squared maximum mean discrepancy with an RBF kernel.

use serde::Serialize;

use crate::error::{Error, Result};

/// Smallest bandwidth used when every pooled point coincides.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct MmdReport {
    pub kernel: &'static str,
    pub bandwidth: f64,
    pub mmd2: f64,
    pub n_a: usize,
    pub n_b: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of all pairwise Euclidean distances over the pooled sample.
pub fn median_bandwidth(points: &[&[f64]]) -> f64 {
    let mut dists = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            dists.push(sq_dist(points[i], points[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return BANDWIDTH_FLOOR;
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let n = dists.len();
    let median = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    median.max(BANDWIDTH_FLOOR)
}

/// Unbiased MMD² between two feature sets.
///
/// Equal-sized sets use the paired U-statistic
/// `h(i,j) = k(a_i,a_j) + k(b_i,b_j) - k(a_i,b_j) - k(a_j,b_i)` over `i != j`,
/// which is exactly zero for identical sets. Unequal sizes fall back to the
/// standard unbiased estimator with a full cross term.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<MmdReport> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "mmd needs at least 2 samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::InvalidArgument("mmd feature dimensions differ".into()));
    }
    let pooled: Vec<&[f64]> = a.iter().chain(b).map(|v| v.as_slice()).collect();
    let bw = median_bandwidth(&pooled);
    let gamma = 1.0 / (2.0 * bw * bw);
    let k = |x: &[f64], y: &[f64]| (-gamma * sq_dist(x, y)).exp();
    let (m, n) = (a.len(), b.len());
    let mmd2 = if m == n {
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    acc += k(&a[i], &a[j]) + k(&b[i], &b[j]) - k(&a[i], &b[j]) - k(&a[j], &b[i]);
                }
            }
        }
        acc / (m * (m - 1)) as f64
    } else {
        let mut kaa = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    kaa += k(&a[i], &a[j]);
                }
            }
        }
        let mut kbb = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    kbb += k(&b[i], &b[j]);
                }
            }
        }
        let mut kab = 0.0;
        for x in a {
            for y in b {
                kab += k(x, y);
            }
        }
        kaa / (m * (m - 1)) as f64 + kbb / (n * (n - 1)) as f64 - 2.0 * kab / (m * n) as f64
    };
    Ok(MmdReport {
        kernel: "rbf-median",
        bandwidth: bw,
        mmd2,
        n_a: m,
        n_b: n,
    })
}
