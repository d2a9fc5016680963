//! Two-covariance probabilistic LDA with closed-form moment estimates.
//!
//! A class mean `y_c ~ N(m, Φb)` and samples `x ~ N(y_c, Φw)`. In the
//! canonical basis `u = T(x − m)` the within-class covariance is the identity
//! and the between-class covariance is `diag(λ)`, so scoring is per-dimension.

use nalgebra::{DMatrix, DVector};

use super::lda::{check_batch, class_index, sorted_eigen};
use crate::error::{LidError, Result};

/// Relative eigenvalue floor that keeps Φw positive definite.
pub const PD_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    pub mean: DVector<f64>,
    pub phi_b: DMatrix<f64>,
    pub phi_w: DMatrix<f64>,
    /// Rows map centered inputs to the canonical basis.
    pub transform: DMatrix<f64>,
    /// Between-class variances in the canonical basis.
    pub lambda: DVector<f64>,
    /// Class labels in lexicographic order.
    pub classes: Vec<String>,
    /// Per-class mean of canonical coordinates (one row per class).
    pub class_means: DMatrix<f64>,
    pub class_counts: Vec<usize>,
}

fn outer_sum(vs: impl Iterator<Item = DVector<f64>>, k: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(k, k);
    for v in vs {
        s += &v * v.transpose();
    }
    s
}

/// Fits the model on `x` (one `k`-dim sample per row).
pub fn fit_plda(x: &DMatrix<f64>, labels: &[String]) -> Result<PldaModel> {
    let (n, k) = x.shape();
    if labels.len() != n {
        return Err(LidError::Shape("one label per sample required".into()));
    }
    let groups = class_index(labels);
    check_batch(&groups)?;
    let c = groups.len();
    if n <= c {
        return Err(LidError::DegenerateBatch("no within-class degrees of freedom".into()));
    }

    let row = |i: usize| x.row(i).transpose();
    let means: Vec<DVector<f64>> = groups
        .values()
        .map(|rows| rows.iter().fold(DVector::zeros(k), |a, &i| a + row(i)) / rows.len() as f64)
        .collect();
    let mean = means.iter().fold(DVector::zeros(k), |a, m| a + m) / c as f64;

    let phi_w = outer_sum(
        groups
            .values()
            .zip(&means)
            .flat_map(|(rows, mu)| rows.iter().map(move |&i| row(i) - mu)),
        k,
    ) / (n - c) as f64;

    // Scatter of class means overestimates Φb by the average Φw/n_c.
    let inv_count = groups.values().map(|r| 1.0 / r.len() as f64).sum::<f64>() / c as f64;
    let scatter = outer_sum(means.iter().map(|mu| mu - &mean), k) / (c - 1) as f64;
    let phi_b_raw = scatter - &phi_w * inv_count;

    let (wvals, wvecs) = sorted_eigen(phi_w.clone());
    let floor = PD_FLOOR * wvals[0].max(f64::MIN_POSITIVE);
    if wvals.iter().any(|&v| v < floor) {
        log::warn!("within-class covariance is not positive definite; flooring eigenvalues");
    }
    let mut whiten = wvecs.transpose();
    for (j, &v) in wvals.iter().enumerate() {
        whiten.row_mut(j).scale_mut(1.0 / v.max(floor).sqrt());
    }
    let (bvals, bvecs) = sorted_eigen(&whiten * &phi_b_raw * whiten.transpose());
    let lambda = DVector::from_iterator(k, bvals.iter().map(|&v| v.max(0.0)));
    let transform = bvecs.transpose() * whiten;

    // Φb clamped to PSD, expressed back in input coordinates.
    let t_inv = transform.clone().try_inverse().ok_or_else(|| {
        LidError::DegenerateBatch("canonical transform is singular".into())
    })?;
    let phi_b = &t_inv * DMatrix::from_diagonal(&lambda) * t_inv.transpose();

    let mut class_means = DMatrix::zeros(c, k);
    for (ci, mu) in means.iter().enumerate() {
        class_means.set_row(ci, &(&transform * (mu - &mean)).transpose());
    }
    Ok(PldaModel {
        mean,
        phi_b,
        phi_w,
        transform,
        lambda,
        classes: groups.keys().map(|s| s.to_string()).collect(),
        class_means,
        class_counts: groups.values().map(Vec::len).collect(),
    })
}

impl PldaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn canonical(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(LidError::Shape(format!(
                "pLDA expects {}-dim input, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(&self.transform * (x - &self.mean))
    }

    /// Log predictive density of `x` under each class, given that class's
    /// enrollment samples.
    pub fn log_likelihoods(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        let u = self.canonical(x)?;
        Ok((0..self.classes.len())
            .map(|ci| {
                let n = self.class_counts[ci] as f64;
                (0..self.dim())
                    .map(|d| {
                        let l = self.lambda[d];
                        let shrink = n * l / (1.0 + n * l);
                        let mu = shrink * self.class_means[(ci, d)];
                        let var = 1.0 + l / (1.0 + n * l);
                        let r = u[d] - mu;
                        -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + r * r / var)
                    })
                    .sum()
            })
            .collect())
    }

    /// Class posteriors under equal priors, in `classes` order.
    pub fn posteriors(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        let ll = self.log_likelihoods(x)?;
        let max = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = ll.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / s).collect())
    }
}
