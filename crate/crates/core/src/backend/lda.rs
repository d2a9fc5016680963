//! Fisher LDA for dimensions far above the sample count.
//!
//! No scatter matrix is formed in input space. The span of the centered
//! data comes from the eigendecomposition of the smaller Gram matrix; the
//! within-class scatter is whitened inside that span (with a variance floor
//! for directions that do not vary within classes), and the whitened class
//! means are decomposed once more for the discriminant directions.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{LidError, Result};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// Floor on within-class variance along a retained direction.
pub const WHITENING_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LdaProjector {
    pub mean: DVector<f64>,
    /// `input_dim × k`.
    pub projection: DMatrix<f64>,
}

impl LdaProjector {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn project(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(LidError::Shape(format!(
                "LDA expects {}-dim input, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let centered = DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(a, m)| a - m));
        Ok(self.projection.tr_mul(&centered))
    }
}

/// Eigenpairs sorted by descending eigenvalue.
pub(crate) fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(eig.eigenvectors.nrows(), order.len());
    for (j, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).clone_owned();
        // Fix the sign so the largest-magnitude entry is positive.
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (k, v)| if v.abs() > best.1 { (k, v.abs()) } else { best });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(j, &col);
    }
    (values, vectors)
}

/// Groups row indices by label, in label order.
pub(crate) fn class_index(labels: &[String]) -> BTreeMap<&str, Vec<usize>> {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        map.entry(l.as_str()).or_default().push(i);
    }
    map
}

fn retained(vals: &[f64]) -> usize {
    let top = vals.first().copied().unwrap_or(0.0).max(0.0);
    vals.iter().take_while(|&&l| l > RANK_TOLERANCE * top).count()
}

pub(crate) fn check_batch(classes: &BTreeMap<&str, Vec<usize>>) -> Result<()> {
    if classes.len() < 2 {
        return Err(LidError::DegenerateBatch(format!(
            "need at least 2 classes, got {}",
            classes.len()
        )));
    }
    if let Some((c, _)) = classes.iter().find(|(_, v)| v.len() < 2) {
        return Err(LidError::DegenerateBatch(format!(
            "class {c} has fewer than 2 samples"
        )));
    }
    Ok(())
}

/// Fits an LDA projection of `x` (one sample per row) to
/// `min(k, classes − 1)` dimensions.
pub fn fit_lda(x: &DMatrix<f64>, labels: &[String], k: usize) -> Result<LdaProjector> {
    let (n, d) = x.shape();
    if labels.len() != n {
        return Err(LidError::Shape("one label per sample required".into()));
    }
    if k == 0 {
        return Err(LidError::Config("LDA output dimension must be positive".into()));
    }
    let classes = class_index(labels);
    check_batch(&classes)?;
    let c = classes.len();
    let k = k.min(c - 1);

    let mean = x.row_mean().transpose();
    let mut class_means = Vec::with_capacity(c);
    let mut within = x.clone();
    for rows in classes.values() {
        let mut mu = DVector::<f64>::zeros(d);
        for &i in rows {
            mu += x.row(i).transpose();
        }
        mu /= rows.len() as f64;
        for &i in rows {
            let mut r = within.row_mut(i);
            r -= mu.transpose();
        }
        class_means.push((rows.len(), mu));
    }

    // Orthonormal basis of the data's span around the global mean, from
    // whichever Gram matrix is smaller.
    let mut total = x.clone();
    for mut row in total.row_iter_mut() {
        row -= mean.transpose();
    }
    let basis = if n <= d {
        let (vals, u) = sorted_eigen(&total * total.transpose());
        let r = retained(&vals);
        let mut v = DMatrix::zeros(d, r);
        for j in 0..r {
            v.set_column(j, &(total.tr_mul(&u.column(j)) / vals[j].sqrt()));
        }
        v
    } else {
        let (vals, v) = sorted_eigen(total.tr_mul(&total));
        let r = retained(&vals);
        v.columns(0, r).clone_owned()
    };
    drop(total);
    let r = basis.ncols();
    if r < k {
        return Err(LidError::DegenerateBatch(format!(
            "data rank {r} is below the requested {k} dimensions"
        )));
    }

    // Within-class covariance inside that span, whitened with a variance floor.
    let z = &within * &basis;
    drop(within);
    let dof = (n - c).max(1) as f64;
    let (wvals, wvecs) = sorted_eigen(z.tr_mul(&z) / dof);
    let mut whiten_r = wvecs;
    for (j, &l) in wvals.iter().enumerate() {
        whiten_r.column_mut(j).scale_mut(1.0 / l.max(WHITENING_FLOOR).sqrt());
    }
    let whiten = basis * whiten_r;

    let mut between = DMatrix::<f64>::zeros(c, r);
    for (i, (count, mu)) in class_means.iter().enumerate() {
        let row = whiten.tr_mul(&(mu - &mean)) * (*count as f64).sqrt();
        between.set_row(i, &row.transpose());
    }
    let (_, vb) = sorted_eigen(between.tr_mul(&between));
    let projection = whiten * vb.columns(0, k);
    Ok(LdaProjector { mean, projection })
}
