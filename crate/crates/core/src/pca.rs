//! Two-component PCA for embedding visualization. The transform is fitted
//! once (on all points or bona fide only) and then applied unchanged to any
//! other set, so several splits share one coordinate system.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::protocol::Key;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FitOn {
    #[default]
    All,
    BonafideOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// 2 × D, rows orthonormal.
    pub components: Array2<f64>,
    /// Variance along each component, non-increasing.
    pub explained_variance: [f64; 2],
    /// Trace of the fitted covariance.
    pub total_variance: f64,
}

impl Pca {
    /// Fit on the rows of `x` (sample covariance, divisor n − 1). Each
    /// component is signed so that its entry of largest magnitude is positive.
    pub fn fit(x: ArrayView2<'_, f64>) -> Result<Self> {
        let (n, d) = x.dim();
        if n < 2 || d < 2 {
            return Err(Error::InvalidInput(format!("PCA needs at least 2 points in at least 2 dimensions, got {n} × {d}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("PCA input".into()));
        }
        let mean = x.mean_axis(Axis(0)).expect("n >= 2");
        let centred = &x - &mean;
        let cov = centred.t().dot(&centred) / (n - 1) as f64;
        let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

        let total_variance: f64 = (0..d).map(|i| cov[[i, i]]).sum();
        let lambda = [eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0)];
        let tol = 1e-12 * total_variance.max(f64::MIN_POSITIVE);
        let mut components = Array2::zeros((2, d));
        for (row, &k) in order[..2].iter().enumerate() {
            let v = eig.eigenvectors.column(k);
            let mut pivot = 0;
            for i in 1..d {
                if v[i].abs() > v[pivot].abs() {
                    pivot = i;
                }
            }
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..d {
                components[[row, i]] = sign * v[i];
            }
        }
        for (k, l) in lambda.iter().enumerate() {
            if *l <= tol {
                return Err(Error::Degenerate(format!(
                    "covariance has rank < 2: component {} has variance {l:e} along {:?}",
                    k + 1,
                    components.row(k).to_vec()
                )));
            }
        }
        Ok(Self { mean, components, explained_variance: lambda, total_variance })
    }

    pub fn explained_variance_ratio(&self) -> [f64; 2] {
        [self.explained_variance[0] / self.total_variance, self.explained_variance[1] / self.total_variance]
    }

    /// n × 2 coordinates of `x` in the fitted frame.
    pub fn transform(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::Shape(format!("PCA fitted on {} dims, got {}", self.mean.len(), x.ncols())));
        }
        Ok((&x - &self.mean).dot(&self.components.t()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub components: Array2<f64>,
    pub projected: Array2<f64>,
    pub labels: Vec<Key>,
    pub explained_variance: [f64; 2],
}

/// Fit on the `fit_on` subset of `embeddings` and project all of them.
pub fn pca_project(embeddings: ArrayView2<'_, f64>, labels: &[Key], fit_on: FitOn) -> Result<(Pca, ProjectionResult)> {
    if labels.len() != embeddings.nrows() {
        return Err(Error::Shape(format!("{} labels for {} embeddings", labels.len(), embeddings.nrows())));
    }
    let rows: Vec<usize> = (0..labels.len())
        .filter(|&i| fit_on == FitOn::All || labels[i] == Key::Bonafide)
        .collect();
    let pca = Pca::fit(embeddings.select(Axis(0), &rows).view())?;
    let projected = pca.transform(embeddings)?;
    let result = ProjectionResult {
        components: pca.components.clone(),
        projected,
        labels: labels.to_vec(),
        explained_variance: pca.explained_variance,
    };
    Ok((pca, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn planar_points_capture_everything() {
        let coeffs = gaussian(200, 2, 1);
        let basis = ndarray::array![[1.0, 2.0, 0.0, -1.0, 0.5], [0.0, 1.0, 1.0, 1.0, -2.0]];
        let x = coeffs.dot(&basis) + 3.0;
        let pca = Pca::fit(x.view()).unwrap();
        let r = pca.explained_variance_ratio();
        assert!((r[0] + r[1] - 1.0).abs() < 1e-9);
        let gram = pca.components.dot(&pca.components.t());
        assert!((&gram - &Array2::<f64>::eye(2)).iter().all(|v| v.abs() < 1e-9));
        assert!(pca.explained_variance[0] >= pca.explained_variance[1]);
    }

    #[test]
    fn refit_on_projection_is_identity_up_to_sign() {
        let coeffs = gaussian(100, 2, 2);
        let x = coeffs.dot(&ndarray::array![[1.0, 0.0, 2.0], [0.0, 3.0, 1.0]]);
        let pca = Pca::fit(x.view()).unwrap();
        let y = pca.transform(x.view()).unwrap();
        let y2 = Pca::fit(y.view()).unwrap().transform(y.view()).unwrap();
        for k in 0..2 {
            let same = (0..y.nrows()).all(|i| (y[[i, k]] - y2[[i, k]]).abs() < 1e-9);
            let flipped = (0..y.nrows()).all(|i| (y[[i, k]] + y2[[i, k]]).abs() < 1e-9);
            assert!(same || flipped);
        }
    }

    #[test]
    fn sign_convention() {
        let pca = Pca::fit(gaussian(50, 4, 3).view()).unwrap();
        for row in pca.components.rows() {
            let pivot = row.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn rank_one_is_degenerate() {
        let t = gaussian(20, 1, 4);
        let x = Array2::from_shape_fn((20, 3), |(i, j)| t[[i, 0]] * (j + 1) as f64);
        assert!(matches!(Pca::fit(x.view()), Err(Error::Degenerate(_))));
        assert!(Pca::fit(ndarray::array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn bonafide_only_fit_uses_subset() {
        let x = gaussian(40, 3, 5);
        let labels: Vec<Key> = (0..40).map(|i| if i % 2 == 0 { Key::Bonafide } else { Key::Spoof }).collect();
        let (pca, res) = pca_project(x.view(), &labels, FitOn::BonafideOnly).unwrap();
        let even: Vec<usize> = (0..40).step_by(2).collect();
        assert_eq!(pca, Pca::fit(x.select(Axis(0), &even).view()).unwrap());
        assert_eq!(res.projected.nrows(), 40);
    }
}
