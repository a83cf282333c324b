use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Eigenvalues below this are treated as a non-PSD input rather than round-off.
pub const NEGATIVE_EIGEN_TOL: f64 = -1e-8;

/// Shrinkage weight used when there are too few samples for a full-rank covariance.
pub const SHRINKAGE: f64 = 0.01;

/// Gaussian fit of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major dim×dim.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Mean and unbiased covariance of `rows`. With fewer than dim + 1 rows the
    /// covariance is shrunk toward its scaled identity: (1 − λ)Σ + λ·tr(Σ)/d·I.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<FeatureStats> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 feature vectors, got {n}")));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Config("feature vectors must share a positive dimension".into()));
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        if n < d + 1 {
            let target = (0..d).map(|i| cov[i * d + i]).sum::<f64>() / d as f64;
            cov.iter_mut().for_each(|c| *c *= 1.0 - SHRINKAGE);
            for i in 0..d {
                cov[i * d + i] += SHRINKAGE * target;
            }
        }
        Ok(FeatureStats { mean, cov, n })
    }

    fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

fn sym_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    if let Some(&low) = e.eigenvalues.iter().find(|&&v| v < NEGATIVE_EIGEN_TOL) {
        return Err(Error::Config(format!("covariance is not positive semidefinite (eigenvalue {low:e})")));
    }
    Ok(e)
}

/// PSD square root; tiny negative eigenvalues are clamped to zero.
fn psd_sqrt(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = sym_eigen(m)?;
    let roots = DVector::from_iterator(e.eigenvalues.len(), e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussian fits:
/// ‖μr − μg‖² + Tr(Σr + Σg − 2(Σr Σg)^½), where Tr (Σr Σg)^½ is taken as the
/// sum of square roots of the eigenvalues of Σr^½ Σg Σr^½.
pub fn fid(real: &FeatureStats, gen: &FeatureStats) -> Result<f64> {
    if real.dim() != gen.dim() {
        return Err(Error::Config(format!("feature dims differ: {} vs {}", real.dim(), gen.dim())));
    }
    let mean_term: f64 = real.mean.iter().zip(&gen.mean).map(|(a, b)| (a - b).powi(2)).sum();
    let (sr, sg) = (real.matrix(), gen.matrix());
    let root_r = psd_sqrt(sr.clone())?;
    sym_eigen(sg.clone())?;
    let inner = &root_r * &sg * &root_r;
    let cross: f64 = sym_eigen(inner)?.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok(mean_term + sr.trace() + sg.trace() - 2.0 * cross)
}
