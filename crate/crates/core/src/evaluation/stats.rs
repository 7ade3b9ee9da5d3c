use super::linalg::{matrix_sqrt_psd, trace_sqrt_psd, Matrix};
use crate::error::{Error, Result};

/// Running mean and scatter of feature vectors (Chan et al. pairwise
/// update), giving the unbiased covariance on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    dim: usize,
    count: u64,
    mean: Vec<f64>,
    /// Sum of outer products of deviations from the mean, row-major.
    scatter: Vec<f64>,
}

impl GaussianStats {
    pub fn new(dim: usize) -> Self {
        GaussianStats { dim, count: 0, mean: vec![0.0; dim], scatter: vec![0.0; dim * dim] }
    }

    pub fn from_features(dim: usize, features: &[Vec<f64>]) -> Result<Self> {
        let mut s = Self::new(dim);
        s.accumulate(features)?;
        Ok(s)
    }

    /// Stats with a given mean and (unbiased) covariance, as if from `count`
    /// samples.
    pub fn from_moments(mean: Vec<f64>, cov: &Matrix, count: u64) -> Result<Self> {
        let dim = mean.len();
        if cov.dim() != dim {
            return Err(Error::shape(format!("mean of length {dim} with a {}×{0} covariance", cov.dim())));
        }
        if count < 2 {
            return Err(Error::Invalid(format!("covariance needs at least 2 samples, got {count}")));
        }
        let scatter = cov.data().iter().map(|v| v * (count - 1) as f64).collect();
        Ok(GaussianStats { dim, count, mean, scatter })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Fold in a batch of vectors.
    pub fn accumulate(&mut self, features: &[Vec<f64>]) -> Result<()> {
        if features.is_empty() {
            return Ok(());
        }
        if let Some(f) = features.iter().find(|f| f.len() != self.dim) {
            return Err(Error::shape(format!("feature of dimension {} for stats of dimension {}", f.len(), self.dim)));
        }
        let d = self.dim;
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut scatter = vec![0.0; d * d];
        for f in features {
            let dev: Vec<f64> = f.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                let di = dev[i];
                for j in i..d {
                    scatter[i * d + j] += di * dev[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                scatter[i * d + j] = scatter[j * d + i];
            }
        }
        self.merge(&GaussianStats { dim: d, count: features.len() as u64, mean, scatter })
    }

    /// Combine with statistics of a disjoint sample set.
    pub fn merge(&mut self, other: &GaussianStats) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::shape(format!("merging dimension {} into {}", other.dim, self.dim)));
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let d = self.dim;
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let w = na * nb / n;
        for i in 0..d {
            for j in 0..d {
                self.scatter[i * d + j] += other.scatter[i * d + j] + delta[i] * delta[j] * w;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nb / n;
        }
        self.count += other.count;
        Ok(())
    }

    /// Unbiased covariance, symmetrized.
    pub fn covariance(&self) -> Result<Matrix> {
        if self.count < 2 {
            return Err(Error::Invalid(format!("covariance needs at least 2 samples, got {}", self.count)));
        }
        let denom = (self.count - 1) as f64;
        let m = Matrix::from_rows(self.dim, self.scatter.iter().map(|v| v / denom).collect())?;
        Ok(m.symmetrized())
    }
}

/// Magnitude below which a negative distance is treated as round-off,
/// relative to the summed covariance traces (at least 1).
pub const FID_CLAMP: f64 = 1e-6;

/// Fréchet distance between two Gaussians:
/// `‖μx − μg‖² + Tr(Σx + Σg) − 2·Tr((Σx^½ Σg Σx^½)^½)`.
pub fn fid(sx: &GaussianStats, sg: &GaussianStats) -> Result<f64> {
    if sx.dim != sg.dim {
        return Err(Error::shape(format!("statistics of dimension {} and {}", sx.dim, sg.dim)));
    }
    let cx = sx.covariance()?;
    let cg = sg.covariance()?;
    if sx.mean == sg.mean && cx == cg {
        return Ok(0.0);
    }
    let mean_term: f64 = sx.mean.iter().zip(&sg.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let root_x = matrix_sqrt_psd(&cx)?;
    let inner = root_x.matmul(&cg)?.matmul(&root_x)?.symmetrized();
    let cross = trace_sqrt_psd(&inner)?;
    let traces = cx.trace() + cg.trace();
    let d = mean_term + traces - 2.0 * cross;
    if d >= 0.0 {
        Ok(d)
    } else if d >= -FID_CLAMP * traces.max(1.0) {
        Ok(0.0)
    } else {
        Err(Error::Numeric(format!("Fréchet distance came out at {d:e}")))
    }
}
