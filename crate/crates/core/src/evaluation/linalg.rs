use crate::error::{Error, Result};

/// Dense square matrix, row-major, `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Matrix { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = v;
        }
        m
    }

    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::shape(format!("{} values for a {n}×{n} matrix", data.len())));
        }
        Ok(Matrix { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut t = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                t.data[j * n + i] = self.data[i * n + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.n != other.n {
            return Err(Error::shape(format!("{}×{} times {}×{}", self.n, self.n, other.n, other.n)));
        }
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out.data[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.n != other.n {
            return Err(Error::shape(format!("{} vs {}", self.n, other.n)));
        }
        Ok(Matrix { n: self.n, data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect() })
    }

    /// Largest `|a_ij − a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in i + 1..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `(A + Aᵀ)/2`.
    pub fn symmetrized(&self) -> Matrix {
        let n = self.n;
        let mut out = self.clone();
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }
}

/// Eigenvalues and column eigenvectors of a symmetric matrix by cyclic
/// Jacobi rotations. Iterates until the off-diagonal mass falls below
/// `1e-10` relative to the matrix norm (and further while it still shrinks,
/// down to round-off).
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.dim();
    if a.asymmetry() > 1e-8 * a.frobenius().max(1.0) {
        return Err(Error::Numeric(format!("matrix is not symmetric (asymmetry {:e})", a.asymmetry())));
    }
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);
    let norm = m.frobenius();
    if norm == 0.0 {
        return Ok((vec![0.0; n], v));
    }
    let off = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += m.get(i, j) * m.get(i, j);
            }
        }
        (2.0 * s).sqrt()
    };
    let mut last = f64::INFINITY;
    for _sweep in 0..100 {
        let o = off(&m);
        if o <= f64::EPSILON * norm * 1e-2 || (o <= 1e-10 * norm && o >= last) {
            break;
        }
        last = o;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if off(&m) > 1e-10 * norm {
        return Err(Error::Numeric("Jacobi iteration did not converge".into()));
    }
    Ok(((0..n).map(|i| m.get(i, i)).collect(), v))
}

/// `V·diag(f(λ))·Vᵀ`.
fn spectral_map(values: &[f64], vectors: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let n = values.len();
    let fv: Vec<f64> = values.iter().map(|&l| f(l)).collect();
    let mut out = Matrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            let s: f64 = (0..n).map(|k| vectors.get(i, k) * fv[k] * vectors.get(j, k)).sum();
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    out
}

/// Symmetric square root of a symmetric PSD matrix. Eigenvalues below zero
/// (round-off) are clamped to zero.
pub fn matrix_sqrt_psd(a: &Matrix) -> Result<Matrix> {
    let (values, vectors) = symmetric_eigen(a)?;
    Ok(spectral_map(&values, &vectors, |l| l.max(0.0).sqrt()))
}

/// `Σ √max(λ, 0)` over the eigenvalues of a symmetric PSD matrix.
pub fn trace_sqrt_psd(a: &Matrix) -> Result<f64> {
    let (values, _) = symmetric_eigen(a)?;
    Ok(values.iter().map(|l| l.max(0.0).sqrt()).sum())
}
