//! Dense symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! ```text
//! A = U · diag(λ) · Uᵀ,   λ ascending,   UᵀU = I
//! ```
//!
//! Each rotation zeroes one off-diagonal pair; sweeps repeat over all pairs
//! until the off-diagonal Frobenius norm drops below the threshold. The
//! result lives outside the differentiation tape.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct EigOptions {
    /// Largest accepted matrix order.
    pub max_dim: usize,
    /// Off-diagonal Frobenius threshold, scaled by `max(1, ‖A‖_F)`.
    pub off_tol: f64,
    pub max_sweeps: usize,
    /// Largest tolerated `|A − Aᵀ|` entry.
    pub sym_tol: f64,
}

impl Default for EigOptions {
    fn default() -> Self {
        Self {
            max_dim: 1500,
            off_tol: 1e-12,
            max_sweeps: 100,
            sym_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SymEig {
    /// Eigenvectors as columns.
    pub vectors: Tensor,
    /// Ascending eigenvalues.
    pub values: Vec<f64>,
}

impl SymEig {
    /// `max |U·diag(λ)·Uᵀ − A|`.
    pub fn reconstruction_error(&self, a: &Tensor) -> f64 {
        let n = self.values.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += self.vectors.get(i, k) * self.values[k] * self.vectors.get(j, k);
                }
                worst = worst.max((s - a.get(i, j)).abs());
            }
        }
        worst
    }

    /// `max |UᵀU − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let utu = self.vectors.transpose().matmul(&self.vectors).expect("square");
        utu.max_abs_diff(&Tensor::identity(self.values.len()))
    }
}

pub fn symmetric_eig(a: &Tensor) -> Result<SymEig> {
    symmetric_eig_with(a, &EigOptions::default())
}

pub fn symmetric_eig_with(a: &Tensor, opts: &EigOptions) -> Result<SymEig> {
    let (n, c) = a.dims2();
    if n != c {
        return Err(Error::ShapeMismatch {
            op: "symmetric_eig",
            left: a.shape().to_vec(),
            right: vec![c, n],
        });
    }
    if n > opts.max_dim {
        return Err(Error::TooLarge {
            dim: n,
            cap: opts.max_dim,
        });
    }
    let mut max_asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    if max_asym > opts.sym_tol {
        return Err(Error::NotSymmetric { max_asym });
    }

    // Work on the symmetrized copy.
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a.get(i, j) + a.get(j, i));
        }
    }
    let mut v = Tensor::identity(n).into_data();
    let frob = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = opts.off_tol * frob.max(1.0);

    let off_norm = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    let mut off = off_norm(&m);
    while off > threshold {
        if sweeps == opts.max_sweeps {
            return Err(Error::NoConvergence { sweeps, off });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                rotate(&mut m, n, p, q, cs, sn);
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = cs * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + cs * vkq;
                }
            }
        }
        sweeps += 1;
        off = off_norm(&m);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + new_col] = v[k * n + old_col];
        }
    }
    Ok(SymEig {
        vectors: Tensor::from_parts_unchecked(n, n, vectors),
        values,
    })
}

/// `M ← Jᵀ M J` for the rotation in the (p, q) plane.
fn rotate(m: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..n {
        let mkp = m[k * n + p];
        let mkq = m[k * n + q];
        m[k * n + p] = c * mkp - s * mkq;
        m[k * n + q] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[p * n + k];
        let mqk = m[q * n + k];
        m[p * n + k] = c * mpk - s * mqk;
        m[q * n + k] = s * mpk + c * mqk;
    }
    m[p * n + q] = 0.0;
    m[q * n + p] = 0.0;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(a: &Tensor, expected: &[f64]) {
        let e = symmetric_eig(a).unwrap();
        for (got, want) in e.values.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{:?} vs {:?}", e.values, expected);
        }
        assert!(e.orthogonality_error() <= 1e-10);
        assert!(e.reconstruction_error(a) <= 1e-8);
    }

    #[test]
    fn identity_spectrum() {
        check(&Tensor::identity(3), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn swap_matrix() {
        check(&Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]), &[-1.0, 1.0]);
    }

    #[test]
    fn centering_projector() {
        let mut l = Tensor::identity(3);
        for v in l.data_mut() {
            *v -= 1.0 / 3.0;
        }
        check(&l, &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_asymmetric() {
        let a = Tensor::from_rows(&[&[0.0, 1.0], &[0.5, 0.0]]);
        assert!(matches!(symmetric_eig(&a), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn sweep_cap_reports_non_convergence() {
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 5.0], &[3.0, 5.0, 6.0]]);
        let opts = EigOptions {
            max_sweeps: 0,
            ..Default::default()
        };
        assert!(matches!(
            symmetric_eig_with(&a, &opts),
            Err(Error::NoConvergence { .. })
        ));
    }

    #[test]
    fn size_cap() {
        let opts = EigOptions {
            max_dim: 2,
            ..Default::default()
        };
        assert!(matches!(
            symmetric_eig_with(&Tensor::identity(3), &opts),
            Err(Error::TooLarge { .. })
        ));
    }
}
