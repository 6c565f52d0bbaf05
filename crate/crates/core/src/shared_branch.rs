//! Modality-invariant branch: a 3N-node utterance/modality graph, fixed
//! exponential low- and high-pass spectral filters over its normalized
//! Laplacian, a per-utterance fusion layer and the symmetric InfoNCE loss
//! between the two frequency views.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::Rng;

use crate::error::Result;
use crate::math::{symmetric_eig_with, Bound, EigOptions, ParamStore, Tensor, Var, COSINE_EPS};
use crate::nn::{init_linear, linear, modality_blocks};

/// Binary adjacency over the 3N stack: same-modality nodes within `k` turns
/// and the three modality copies of one utterance are linked. Self-loops
/// are included (`|i − j| = 0 < k`).
pub fn build_shared_graph(n: usize, k: usize) -> Tensor {
    let size = 3 * n;
    let mut a = Tensor::zeros(size, size);
    for m in 0..3 {
        for mp in 0..3 {
            for i in 0..n {
                for j in 0..n {
                    let linked = if m == mp { i.abs_diff(j) < k } else { i == j };
                    if linked {
                        a.set(m * n + i, mp * n + j, 1.0);
                    }
                }
            }
        }
    }
    a
}

#[derive(Debug, Clone)]
pub struct SharedGraph {
    pub n_nodes: usize,
    pub adjacency: Tensor,
    pub normalized: Tensor,
    pub laplacian: Tensor,
    /// Eigenvectors of the Laplacian as columns.
    pub eigvecs: Tensor,
    /// Ascending Laplacian eigenvalues in `[0, 2]`.
    pub eigvals: Vec<f64>,
}

/// Eigenvalues this close outside `[0, 2]` are clamped onto the interval.
const SPECTRUM_SLACK: f64 = 1e-9;

/// `Ã = D^{-1/2} A D^{-1/2}`, `L = I − Ã`, `L = U Λ Uᵀ`.
pub fn normalize_and_decompose(adjacency: &Tensor, opts: &EigOptions) -> Result<SharedGraph> {
    let size = adjacency.rows();
    let inv_sqrt: Vec<f64> = (0..size)
        .map(|i| {
            let deg: f64 = adjacency.row_slice(i).iter().sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut normalized = Tensor::zeros(size, size);
    let mut laplacian = Tensor::identity(size);
    for i in 0..size {
        for j in 0..size {
            let v = inv_sqrt[i] * adjacency.get(i, j) * inv_sqrt[j];
            normalized.set(i, j, v);
            laplacian.set(i, j, laplacian.get(i, j) - v);
        }
    }
    let eig = symmetric_eig_with(&laplacian, opts)?;
    let eigvals = eig
        .values
        .iter()
        .map(|&l| {
            if (-SPECTRUM_SLACK..0.0).contains(&l) {
                0.0
            } else if l > 2.0 && l <= 2.0 + SPECTRUM_SLACK {
                2.0
            } else {
                l
            }
        })
        .collect();
    Ok(SharedGraph {
        n_nodes: size,
        adjacency: adjacency.clone(),
        normalized,
        laplacian,
        eigvecs: eig.vectors,
        eigvals,
    })
}

pub fn low_pass(lambda: f64, tau: f64) -> f64 {
    (-tau * lambda).exp()
}

pub fn high_pass(lambda: f64, tau: f64) -> f64 {
    1.0 - (-tau * lambda).exp()
}

impl SharedGraph {
    /// `U · diag(g(λ)) · Uᵀ`.
    pub fn spectral_operator(&self, g: impl Fn(f64) -> f64) -> Tensor {
        let n = self.n_nodes;
        let gl: Vec<f64> = self.eigvals.iter().map(|&l| g(l)).collect();
        let mut out = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..n)
                    .map(|k| self.eigvecs.get(i, k) * gl[k] * self.eigvecs.get(j, k))
                    .sum();
                out.set(i, j, s);
            }
        }
        out
    }
}

/// Low- and high-frequency views of the invariant features, both 3N × d.
#[derive(Debug, Clone, Copy)]
pub struct FrequencyViews<'t> {
    pub low: Var<'t>,
    pub high: Var<'t>,
}

/// Filters `x` with the fixed exponential filters; differentiable in `x` only.
pub fn spectral_filter<'t>(g: &SharedGraph, x: Var<'t>, tau_low: f64, tau_high: f64) -> Result<FrequencyViews<'t>> {
    let tape = x.tape();
    let low_op = tape.constant(g.spectral_operator(|l| low_pass(l, tau_low)));
    let high_op = tape.constant(g.spectral_operator(|l| high_pass(l, tau_high)));
    Ok(FrequencyViews {
        low: low_op.matmul(x)?,
        high: high_op.matmul(x)?,
    })
}

pub fn init_params<R: Rng>(store: &mut ParamStore, d: usize, d_out: usize, proj_dim: usize, rng: &mut R) {
    init_linear(store, "shared.fuse", 6 * d, d_out, rng);
    init_linear(store, "shared.head_low", d, proj_dim, rng);
    init_linear(store, "shared.head_high", d, proj_dim, rng);
}

/// Per utterance, `W·[t_ℓ ∥ a_ℓ ∥ v_ℓ ∥ t_h ∥ a_h ∥ v_h] + b` (N × d_out).
pub fn shared_fuse<'t>(p: &Bound<'t>, views: &FrequencyViews<'t>, n: usize) -> Result<Var<'t>> {
    let [tl, al, vl] = modality_blocks(views.low, n)?;
    let [th, ah, vh] = modality_blocks(views.high, n)?;
    let joined = Var::concat_cols(&[tl, al, vl, th, ah, vh])?;
    linear(p, "shared.fuse", joined)
}

/// `L_(ℓ→h) + L_(h→ℓ)` over the rows of two projected views (B × d_z each).
pub fn info_nce_projected<'t>(z_low: Var<'t>, z_high: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    let b = z_low.dims().0;
    let tape = z_low.tape();
    let ul = z_low.normalize_rows(COSINE_EPS)?;
    let uh = z_high.normalize_rows(COSINE_EPS)?;
    // sim[q][r] = cos(z_q^ℓ, z_r^h) / τ
    let sim = ul.matmul(uh.transpose()?)?.scale(1.0 / temperature)?;
    let diag = tape.constant(Tensor::identity(b));
    let l2h = sim.log_softmax_rows()?.mul(diag)?.sum()?;
    let h2l = sim.transpose()?.log_softmax_rows()?.mul(diag)?.sum()?;
    l2h.add(h2l)?.scale(-1.0 / b as f64)
}

/// Symmetric frequency-domain InfoNCE with the two projection heads.
pub fn info_nce<'t>(p: &Bound<'t>, views: &FrequencyViews<'t>, temperature: f64) -> Result<Var<'t>> {
    let z_low = linear(p, "shared.head_low", views.low)?;
    let z_high = linear(p, "shared.head_high", views.high)?;
    info_nce_projected(z_low, z_high, temperature)
}

/// Decomposed shared graphs keyed by `(N, k)`; topology only depends on those.
#[derive(Debug, Default)]
pub struct GraphCache {
    graphs: RwLock<HashMap<(usize, usize), Arc<SharedGraph>>>,
}

impl GraphCache {
    pub fn get_or_build(&self, n: usize, k: usize, opts: &EigOptions) -> Result<Arc<SharedGraph>> {
        if let Some(g) = self.graphs.read().expect("graph cache poisoned").get(&(n, k)) {
            return Ok(g.clone());
        }
        let g = Arc::new(normalize_and_decompose(&build_shared_graph(n, k), opts)?);
        let mut w = self.graphs.write().expect("graph cache poisoned");
        Ok(w.entry((n, k)).or_insert(g).clone())
    }

    pub fn len(&self) -> usize {
        self.graphs.read().expect("graph cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Tape;

    fn block(a: &Tensor, n: usize, m: usize, mp: usize) -> Tensor {
        let mut b = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                b.set(i, j, a.get(m * n + i, mp * n + j));
            }
        }
        b
    }

    #[test]
    fn single_utterance_graph_is_all_ones() {
        for k in 1..4 {
            assert_eq!(build_shared_graph(1, k), Tensor::filled(3, 3, 1.0));
        }
    }

    #[test]
    fn two_utterances_window_one() {
        let a = build_shared_graph(2, 1);
        for m in 0..3 {
            for mp in 0..3 {
                assert_eq!(block(&a, 2, m, mp), Tensor::identity(2));
            }
        }
    }

    #[test]
    fn three_utterances_window_two_is_tridiagonal() {
        let a = build_shared_graph(3, 2);
        let tri = Tensor::from_rows(&[&[1.0, 1.0, 0.0], &[1.0, 1.0, 1.0], &[0.0, 1.0, 1.0]]);
        for m in 0..3 {
            assert_eq!(block(&a, 3, m, m), tri);
        }
    }

    #[test]
    fn all_ones_spectrum() {
        let g = normalize_and_decompose(&build_shared_graph(1, 1), &EigOptions::default()).unwrap();
        for (got, want) in g.eigvals.iter().zip([0.0, 1.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_adjacency_has_zero_laplacian() {
        let g = normalize_and_decompose(&Tensor::identity(4), &EigOptions::default()).unwrap();
        assert_eq!(g.laplacian.max_abs(), 0.0);
    }

    #[test]
    fn filters_at_zero_frequency() {
        assert_eq!(low_pass(0.0, 1.7), 1.0);
        assert_eq!(high_pass(0.0, 1.7), 0.0);
    }

    #[test]
    fn info_nce_identical_projections() {
        let t = Tape::new();
        let z = t.constant(Tensor::filled(6, 4, 0.3));
        let l = info_nce_projected(z, z, 0.5).unwrap().item();
        assert!((l - 2.0 * 6f64.ln()).abs() < 1e-10);
        let one = t.constant(Tensor::row(vec![1.0, -2.0]).unwrap());
        assert!(info_nce_projected(one, one, 0.5).unwrap().item().abs() < 1e-15);
    }

    #[test]
    fn cache_reuses_decomposition() {
        let cache = GraphCache::default();
        let a = cache.get_or_build(3, 2, &EigOptions::default()).unwrap();
        let b = cache.get_or_build(3, 2, &EigOptions::default()).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(cache.len(), 1);
    }
}
