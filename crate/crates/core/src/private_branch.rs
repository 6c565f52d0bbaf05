//! Modality-specific branch: speaker embeddings are added to the private
//! features, a speaker-aware graph is turned into its dual hypergraph
//! (edges become vertices, nodes become hyperedges), a Jacobi-polynomial
//! filter bank runs on the normalized hypergraph Laplacian, attention fuses
//! the filter orders, and the result is projected back to the 3N nodes.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;

use crate::data::Modality;
use crate::disentangle::mean_row_sq_dist;
use crate::error::{Error, Result};
use crate::math::{symmetric_eig_with, Bound, EigOptions, ParamStore, Tensor, Var};
use crate::nn::{init_linear, init_mlp, linear, mlp, modality_blocks};

pub fn init_speaker<R: Rng>(store: &mut ParamStore, d: usize, num_speakers: usize, rng: &mut R) {
    store.init_uniform("spk.w", d, num_speakers, num_speakers, rng);
}

pub fn init_params<R: Rng>(store: &mut ParamStore, d: usize, d_out: usize, order: usize, rng: &mut R) {
    for r in 0..=order {
        store.init_uniform(&format!("jacobi.w{r}"), d, d, d, rng);
    }
    init_linear(store, "attn.proj", d, d, rng);
    store.init_uniform("attn.a", d, 1, d, rng);
    init_linear(store, "private.fuse", 3 * d, d_out, rng);
    for m in Modality::ALL {
        init_mlp(store, &format!("dec_prt.{}", m.tag()), [d, d, d], rng);
    }
}

/// `x̃ = x_prt + W_spk·onehot(s_i)`, the same embedding on all three modality rows.
pub fn inject_speaker<'t>(p: &Bound<'t>, prt: Var<'t>, speakers: &[usize], num_speakers: usize) -> Result<Var<'t>> {
    let n = speakers.len();
    let mut onehot = Tensor::zeros(n, num_speakers);
    for (i, &s) in speakers.iter().enumerate() {
        if s >= num_speakers {
            return Err(Error::InvalidArgument {
                op: "inject_speaker",
                msg: format!("speaker {s} out of range [0, {num_speakers})"),
            });
        }
        onehot.set(i, s, 1.0);
    }
    let emb = prt
        .tape()
        .constant(onehot)
        .matmul(p.get("spk.w")?.transpose()?)?;
    prt.add(Var::concat_rows(&[emb, emb, emb])?)
}

/// Edges `(p, q)`, `p < q`, over the 3N stack. Within each modality block,
/// utterances `i < j` are linked when the same speaker is within `w_same`
/// turns or different speakers are within `w_cross` turns.
pub fn build_speaker_graph(speakers: &[usize], w_same: usize, w_cross: usize) -> Vec<(usize, usize)> {
    let n = speakers.len();
    let mut edges = Vec::new();
    for m in 0..3 {
        for i in 0..n {
            for j in (i + 1)..n {
                let gap = j - i;
                let linked = if speakers[i] == speakers[j] {
                    gap <= w_same
                } else {
                    gap <= w_cross
                };
                if linked {
                    edges.push((m * n + i, m * n + j));
                }
            }
        }
    }
    edges
}

/// Dual hypergraph of an edge list: M dual vertices (one per edge) and one
/// hyperedge per original node. Hyperedge weights are uniform.
#[derive(Debug, Clone)]
pub struct DualHypergraph {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    /// `M × n_nodes` incidence.
    pub incidence: Tensor,
    /// Diagonal of `W_e^*`.
    pub hyperedge_weights: Vec<f64>,
    /// Diagonal of `D_v^*`.
    pub vertex_degree: Vec<f64>,
    /// Diagonal of `D_e^*`: the degree of each original node.
    pub hyperedge_degree: Vec<f64>,
}

impl DualHypergraph {
    pub fn new(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::MalformedHypergraph("no edges to dualize".into()));
        }
        let m = edges.len();
        let mut incidence = Tensor::zeros(m, n_nodes);
        for (e, &(p, q)) in edges.iter().enumerate() {
            if p >= n_nodes || q >= n_nodes || p == q {
                return Err(Error::MalformedHypergraph(format!("bad edge ({p}, {q})")));
            }
            incidence.set(e, p, 1.0);
            incidence.set(e, q, 1.0);
        }
        let hyperedge_weights = vec![1.0; n_nodes];
        let hyperedge_degree = (0..n_nodes)
            .map(|p| (0..m).map(|e| incidence.get(e, p)).sum())
            .collect::<Vec<f64>>();
        let vertex_degree = (0..m)
            .map(|e| {
                (0..n_nodes)
                    .filter(|&p| hyperedge_degree[p] > 0.0)
                    .map(|p| hyperedge_weights[p] * incidence.get(e, p))
                    .sum()
            })
            .collect();
        Ok(Self {
            n_nodes,
            edges: edges.to_vec(),
            incidence,
            hyperedge_weights,
            vertex_degree,
            hyperedge_degree,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.edges.len()
    }

    /// Original nodes with at least one incident edge.
    pub fn retained(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_nodes).filter(|&p| self.hyperedge_degree[p] > 0.0)
    }

    /// `x_e^* = (x̃_p + x̃_q) / 2` as an `M × d` matrix.
    pub fn vertex_features<'t>(&self, x_tilde: Var<'t>) -> Result<Var<'t>> {
        let mut avg = Tensor::zeros(self.num_vertices(), self.n_nodes);
        for (e, &(p, q)) in self.edges.iter().enumerate() {
            avg.set(e, p, 0.5);
            avg.set(e, q, 0.5);
        }
        x_tilde.tape().constant(avg).matmul(x_tilde)
    }

    /// `(D_e^*)^{-1} Hᵀ` with zero rows for nodes without edges (n_nodes × M).
    pub fn projection_back_operator(&self) -> Tensor {
        let m = self.num_vertices();
        let mut out = Tensor::zeros(self.n_nodes, m);
        for p in self.retained() {
            for e in 0..m {
                let h = self.incidence.get(e, p);
                if h != 0.0 {
                    out.set(p, e, h / self.hyperedge_degree[p]);
                }
            }
        }
        out
    }
}

/// Dualizes `edges` and computes the dual-vertex features.
pub fn dual_transform<'t>(n_nodes: usize, edges: &[(usize, usize)], x_tilde: Var<'t>) -> Result<(DualHypergraph, Var<'t>)> {
    let hg = DualHypergraph::new(n_nodes, edges)?;
    let x_star = hg.vertex_features(x_tilde)?;
    Ok((hg, x_star))
}

/// `I − (D_v^*)^{-1/2} H W_e^* (D_e^*)^{-1} Hᵀ (D_v^*)^{-1/2}` over retained columns.
pub fn hypergraph_laplacian(hg: &DualHypergraph) -> Result<Tensor> {
    let m = hg.num_vertices();
    if let Some(e) = hg.vertex_degree.iter().position(|&d| d <= 0.0) {
        return Err(Error::MalformedHypergraph(format!("dual vertex {e} has zero degree")));
    }
    let cols: Vec<usize> = hg.retained().collect();
    let mut l = Tensor::identity(m);
    for e in 0..m {
        for f in e..m {
            let s: f64 = cols
                .iter()
                .map(|&p| {
                    hg.incidence.get(e, p) * hg.hyperedge_weights[p] * hg.incidence.get(f, p) / hg.hyperedge_degree[p]
                })
                .sum();
            let v = s / (hg.vertex_degree[e] * hg.vertex_degree[f]).sqrt();
            l.set(e, f, l.get(e, f) - v);
            if f != e {
                l.set(f, e, l.get(f, e) - v);
            }
        }
    }
    Ok(l)
}

/// Below this the Laplacian counts as zero and the rescaling uses 1.
const DEGENERATE_LAMBDA: f64 = 1e-12;
static DEGENERATE_WARNED: AtomicBool = AtomicBool::new(false);

/// Largest eigenvalue of `L^*`; the normalized-Laplacian bound 2 when `M`
/// exceeds the eigensolver cap; 1 for a degenerate (zero) Laplacian.
pub fn lambda_max(l_star: &Tensor, opts: &EigOptions) -> Result<f64> {
    let m = l_star.rows();
    let lmax = if m > opts.max_dim {
        2.0
    } else {
        symmetric_eig_with(l_star, opts)?
            .values
            .last()
            .copied()
            .unwrap_or(0.0)
    };
    if lmax <= DEGENERATE_LAMBDA {
        if DEGENERATE_WARNED.swap(true, Ordering::Relaxed) {
            log::debug!("hypergraph Laplacian has lambda_max {lmax:e}; rescaling with 1");
        } else {
            log::warn!("hypergraph Laplacian has lambda_max {lmax:e}; rescaling with 1 (further occurrences logged at debug level)");
        }
        return Ok(1.0);
    }
    Ok(lmax)
}

/// `(2/λ_max)·L − I`, mapping the spectrum into `[−1, 1]`.
pub fn rescale_laplacian(l_star: &Tensor, lambda_max: f64) -> Tensor {
    let m = l_star.rows();
    let mut out = l_star.scale(2.0 / lambda_max);
    for i in 0..m {
        out.set(i, i, out.get(i, i) - 1.0);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobiFilterBank {
    pub order: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl JacobiFilterBank {
    pub fn new(order: usize, alpha: f64, beta: f64) -> Result<Self> {
        if order == 0 || !(alpha > -1.0) || !(beta > -1.0) {
            return Err(Error::InvalidArgument {
                op: "jacobi_filter_bank",
                msg: format!("need R >= 1 and alpha, beta > -1 (got R={order}, alpha={alpha}, beta={beta})"),
            });
        }
        Ok(Self { order, alpha, beta })
    }

    /// `(a, b, c)` with `P_n(x) = (a·x + b)·P_{n−1}(x) − c·P_{n−2}(x)` for `n ≥ 2`.
    pub fn recurrence(&self, n: usize) -> (f64, f64, f64) {
        let (a, b) = (self.alpha, self.beta);
        let n = n as f64;
        let s = 2.0 * n + a + b;
        let denom = 2.0 * n * (n + a + b) * (s - 2.0);
        let slope = (s - 1.0) * s * (s - 2.0) / denom;
        let shift = (s - 1.0) * (a * a - b * b) / denom;
        let back = 2.0 * (n + a - 1.0) * (n + b - 1.0) * s / denom;
        (slope, shift, back)
    }

    /// Scalar `P_r^{(α,β)}(x)`.
    pub fn eval(&self, r: usize, x: f64) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        let mut prev = 1.0;
        if r == 0 {
            return prev;
        }
        let mut cur = 0.5 * ((a - b) + (a + b + 2.0) * x);
        for n in 2..=r {
            let (slope, shift, back) = self.recurrence(n);
            let next = (slope * x + shift) * cur - back * prev;
            prev = cur;
            cur = next;
        }
        cur
    }

    /// `P_r(L̃)·X` for `r = 0..=R`, by the three-term recurrence on matrix products.
    pub fn apply<'t>(&self, l_tilde: &Tensor, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let (a, b) = (self.alpha, self.beta);
        let lt = x.tape().constant(l_tilde.clone());
        let mut out = Vec::with_capacity(self.order + 1);
        out.push(x);
        let first = x.scale(0.5 * (a - b))?.add(lt.matmul(x)?.scale(0.5 * (a + b + 2.0))?)?;
        out.push(first);
        for n in 2..=self.order {
            let (slope, shift, back) = self.recurrence(n);
            let (prev, cur) = (out[n - 2], out[n - 1]);
            let next = lt
                .matmul(cur)?
                .scale(slope)?
                .add(cur.scale(shift)?)?
                .sub(prev.scale(back)?)?;
            out.push(next);
        }
        Ok(out)
    }
}

/// `Z_r = P_r(L̃)·X^*·W_r` for `r = 0..=R`.
pub fn jacobi_filter_bank<'t>(p: &Bound<'t>, l_tilde: &Tensor, x_star: Var<'t>, bank: &JacobiFilterBank) -> Result<Vec<Var<'t>>> {
    bank.apply(l_tilde, x_star)?
        .into_iter()
        .enumerate()
        .map(|(r, t)| t.matmul(p.get(&format!("jacobi.w{r}"))?))
        .collect()
}

/// Attention over filter orders per dual vertex. Returns `S^*` (M × d) and
/// the weights `η` (M × (R+1)).
pub fn attention_fuse<'t>(p: &Bound<'t>, zs: &[Var<'t>]) -> Result<(Var<'t>, Var<'t>)> {
    let a = p.get("attn.a")?;
    let scores = zs
        .iter()
        .map(|z| linear(p, "attn.proj", *z)?.tanh()?.matmul(a))
        .collect::<Result<Vec<_>>>()?;
    let eta = Var::concat_cols(&scores)?.softmax_rows()?;
    let mut fused = zs[0].mul_col(eta.slice_cols(0, 1)?)?;
    for (r, z) in zs.iter().enumerate().skip(1) {
        fused = fused.add(z.mul_col(eta.slice_cols(r, 1)?)?)?;
    }
    Ok((fused.tanh()?, eta))
}

/// `S̄ = (D_e^*)^{-1} Hᵀ S^*`.
pub fn project_back<'t>(hg: &DualHypergraph, s_star: Var<'t>) -> Result<Var<'t>> {
    s_star.tape().constant(hg.projection_back_operator()).matmul(s_star)
}

/// Per utterance, `W·[s̄_t ∥ s̄_a ∥ s̄_v] + b`.
pub fn private_fuse<'t>(p: &Bound<'t>, s_bar: Var<'t>, n: usize) -> Result<Var<'t>> {
    let [t, a, v] = modality_blocks(s_bar, n)?;
    linear(p, "private.fuse", Var::concat_cols(&[t, a, v])?)
}

/// Mean squared distance over same-speaker pairs `i < j`; zero without pairs.
pub fn loss_cons<'t>(h_prt: Var<'t>, speakers: &[usize]) -> Result<Var<'t>> {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for i in 0..speakers.len() {
        for j in (i + 1)..speakers.len() {
            if speakers[i] == speakers[j] {
                left.push(i);
                right.push(j);
            }
        }
    }
    if left.is_empty() {
        return h_prt.tape().scalar(0.0);
    }
    h_prt
        .gather_rows(&left)?
        .sub(h_prt.gather_rows(&right)?)?
        .sum_sq()?
        .scale(1.0 / left.len() as f64)
}

/// Mean over the 3N rows of `‖x̃ − D_(prt,m)(s̄)‖²`.
pub fn loss_rec_prt<'t>(p: &Bound<'t>, x_tilde: Var<'t>, s_bar: Var<'t>, n: usize) -> Result<Var<'t>> {
    let blocks = modality_blocks(s_bar, n)?;
    let recon = Modality::ALL
        .into_iter()
        .map(|m| mlp(p, &format!("dec_prt.{}", m.tag()), blocks[m.index()]))
        .collect::<Result<Vec<_>>>()?;
    mean_row_sq_dist(x_tilde, Var::concat_rows(&recon)?)
}

/// `L_rec,prt + β·L_cons,prt`.
pub fn loss_prt<'t>(rec: Var<'t>, cons: Var<'t>, beta: f64) -> Result<Var<'t>> {
    rec.add(cons.scale(beta)?)
}
