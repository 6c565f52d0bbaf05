//! Dual-space disentanglement: a shared encoder and per-modality private
//! encoders split each projected modality feature into a modality-invariant
//! and a modality-specific part; decoders and four auxiliary losses keep the
//! split informative and non-redundant.
//!
//! All per-utterance quantities use the 3N stack layout: row `m·N + i` is
//! modality `m` (text, audio, visual) of utterance `i`.

use rand::Rng;

use crate::data::{Conversation, Modality, ModalityDims};
use crate::error::{Error, Result};
use crate::math::{cosine_rows, Bound, ParamStore, Tape, Var, COSINE_EPS};
use crate::nn::{init_linear, init_mlp, linear, mlp, modality_blocks};

pub fn init_projection<R: Rng>(store: &mut ParamStore, dims: ModalityDims, d: usize, rng: &mut R) {
    for m in Modality::ALL {
        init_linear(store, &format!("proj.{}", m.tag()), dims.get(m), d, rng);
    }
}

pub fn init_params<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) {
    init_mlp(store, "enc_com", [d, d, d], rng);
    for m in Modality::ALL {
        init_mlp(store, &format!("enc_prt.{}", m.tag()), [d, d, d], rng);
    }
    for m in Modality::ALL {
        init_mlp(store, &format!("dec.{}", m.tag()), [2 * d, d, d], rng);
    }
}

/// Projects raw modality features to the common width and stacks them (3N × d).
pub fn project_inputs<'t>(tape: &'t Tape, p: &Bound<'t>, conv: &Conversation) -> Result<Var<'t>> {
    let blocks = Modality::ALL
        .into_iter()
        .map(|m| {
            let phi = tape.constant(conv.modality_matrix(m)?);
            linear(p, &format!("proj.{}", m.tag()), phi)
        })
        .collect::<Result<Vec<_>>>()?;
    Var::concat_rows(&blocks)
}

/// Invariant (`com`) and specific (`prt`) features, both 3N × d.
#[derive(Debug, Clone, Copy)]
pub struct DisentangledFeatures<'t> {
    pub com: Var<'t>,
    pub prt: Var<'t>,
    pub n: usize,
}

pub fn disentangle_forward<'t>(p: &Bound<'t>, projected: Var<'t>, n: usize) -> Result<DisentangledFeatures<'t>> {
    let (rows, _) = projected.dims();
    if rows != 3 * n {
        return Err(Error::ShapeMismatch {
            op: "disentangle_forward",
            left: projected.shape(),
            right: vec![3 * n],
        });
    }
    // One encoder over the whole stack: the same weights for every modality.
    let com = mlp(p, "enc_com", projected)?;
    let blocks = modality_blocks(projected, n)?;
    let prt = Modality::ALL
        .into_iter()
        .map(|m| mlp(p, &format!("enc_prt.{}", m.tag()), blocks[m.index()]))
        .collect::<Result<Vec<_>>>()?;
    Ok(DisentangledFeatures {
        com,
        prt: Var::concat_rows(&prt)?,
        n,
    })
}

/// `D_m([x_com ∥ x_prt])` for every row, 3N × d.
pub fn decode<'t>(p: &Bound<'t>, dis: &DisentangledFeatures<'t>) -> Result<Var<'t>> {
    let joined = Var::concat_cols(&[dis.com, dis.prt])?;
    let blocks = modality_blocks(joined, dis.n)?;
    let out = Modality::ALL
        .into_iter()
        .map(|m| mlp(p, &format!("dec.{}", m.tag()), blocks[m.index()]))
        .collect::<Result<Vec<_>>>()?;
    Var::concat_rows(&out)
}

/// Mean over rows of `‖target − recon‖²`.
pub fn mean_row_sq_dist<'t>(target: Var<'t>, recon: Var<'t>) -> Result<Var<'t>> {
    let rows = target.dims().0;
    target.sub(recon)?.sum_sq()?.scale(1.0 / rows as f64)
}

/// Reconstruction loss against the projected inputs.
pub fn loss_rec<'t>(projected: Var<'t>, recon: Var<'t>) -> Result<Var<'t>> {
    mean_row_sq_dist(projected, recon)
}

/// Cycle loss: re-encoding the reconstruction privately should give `x_prt` back.
pub fn loss_cyc<'t>(p: &Bound<'t>, dis: &DisentangledFeatures<'t>, recon: Var<'t>) -> Result<Var<'t>> {
    let blocks = modality_blocks(recon, dis.n)?;
    let again = Modality::ALL
        .into_iter()
        .map(|m| mlp(p, &format!("enc_prt.{}", m.tag()), blocks[m.index()]))
        .collect::<Result<Vec<_>>>()?;
    mean_row_sq_dist(dis.prt, Var::concat_rows(&again)?)
}

/// Node indices into the 3N stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Candidate positives (other modality, same label) and negatives (any node,
/// other label) of one anchor.
pub fn triplet_candidates(labels: &[usize], anchor: usize) -> (Vec<usize>, Vec<usize>) {
    let n = labels.len();
    let (am, ai) = (anchor / n, anchor % n);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for q in 0..3 * n {
        let (m, i) = (q / n, q % n);
        if labels[i] == labels[ai] {
            if m != am {
                pos.push(q);
            }
        } else {
            neg.push(q);
        }
    }
    (pos, neg)
}

/// Samples up to `per_anchor` triplets for every anchor in the 3N stack.
pub fn mine_triplets<R: Rng>(labels: &[usize], per_anchor: usize, rng: &mut R) -> Vec<Triplet> {
    let mut out = Vec::new();
    for anchor in 0..3 * labels.len() {
        let (pos, neg) = triplet_candidates(labels, anchor);
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        for _ in 0..per_anchor {
            out.push(Triplet {
                anchor,
                positive: pos[rng.random_range(0..pos.len())],
                negative: neg[rng.random_range(0..neg.len())],
            });
        }
    }
    out
}

/// Mean hinge `max(0, α − cos(a,p) + cos(a,n))`; zero when there are no triplets.
pub fn loss_mar<'t>(com: Var<'t>, triplets: &[Triplet], alpha: f64) -> Result<Var<'t>> {
    if triplets.is_empty() {
        return com.tape().scalar(0.0);
    }
    let idx = |f: fn(&Triplet) -> usize| triplets.iter().map(f).collect::<Vec<_>>();
    let unit = com.normalize_rows(COSINE_EPS)?;
    let a = unit.gather_rows(&idx(|t| t.anchor))?;
    let pos = unit.gather_rows(&idx(|t| t.positive))?;
    let neg = unit.gather_rows(&idx(|t| t.negative))?;
    let cos_ap = a.mul(pos)?.sum_rows()?;
    let cos_an = a.mul(neg)?.sum_rows()?;
    cos_an.sub(cos_ap)?.add_scalar(alpha)?.relu()?.mean()
}

/// Mean `|cos(x_com, x_prt)|` over all rows.
pub fn loss_ort<'t>(com: Var<'t>, prt: Var<'t>) -> Result<Var<'t>> {
    cosine_rows(com, prt, COSINE_EPS)?.abs()?.mean()
}

#[derive(Debug, Clone, Copy)]
pub struct DecouplingLosses<'t> {
    pub rec: Var<'t>,
    pub cyc: Var<'t>,
    pub mar: Var<'t>,
    pub ort: Var<'t>,
}

/// `L_rec + L_cyc + γ₁·L_mar + γ₂·L_ort`.
pub fn loss_dec<'t>(l: &DecouplingLosses<'t>, gamma1: f64, gamma2: f64) -> Result<Var<'t>> {
    l.rec
        .add(l.cyc)?
        .add(l.mar.scale(gamma1)?)?
        .add(l.ort.scale(gamma2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows<'t>(t: &'t Tape, r: &[&[f64]]) -> Var<'t> {
        t.constant(Tensor::from_rows(r))
    }

    #[test]
    fn candidates_for_two_utterances() {
        // Nodes: t0=0 t1=1 a0=2 a1=3 v0=4 v1=5.
        let (pos, neg) = triplet_candidates(&[0, 1], 0);
        assert_eq!(pos, vec![2, 4]);
        assert_eq!(neg, vec![1, 3, 5]);
    }

    #[test]
    fn mining_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mine_triplets(&[2, 2, 2], 2, &mut rng).is_empty());
        assert!(mine_triplets(&[1], 2, &mut rng).is_empty());
        let ts = mine_triplets(&[0, 1], 2, &mut rng);
        assert_eq!(ts.len(), 12);
        for t in ts {
            let (pos, neg) = triplet_candidates(&[0, 1], t.anchor);
            assert!(pos.contains(&t.positive) && neg.contains(&t.negative));
        }
    }

    #[test]
    fn margin_closed_forms() {
        let t = Tape::new();
        let com = rows(&t, &[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 0.0]]);
        // positive ≡ anchor, negative ⟂ anchor.
        let trip = [Triplet { anchor: 0, positive: 2, negative: 1 }];
        assert_eq!(loss_mar(com, &trip, 0.5).unwrap().item(), 0.0);
        // positive ≡ negative ≡ anchor.
        let trip = [Triplet { anchor: 0, positive: 2, negative: 0 }];
        assert!((loss_mar(com, &trip, 0.5).unwrap().item() - 0.5).abs() < 1e-15);
        assert_eq!(loss_mar(com, &[], 0.5).unwrap().item(), 0.0);
    }

    #[test]
    fn orthogonality_closed_forms() {
        let t = Tape::new();
        let a = rows(&t, &[&[1.0, 0.0], &[0.0, 3.0]]);
        let b = rows(&t, &[&[0.0, 2.0], &[-1.0, 0.0]]);
        assert_eq!(loss_ort(a, b).unwrap().item(), 0.0);
        assert!((loss_ort(a, a).unwrap().item() - 1.0).abs() < 1e-15);
        let neg = a.scale(-1.0).unwrap();
        assert!((loss_ort(a, neg).unwrap().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_closed_forms() {
        let t = Tape::new();
        let x = rows(&t, &[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(loss_rec(x, x).unwrap().item(), 0.0);
        let shifted = rows(&t, &[&[2.0, 2.0], &[3.0, 5.0], &[5.0, 5.0]]);
        assert!((loss_rec(x, shifted).unwrap().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn decoupling_combination() {
        let t = Tape::new();
        let one = t.scalar(1.0).unwrap();
        let l = DecouplingLosses { rec: one, cyc: one, mar: one, ort: one };
        assert!((loss_dec(&l, 0.5, 0.5).unwrap().item() - 3.0).abs() < 1e-15);
        let zero = t.scalar(0.0).unwrap();
        let z = DecouplingLosses { rec: zero, cyc: zero, mar: zero, ort: zero };
        assert_eq!(loss_dec(&z, 0.3, 0.3).unwrap().item(), 0.0);
    }
}
