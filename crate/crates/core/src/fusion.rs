//! Token fusion and classification. Each utterance becomes a five-token
//! sequence (fusion token, shared, text, audio, visual) encoded by a small
//! post-norm transformer; the encoded fusion token feeds a two-layer
//! classifier.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{Bound, ParamStore, Tensor, Var};
use crate::nn::{init_linear, linear, modality_blocks};

pub const TOKENS_PER_UTTERANCE: usize = 5;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Added to attention scores across utterance boundaries; `exp` underflows to exactly 0.
const MASKED_SCORE: f64 = -1e30;

const BRANCH_TOKENS: [&str; 4] = ["com", "t", "a", "v"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionShape {
    pub d_com: usize,
    pub d_prt: usize,
    pub d_fusion: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub num_classes: usize,
}

impl FusionShape {
    pub fn head_dim(&self) -> usize {
        self.d_fusion / self.n_heads
    }
}

fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.g"), Tensor::filled(1, d, 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(1, d));
}

pub fn init_tokens<R: Rng>(store: &mut ParamStore, s: &FusionShape, rng: &mut R) {
    let df = s.d_fusion;
    init_linear(store, "fus.com", s.d_com, df, rng);
    for m in &BRANCH_TOKENS[1..] {
        init_linear(store, &format!("fus.{m}"), s.d_prt, df, rng);
    }
    store.init_uniform("fus.token", 1, df, df, rng);
    for m in BRANCH_TOKENS {
        store.init_uniform(&format!("fus.type.{m}"), 1, df, df, rng);
    }
}

pub fn init_encoder<R: Rng>(store: &mut ParamStore, s: &FusionShape, rng: &mut R) {
    let df = s.d_fusion;
    for l in 0..s.n_layers {
        for w in ["q", "k", "v", "o"] {
            init_linear(store, &format!("enc{l}.{w}"), df, df, rng);
        }
        init_layer_norm(store, &format!("enc{l}.ln1"), df);
        init_linear(store, &format!("enc{l}.ff1"), df, 4 * df, rng);
        init_linear(store, &format!("enc{l}.ff2"), 4 * df, df, rng);
        init_layer_norm(store, &format!("enc{l}.ln2"), df);
    }
}

/// Direct map used when the transformer is ablated.
pub fn init_direct<R: Rng>(store: &mut ParamStore, s: &FusionShape, rng: &mut R) {
    init_linear(store, "fus.direct", s.d_com + 3 * s.d_prt, s.d_fusion, rng);
}

pub fn init_classifier<R: Rng>(store: &mut ParamStore, s: &FusionShape, rng: &mut R) {
    init_linear(store, "cls.l1", s.d_fusion, s.d_fusion, rng);
    init_linear(store, "cls.l2", s.d_fusion, s.num_classes, rng);
}

fn broadcast_rows<'t>(row: Var<'t>, n: usize) -> Result<Var<'t>> {
    row.tape().constant(Tensor::filled(n, 1, 1.0)).matmul(row)
}

/// Utterance-major token matrix (5N × d_f): rows `5i..5i+5` are
/// `[z_fus; W_c h_com + e_com; W_t s̄_t + e_t; W_a s̄_a + e_a; W_v s̄_v + e_v]`.
pub fn build_tokens<'t>(p: &Bound<'t>, h_com: Var<'t>, s_bar: Var<'t>) -> Result<Var<'t>> {
    let n = h_com.dims().0;
    let [t, a, v] = modality_blocks(s_bar, n)?;
    let mut groups = vec![broadcast_rows(p.get("fus.token")?, n)?];
    for (name, x) in BRANCH_TOKENS.iter().zip([h_com, t, a, v]) {
        let e = p.get(&format!("fus.type.{name}"))?;
        groups.push(linear(p, &format!("fus.{name}"), x)?.add_row(e)?);
    }
    let order: Vec<usize> = (0..n)
        .flat_map(|i| (0..TOKENS_PER_UTTERANCE).map(move |k| k * n + i))
        .collect();
    Var::concat_rows(&groups)?.gather_rows(&order)
}

/// Additive mask keeping attention inside each utterance's five tokens.
fn utterance_mask(n: usize) -> Tensor {
    let size = TOKENS_PER_UTTERANCE * n;
    let mut m = Tensor::filled(size, size, MASKED_SCORE);
    for i in 0..n {
        for r in 0..TOKENS_PER_UTTERANCE {
            for c in 0..TOKENS_PER_UTTERANCE {
                m.set(i * TOKENS_PER_UTTERANCE + r, i * TOKENS_PER_UTTERANCE + c, 0.0);
            }
        }
    }
    m
}

fn layer_norm<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.layer_norm_rows(LAYER_NORM_EPS)?
        .mul_row(p.get(&format!("{name}.g"))?)?
        .add_row(p.get(&format!("{name}.b"))?)
}

/// Multi-head self-attention of one layer. Returns the projected output and
/// the per-head attention weights (each 5N × 5N, block diagonal).
pub fn self_attention<'t>(p: &Bound<'t>, layer: usize, x: Var<'t>, s: &FusionShape) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let rows = x.dims().0;
    if rows % TOKENS_PER_UTTERANCE != 0 {
        return Err(Error::InvalidArgument {
            op: "self_attention",
            msg: format!("{rows} rows is not a whole number of {TOKENS_PER_UTTERANCE}-token sequences"),
        });
    }
    let mask = x.tape().constant(utterance_mask(rows / TOKENS_PER_UTTERANCE));
    let q = linear(p, &format!("enc{layer}.q"), x)?;
    let k = linear(p, &format!("enc{layer}.k"), x)?;
    let v = linear(p, &format!("enc{layer}.v"), x)?;
    let dh = s.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(s.n_heads);
    let mut weights = Vec::with_capacity(s.n_heads);
    for h in 0..s.n_heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let att = qh.matmul(kh.transpose()?)?.scale(scale)?.add(mask)?.softmax_rows()?;
        heads.push(att.matmul(vh)?);
        weights.push(att);
    }
    let out = linear(p, &format!("enc{layer}.o"), Var::concat_cols(&heads)?)?;
    Ok((out, weights))
}

/// `n_layers` post-norm blocks: `LN(x + MHA(x))` then `LN(x + FFN(x))`.
pub fn transformer_encode<'t>(p: &Bound<'t>, tokens: Var<'t>, s: &FusionShape) -> Result<Var<'t>> {
    let mut x = tokens;
    for l in 0..s.n_layers {
        let (att, _) = self_attention(p, l, x, s)?;
        x = layer_norm(p, &format!("enc{l}.ln1"), x.add(att)?)?;
        let ff = linear(p, &format!("enc{l}.ff1"), x)?.relu()?;
        let ff = linear(p, &format!("enc{l}.ff2"), ff)?;
        x = layer_norm(p, &format!("enc{l}.ln2"), x.add(ff)?)?;
    }
    Ok(x)
}

/// Encoded fusion token of every utterance (N × d_f).
pub fn fusion_outputs<'t>(encoded: Var<'t>) -> Result<Var<'t>> {
    let n = encoded.dims().0 / TOKENS_PER_UTTERANCE;
    let idx: Vec<usize> = (0..n).map(|i| i * TOKENS_PER_UTTERANCE).collect();
    encoded.gather_rows(&idx)
}

/// `u = W[h_com ∥ s̄_t ∥ s̄_a ∥ s̄_v] + b`, bypassing the transformer.
pub fn direct_fusion<'t>(p: &Bound<'t>, h_com: Var<'t>, s_bar: Var<'t>) -> Result<Var<'t>> {
    let n = h_com.dims().0;
    let [t, a, v] = modality_blocks(s_bar, n)?;
    linear(p, "fus.direct", Var::concat_cols(&[h_com, t, a, v])?)
}

/// `W_2·relu(W_1 u + b_1) + b_2` (N × C).
pub fn classifier_logits<'t>(p: &Bound<'t>, u: Var<'t>) -> Result<Var<'t>> {
    linear(p, "cls.l2", linear(p, "cls.l1", u)?.relu()?)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of plain logits.
pub fn probabilities(logits: &Tensor) -> Tensor {
    let (r, c) = logits.dims2();
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        let row = logits.row_slice(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        for (j, &v) in row.iter().enumerate() {
            out.set(i, j, (v - mx).exp() / z);
        }
    }
    out
}

/// Class probabilities and predicted labels.
pub fn classify(logits: &Tensor) -> (Tensor, Vec<usize>) {
    let probs = probabilities(logits);
    let labels = (0..logits.rows()).map(|i| argmax(logits.row_slice(i))).collect();
    (probs, labels)
}

/// Mean cross-entropy `−(1/N)·Σ log p_{i,y_i}` from logits.
pub fn loss_cls<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (n, c) = logits.dims();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "loss_cls",
            left: logits.shape(),
            right: vec![labels.len()],
        });
    }
    let mut onehot = Tensor::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidArgument {
                op: "loss_cls",
                msg: format!("label {y} out of range [0, {c})"),
            });
        }
        onehot.set(i, y, 1.0);
    }
    logits
        .log_softmax_rows()?
        .mul(logits.tape().constant(onehot))?
        .sum()?
        .scale(-1.0 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

/// `L_cls + λ₁L_dec + λ₂L_cl + λ₃L_prt`.
pub fn loss_total<'t>(cls: Var<'t>, dec: Var<'t>, cl: Var<'t>, prt: Var<'t>, w: &LossWeights) -> Result<Var<'t>> {
    cls.add(dec.scale(w.lambda1)?)?
        .add(cl.scale(w.lambda2)?)?
        .add(prt.scale(w.lambda3)?)
}
