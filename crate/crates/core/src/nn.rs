//! Affine layers and the one-hidden-layer tanh MLP shared by the encoders
//! and decoders. Weights are stored `in × out` so a layer is `x·W + b`.

use rand::Rng;

use crate::error::Result;
use crate::math::{Bound, ParamStore, Var};

pub fn init_linear<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    store.init_uniform(&format!("{name}.w"), fan_in, fan_out, fan_in, rng);
    store.init_uniform(&format!("{name}.b"), 1, fan_out, fan_in, rng);
}

pub fn linear<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.matmul(p.get(&format!("{name}.w"))?)?
        .add_row(p.get(&format!("{name}.b"))?)
}

/// `in → hidden → out` with tanh on the hidden layer.
pub fn init_mlp<R: Rng>(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut R) {
    init_linear(store, &format!("{name}.l1"), dims[0], dims[1], rng);
    init_linear(store, &format!("{name}.l2"), dims[1], dims[2], rng);
}

pub fn mlp<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    let h = linear(p, &format!("{name}.l1"), x)?.tanh()?;
    linear(p, &format!("{name}.l2"), h)
}

/// Splits a `3N × c` modality stack into its three `N × c` blocks.
pub fn modality_blocks<'t>(x: Var<'t>, n: usize) -> Result<[Var<'t>; 3]> {
    Ok([x.slice_rows(0, n)?, x.slice_rows(n, n)?, x.slice_rows(2 * n, n)?])
}
