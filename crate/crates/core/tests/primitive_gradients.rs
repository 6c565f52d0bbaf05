use merc_core::math::{cosine_rows, relative_error, Bound, ParamStore, Tape, Tensor, Var, COSINE_EPS};
use merc_core::Result;
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

const TOL: f64 = 1e-6;
const H: f64 = 1e-6;

type Op = for<'t> fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        rng_seed: RngSeed::Fixed(20),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

/// Entries in `[-2, -0.05] ∪ [0.05, 2]`, so kinked primitives are probed
/// where they are differentiable.
fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec((0.05f64..2.0, any::<bool>()), rows * cols).prop_map(move |d| {
        Tensor::matrix(rows, cols, d.into_iter().map(|(v, s)| if s { v } else { -v }).collect()).unwrap()
    })
}

/// Output entry `j` of `y` as a scalar (the other entries are multiplied by 0).
fn entry<'t>(y: Var<'t>, j: usize) -> Result<Var<'t>> {
    let (r, c) = y.dims();
    let mut mask = Tensor::zeros(r, c);
    mask.set(j / c, j % c, 1.0);
    y.mul(y.tape().constant(mask))?.sum()
}

fn eval(store: &ParamStore, op: Op, j: usize) -> f64 {
    let tape = Tape::new();
    let p = store.bind(&tape);
    entry(op(&tape, &p).unwrap(), j).unwrap().item()
}

/// Compares every Jacobian entry `∂y_j/∂x_k` with a central difference.
/// An entry matches when its relative error is below `TOL` or its absolute
/// error is within the rounding noise of the difference quotient,
/// `8ε·max(|f(x±h)|, 1)/h`; the latter only matters for entries near 0.
/// Returns the worst relative error among entries that match neither way.
fn check(inputs: Vec<(&str, Tensor)>, op: Op) -> f64 {
    let mut store = ParamStore::new();
    for (n, t) in inputs {
        store.insert(n, t);
    }
    let outputs = {
        let tape = Tape::new();
        let p = store.bind(&tape);
        op(&tape, &p).unwrap().value().len()
    };
    let mut worst: f64 = 0.0;
    for j in 0..outputs {
        let analytic = {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let y = entry(op(&tape, &p).unwrap(), j).unwrap();
            tape.backward(y).unwrap().param_grads(&store.shapes())
        };
        for pi in 0..store.len() {
            for k in 0..store.by_index(pi).1.len() {
                let orig = store.by_index(pi).1.data()[k];
                store.by_index_mut(pi).data_mut()[k] = orig + H;
                let plus = eval(&store, op, j);
                store.by_index_mut(pi).data_mut()[k] = orig - H;
                let minus = eval(&store, op, j);
                store.by_index_mut(pi).data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * H);
                let a = analytic[pi].data()[k];
                let rel = relative_error(a, numeric);
                let noise = 8.0 * f64::EPSILON * plus.abs().max(minus.abs()).max(1.0) / H;
                if rel >= TOL && (a - numeric).abs() > noise {
                    worst = worst.max(rel);
                }
            }
        }
    }
    worst
}

macro_rules! unary_cases {
    ($($name:ident: $strategy:expr => |$x:ident| $body:expr;)*) => {
        proptest! {
            #![proptest_config(config())]
            $(
                #[test]
                fn $name(x in $strategy) {
                    fn op<'t>(_t: &'t Tape, p: &Bound<'t>) -> Result<Var<'t>> {
                        let $x = p.get("x")?;
                        Ok($body)
                    }
                    let err = check(vec![("x", x)], op);
                    prop_assert!(err < TOL, "relative error {err}");
                }
            )*
        }
    };
}

unary_cases! {
    tanh_grad: matrix(3, 4) => |x| x.tanh()?;
    sigmoid_grad: matrix(3, 4) => |x| x.sigmoid()?;
    exp_grad: matrix(3, 4) => |x| x.exp()?;
    relu_grad: matrix(3, 4) => |x| x.relu()?;
    abs_grad: matrix(3, 4) => |x| x.abs()?;
    log_grad: matrix(3, 4).prop_map(|t| t.map(f64::abs)) => |x| x.log()?;
    scale_grad: matrix(2, 5) => |x| x.scale(-1.7)?;
    add_scalar_grad: matrix(2, 5) => |x| x.add_scalar(0.4)?.mul(x)?;
    transpose_grad: matrix(2, 5) => |x| x.transpose()?;
    softmax_grad: matrix(3, 4) => |x| x.softmax_rows()?;
    log_softmax_grad: matrix(3, 4) => |x| x.log_softmax_rows()?;
    sum_grad: matrix(3, 4) => |x| x.mul(x)?.sum()?;
    mean_grad: matrix(3, 4) => |x| x.tanh()?.mean()?;
    sum_rows_grad: matrix(3, 4) => |x| x.mul(x)?.sum_rows()?;
    sum_sq_grad: matrix(3, 4) => |x| x.sum_sq()?;
    normalize_grad: matrix(3, 4) => |x| x.normalize_rows(COSINE_EPS)?;
    layer_norm_grad: matrix(3, 4) => |x| x.layer_norm_rows(1e-5)?;
    slice_rows_grad: matrix(4, 3) => |x| x.slice_rows(1, 2)?.tanh()?;
    slice_cols_grad: matrix(4, 3) => |x| x.slice_cols(1, 2)?.tanh()?;
    gather_grad: matrix(4, 3) => |x| x.gather_rows(&[3, 0, 3, 1])?.tanh()?;
    concat_grad: matrix(2, 3) => |x| Var::concat_cols(&[x, x.tanh()?])?;
    concat_rows_grad: matrix(2, 3) => |x| Var::concat_rows(&[x.exp()?, x])?;
    self_matmul_grad: matrix(3, 3) => |x| x.matmul(x)?;
}

macro_rules! binary_cases {
    ($($name:ident: ($sa:expr, $sb:expr) => |$a:ident, $b:ident| $body:expr;)*) => {
        proptest! {
            #![proptest_config(config())]
            $(
                #[test]
                fn $name(a in $sa, b in $sb) {
                    fn op<'t>(_t: &'t Tape, p: &Bound<'t>) -> Result<Var<'t>> {
                        let ($a, $b) = (p.get("a")?, p.get("b")?);
                        Ok($body)
                    }
                    let err = check(vec![("a", a), ("b", b)], op);
                    prop_assert!(err < TOL, "relative error {err}");
                }
            )*
        }
    };
}

binary_cases! {
    matmul_grad: (matrix(3, 4), matrix(4, 2)) => |a, b| a.matmul(b)?;
    add_grad: (matrix(3, 2), matrix(3, 2)) => |a, b| a.add(b)?.tanh()?;
    sub_grad: (matrix(3, 2), matrix(3, 2)) => |a, b| a.sub(b)?.tanh()?;
    mul_grad: (matrix(3, 2), matrix(3, 2)) => |a, b| a.mul(b)?;
    add_row_grad: (matrix(3, 4), matrix(1, 4)) => |a, b| a.add_row(b)?.tanh()?;
    mul_row_grad: (matrix(3, 4), matrix(1, 4)) => |a, b| a.mul_row(b)?;
    mul_col_grad: (matrix(3, 4), matrix(3, 1)) => |a, b| a.mul_col(b)?;
    cosine_grad: (matrix(3, 4), matrix(3, 4)) => |a, b| cosine_rows(a, b, COSINE_EPS)?;
}
