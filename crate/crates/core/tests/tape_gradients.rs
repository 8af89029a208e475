//! Analytic gradients of every tape primitive, and of random compositions,
//! checked against central finite differences.

#![allow(clippy::cloned_ref_to_slice_refs)]

use painet::gradcheck::{central_difference, max_relative_error, STEP};
use painet::tensor::{Tape, Tensor, TensorError, Var, EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks every input's gradient for `loss = sum(w ⊙ f(inputs))` with a
/// fixed random weighting `w`, so non-trivial upstream gradients are used.
fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).shape().to_vec()
    };
    let w = random(&mut rng, &out_shape);
    let eval = |xs: &[Tensor], w: &Tensor| -> (Tape, Var, Vec<Var>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        let wv = tape.leaf(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum_all(prod);
        (tape, loss, vars)
    };

    let (tape, loss, vars) = eval(inputs, &w);
    let grads = tape.backward(loss).unwrap();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tape, vars[k]);
        let numeric = central_difference(x, STEP, |xp| {
            let mut xs = inputs.to_vec();
            xs[k] = xp.clone();
            let (t, l, _) = eval(&xs, &w);
            t.value(l).item()
        });
        let err = max_relative_error(&analytic, &numeric, FLOOR);
        assert!(
            err <= TOL,
            "input {k}: relative error {err:e}\n{analytic:?}\n{numeric:?}"
        );
    }
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2, 3], vec![0.1, -4.0, 2.0, 3.0, 0.0, 7.0]).unwrap());
    let s = tape.sum_all(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(&tape, x), Tensor::ones(&[2, 3]));
}

#[test]
fn half_squared_norm_gradient_is_identity() {
    let xv = Tensor::new(&[3, 1], vec![1.5, -2.0, 0.25]).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(xv.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum_all(sq);
    let half = tape.scale(s, 0.5);
    let g = tape.backward(half).unwrap();
    assert_eq!(g.wrt(&tape, x), xv);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 2]));
    assert!(matches!(
        tape.backward(x),
        Err(TensorError::NonScalarLoss(_))
    ));
}

#[test]
fn elementwise_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3, 4]);
    check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check(&[a.clone(), b.clone()], |t, v| t.minimum(v[0], v[1]));
    check(&[a.clone()], |t, v| Ok(t.scale(v[0], -1.7)));
    check(&[a.clone()], |t, v| Ok(t.add_scalar(v[0], 0.3)));
    check(&[a.clone()], |t, v| Ok(t.sigmoid(v[0])));
    check(&[a.clone()], |t, v| Ok(t.silu(v[0])));
    check(&[a.clone()], |t, v| Ok(t.tanh(v[0])));
    check(&[a.clone()], |t, v| Ok(t.exp(v[0])));
    let pos = a.map(|x| x.abs() + 0.5);
    check(&[pos], |t, v| Ok(t.recip(v[0], EPS)));
}

#[test]
fn matrix_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let c = random(&mut rng, &[5, 4]);
    check(&[a.clone(), b], |t, v| t.matmul(v[0], v[1]));
    check(&[a.clone(), c.clone()], |t, v| t.matmul_nt(v[0], v[1]));
    check(&[a.clone()], |t, v| t.transpose(v[0]));
    check(&[a.clone(), c], |t, v| {
        t.concat_cols(&[v[0], v[0]])
            .and_then(|x| t.slice_cols(x, 2, 7))
    });
}

#[test]
fn reduction_and_broadcast_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[4, 3]);
    let row = random(&mut rng, &[1, 3]);
    let col = random(&mut rng, &[4, 1]);
    let s = random(&mut rng, &[1, 1]);
    check(&[a.clone()], |t, v| t.sum_rows(v[0]));
    check(&[a.clone()], |t, v| Ok(t.sum_all(v[0])));
    check(&[a.clone()], |t, v| t.sq_norm_rows(v[0]));
    check(&[a.clone()], |t, v| Ok(t.min_all(v[0])));
    check(&[a.clone(), row], |t, v| t.add_row(v[0], v[1]));
    check(&[a.clone(), col.clone()], |t, v| t.add_col(v[0], v[1]));
    check(&[a.clone(), col], |t, v| t.mul_col(v[0], v[1]));
    check(&[a.clone(), s], |t, v| t.mul_scalar(v[0], v[1]));
    check(&[a.clone()], |t, v| t.row_normalize(v[0], EPS));
    check(&[a.clone()], |t, v| t.gather_rows(v[0], &[3, 0, 0, 2, 1]));
    check(&[a], |t, v| t.scatter_add_rows(v[0], &[1, 1, 0, 2], 3));
}

/// One random op applied to the running value `x` (shape `r×c`, fixed).
fn random_step(
    t: &mut Tape,
    rng: &mut ChaCha8Rng,
    x: Var,
    pool: &[Var],
) -> Result<Var, TensorError> {
    let (r, c) = t.value(x).dims2()?;
    let other = pool[rng.random_range(0..pool.len())];
    Ok(match rng.random_range(0..14) {
        0 => t.add(x, other)?,
        1 => t.sub(x, other)?,
        2 => t.mul(x, other)?,
        3 => t.silu(x),
        4 => t.sigmoid(x),
        5 => t.tanh(x),
        6 => t.scale(x, 0.7),
        7 => {
            let s = t.sum_rows(x)?;
            let s = t.tanh(s);
            t.mul_col(x, s)?
        }
        8 => t.row_normalize(x, EPS)?,
        9 => {
            // x · otherᵀ · other keeps the r×c shape
            let g = t.matmul_nt(x, other)?;
            let g = t.scale(g, 1.0 / c as f64);
            t.matmul(g, other)?
        }
        10 => {
            let n = t.sq_norm_rows(x)?;
            let n = t.add_scalar(n, 1.0);
            let inv = t.recip(n, EPS);
            t.mul_col(x, inv)?
        }
        11 => {
            let perm: Vec<usize> = (0..r).rev().collect();
            let g = t.gather_rows(x, &perm)?;
            t.add(g, x)?
        }
        12 => {
            let cs = t.concat_cols(&[x, other])?;
            t.slice_cols(cs, c / 2, c / 2 + c)?
        }
        _ => {
            let m = t.min_all(other);
            t.mul_scalar(x, m)?
        }
    })
}

#[test]
fn random_compositions_match_finite_differences() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let inputs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[3, 4])).collect();
        let depth = rng.random_range(2..7);
        let ops_seed = rng.random::<u64>();
        check(&inputs, |t, v| {
            let mut ops = ChaCha8Rng::seed_from_u64(ops_seed);
            let mut x = v[0];
            for _ in 0..depth {
                x = random_step(t, &mut ops, x, v)?;
            }
            Ok(x)
        });
    }
}

#[test]
fn tied_parameters_accumulate() {
    let w = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&w);
    let b = tape.param(&w);
    assert_eq!(a, b);
    let s = tape.add(a, b).unwrap();
    let l = tape.sum_all(s);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.param(&tape, &w), Tensor::full(&[2, 2], 2.0));
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, &[4, 4]);
        let mut t = Tape::new();
        let v = t.leaf(x);
        let y = t.matmul(v, v).unwrap();
        let y = t.silu(y);
        let y = t.row_normalize(y, EPS).unwrap();
        let l = t.sum_all(y);
        let g = t.backward(l).unwrap();
        (t.value(l).item().to_bits(), g.wrt(&t, v))
    };
    assert_eq!(run(), run());
}
