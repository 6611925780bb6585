//! Central finite-difference verification of analytic gradients.
//!
//! The engine re-runs a caller-supplied loss closure with each parameter
//! element nudged by `±FD_STEP` and compares the symmetric difference
//! quotient against what [`Tape::backward`] computed. Closures must be
//! deterministic across calls; anything stochastic (dropout) has to clone
//! its RNG from a fixed template on every invocation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Perturbation used for the symmetric difference quotient.
pub const FD_STEP: f64 = 1e-5;

/// Largest relative error accepted by [`CheckOutcome::ok`].
pub const REL_TOL: f64 = 1e-4;

/// Result of checking one loss function against finite differences.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    /// Worst relative error over every element of every checked leaf.
    pub max_rel_err: f64,
    /// Leaf name and flat element index where the worst error occurred.
    pub worst_leaf: String,
    pub worst_index: usize,
    /// Analytic and numeric derivative at the worst element.
    pub analytic: f64,
    pub numeric: f64,
    /// Total number of elements compared.
    pub compared: usize,
}

impl CheckOutcome {
    pub fn ok(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Verifies `d loss / d leaf` for every listed leaf of a scalar-valued
/// computation. `f` is called once on a recording tape for the analytic
/// pass and `2·numel` more times on disabled tapes for the numeric pass.
pub fn check_scalar_fn(
    leaves: &[(&str, Tensor)],
    mut f: impl FnMut(&mut Tape) -> Result<Tensor>,
) -> Result<CheckOutcome> {
    for (_, t) in leaves {
        t.set_requires_grad(true);
        t.clear_grad();
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape)?;
    tape.backward(&loss)?;

    let mut outcome = CheckOutcome {
        max_rel_err: 0.0,
        worst_leaf: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        compared: 0,
    };

    for (name, t) in leaves {
        // a leaf the loss never touched legitimately has no gradient buffer
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in 0..t.numel() {
            let saved = t.data()[i];
            t.data_mut()[i] = saved + FD_STEP;
            let plus = f(&mut Tape::disabled())?.item()?;
            t.data_mut()[i] = saved - FD_STEP;
            let minus = f(&mut Tape::disabled())?.item()?;
            t.data_mut()[i] = saved;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let e = rel_err(analytic[i], numeric);
            outcome.compared += 1;
            if e > outcome.max_rel_err {
                outcome.max_rel_err = e;
                outcome.worst_leaf = name.to_string();
                outcome.worst_index = i;
                outcome.analytic = analytic[i];
                outcome.numeric = numeric;
            }
        }
    }
    Ok(outcome)
}

/// A named check, for reporting one line per case.
pub struct NamedCheck {
    pub name: &'static str,
    pub outcome: CheckOutcome,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// Random values bounded away from zero, for kinked ops like relu where a
/// finite difference straddling the kink is meaningless.
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let t = rand_tensor(rng, shape);
    {
        let mut d = t.data_mut();
        for v in d.iter_mut() {
            if v.abs() < 0.1 {
                *v += if *v >= 0.0 { 0.1 } else { -0.1 };
            }
        }
    }
    t
}

/// Projects `t` to a scalar via a fixed random weighting so the loss is
/// sensitive to every element.
fn weighted(tape: &mut Tape, t: &Tensor, w: &Tensor) -> Result<Tensor> {
    let prod = tape.mul(t, w)?;
    tape.sum_all(&prod)
}

/// Checks every tensor primitive with its own little random graph.
pub fn primitive_checks(seed: u64) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &'static str, o: CheckOutcome| out.push(NamedCheck { name, outcome: o });

    {
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 5]);
        let w = rand_tensor(&mut rng, vec![3, 5]);
        let o = check_scalar_fn(&[("a", a.clone()), ("b", b.clone())], |t| {
            let m = t.matmul(&a, &b)?;
            weighted(t, &m, &w)
        })?;
        push("matmul", o);
    }
    {
        let a = rand_tensor(&mut rng, vec![2, 3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 5]);
        let w = rand_tensor(&mut rng, vec![2, 3, 5]);
        let o = check_scalar_fn(&[("a", a.clone()), ("b", b.clone())], |t| {
            let m = t.matmul(&a, &b)?;
            weighted(t, &m, &w)
        })?;
        push("matmul_batched_broadcast", o);
    }
    {
        let a = rand_tensor(&mut rng, vec![2, 3, 4]);
        let w = rand_tensor(&mut rng, vec![2, 4, 3]);
        let o = check_scalar_fn(&[("a", a.clone())], |t| {
            let m = t.transpose_last2(&a)?;
            weighted(t, &m, &w)
        })?;
        push("transpose_last2", o);
    }
    {
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4]);
        let w = rand_tensor(&mut rng, vec![3, 4]);
        let o = check_scalar_fn(&[("a", a.clone()), ("b", b.clone())], |t| {
            let m = t.add(&a, &b)?;
            weighted(t, &m, &w)
        })?;
        push("add_broadcast", o);
    }
    {
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![3, 4]);
        let w = rand_tensor(&mut rng, vec![3, 4]);
        let o = check_scalar_fn(&[("a", a.clone()), ("b", b.clone())], |t| {
            let m = t.sub(&a, &b)?;
            weighted(t, &m, &w)
        })?;
        push("sub", o);
    }
    {
        let a = rand_tensor(&mut rng, vec![2, 3]);
        let b = rand_tensor(&mut rng, vec![2, 1]);
        let w = rand_tensor(&mut rng, vec![2, 3]);
        let o = check_scalar_fn(&[("a", a.clone()), ("b", b.clone())], |t| {
            let m = t.mul(&a, &b)?;
            weighted(t, &m, &w)
        })?;
        push("mul_broadcast", o);
    }
    {
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let w = rand_tensor(&mut rng, vec![3, 4]);
        let o = check_scalar_fn(&[("a", a.clone())], |t| {
            let m = t.scale(&a, -1.75)?;
            weighted(t, &m, &w)
        })?;
        push("scale", o);
    }
    {
        let a = rand_tensor_off_kink(&mut rng, vec![4, 4]);
        let w = rand_tensor(&mut rng, vec![4, 4]);
        let o = check_scalar_fn(&[("a", a.clone())], |t| {
            let m = t.relu(&a)?;
            weighted(t, &m, &w)
        })?;
        push("relu", o);
    }
    {
        let a = rand_tensor(&mut rng, vec![3, 5]);
        let w = rand_tensor(&mut rng, vec![3, 5]);
        let o = check_scalar_fn(&[("a", a.clone())], |t| {
            let m = t.softmax(&a, 1)?;
            weighted(t, &m, &w)
        })?;
        push("softmax", o);
    }
    {
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let w = rand_tensor(&mut rng, vec![4]);
        let o = check_scalar_fn(&[("a", a.clone())], |t| {
            let m = t.mean_axis(&a, 0)?;
            weighted(t, &m, &w)
        })?;
        push("mean_axis", o);
    }
    {
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let w = rand_tensor(&mut rng, vec![3]);
        let o = check_scalar_fn(&[("a", a.clone())], |t| {
            let m = t.sum_axis(&a, 1)?;
            weighted(t, &m, &w)
        })?;
        push("sum_axis", o);
    }
    {
        let a = rand_tensor(&mut rng, vec![2, 3]);
        let o = check_scalar_fn(&[("a", a.clone())], |t| t.sum_all(&a))?;
        push("sum_all", o);
    }
    {
        let a = rand_tensor(&mut rng, vec![2, 3]);
        let b = rand_tensor(&mut rng, vec![2, 2]);
        let w = rand_tensor(&mut rng, vec![2, 5]);
        let o = check_scalar_fn(&[("a", a.clone()), ("b", b.clone())], |t| {
            let m = t.concat(&[&a, &b], 1)?;
            weighted(t, &m, &w)
        })?;
        push("concat", o);
    }
    {
        let a = rand_tensor(&mut rng, vec![2, 6]);
        let w = rand_tensor(&mut rng, vec![3, 4]);
        let o = check_scalar_fn(&[("a", a.clone())], |t| {
            let m = t.reshape(&a, vec![3, 4])?;
            weighted(t, &m, &w)
        })?;
        push("reshape", o);
    }
    {
        let x = rand_tensor(&mut rng, vec![3, 6]);
        let gain = rand_tensor(&mut rng, vec![6]);
        let bias = rand_tensor(&mut rng, vec![6]);
        let w = rand_tensor(&mut rng, vec![3, 6]);
        let o = check_scalar_fn(
            &[("x", x.clone()), ("gain", gain.clone()), ("bias", bias.clone())],
            |t| {
                let m = t.layer_norm(&x, &gain, &bias, 1e-6)?;
                weighted(t, &m, &w)
            },
        )?;
        push("layer_norm", o);
    }
    {
        let x = rand_tensor(&mut rng, vec![4, 5]);
        let w = rand_tensor(&mut rng, vec![4, 5]);
        let template = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let o = check_scalar_fn(&[("x", x.clone())], |t| {
            let mut r = template.clone();
            let m = t.dropout(&x, 0.4, true, &mut r)?;
            weighted(t, &m, &w)
        })?;
        push("dropout", o);
    }
    {
        let x = rand_tensor(&mut rng, vec![3, 4]);
        let keep = Tensor::new(
            vec![3, 4],
            vec![1., 0., 1., 1., 0., 1., 1., 0., 1., 1., 1., 0.],
        )?;
        let w = rand_tensor(&mut rng, vec![3, 4]);
        let o = check_scalar_fn(&[("x", x.clone())], |t| {
            let m = t.masked_fill(&x, &keep, -3.0)?;
            weighted(t, &m, &w)
        })?;
        push("masked_fill", o);
    }
    {
        let m = rand_tensor(&mut rng, vec![5, 3]);
        let w = rand_tensor(&mut rng, vec![4, 3]);
        let o = check_scalar_fn(&[("m", m.clone())], |t| {
            let g = t.gather_rows(&m, &[4, 0, 0, 2])?;
            weighted(t, &g, &w)
        })?;
        push("gather_rows", o);
    }

    Ok(out)
}
