//! Finite-difference validation of analytic gradients.

use ndarray::ArrayD;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against second-order
/// central differences, coordinate by coordinate. Returns the maximum of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over all
/// coordinates of all input points.
///
/// `build` must construct the same computation for any input values; it is
/// re-invoked on perturbed copies of `points`.
pub fn grad_check<F>(build: F, points: &[ArrayD<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[ArrayD<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|p| tape.constant(p.clone())).collect();
        let out = build(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::domain("grad_check requires a scalar-valued function"));
        }
        Ok(tape.scalar(out))
    };

    // One differentiable pass for the analytic gradients.
    let analytic: Vec<ArrayD<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = build(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::domain("grad_check requires a scalar-valued function"));
        }
        tape.backward(out)?;
        vars.iter()
            .zip(points)
            .map(|(&v, p)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(p.raw_dim()))
            })
            .collect()
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<ArrayD<f64>> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        // Logical (row-major) iteration order; gradient arrays may carry
        // non-contiguous layouts after transposes.
        let analytic_flat: Vec<f64> = analytic[pi].iter().copied().collect();
        for idx in 0..point.len() {
            let orig = *point.iter().nth(idx).expect("index in bounds");

            *work[pi].iter_mut().nth(idx).expect("index in bounds") = orig + step;
            let plus = eval(&work)?;
            *work[pi].iter_mut().nth(idx).expect("index in bounds") = orig - step;
            let minus = eval(&work)?;
            *work[pi].iter_mut().nth(idx).expect("index in bounds") = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic_flat[idx];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::numeric("non-finite value during gradient check"));
            }
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Runs a gradient check for every primitive at seeded random points and
/// returns (primitive name, max relative error) pairs. Test points stay away
/// from the ReLU kink and the rsqrt floor, where the derivative is not
/// defined or intentionally zeroed.
pub fn gradcheck_primitives(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use crate::rng::Stream;
    use std::sync::Arc;

    let h = 1e-5;
    let mut stream = Stream::new(seed, "gradcheck");

    // Magnitudes in [0.1, 1.1] with random sign keep every coordinate at
    // least 1e-3 from zero even after the +-h wiggle.
    let mut signed = |shape: &[usize]| -> ArrayD<f64> {
        ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| {
            let sign = if stream.next_f64() < 0.5 { -1.0 } else { 1.0 };
            sign * stream.uniform(0.1, 1.1)
        })
    };
    let a34 = signed(&[3, 4]);
    let b45 = signed(&[4, 5]);
    let sq4 = signed(&[4, 4]);
    let sq4b = signed(&[4, 4]);
    let v3 = signed(&[3]);
    let v4 = signed(&[4]);
    let v5 = signed(&[5]);
    let s1 = signed(&[1]);
    let positive = signed(&[4]).mapv(|x| x.abs() + 0.4);
    let r34 = signed(&[3, 4]);
    let r35 = signed(&[3, 5]);
    let r44 = signed(&[4, 4]);
    let r3 = signed(&[3]);
    let r4 = signed(&[4]);

    let mut mask = ndarray::Array2::from_elem((4, 4), false);
    for i in 0..4 {
        mask[[i, i]] = true;
    }
    mask[[0, 1]] = true;
    mask[[2, 1]] = true;
    mask[[1, 3]] = true;
    let mask = Arc::new(mask);

    let pairs: Arc<Vec<(usize, usize)>> = Arc::new(vec![(0, 1), (1, 2), (0, 3), (2, 3)]);

    let mut results = Vec::new();
    let mut run = |name: &'static str, err: Result<f64>| -> Result<()> {
        results.push((name, err?));
        Ok(())
    };

    // Each harness reduces to a scalar via a random weighting so the checked
    // gradient depends on every output coordinate.
    run("matmul", {
        let r = r35.clone();
        grad_check(
            move |t, xs| {
                let y = t.matmul(xs[0], xs[1])?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[a34.clone(), b45.clone()],
            h,
        )
    })?;
    run("matvec", {
        let r = r3.clone();
        grad_check(
            move |t, xs| {
                let y = t.matvec(xs[0], xs[1])?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[a34.clone(), v4.clone()],
            h,
        )
    })?;
    run("transpose", {
        let r = signed(&[4, 3]);
        grad_check(
            move |t, xs| {
                let y = t.transpose(xs[0])?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[a34.clone()],
            h,
        )
    })?;
    run("add", {
        let r = r34.clone();
        grad_check(
            move |t, xs| {
                let y = t.add(xs[0], xs[1])?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[a34.clone(), signed(&[3, 4])],
            h,
        )
    })?;
    run("sub", {
        let r = r34.clone();
        grad_check(
            move |t, xs| {
                let y = t.sub(xs[0], xs[1])?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[a34.clone(), signed(&[3, 4])],
            h,
        )
    })?;
    run("add_row_vec", {
        let r = r34.clone();
        grad_check(
            move |t, xs| {
                let y = t.add_row_vec(xs[0], xs[1])?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[a34.clone(), v4.clone()],
            h,
        )
    })?;
    run("add_col_vec", {
        let r = r34.clone();
        grad_check(
            move |t, xs| {
                let y = t.add_col_vec(xs[0], xs[1])?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[a34.clone(), v3.clone()],
            h,
        )
    })?;
    run("add_diag", {
        let r = r44.clone();
        grad_check(
            move |t, xs| {
                let y = t.add_diag(xs[0], xs[1])?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[sq4.clone(), v4.clone()],
            h,
        )
    })?;
    run("add_broadcast_scalar", {
        let r = r34.clone();
        grad_check(
            move |t, xs| {
                let y = t.add_broadcast_scalar(xs[0], xs[1])?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[a34.clone(), s1.clone()],
            h,
        )
    })?;
    run("scale", {
        let r = r34.clone();
        grad_check(
            move |t, xs| {
                let y = t.scale(xs[0], -1.75)?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[a34.clone()],
            h,
        )
    })?;
    run("hadamard", {
        grad_check(
            move |t, xs| {
                let y = t.hadamard(xs[0], xs[1])?;
                t.sum(y)
            },
            &[a34.clone(), signed(&[3, 4])],
            h,
        )
    })?;
    run("relu", {
        let r = r34.clone();
        grad_check(
            move |t, xs| {
                let y = t.relu(xs[0])?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[a34.clone()],
            h,
        )
    })?;
    run("leaky_relu", {
        let r = r34.clone();
        grad_check(
            move |t, xs| {
                let y = t.leaky_relu(xs[0], 0.2)?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[a34.clone()],
            h,
        )
    })?;
    run("masked_softmax_cols", {
        let r = r44.clone();
        let m = Arc::clone(&mask);
        grad_check(
            move |t, xs| {
                let y = t.masked_softmax_cols(xs[0], Arc::clone(&m))?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[sq4b.clone()],
            h,
        )
    })?;
    run("sum", grad_check(move |t, xs| t.sum(xs[0]), &[a34.clone()], h))?;
    run("mean", grad_check(move |t, xs| t.mean(xs[0]), &[a34.clone()], h))?;
    run("square", {
        grad_check(
            move |t, xs| {
                let y = t.square(xs[0])?;
                t.sum(y)
            },
            &[a34.clone()],
            h,
        )
    })?;
    run("concat", {
        let r = signed(&[7, 4]);
        grad_check(
            move |t, xs| {
                let y = t.concat(xs[0], xs[1], 0)?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[a34.clone(), signed(&[4, 4])],
            h,
        )
    })?;
    run("rsqrt", {
        let r = r4.clone();
        grad_check(
            move |t, xs| {
                let y = t.rsqrt(xs[0], 1e-12)?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[positive.clone()],
            h,
        )
    })?;
    run("scatter", {
        let r = r44.clone();
        let p = Arc::clone(&pairs);
        grad_check(
            move |t, xs| {
                let y = t.scatter(xs[0], Arc::clone(&p), 4)?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[v4.clone()],
            h,
        )
    })?;
    run("scale_rows", {
        let r = r34.clone();
        grad_check(
            move |t, xs| {
                let y = t.scale_rows(xs[0], xs[1])?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[a34.clone(), v3.clone()],
            h,
        )
    })?;
    run("scale_cols", {
        let r = r34.clone();
        grad_check(
            move |t, xs| {
                let y = t.scale_cols(xs[0], xs[1])?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[a34.clone(), v4.clone()],
            h,
        )
    })?;
    run("col_sum", {
        let r = r4.clone();
        grad_check(
            move |t, xs| {
                let y = t.col_sum(xs[0])?;
                let rv = t.constant(r.clone());
                let w = t.hadamard(y, rv)?;
                t.sum(w)
            },
            &[a34.clone()],
            h,
        )
    })?;
    run("mean_of", {
        grad_check(
            move |t, xs| {
                let a = t.sum(xs[0])?;
                let b = t.sum(xs[1])?;
                let c = t.square(b)?;
                t.mean_of(&[a, c])
            },
            &[v3.clone(), v5.clone()],
            h,
        )
    })?;

    Ok(results)
}
