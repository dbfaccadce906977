//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tape, Tensor, TensorError, Var};

/// Worst sampled disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare gradients of the scalar `f(inputs)` against central differences
/// with step `h`. At most `per_input` entries of each input are probed
/// (all of them when the input is smaller).
pub fn check<F>(
    inputs: &[Tensor],
    f: F,
    h: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradcheckReport>
where
    F: for<'a> Fn(&'a Tape, &[Var<'a>]) -> Result<Var<'a>>,
{
    run(inputs, f, h, per_input, seed, false)
}

/// As [`check`] with the fourth-order five-point stencil, for objectives
/// whose gradients are small against the roundoff of `f` itself.
pub fn check_five_point<F>(
    inputs: &[Tensor],
    f: F,
    h: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradcheckReport>
where
    F: for<'a> Fn(&'a Tape, &[Var<'a>]) -> Result<Var<'a>>,
{
    run(inputs, f, h, per_input, seed, true)
}

fn run<F>(
    inputs: &[Tensor],
    f: F,
    h: f64,
    per_input: usize,
    seed: u64,
    five_point: bool,
) -> Result<GradcheckReport>
where
    F: for<'a> Fn(&'a Tape, &[Var<'a>]) -> Result<Var<'a>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let g = &tape;
        let vars: Vec<Var<'_>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        f(&tape, &vars)?.value().item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut xs = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let picks: Vec<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            (0..per_input).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            let orig = xs[k].data()[i];
            let mut at = |dx: f64| -> Result<f64> {
                xs[k].data_mut()[i] = orig + dx;
                eval(&xs)
            };
            let num = if five_point {
                let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
                (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
            } else {
                (at(h)? - at(-h)?) / (2.0 * h)
            };
            xs[k].data_mut()[i] = orig;
            let ana = analytic[k].data()[i];
            if !num.is_finite() || !ana.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "gradcheck",
                    context: format!("input {k} element {i}"),
                });
            }
            let e = rel_error(ana, num);
            report.checked += 1;
            if e >= report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (k, i);
                report.analytic = ana;
                report.numeric = num;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn assert_ok(r: GradcheckReport, tol: f64) {
        assert!(r.max_rel_error < tol, "{r:?}");
    }

    #[test]
    fn matmul_gradcheck() {
        let r = check(
            &[randn(&[3, 4], 1), randn(&[4, 2], 2)],
            |t, v| {
                let g = &t;
                let y = g.matmul(&v[0], &v[1])?;
                Ok(g.sum(&g.mul(&y, &y)?))
            },
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert_ok(r, 1e-6);
    }

    #[test]
    fn batched_broadcast_matmul_gradcheck() {
        let r = check(
            &[randn(&[2, 3, 4], 3), randn(&[4, 2], 4)],
            |t, v| {
                let g = &t;
                let y = g.matmul(&v[0], &v[1])?;
                Ok(g.sum(&g.mul(&y, &y)?))
            },
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert_ok(r, 1e-6);
    }

    #[test]
    fn layernorm_gradcheck() {
        let w = randn(&[2, 8], 9);
        let r = check(
            &[randn(&[2, 8], 5), randn(&[8], 6), randn(&[8], 7)],
            move |t, v| {
                let g = &t;
                let y = g.layernorm(&v[0], &v[1], &v[2], 1e-5)?;
                let c = g.constant(w.clone());
                Ok(g.sum(&g.mul(&y, &c)?))
            },
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert_ok(r, 1e-6);
    }

    #[test]
    fn elementwise_gradchecks() {
        type Unary = for<'a> fn(&&'a Tape, &Var<'a>) -> Var<'a>;
        let cases: [(&str, Unary); 4] = [
            ("exp", |g, x| g.exp(x)),
            ("softplus", |g, x| g.softplus(x)),
            ("silu", |g, x| g.silu(x)),
            ("sigmoid", |g, x| g.sigmoid(x)),
        ];
        for (name, op) in cases {
            let r = check(
                &[randn(&[12], 11)],
                move |t, v| {
                    let g = &t;
                    let y = op(&g, &v[0]);
                    Ok(g.sum(&g.mul(&y, &y)?))
                },
                1e-5,
                100,
                0,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "{name}: {r:?}");
        }
    }

    #[test]
    fn conv_and_shape_ops_gradcheck() {
        for reverse in [false, true] {
            let r = check(
                &[randn(&[2, 6, 3], 12), randn(&[3, 4], 13), randn(&[3], 14)],
                move |t, v| {
                    let g = &t;
                    let y = g.conv1d(&v[0], &v[1], &v[2], reverse)?;
                    let a = g.narrow(&y, 1, 1, 3)?;
                    let b = g.flip(&y, 1)?;
                    let b = g.narrow(&b, 1, 0, 2)?;
                    let c = g.concat(&[a, b], 1)?;
                    let c = g.reshape(&c, &[30])?;
                    let d = g.sub(&c, &g.scale(&c, 0.5))?;
                    Ok(g.sum(&g.mul(&d, &c)?))
                },
                1e-5,
                200,
                0,
            )
            .unwrap();
            assert_ok(r, 1e-6);
        }
    }

    #[test]
    fn five_point_is_tighter() {
        fn f<'a>(t: &'a Tape, v: &[Var<'a>]) -> Result<Var<'a>> {
            let g = &t;
            let y = g.exp(&v[0]);
            Ok(g.sum(&g.mul(&y, &y)?))
        }
        let x = [randn(&[6], 30)];
        let a = check(&x, f, 1e-3, 10, 0).unwrap();
        let b = check_five_point(&x, f, 1e-3, 10, 0).unwrap();
        assert!(b.max_rel_error < a.max_rel_error / 100.0, "{a:?} {b:?}");
    }

    #[test]
    fn broadcast_and_mse_gradcheck() {
        let r = check(
            &[randn(&[4, 3], 20), randn(&[3], 21), randn(&[4, 1], 22)],
            |t, v| {
                let g = &t;
                let a = g.add(&v[0], &v[1])?;
                let b = g.mul(&a, &v[2])?;
                let m = g.mean(&b);
                let target = g.constant(Tensor::full([4, 3], 0.3));
                let e = g.mse(&b, &target)?;
                g.add(&e, &m)
            },
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert_ok(r, 1e-6);
    }
}
