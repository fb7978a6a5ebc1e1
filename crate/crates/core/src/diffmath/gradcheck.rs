//! Finite-difference verification of reverse-mode gradients.

use crate::rng::Stream;
use crate::scalar::Scalar;

use super::tape::Tape;
use super::tensor::Tensor;

/// Max relative error between the tape gradient of `f` at `x` and central
/// finite differences with step `eps`.
///
/// `f` must produce a scalar; the relative error per coordinate is
/// `|ad - fd| / max(1e-8, |fd|)`. `eps` must lie in (0, 1e-3].
pub fn grad_check<F, Fun>(f: Fun, x: &Tensor<F>, eps: F) -> F
where
    F: Scalar,
    Fun: Fn(&mut Tape<F>, &Tensor<F>) -> Tensor<F>,
{
    assert!(
        eps > F::zero() && eps <= F::from_f64_lossy(1e-3),
        "grad_check: eps {eps} outside (0, 1e-3]"
    );
    let mut tape = Tape::new();
    let watched = tape.watch(x);
    let y = f(&mut tape, &watched);
    assert!(y.len() == 1, "grad_check: f must return a scalar, got shape {:?}", y.shape());
    let grads = tape.backward(&y);
    let ad = grads.wrt(&watched);

    let eval = |values: Vec<F>| -> F {
        let mut t = Tape::new();
        let probe = Tensor::new(x.shape().to_vec(), values);
        f(&mut t, &probe).item()
    };

    let floor = F::from_f64_lossy(1e-8);
    let two = F::from_f64_lossy(2.0);
    let mut worst = F::zero();
    for i in 0..x.len() {
        let mut plus = x.values().to_vec();
        let mut minus = x.values().to_vec();
        plus[i] = plus[i] + eps;
        minus[i] = minus[i] - eps;
        let fd = (eval(plus) - eval(minus)) / (two * eps);
        let err = (ad.values()[i] - fd).abs() / floor.max(fd.abs());
        worst = worst.max(err);
    }
    worst
}

/// One named check result from the primitive suite.
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Finite-difference sweep over every differentiable primitive.
///
/// Each primitive is exercised on `instances` random small inputs; inputs
/// are kept away from the kinks of relu/clamp so the central difference is
/// valid. Returns the worst relative error per primitive.
pub fn primitive_suite<F: Scalar>(instances: usize, stream: &mut Stream) -> Vec<CheckOutcome> {
    let eps = F::from_f64_lossy(1e-5);
    let mut outcomes = Vec::new();

    let mut record = |name: &'static str, worst: F| {
        outcomes.push(CheckOutcome { name, max_rel_err: worst.to_f64_lossy() });
    };

    // Random vector with entries in [-2, 2], nudged away from `avoid` points.
    let sample = |stream: &mut Stream, n: usize, avoid: &[f64]| -> Tensor<F> {
        let mut v = Vec::with_capacity(n);
        while v.len() < n {
            let x = stream.next_uniform() * 4.0 - 2.0;
            if avoid.iter().all(|a| (x - a).abs() > 1e-2) {
                v.push(F::from_f64_lossy(x));
            }
        }
        Tensor::from_vec(v)
    };

    macro_rules! unary_case {
        ($name:literal, $avoid:expr, $build:expr) => {{
            let mut worst = F::zero();
            for _ in 0..instances {
                let n = 2 + (stream.next_below(5) as usize);
                let x = sample(stream, n, $avoid);
                let err = grad_check($build, &x, eps);
                worst = worst.max(err);
            }
            record($name, worst);
        }};
    }

    unary_case!("tanh", &[], |t: &mut Tape<F>, x: &Tensor<F>| {
        let y = t.tanh(x);
        t.sum(&y)
    });
    unary_case!("relu", &[0.0], |t: &mut Tape<F>, x: &Tensor<F>| {
        let y = t.relu(x);
        t.sum(&y)
    });
    unary_case!("sigmoid", &[], |t: &mut Tape<F>, x: &Tensor<F>| {
        let y = t.sigmoid(x);
        t.sum(&y)
    });
    unary_case!("softplus", &[], |t: &mut Tape<F>, x: &Tensor<F>| {
        let y = t.softplus(x);
        t.sum(&y)
    });
    unary_case!("exp", &[], |t: &mut Tape<F>, x: &Tensor<F>| {
        let y = t.exp(x);
        t.sum(&y)
    });
    unary_case!("square", &[], |t: &mut Tape<F>, x: &Tensor<F>| {
        let y = t.square(x);
        t.sum(&y)
    });
    unary_case!("symlog", &[0.0], |t: &mut Tape<F>, x: &Tensor<F>| {
        let y = t.symlog(x);
        t.sum(&y)
    });
    unary_case!("symexp", &[0.0], |t: &mut Tape<F>, x: &Tensor<F>| {
        let y = t.symexp(x);
        t.sum(&y)
    });
    unary_case!("clamp", &[-0.8, 0.8], |t: &mut Tape<F>, x: &Tensor<F>| {
        let y = t.clamp(x, F::from_f64_lossy(-0.8), F::from_f64_lossy(0.8));
        let y = t.square(&y);
        t.sum(&y)
    });
    unary_case!("softmax", &[], |t: &mut Tape<F>, x: &Tensor<F>| {
        let y = t.softmax(x);
        let w = t.square(&y);
        t.sum(&w)
    });
    unary_case!("log_softmax", &[], |t: &mut Tape<F>, x: &Tensor<F>| {
        let y = t.log_softmax(x);
        let w = t.square(&y);
        t.sum(&w)
    });
    unary_case!("sum", &[], |t: &mut Tape<F>, x: &Tensor<F>| {
        let y = t.square(x);
        t.sum(&y)
    });
    unary_case!("mean", &[], |t: &mut Tape<F>, x: &Tensor<F>| {
        let y = t.square(x);
        t.mean(&y)
    });
    unary_case!("affine", &[], |t: &mut Tape<F>, x: &Tensor<F>| {
        let y = t.affine(x, F::from_f64_lossy(1.7), F::from_f64_lossy(-0.3));
        let y = t.square(&y);
        t.sum(&y)
    });

    // log on strictly positive inputs.
    {
        let mut worst = F::zero();
        for _ in 0..instances {
            let n = 2 + (stream.next_below(5) as usize);
            let v: Vec<F> =
                (0..n).map(|_| F::from_f64_lossy(stream.next_uniform() * 3.0 + 0.1)).collect();
            let x = Tensor::from_vec(v);
            let err = grad_check(
                |t: &mut Tape<F>, x: &Tensor<F>| {
                    let y = t.log(x);
                    t.sum(&y)
                },
                &x,
                eps,
            );
            worst = worst.max(err);
        }
        record("log", worst);
    }

    // Binary elementwise ops: check gradient w.r.t. each side.
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let mut worst = F::zero();
        for _ in 0..instances {
            let n = 2 + (stream.next_below(5) as usize);
            let a = sample(stream, n, &[]);
            let b = sample(stream, n, &[]);
            for side in 0..2 {
                let (fixed, probe) = if side == 0 { (b.clone(), a.clone()) } else { (a.clone(), b.clone()) };
                let err = grad_check(
                    |t: &mut Tape<F>, x: &Tensor<F>| {
                        let (lhs, rhs) = if side == 0 { (x, &fixed) } else { (&fixed, x) };
                        let y = match which {
                            0 => t.add(lhs, rhs),
                            1 => t.sub(lhs, rhs),
                            _ => t.mul(lhs, rhs),
                        };
                        let y = t.square(&y);
                        t.sum(&y)
                    },
                    &probe,
                    eps,
                );
                worst = worst.max(err);
            }
        }
        record(name, worst);
    }

    // matmul: gradient w.r.t. the matrix and the vector/matrix operand.
    {
        let mut worst = F::zero();
        for case in 0..instances {
            let m = 2 + (stream.next_below(3) as usize);
            let k = 2 + (stream.next_below(3) as usize);
            let n = 1 + (stream.next_below(3) as usize);
            let b_vec = case % 2 == 0;
            let a = Tensor::new(
                vec![m, k],
                (0..m * k).map(|_| F::from_f64_lossy(stream.next_normal())).collect(),
            );
            let b = if b_vec {
                Tensor::from_vec((0..k).map(|_| F::from_f64_lossy(stream.next_normal())).collect())
            } else {
                Tensor::new(
                    vec![k, n],
                    (0..k * n).map(|_| F::from_f64_lossy(stream.next_normal())).collect(),
                )
            };
            let bb = b.clone();
            let err_a = grad_check(
                |t: &mut Tape<F>, x: &Tensor<F>| {
                    let y = t.matmul(x, &bb);
                    let y = t.square(&y);
                    t.sum(&y)
                },
                &a,
                eps,
            );
            let aa = a.clone();
            let err_b = grad_check(
                |t: &mut Tape<F>, x: &Tensor<F>| {
                    let y = t.matmul(&aa, x);
                    let y = t.square(&y);
                    t.sum(&y)
                },
                &b,
                eps,
            );
            worst = worst.max(err_a).max(err_b);
        }
        record("matmul", worst);
    }

    // concat + slice exercised together.
    {
        let mut worst = F::zero();
        for _ in 0..instances {
            let n = 3 + (stream.next_below(4) as usize);
            let x = sample(stream, n, &[]);
            let other = sample(stream, n, &[]);
            let err = grad_check(
                |t: &mut Tape<F>, x: &Tensor<F>| {
                    let joined = t.concat(&[x, &other]);
                    let part = t.slice(&joined, 1, n);
                    let y = t.square(&part);
                    t.sum(&y)
                },
                &x,
                eps,
            );
            worst = worst.max(err);
        }
        record("concat_slice", worst);
    }

    // Reparameterized Gaussian sample w.r.t. mean and log_std.
    {
        let mut worst = F::zero();
        for _ in 0..instances {
            let n = 2 + (stream.next_below(4) as usize);
            let mean = sample(stream, n, &[]);
            let log_std = sample(stream, n, &[]);
            let noise = Tensor::from_vec(
                (0..n).map(|_| F::from_f64_lossy(stream.next_normal())).collect::<Vec<F>>(),
            );
            let (ls, no) = (log_std.clone(), noise.clone());
            let err_mean = grad_check(
                |t: &mut Tape<F>, x: &Tensor<F>| {
                    let s = t.gaussian_sample_reparam(x, &ls, &no);
                    let s = t.square(&s);
                    t.sum(&s)
                },
                &mean,
                eps,
            );
            let (mn, no2) = (mean.clone(), noise.clone());
            let err_ls = grad_check(
                |t: &mut Tape<F>, x: &Tensor<F>| {
                    let s = t.gaussian_sample_reparam(&mn, x, &no2);
                    let s = t.square(&s);
                    t.sum(&s)
                },
                &log_std,
                eps,
            );
            worst = worst.max(err_mean).max(err_ls);
        }
        record("gaussian_sample_reparam", worst);
    }

    outcomes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_tight() {
        let mut stream = Stream::new(11);
        let x = Tensor::<f64>::from_vec(stream.normals(6));
        let err = grad_check(
            |t, x| {
                let y = t.square(x);
                t.sum(&y)
            },
            &x,
            1e-5,
        );
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::<f64>::new(vec![3, 4], (0..12).map(|i| 0.3 * i as f64 + 0.7).collect());
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.25]);
        let err = grad_check(
            move |t, x| {
                let y = t.matmul(&w, x);
                t.sum(&y)
            },
            &x,
            1e-5,
        );
        assert!(err <= 1e-10, "err {err}");
    }

    #[test]
    fn sigmoid_chain_meets_tolerance() {
        let mut stream = Stream::new(7);
        let w = Tensor::<f64>::new(vec![4, 5], stream.normals(20));
        let x = Tensor::from_vec(stream.normals(5));
        let err = grad_check(
            move |t, x| {
                let u = t.matmul(&w, x);
                let s = t.sigmoid(&u);
                t.sum(&s)
            },
            &x,
            1e-5,
        );
        assert!(err <= 1e-4, "err {err}");
    }

    #[test]
    #[should_panic(expected = "must return a scalar")]
    fn non_scalar_objective_panics() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0]);
        let _ = grad_check(|t, x| t.square(x), &x, 1e-5);
    }

    #[test]
    #[should_panic(expected = "outside")]
    fn eps_out_of_range_panics() {
        let x = Tensor::<f64>::from_vec(vec![1.0]);
        let _ = grad_check(
            |t, x| {
                let y = t.square(x);
                t.sum(&y)
            },
            &x,
            1e-2,
        );
    }

    #[test]
    fn every_primitive_within_1e4() {
        let mut stream = Stream::new(1234);
        for outcome in primitive_suite::<f64>(100, &mut stream) {
            assert!(
                outcome.max_rel_err <= 1e-4,
                "{} exceeded tolerance: {}",
                outcome.name,
                outcome.max_rel_err
            );
        }
    }
}
