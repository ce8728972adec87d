use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::VredError;
use crate::tensor::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn matmul_identity_and_zero() {
    let mut g = Graph::new();
    let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
    let b = g.constant(t(&[2, 1], &[3., 4.])).unwrap();
    let y = g.matmul(i, b).unwrap();
    assert_eq!(g.value(y).data(), &[3., 4.]);
    assert_eq!(g.shape(y), &[2, 1]);

    let a = g.constant(t(&[1, 2], &[1., 2.])).unwrap();
    let z = g.constant(t(&[2, 1], &[0., 0.])).unwrap();
    let y = g.matmul(a, z).unwrap();
    assert_eq!(g.value(y).data(), &[0.]);
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 1])).unwrap();
    match g.matmul(a, b) {
        Err(VredError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 1]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn unary_values_and_log_domain() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0)).unwrap();
    let s = g.sigmoid(z).unwrap();
    let th = g.tanh(z).unwrap();
    assert_eq!(g.value(s).item(), 0.5);
    assert_eq!(g.value(th).item(), 0.0);
    assert!(matches!(g.log(z), Err(VredError::Domain { .. })));
}

#[test]
fn sigmoid_derivative_at_1_7() {
    let p = Tensor::scalar(1.7);
    let r = check_gradient(&p, DEFAULT_EPS, |g, x| {
        let y = g.sigmoid(x)?;
        g.sum(y)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn non_finite_inputs_rejected() {
    let mut g = Graph::new();
    assert!(matches!(
        g.constant(Tensor::scalar(f64::NAN)),
        Err(VredError::NonFinite(_))
    ));
}

#[test]
fn conv1d_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 4], &[1., 2., 3., 4.])).unwrap();
    let w = g.constant(t(&[1, 1, 2], &[1., 1.])).unwrap();
    let y = g.conv1d(x, w, 2, Padding::default()).unwrap();
    assert_eq!(g.value(y).data(), &[3., 7.]);

    let id = g.constant(t(&[1, 1, 1], &[1.])).unwrap();
    let y = g.conv1d(x, id, 1, Padding::default()).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);

    let long = g.constant(Tensor::zeros(&[1, 880])).unwrap();
    let k88 = g.constant(Tensor::zeros(&[1, 1, 88])).unwrap();
    let y = g.conv1d(long, k88, 44, Padding::symmetric(22)).unwrap();
    assert_eq!(g.shape(y), &[1, 20]);

    // 881 samples cannot be tiled exactly.
    let odd = g.constant(Tensor::zeros(&[1, 881])).unwrap();
    assert!(matches!(
        g.conv1d(odd, k88, 44, Padding::symmetric(22)),
        Err(VredError::Config(_))
    ));
}

#[test]
fn conv_transpose_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1], &[1.])).unwrap();
    let w = g.constant(t(&[1, 1, 2], &[2., 3.])).unwrap();
    let y = g.conv_transpose1d(x, w, 1, Padding::default()).unwrap();
    assert_eq!(g.value(y).data(), &[2., 3.]);

    let f = g.constant(Tensor::zeros(&[1, 20])).unwrap();
    let k = g.constant(Tensor::zeros(&[1, 1, 88])).unwrap();
    let y = g
        .conv_transpose1d(f, k, 44, Padding::symmetric(22))
        .unwrap();
    assert_eq!(g.shape(y), &[1, 880]);

    assert!(matches!(
        g.conv_transpose1d(x, w, 1, Padding::symmetric(1)),
        Err(VredError::Config(_))
    ));
}

#[test]
fn conv_shape_round_trip() {
    for &len in &[44usize, 880, 4400] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, len])).unwrap();
        let w = g.constant(Tensor::zeros(&[3, 1, 88])).unwrap();
        let pad = Padding::symmetric((88 - 44) / 2);
        let f = g.conv1d(x, w, 44, pad).unwrap();
        assert_eq!(g.shape(f), &[3, len / 44]);
        let y = g.conv_transpose1d(f, w, 44, pad).unwrap();
        assert_eq!(g.shape(y), &[1, len]);
    }
}

#[test]
fn conv_adjointness() {
    for seed in 0..10 {
        let (c_in, c_out, k, s, len) = (3, 4, 8, 4, 40);
        let pad = Padding { left: 1, right: 3 };
        let x = rand_t(&[c_in, len], seed);
        let w = rand_t(&[c_out, c_in, k], seed + 100);
        let mut g = Graph::new();
        let xv = g.constant_ref(&x).unwrap();
        let wv = g.constant_ref(&w).unwrap();
        let y = g.conv1d(xv, wv, s, pad).unwrap();
        let y_shape = g.shape(y).to_vec();
        let probe = rand_t(&y_shape, seed + 200);
        let pv = g.constant_ref(&probe).unwrap();
        let back = g.conv_transpose1d(pv, wv, s, pad).unwrap();
        assert_eq!(g.shape(back), &[c_in, len]);
        let lhs = g.value(y).dot(&probe);
        let rhs = x.dot(g.value(back));
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn backward_of_sum_is_ones_and_zero_scale_is_zeros() {
    let x = rand_t(&[3, 2], 1);
    let mut g = Graph::new();
    let xv = g.param(&x).unwrap();
    let s = g.sum(xv).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(xv).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let xv = g.param(&x).unwrap();
    let f = g.tanh(xv).unwrap();
    let z = g.scale(f, 0.0).unwrap();
    let s = g.sum(z).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(xv).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_requires_scalar() {
    let x = rand_t(&[3], 1);
    let mut g = Graph::new();
    let xv = g.param(&x).unwrap();
    assert!(matches!(g.backward(xv), Err(VredError::Contract(_))));
}

#[test]
fn fan_out_accumulates() {
    // loss = sum(x * x) via two uses of the same node: grad = 2x.
    let x = rand_t(&[4], 3);
    let mut g = Graph::new();
    let xv = g.param(&x).unwrap();
    let y = g.mul(xv, xv).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    for (gv, xv) in grads.get(xv).unwrap().data().iter().zip(x.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-15);
    }
}

#[test]
fn gradient_linearity() {
    let x = rand_t(&[5], 9);
    let (a, b) = (0.7, -1.3);
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let xv = g.param(&x).unwrap();
        let f = {
            let t = g.tanh(xv).unwrap();
            g.sum(t).unwrap()
        };
        let h = {
            let s = g.square(xv).unwrap();
            g.sum(s).unwrap()
        };
        let loss = match which {
            0 => f,
            1 => h,
            _ => {
                let fa = g.scale(f, a).unwrap();
                let hb = g.scale(h, b).unwrap();
                g.add(fa, hb).unwrap()
            }
        };
        g.backward(loss).unwrap().get(xv).unwrap().clone()
    };
    let (gf, gh, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..5 {
        let expect = a * gf.data()[i] + b * gh.data()[i];
        assert!((gc.data()[i] - expect).abs() < 1e-12);
    }
}

/// Runs `build` through the finite-difference checker for 20 seeds.
fn check_op(
    shapes: &[&[usize]],
    positive: bool,
    build: impl Fn(&mut Graph, &[Var]) -> crate::error::Result<Var>,
) {
    for seed in 0..20u64 {
        let params: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let t = rand_t(s, seed * 31 + i as u64);
                if positive {
                    t.map(|v| v.abs() + 0.5)
                } else {
                    t
                }
            })
            .collect();
        let r = finite_difference_check(&params, DEFAULT_EPS, &build).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

/// Projects an arbitrary node onto a fixed random direction so the loss is
/// sensitive to every output coordinate.
fn project(g: &mut Graph, y: Var) -> crate::error::Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = rand_t(&shape, 4242);
    let wv = g.constant(w)?;
    let p = g.mul(y, wv)?;
    g.sum(p)
}

#[test]
fn fd_matmul() {
    check_op(&[&[3, 4], &[4, 2]], false, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y)
    });
    check_op(&[&[3, 4], &[4]], false, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y)
    });
}

#[test]
fn fd_sum_of_matmul_vs_rel_err() {
    // sum(A·B) wrt A.
    check_op(&[&[2, 3], &[3, 3]], false, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        g.sum(y)
    });
}

#[test]
fn fd_elementwise() {
    check_op(&[&[2, 3], &[2, 3]], true, |g, v| {
        let a = g.add(v[0], v[1])?;
        let s = g.sub(a, v[0])?;
        let s = g.sub(s, v[0])?;
        let m = g.mul(s, v[1])?;
        let d = g.div(m, v[0])?;
        project(g, d)
    });
    check_op(&[&[3, 2], &[3]], false, |g, v| {
        let y = g.add_bias(v[0], v[1])?;
        let y = g.scale(y, 1.5)?;
        let y = g.offset(y, 0.2)?;
        project(g, y)
    });
}

#[test]
fn fd_unary() {
    for f in [Unary::Sigmoid, Unary::Tanh, Unary::Neg, Unary::Square] {
        check_op(&[&[6]], false, |g, v| {
            let y = g.unary(v[0], f)?;
            project(g, y)
        });
    }
    check_op(&[&[6]], true, |g, v| {
        let y = g.log(v[0])?;
        project(g, y)
    });
}

#[test]
fn fd_clamp_interior() {
    check_op(&[&[6]], false, |g, v| {
        let y = g.clamp(v[0], -2.0, 2.0)?;
        project(g, y)
    });
}

#[test]
fn fd_structural() {
    check_op(&[&[2, 3], &[4, 3]], false, |g, v| {
        let c = g.concat(&[v[0], v[1]])?;
        let s = g.slice_rows(c, 1, 4)?;
        let t = g.transpose(s)?;
        let r = g.reshape(t, &[12])?;
        let r = g.tanh(r)?;
        project(g, r)
    });
    check_op(&[&[3], &[3], &[3, 1]], false, |g, v| {
        let m = g.stack_columns(v)?;
        let c = g.column(m, 1)?;
        let sq = g.square(m)?;
        let a = project(g, sq)?;
        let b = project(g, c)?;
        g.add(a, b)
    });
}

#[test]
fn fd_conv1d_and_transpose() {
    let pad = Padding { left: 1, right: 2 };
    check_op(&[&[2, 12], &[3, 2, 5]], false, |g, v| {
        let y = g.conv1d(v[0], v[1], 2, pad)?;
        project(g, y)
    });
    check_op(&[&[3, 6], &[3, 2, 5]], false, |g, v| {
        let y = g.conv_transpose1d(v[0], v[1], 2, pad)?;
        project(g, y)
    });
}
