use flowdet_core::autograd::Graph;
use flowdet_core::gradcheck::{gradcheck, GradcheckOptions};
use flowdet_core::{Error, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64_slice(shape, data).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn forward1(x: Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> flowdet_core::Result<Var>) -> Tensor<f64> {
    let mut g = Graph::inference();
    let v = g.constant(x);
    let y = f(&mut g, v).unwrap();
    g.take_value(y)
}

#[test]
fn conv_identity_kernel() {
    let x = randn(&[2, 1, 5, 4], 1);
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let b = g.constant(t(&[1], &[0.0]));
    let y = g.conv2d(xv, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_summation() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 9.0);
}

#[test]
fn conv_output_extent_and_errors() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::<f64>::zeros(&[1, 2, 9, 7]));
    let w = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let y = g.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 5, 4]);
    let bad = g.constant(Tensor::zeros(&[3, 4, 3, 3]));
    let err = g.conv2d(x, bad, None, 1, 1).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(err.to_string().contains("axis C"), "{err}");
    let even = g.constant(Tensor::zeros(&[3, 2, 2, 2]));
    assert!(g.conv2d(x, even, None, 1, 0).is_err());
}

#[test]
fn conv_gradcheck() {
    let r = gradcheck(
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        &[randn(&[2, 3, 6, 5], 2), randn(&[4, 3, 3, 3], 3), randn(&[4], 4)],
        &GradcheckOptions::with_tol(1e-6),
    );
    assert!(r.pass, "{r:?}");
}

#[test]
fn dwconv_identity() {
    let x = randn(&[1, 3, 4, 5], 5);
    let mut depth = vec![0.0; 3 * 9];
    for c in 0..3 {
        depth[c * 9 + 4] = 1.0;
    }
    let mut point = vec![0.0; 9];
    for c in 0..3 {
        point[c * 3 + c] = 1.0;
    }
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let d = g.constant(t(&[3, 3, 3], &depth));
    let p = g.constant(t(&[3, 3], &point));
    let y = g.dwconv(xv, d, p).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn dwconv_matches_dense_expansion() {
    let (c, o, k) = (3, 4, 3);
    let x = randn(&[2, c, 6, 5], 6);
    let depth = randn(&[c, k, k], 7);
    let point = randn(&[o, c], 8);
    let mut dense = vec![0.0; o * c * k * k];
    for oi in 0..o {
        for ci in 0..c {
            for j in 0..k * k {
                dense[(oi * c + ci) * k * k + j] = point.data()[oi * c + ci] * depth.data()[ci * k * k + j];
            }
        }
    }
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let d = g.constant(depth);
    let p = g.constant(point);
    let w = g.constant(t(&[o, c, k, k], &dense));
    let a = g.dwconv(xv, d, p).unwrap();
    let b = g.conv2d(xv, w, None, 1, 1).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-10);
}

#[test]
fn dwconv_channel_mismatch() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::<f64>::zeros(&[1, 2, 4, 4]));
    let d = g.constant(Tensor::zeros(&[3, 3, 3]));
    let p = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.dwconv(x, d, p), Err(Error::Shape { .. })));
}

#[test]
fn softmax_values() {
    let y = forward1(t(&[2], &[0.0, 0.0]), |g, v| g.softmax(v, 0));
    assert_eq!(y.data(), &[0.5, 0.5]);
    let y = forward1(t(&[3], &[1.0, 2.0, 3.0]), |g, v| g.softmax(v, 0));
    for (a, b) in y.data().iter().zip([0.09003, 0.24473, 0.66524]) {
        assert!((a - b).abs() < 1e-5);
    }
    let a = forward1(t(&[2], &[700.0, 703.5]), |g, v| g.softmax(v, 0));
    let b = forward1(t(&[2], &[0.0, 3.5]), |g, v| g.softmax(v, 0));
    assert!(a.max_abs_diff(&b) < 1e-15);
}

#[test]
fn split_concat_round_trip() {
    let x = randn(&[2, 64, 3, 3], 9);
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let parts = g.split(v, 1, &[32, 32]).unwrap();
    assert_eq!(g.shape(parts[0]), &[2, 32, 3, 3]);
    let back = g.concat(&parts, 1).unwrap();
    assert_eq!(g.value(back), &x);
}

#[test]
fn layernorm_moments() {
    let x = randn(&[5, 16], 10);
    let y = forward1(x, |g, v| {
        let gamma = g.constant(Tensor::ones(&[16]));
        let beta = g.constant(Tensor::zeros(&[16]));
        g.layernorm(v, gamma, beta, 0.0)
    });
    for row in y.data().chunks(16) {
        let m = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-8);
    }
}

#[test]
fn backward_analytic_cases() {
    let x0 = randn(&[3, 4], 11);
    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    for (gr, v) in g.grad(x).unwrap().iter().zip(x0.data()) {
        assert_eq!(*gr, 2.0 * v);
    }
}

#[test]
fn backward_rejects_non_scalar_and_zero_fills_unused() {
    let mut g = Graph::new();
    let x = g.param(randn(&[3], 12));
    let unused = g.param(randn(&[2], 13));
    let y = g.exp(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
}

#[test]
fn forward_rejects_non_finite() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(t(&[1], &[-1.0]));
    assert!(matches!(g.ln(x), Err(Error::NonFinite { .. })));
}

#[test]
fn gradcheck_linear_and_sigmoid_chain() {
    let r = gradcheck(
        |g, v| g.linear(v[0], v[1], Some(v[2])),
        &[randn(&[3, 4], 14), randn(&[4, 2], 15), randn(&[2], 16)],
        &GradcheckOptions { eps: 1e-2, richardson: false, ..GradcheckOptions::with_tol(1e-9) },
    );
    assert!(r.pass && r.max_rel_err < 1e-9, "{r:?}");
    let r = gradcheck(
        |g, v| {
            let a = g.sigmoid(v[0])?;
            let b = g.scale(a, 3.0)?;
            g.sigmoid(b)
        },
        &[randn(&[6], 17)],
        &GradcheckOptions::with_tol(1e-6),
    );
    assert!(r.pass, "{r:?}");
}

#[test]
fn gradcheck_catches_wrong_backward() {
    let r = gradcheck(
        |g, v| {
            let val = g.value(v[0]).clone();
            let out = Tensor::from_vec(val.shape(), val.data().iter().map(|x| x * x).collect())?;
            g.custom("bad_square", &[v[0]], out, |ctx| {
                vec![Some(ctx.grad.iter().zip(ctx.inputs[0].data()).map(|(g, x)| 3.0 * g * x).collect())]
            })
        },
        &[randn(&[4], 18)],
        &GradcheckOptions::default(),
    );
    assert!(!r.pass);
}

#[test]
fn matmul_gradcheck() {
    let r = gradcheck(|g, v| g.matmul(v[0], v[1]), &[randn(&[3, 5], 19), randn(&[5, 2], 20)], &GradcheckOptions::with_tol(1e-6));
    assert!(r.pass, "{r:?}");
    let r = gradcheck(
        |g, v| g.matmul_ext(v[0], v[1], true),
        &[randn(&[2, 3, 4], 21), randn(&[2, 5, 4], 22)],
        &GradcheckOptions::with_tol(1e-6),
    );
    assert!(r.pass, "{r:?}");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::inference();
        let x = g.constant(randn(&[1, 4, 8, 8], 23));
        let w = g.constant(randn(&[6, 4, 3, 3], 24));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.softmax(y, 1).unwrap();
        g.take_value(y).to_dump_bytes()
    };
    assert_eq!(run(), run());
}

type Op = fn(&mut Graph<f64>, &[Var]) -> flowdet_core::Result<Var>;

fn primitive_ops() -> Vec<(&'static str, Vec<Vec<usize>>, Op)> {
    vec![
        ("add", vec![vec![2, 3], vec![3]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 1]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1])),
        ("div", vec![vec![2, 3], vec![3]], |g, v| {
            let d = g.square(v[1])?;
            let d = g.add_scalar(d, 1.0)?;
            g.div(v[0], d)
        }),
        ("matmul", vec![vec![2, 3], vec![3, 4]], |g, v| g.matmul(v[0], v[1])),
        ("sigmoid", vec![vec![5]], |g, v| g.sigmoid(v[0])),
        ("tanh", vec![vec![5]], |g, v| g.tanh(v[0])),
        ("silu", vec![vec![5]], |g, v| g.silu(v[0])),
        ("exp", vec![vec![5]], |g, v| g.exp(v[0])),
        ("scale", vec![vec![5]], |g, v| g.scale(v[0], -1.7)),
        ("sqrt", vec![vec![4]], |g, v| {
            let s = g.square(v[0])?;
            let s = g.add_scalar(s, 0.5)?;
            g.sqrt(s)
        }),
        ("ln", vec![vec![4]], |g, v| {
            let s = g.square(v[0])?;
            let s = g.add_scalar(s, 0.5)?;
            g.ln(s)
        }),
        ("softmax", vec![vec![3, 4]], |g, v| g.softmax(v[0], 1)),
        ("log_softmax", vec![vec![3, 4]], |g, v| g.log_softmax(v[0], 0)),
        ("layernorm", vec![vec![3, 6], vec![6], vec![6]], |g, v| g.layernorm(v[0], v[1], v[2], 1e-5)),
        ("sum_axis", vec![vec![2, 3, 2]], |g, v| g.sum_axis(v[0], 1, false)),
        ("mean_axis", vec![vec![2, 3, 2]], |g, v| g.mean_axis(v[0], 2, true)),
        ("permute", vec![vec![2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        ("split_concat", vec![vec![2, 4]], |g, v| {
            let p = g.split(v[0], 1, &[1, 3])?;
            let a = g.scale(p[0], 2.0)?;
            g.concat(&[p[1], a], 1)
        }),
        ("narrow", vec![vec![3, 5]], |g, v| g.narrow(v[0], 1, 1, 3)),
        ("index_select", vec![vec![4, 2]], |g, v| g.index_select(v[0], &[3, 0, 3])),
        ("pad2d", vec![vec![1, 2, 3, 3]], |g, v| g.pad2d(v[0], 1, 0, 2, 1)),
        ("avg_pool2d", vec![vec![1, 2, 5, 5]], |g, v| g.avg_pool2d(v[0], 2)),
        ("depthwise_conv2d", vec![vec![1, 2, 4, 4], vec![2, 3, 3]], |g, v| g.depthwise_conv2d(v[0], v[1], 1)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_primitive_passes_gradcheck(seed in any::<u64>()) {
        for (name, shapes, op) in primitive_ops() {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| randn(s, seed.wrapping_add(i as u64 * 7919)))
                .collect();
            let r = gradcheck(op, &inputs, &GradcheckOptions { seed, eps: 1e-4, ..GradcheckOptions::default() });
            prop_assert!(r.pass, "{name}: {r:?}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f64..30.0, 1..12), shift in -50.0f64..50.0) {
        let n = v.len();
        let a = forward1(t(&[n], &v), |g, x| g.softmax(x, 0));
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let b = forward1(t(&[n], &shifted), |g, x| g.softmax(x, 0));
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
