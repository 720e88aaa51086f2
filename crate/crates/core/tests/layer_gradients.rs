//! Analytic layer gradients against central finite differences (f64, step 1e-4).
//! Each layer is reduced to the scalar `L = Σ out ⊙ R` for a fixed random `R`.

use kshare_core::gradcheck::relative_error;
use kshare_core::layers::*;
use kshare_core::{Rng, Tensor};

const STEP: f64 = 1e-4;

fn project(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    out.dot(r).unwrap()
}

/// Numeric gradient of `f` with respect to every element of `t`.
fn numeric(t: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = t.clone();
    (0..t.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + STEP;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - STEP;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * STEP)
        })
        .collect()
}

fn check(label: &str, analytic: &Tensor<f64>, numeric: &[f64], tol: f64) {
    let err = relative_error(analytic.data(), numeric);
    assert!(err <= tol, "{label}: relative error {err:e} > {tol:e}");
}

#[test]
fn conv2d_all_geometries() {
    let mut rng = Rng::new(1);
    let cases = [
        Conv2dHyper::new(3, 4, 3, 1, 1),
        Conv2dHyper::new(3, 2, 3, 2, 1),
        Conv2dHyper::new(3, 5, 1, 1, 0),
        Conv2dHyper::depthwise(3, 3),
        Conv2dHyper::depthwise(3, 5),
        Conv2dHyper {
            groups: 3,
            ..Conv2dHyper::new(3, 6, 3, 1, 0)
        },
    ];
    for h in cases {
        let x = Tensor::<f64>::normal(&[2, 3, 5, 5], 1.0, &mut rng);
        let [co, ci, kh, kw] = h.weight_shape();
        let w = Tensor::normal(&[co, ci, kh, kw], 0.5, &mut rng);
        let b = Tensor::normal(&[co], 0.5, &mut rng);
        let out = conv2d_forward(&x, &w, Some(&b), &h).unwrap();
        let r = Tensor::normal(out.shape(), 1.0, &mut rng);
        let g = conv2d_backward(&r, &x, &w, &h).unwrap();
        let label = format!("{h:?}");
        check(
            &format!("{label} x"),
            &g.grad_x,
            &numeric(&x, |x| project(&conv2d_forward(x, &w, Some(&b), &h).unwrap(), &r)),
            1e-6,
        );
        check(
            &format!("{label} w"),
            &g.grad_w,
            &numeric(&w, |w| project(&conv2d_forward(&x, w, Some(&b), &h).unwrap(), &r)),
            1e-6,
        );
        check(
            &format!("{label} b"),
            g.grad_b.as_ref().unwrap(),
            &numeric(&b, |b| project(&conv2d_forward(&x, &w, Some(b), &h).unwrap(), &r)),
            1e-6,
        );
    }
}

#[test]
fn batchnorm_training_and_eval() {
    let mut rng = Rng::new(2);
    let h = BatchNormHyper::new(3);
    let x = Tensor::<f64>::normal(&[4, 3, 4, 4], 2.0, &mut rng).add_scalar(0.5);
    let gamma = Tensor::uniform(&[3], 0.5, 1.5, &mut rng);
    let beta = Tensor::normal(&[3], 0.5, &mut rng);
    let mean = Tensor::normal(&[3], 0.1, &mut rng);
    let var = Tensor::uniform(&[3], 0.5, 2.0, &mut rng);
    for training in [true, false] {
        let fwd = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            batchnorm_forward(x, g, b, &mean, &var, &h, training).unwrap().0
        };
        let (out, cache, _) = batchnorm_forward(&x, &gamma, &beta, &mean, &var, &h, training).unwrap();
        let r = Tensor::normal(out.shape(), 1.0, &mut rng);
        let g = batchnorm_backward(&r, &cache, &gamma).unwrap();
        check("bn x", &g.grad_x, &numeric(&x, |x| project(&fwd(x, &gamma, &beta), &r)), 1e-5);
        check("bn gamma", &g.grad_gamma, &numeric(&gamma, |v| project(&fwd(&x, v, &beta), &r)), 1e-5);
        check("bn beta", &g.grad_beta, &numeric(&beta, |v| project(&fwd(&x, &gamma, v), &r)), 1e-5);
    }
}

#[test]
fn batchnorm_normalizes_in_training() {
    let mut rng = Rng::new(3);
    let h = BatchNormHyper::new(3);
    let x = Tensor::<f64>::normal(&[4, 3, 4, 4], 3.0, &mut rng).add_scalar(2.0);
    let (out, _, stats) = batchnorm_forward(
        &x,
        &Tensor::ones(&[3]),
        &Tensor::zeros(&[3]),
        &Tensor::zeros(&[3]),
        &Tensor::ones(&[3]),
        &h,
        true,
    )
    .unwrap();
    assert!(stats.is_some());
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| out.data()[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-4, "channel {c}: mean {m} var {v}");
    }
}

#[test]
fn se_block_all_parameters() {
    let mut rng = Rng::new(4);
    let h = SeHyper { channels: 8, ratio: 4 };
    let x = Tensor::<f64>::normal(&[2, 8, 4, 4], 1.0, &mut rng);
    let w1 = Tensor::normal(&[2, 8], 0.5, &mut rng);
    let b1 = Tensor::normal(&[2], 0.5, &mut rng);
    let w2 = Tensor::normal(&[8, 2], 0.5, &mut rng);
    let b2 = Tensor::normal(&[8], 0.5, &mut rng);
    let (out, cache) = se_block_forward(&x, &w1, &b1, &w2, &b2, &h).unwrap();
    let r = Tensor::normal(out.shape(), 1.0, &mut rng);
    let g = se_block_backward(&r, &x, &cache, &w1, &w2, &h).unwrap();
    let f = |x: &Tensor<f64>, w1: &Tensor<f64>, b1: &Tensor<f64>, w2: &Tensor<f64>, b2: &Tensor<f64>| {
        project(&se_block_forward(x, w1, b1, w2, b2, &h).unwrap().0, &r)
    };
    check("se x", &g.grad_x, &numeric(&x, |v| f(v, &w1, &b1, &w2, &b2)), 1e-5);
    check("se w1", &g.grad_w1, &numeric(&w1, |v| f(&x, v, &b1, &w2, &b2)), 1e-5);
    check("se b1", &g.grad_b1, &numeric(&b1, |v| f(&x, &w1, v, &w2, &b2)), 1e-5);
    check("se w2", &g.grad_w2, &numeric(&w2, |v| f(&x, &w1, &b1, v, &b2)), 1e-5);
    check("se b2", &g.grad_b2, &numeric(&b2, |v| f(&x, &w1, &b1, &w2, v)), 1e-5);
}

#[test]
fn softmax_cross_entropy() {
    let mut rng = Rng::new(5);
    let logits = Tensor::<f64>::normal(&[3, 5], 1.5, &mut rng);
    let labels = [4, 0, 2];
    let (_, g) = softmax_xent(&logits, &labels).unwrap();
    check("xent", &g, &numeric(&logits, |l| softmax_xent(l, &labels).unwrap().0), 1e-7);
}

#[test]
fn activations_at_random_points() {
    let mut rng = Rng::new(6);
    for kind in [Activation::Gelu, Activation::GeluErf, Activation::Sigmoid, Activation::Relu] {
        for _ in 0..10 {
            let mut x = rng.uniform(-3.0, 3.0);
            if kind == Activation::Relu && x.abs() < 1e-2 {
                x += 0.5;
            }
            let fd = (kind.apply(x + STEP) - kind.apply(x - STEP)) / (2.0 * STEP);
            let d = kind.derivative(x);
            let rel = (d - fd).abs() / d.abs().max(fd.abs()).max(1e-12);
            assert!(rel <= 1e-6 || (d - fd).abs() < 1e-10, "{kind:?} at {x}: {d} vs {fd}");
        }
    }
    let x = Tensor::<f64>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(activation_forward(Activation::Relu, &x).data(), &[0.0, 0.0, 2.0]);
    assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
}

#[test]
fn activation_backward_matches_fd() {
    let mut rng = Rng::new(7);
    let x = Tensor::<f64>::normal(&[2, 3, 3, 3], 1.5, &mut rng);
    let r = Tensor::normal(x.shape(), 1.0, &mut rng);
    for kind in [Activation::Gelu, Activation::Sigmoid] {
        let g = activation_backward(kind, &x, &r).unwrap();
        check(
            &format!("{kind:?}"),
            &g,
            &numeric(&x, |x| project(&activation_forward(kind, x), &r)),
            1e-6,
        );
    }
}

#[test]
fn linear_pool_and_residual() {
    let mut rng = Rng::new(8);
    let h = LinearHyper {
        in_features: 6,
        out_features: 4,
    };
    let x = Tensor::<f64>::normal(&[3, 6], 1.0, &mut rng);
    let w = Tensor::normal(&[4, 6], 0.5, &mut rng);
    let b = Tensor::normal(&[4], 0.5, &mut rng);
    let r = Tensor::normal(&[3, 4], 1.0, &mut rng);
    let g = linear_backward(&r, &x, &w, &h).unwrap();
    check("linear x", &g.grad_x, &numeric(&x, |v| project(&linear_forward(v, &w, &b, &h).unwrap(), &r)), 1e-7);
    check("linear w", &g.grad_w, &numeric(&w, |v| project(&linear_forward(&x, v, &b, &h).unwrap(), &r)), 1e-7);
    check("linear b", &g.grad_b, &numeric(&b, |v| project(&linear_forward(&x, &w, v, &h).unwrap(), &r)), 1e-7);

    let img = Tensor::<f64>::normal(&[2, 3, 4, 4], 1.0, &mut rng);
    let rp = Tensor::normal(&[2, 3], 1.0, &mut rng);
    let gp = global_avg_pool_backward(&rp, img.shape()).unwrap();
    check("pool", &gp, &numeric(&img, |v| project(&global_avg_pool_forward(v).unwrap(), &rp)), 1e-7);

    let other = Tensor::<f64>::normal(img.shape(), 1.0, &mut rng);
    let rr = Tensor::normal(img.shape(), 1.0, &mut rng);
    let (ga, gb) = residual_add_backward(&rr);
    check("residual a", &ga, &numeric(&img, |v| project(&residual_add_forward(v, &other).unwrap(), &rr)), 1e-7);
    check("residual b", &gb, &numeric(&other, |v| project(&residual_add_forward(&img, v).unwrap(), &rr)), 1e-7);
}
