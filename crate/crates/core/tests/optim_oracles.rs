use kshare_core::graph::Mode;
use kshare_core::models::{Model, ModelConfig, SharingPreset};
use kshare_core::optim::{OptimConfig, Optimizer, Schedule};
use kshare_core::sharing::{ParamId, ParamRole, ParameterStore, SiteGrad};
use kshare_core::{Rng, Tensor};

fn scalar_store(w: f64) -> (ParameterStore<f64>, ParamId) {
    let mut s = ParameterStore::new();
    let id = s.register("w", ParamRole::ConvWeight, Tensor::full(&[1], w), &[1]).unwrap();
    (s, id)
}

fn set_grad(s: &mut ParameterStore<f64>, id: ParamId, g: f64) {
    s.zero_grads();
    s.accumulate_shared_gradients(vec![SiteGrad {
        site: 1,
        param: id,
        grad: Tensor::full(&[1], g),
    }])
    .unwrap();
}

#[test]
fn sgd_momentum_two_steps() {
    let (lr, g, w0) = (0.1, 0.7, 2.0);
    let (mut s, id) = scalar_store(w0);
    let mut opt = Optimizer::new(OptimConfig::sgd(0.9, 0.0)).unwrap();
    // hand-rolled recurrence
    let (mut v, mut w) = (0.0, w0);
    for _ in 0..2 {
        set_grad(&mut s, id, g);
        opt.step(&mut s, lr).unwrap();
        v = 0.9 * v + g;
        w -= lr * v;
    }
    let got = s.value(id).data()[0];
    assert!((got - w).abs() < 1e-15);
    assert!((w0 - got - lr * g * (1.0 + 1.9)).abs() < 1e-14);
}

#[test]
fn sgd_zero_gradient_keeps_weights() {
    let (mut s, id) = scalar_store(1.5);
    let mut opt = Optimizer::new(OptimConfig::sgd(0.9, 0.0)).unwrap();
    set_grad(&mut s, id, 0.0);
    opt.step(&mut s, 0.1).unwrap();
    assert_eq!(s.value(id).data()[0], 1.5);
}

#[test]
fn adamw_first_step_closed_form() {
    for g in [0.3, -2.0, 1e-3] {
        let (mut s, id) = scalar_store(1.0);
        let cfg = OptimConfig::adamw(0.0);
        let mut opt = Optimizer::new(cfg).unwrap();
        set_grad(&mut s, id, g);
        opt.step(&mut s, 0.01).unwrap();
        let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-15, "g={g}");
    }
}

#[test]
fn adamw_decay_only_shrinks() {
    let (mut s, id) = scalar_store(3.0);
    let mut opt = Optimizer::new(OptimConfig::adamw(0.01)).unwrap();
    set_grad(&mut s, id, 0.0);
    opt.step(&mut s, 0.1).unwrap();
    assert!((s.value(id).data()[0] - 3.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
}

#[test]
fn adamw_five_steps_on_quadratic() {
    // f(w) = a/2 (w − c)², reference written out independently
    let (a, c, lr, wd) = (3.0, 0.5, 0.05, 0.01);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut s, id) = scalar_store(2.0);
    let mut opt = Optimizer::new(OptimConfig::adamw(wd)).unwrap();
    let (mut w, mut m, mut v) = (2.0f64, 0.0, 0.0);
    for t in 1..=5 {
        let g = a * (s.value(id).data()[0] - c);
        set_grad(&mut s, id, g);
        opt.step(&mut s, lr).unwrap();

        let g = a * (w - c);
        w -= lr * wd * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        w -= lr * mh / (vh.sqrt() + eps);
        assert!((s.value(id).data()[0] - w).abs() <= 1e-12, "step {t}");
    }
}

#[test]
fn biases_and_batchnorm_do_not_decay() {
    let mut s = ParameterStore::<f64>::new();
    let b = s.register("b", ParamRole::ConvBias, Tensor::full(&[1], 1.0), &[1]).unwrap();
    let g = s.register("g", ParamRole::BnGamma, Tensor::full(&[1], 1.0), &[2]).unwrap();
    let w = s.register("w", ParamRole::LinearWeight, Tensor::full(&[1], 1.0), &[3]).unwrap();
    let grads = [(b, 1), (g, 2), (w, 3)]
        .map(|(id, site)| SiteGrad {
            site,
            param: id,
            grad: Tensor::zeros(&[1]),
        })
        .to_vec();
    s.accumulate_shared_gradients(grads).unwrap();
    Optimizer::new(OptimConfig::sgd(0.0, 0.5)).unwrap().step(&mut s, 0.1).unwrap();
    assert_eq!(s.value(b).data()[0], 1.0);
    assert_eq!(s.value(g).data()[0], 1.0);
    assert!((s.value(w).data()[0] - 0.95).abs() < 1e-15);
}

#[test]
fn cosine_is_monotone() {
    let s = Schedule { min_lr: 1e-4, ..Schedule::cosine(0.01, 50) };
    let lrs: Vec<f64> = (0..=50).map(|e| s.lr_at(e).unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!((lrs[50] - 1e-4).abs() < 1e-15);
}

fn batch(seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let x = Tensor::normal(&[4, 3, 8, 8], 1.0, &mut rng);
    (x, (0..4).map(|_| rng.below(10)).collect())
}

/// Trains the shared model and its untied clone side by side. The clone gets,
/// at every member site, the sum of its per-site gradients, and its members
/// are re-tied after each step.
fn shared_vs_clone(opt_cfg: OptimConfig, steps: usize) -> f64 {
    let cfg = ModelConfig::convmixer(8, 3).with_input([3, 8, 8]).with_preset(SharingPreset::TwoKernel);
    let mut shared = Model::<f64>::new(&cfg, 21).unwrap();
    let mut clone = shared.untied_clone().unwrap();
    let mut opt_s = Optimizer::new(opt_cfg).unwrap();
    let mut opt_c = Optimizer::new(opt_cfg).unwrap();
    let members: Vec<(ParamId, Vec<ParamId>)> = shared
        .store
        .ids()
        .map(|id| {
            let p = shared.store.param(id);
            let slot = shared.graph.nodes[p.sites[0]].param_ids.iter().position(|&q| q == id).unwrap();
            (id, p.sites.iter().map(|&s| clone.graph.nodes[s].param_ids[slot]).collect())
        })
        .collect();
    for step in 0..steps {
        let (x, labels) = batch(step as u64);
        shared.store.zero_grads();
        shared.accumulate_gradients(&x, &labels, Mode::Train).unwrap();
        opt_s.step(&mut shared.store, 0.01).unwrap();

        clone.store.zero_grads();
        clone.accumulate_gradients(&x, &labels, Mode::Train).unwrap();
        for (_, ids) in members.iter().filter(|(_, ids)| ids.len() > 1) {
            let mut sum = Tensor::zeros_like(clone.store.grad(ids[0]));
            for &c in ids {
                sum.add_assign(clone.store.grad(c)).unwrap();
            }
            for &c in ids {
                clone.store.param_mut(c).grad = sum.clone();
            }
        }
        opt_c.step(&mut clone.store, 0.01).unwrap();
        for (_, ids) in members.iter().filter(|(_, ids)| ids.len() > 1) {
            let tied = clone.store.value(ids[0]).clone();
            for &c in &ids[1..] {
                clone.store.param_mut(c).value = tied.clone();
            }
        }
        for (id, _) in &members {
            assert_eq!(opt_s.slot(*id).map(|s| s.steps), shared.store.param(*id).trainable.then_some(step as u64 + 1));
        }
    }
    members
        .iter()
        .map(|(id, ids)| {
            let a = shared.store.value(*id);
            let b = clone.store.value(ids[0]);
            a.sub(b).unwrap().max_abs() / a.max_abs().max(1e-12)
        })
        .fold(0.0, f64::max)
}

#[test]
fn shared_trajectory_equals_retied_clone_sgd() {
    let err = shared_vs_clone(OptimConfig::sgd(0.9, 5e-4), 10);
    assert!(err <= 1e-9, "{err:e}");
}

#[test]
fn shared_trajectory_equals_retied_clone_adamw() {
    let err = shared_vs_clone(OptimConfig::adamw(0.01), 10);
    assert!(err <= 1e-9, "{err:e}");
}
