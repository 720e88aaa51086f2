use kshare_core::gradcheck::gradcheck;
use kshare_core::graph::Mode;
use kshare_core::models::{GroupingDirective, Model, ModelConfig, SharingPreset};
use kshare_core::sharing::ParamId;
use kshare_core::{Rng, Tensor};

fn tiny_convmixer(preset: SharingPreset, depth: usize) -> ModelConfig {
    ModelConfig::convmixer(8, depth).with_input([3, 8, 8]).with_preset(preset)
}

fn tiny_seresnet(stages: &[usize]) -> ModelConfig {
    ModelConfig::se_resnet(2)
        .with_channels(&[8, 16, 32])
        .with_se_ratio(4)
        .with_input([3, 8, 8])
        .with_stages(stages)
}

fn batch(cfg: &ModelConfig, n: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let [c, h, w] = cfg.input;
    let x = Tensor::normal(&[n, c, h, w], 1.0, &mut rng);
    let labels = (0..n).map(|_| rng.below(cfg.num_classes)).collect();
    (x, labels)
}

fn grads(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> Model<f64> {
    let mut m = model.clone();
    m.store.zero_grads();
    m.accumulate_gradients(x, labels, Mode::Train).unwrap();
    m
}

/// Shared gradient vs the sum of the per-site gradients of the untied clone.
fn assert_tied_clone_sum(cfg: &ModelConfig, tol: f64) {
    let model = Model::<f64>::new(cfg, 3).unwrap();
    let clone = model.untied_clone().unwrap();
    let (x, labels) = batch(cfg, 2, 4);
    let a = model.forward(&x, Mode::Train).unwrap();
    let b = clone.forward(&x, Mode::Train).unwrap();
    assert_eq!(a.logits(), b.logits(), "forward must be bitwise equal");

    let shared = grads(&model, &x, &labels);
    let untied = grads(&clone, &x, &labels);
    for id in model.store.ids() {
        let p = model.store.param(id);
        if !p.trainable {
            continue;
        }
        let mut sum = Tensor::zeros_like(&p.value);
        for &site in &p.sites {
            let slot = model.graph.nodes[site].param_ids.iter().position(|&q| q == id).unwrap();
            let cid: ParamId = clone.graph.nodes[site].param_ids[slot];
            sum.add_assign(untied.store.grad(cid)).unwrap();
        }
        let g = shared.store.grad(id);
        let rel = g.sub(&sum).unwrap().norm() / g.norm().max(sum.norm()).max(f64::MIN_POSITIVE);
        assert!(rel <= tol, "{}: rel err {rel:e}", p.name);
    }
}

#[test]
fn convmixer_shared_gradient_is_sum_of_clone_gradients() {
    for depth in [2, 3, 5] {
        assert_tied_clone_sum(&tiny_convmixer(SharingPreset::TwoKernel, depth), 1e-10);
    }
    assert_tied_clone_sum(&tiny_convmixer(SharingPreset::FourKernel, 4), 1e-10);
}

#[test]
fn seresnet_shared_gradient_is_sum_of_clone_gradients() {
    assert_tied_clone_sum(&tiny_seresnet(&[1, 2, 3]), 1e-10);
    assert_tied_clone_sum(&tiny_seresnet(&[3]), 1e-10);
}

#[test]
fn shared_depthwise_or_pointwise_only() {
    for species in ["dw", "pw"] {
        for n in [2, 3, 5] {
            let cfg = tiny_convmixer(SharingPreset::None, n);
            let (graph, _) = kshare_core::models::build(&cfg).unwrap();
            let sites: Vec<usize> = graph
                .nodes
                .iter()
                .filter(|n| n.name.ends_with(&format!(".{species}")))
                .map(|n| n.layer_index)
                .collect();
            let plan = kshare_core::models::derive_sharing_plan(&graph, &GroupingDirective::new().group("g", sites)).unwrap();
            let model = Model::<f64>::from_parts(cfg.clone(), graph, plan, 9).unwrap();
            let clone = model.untied_clone().unwrap();
            let (x, labels) = batch(&cfg, 2, n as u64);
            let shared = grads(&model, &x, &labels);
            let untied = grads(&clone, &x, &labels);
            let id = model.store.find("g.weight").unwrap();
            let mut sum = Tensor::zeros_like(model.store.value(id));
            for &site in &model.store.param(id).sites {
                sum.add_assign(untied.store.grad(clone.graph.nodes[site].param_ids[0])).unwrap();
            }
            let g = shared.store.grad(id);
            assert!(g.sub(&sum).unwrap().norm() <= 1e-10 * g.norm(), "{species} n={n}");
        }
    }
}

#[test]
fn group_of_one_gives_identical_gradients() {
    let cfg = tiny_convmixer(SharingPreset::None, 2);
    let model = Model::<f64>::new(&cfg, 1).unwrap();
    let clone = model.untied_clone().unwrap();
    let (x, labels) = batch(&cfg, 2, 2);
    let a = grads(&model, &x, &labels);
    let b = grads(&clone, &x, &labels);
    for (p, q) in a.store.params().iter().zip(b.store.params()) {
        assert_eq!(p.grad, q.grad, "{}", p.name);
    }
}

#[test]
fn shared_kernel_gets_one_contribution_per_site() {
    let cfg = tiny_convmixer(SharingPreset::TwoKernel, 4);
    let (x, labels) = batch(&cfg, 2, 7);
    let model = grads(&Model::<f64>::new(&cfg, 0).unwrap(), &x, &labels);
    for p in model.store.params().iter().filter(|p| p.trainable) {
        assert_eq!(p.contributions(), p.sites.len(), "{}", p.name);
    }
    let w = model.store.find("blocks.dw.shared0.weight").unwrap();
    assert_eq!(model.store.param(w).contributions(), 4);
    model.store.step_ready().unwrap();
}

#[test]
fn convmixer_finite_differences() {
    let cfg = tiny_convmixer(SharingPreset::TwoKernel, 3);
    let model = Model::<f64>::new(&cfg, 11).unwrap();
    let (x, labels) = batch(&cfg, 2, 12);
    let report = gradcheck(&model, &x, &labels, 1e-4).unwrap();
    let worst = report.worst().unwrap();
    assert!(report.passes(1e-5), "worst {}: {:e}", worst.name, worst.rel_err);
    assert!(report.params.iter().any(|p| p.sites == 3));
}

#[test]
fn seresnet_finite_differences() {
    let cfg = tiny_seresnet(&[3]);
    let model = Model::<f64>::new(&cfg, 13).unwrap();
    let (x, labels) = batch(&cfg, 2, 14);
    let report = gradcheck(&model, &x, &labels, 1e-4).unwrap();
    let worst = report.worst().unwrap();
    assert!(report.passes(1e-5), "worst {}: {:e}", worst.name, worst.rel_err);
}

