//! Builders for the two model families and the sharing plans that go with
//! them.
//!
//! ConvMixer-C/N: a patch-embedding convolution followed by N blocks of a
//! depthwise convolution (wrapped in a residual connection) and a pointwise
//! convolution, each followed by activation and batchnorm. All 2N block
//! convolutions fall into two isomorphism classes, so the presets share them
//! as 2, 4 or 8 kernels.
//!
//! SE-ResNet-d: a 3×3 stem and three stages of `d` basic residual blocks with
//! squeeze-and-excitation before each residual add. Within a stage all
//! stride-1 `C→C` 3×3 convolutions are isomorphic and may form one group.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::graph::{self, ForwardPass, Graph, Mode};
use crate::layers::{
    accuracy_count, softmax_xent, Activation, BatchNormHyper, Conv2dHyper, LayerKind, LinearHyper, SeHyper,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::sharing::{check_isomorphic, ParamRole, ParameterStore, Signature, SiteGrad};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Family {
    #[cfg_attr(feature = "serde", serde(rename = "convmixer"))]
    ConvMixer,
    #[cfg_attr(feature = "serde", serde(alias = "se-resnet"))]
    SeResnet,
}

/// ConvMixer sharing granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SharingPreset {
    #[default]
    None,
    TwoKernel,
    FourKernel,
    EightKernel,
}

impl SharingPreset {
    /// Number of consecutive chunks the blocks are split into, per species.
    pub fn parts(self) -> Option<usize> {
        match self {
            SharingPreset::None => None,
            SharingPreset::TwoKernel => Some(1),
            SharingPreset::FourKernel => Some(2),
            SharingPreset::EightKernel => Some(4),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SharingPreset::None => "none",
            SharingPreset::TwoKernel => "two_kernel",
            SharingPreset::FourKernel => "four_kernel",
            SharingPreset::EightKernel => "eight_kernel",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub family: Family,
    /// `[C]` for ConvMixer, one entry per stage for SE-ResNet.
    pub channels: Vec<usize>,
    /// ConvMixer blocks, or residual blocks per SE-ResNet stage.
    pub depth: usize,
    pub patch_size: usize,
    pub dw_kernel: usize,
    pub num_classes: usize,
    pub sharing_preset: SharingPreset,
    /// SE-ResNet stages (1-based) whose isomorphic convolutions share one kernel.
    pub shared_stages: Vec<usize>,
    /// Per-sample input (C, H, W).
    pub input: [usize; 3],
    pub se_ratio: usize,
    /// ConvMixer nonlinearity; SE-ResNet always uses ReLU.
    pub activation: Activation,
    pub conv_bias: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// ConvMixer-`channels`/`depth` with patch size 1 and a 9×9 depthwise kernel.
    pub fn convmixer(channels: usize, depth: usize) -> Self {
        Self {
            family: Family::ConvMixer,
            channels: vec![channels],
            depth,
            patch_size: 1,
            dw_kernel: 9,
            num_classes: 10,
            sharing_preset: SharingPreset::None,
            shared_stages: vec![],
            input: [3, 32, 32],
            se_ratio: SeHyper::DEFAULT_RATIO,
            activation: Activation::Gelu,
            conv_bias: true,
            bn_eps: BatchNormHyper::DEFAULT_EPS,
            bn_momentum: BatchNormHyper::DEFAULT_MOMENTUM,
        }
    }

    /// SE-ResNet with 64/128/256 stage channels and `depth` blocks per stage.
    pub fn se_resnet(depth: usize) -> Self {
        Self {
            family: Family::SeResnet,
            channels: vec![64, 128, 256],
            depth,
            activation: Activation::Relu,
            ..Self::convmixer(0, depth)
        }
    }

    pub fn with_preset(mut self, preset: SharingPreset) -> Self {
        self.sharing_preset = preset;
        self
    }

    pub fn with_stages(mut self, stages: &[usize]) -> Self {
        self.shared_stages = stages.to_vec();
        self
    }

    pub fn with_channels(mut self, channels: &[usize]) -> Self {
        self.channels = channels.to_vec();
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.num_classes = classes;
        self
    }

    pub fn with_input(mut self, input: [usize; 3]) -> Self {
        self.input = input;
        self
    }

    pub fn with_dw_kernel(mut self, k: usize) -> Self {
        self.dw_kernel = k;
        self
    }

    pub fn with_se_ratio(mut self, r: usize) -> Self {
        self.se_ratio = r;
        self
    }

    pub fn is_shared(&self) -> bool {
        self.sharing_preset != SharingPreset::None || !self.shared_stages.is_empty()
    }

    /// Short sharing description: the preset name or e.g. `stage2+stage3`.
    pub fn sharing_label(&self) -> String {
        match self.family {
            Family::ConvMixer => self.sharing_preset.as_str().to_string(),
            Family::SeResnet if self.shared_stages.is_empty() => "none".to_string(),
            Family::SeResnet => {
                let names: Vec<String> = self.shared_stages.iter().map(|s| format!("stage{s}")).collect();
                names.join("+")
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth < 1 {
            return bad(format!("depth must be at least 1, got {}", self.depth));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least two classes, got {}", self.num_classes));
        }
        if self.input.contains(&0) {
            return bad(format!("input extents must be positive: {:?}", self.input));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return bad(format!("batchnorm eps {} / momentum {} out of range", self.bn_eps, self.bn_momentum));
        }
        if self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        match self.family {
            Family::ConvMixer => {
                if self.channels.len() != 1 {
                    return bad(format!("convmixer takes one channel count, got {:?}", self.channels));
                }
                if self.patch_size == 0 || self.input[1] % self.patch_size != 0 || self.input[2] % self.patch_size != 0 {
                    return bad(format!("patch size {} must divide the input {:?}", self.patch_size, self.input));
                }
                if self.dw_kernel == 0 || self.dw_kernel % 2 == 0 {
                    return bad(format!("depthwise kernel must be odd, got {}", self.dw_kernel));
                }
                if !self.shared_stages.is_empty() {
                    return bad("shared_stages applies to se_resnet only".into());
                }
                if let Some(parts) = self.sharing_preset.parts() {
                    if self.depth % parts != 0 {
                        return bad(format!(
                            "{} needs depth divisible by {parts}, got {}",
                            self.sharing_preset.as_str(),
                            self.depth
                        ));
                    }
                }
            }
            Family::SeResnet => {
                if self.channels.len() != 3 {
                    return bad(format!("se_resnet takes three stage widths, got {:?}", self.channels));
                }
                if self.sharing_preset != SharingPreset::None {
                    return bad("sharing presets apply to convmixer only; use shared_stages".into());
                }
                for (i, &s) in self.shared_stages.iter().enumerate() {
                    if !(1..=3).contains(&s) || self.shared_stages[..i].contains(&s) {
                        return bad(format!("invalid shared stage list {:?}", self.shared_stages));
                    }
                }
                for &c in &self.channels {
                    SeHyper { channels: c, ratio: self.se_ratio }.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Fields that differ from `other`, formatted `field: self vs other`.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if self.$f != other.$f {
                    out.push(format!("{}: {:?} vs {:?}", stringify!($f), self.$f, other.$f));
                }
            )*};
        }
        cmp!(family, channels, depth, patch_size, dw_kernel, num_classes, sharing_preset, shared_stages, input, se_ratio, activation, conv_bias, bn_eps, bn_momentum);
        out
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            Family::ConvMixer => write!(f, "ConvMixer-{}/{}", self.channels[0], self.depth)?,
            Family::SeResnet => write!(f, "SE-ResNet-d{} {:?}", self.depth, self.channels)?,
        }
        write!(f, " ({})", self.sharing_label())
    }
}

/// One group of a sharing plan; a single member means an ordinary layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanGroup {
    pub name: String,
    pub signature: Signature,
    /// Ascending layer indices.
    pub members: Vec<usize>,
}

/// Partition of every convolution site of a graph into sharing groups.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SharingPlan {
    pub groups: Vec<PlanGroup>,
}

impl SharingPlan {
    /// Groups with more than one member.
    pub fn shared_groups(&self) -> impl Iterator<Item = &PlanGroup> {
        self.groups.iter().filter(|g| g.members.len() > 1)
    }

    pub fn group_of(&self, site: usize) -> Option<&PlanGroup> {
        self.groups.iter().find(|g| g.members.contains(&site))
    }
}

/// Explicit sharing groups to impose on a graph.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupingDirective {
    pub groups: Vec<(String, Vec<usize>)>,
}

impl GroupingDirective {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn group(mut self, name: impl Into<String>, members: Vec<usize>) -> Self {
        self.groups.push((name.into(), members));
        self
    }

    /// Splits `sites` into `parts` consecutive, equally sized groups.
    pub fn split(mut self, prefix: &str, sites: &[usize], parts: usize) -> Result<Self> {
        if parts == 0 || sites.len() % parts != 0 {
            return Err(Error::Config(format!("cannot split {} layers into {parts} groups", sites.len())));
        }
        for (i, chunk) in sites.chunks(sites.len() / parts).enumerate() {
            self.groups.push((format!("{prefix}{i}"), chunk.to_vec()));
        }
        Ok(self)
    }
}

/// Validates a directive against `graph` and completes it with singleton
/// groups for every convolution it does not mention.
pub fn derive_sharing_plan(graph: &Graph, directive: &GroupingDirective) -> Result<SharingPlan> {
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    let mut groups = Vec::new();
    for (name, members) in &directive.groups {
        let first = *members
            .first()
            .ok_or_else(|| Error::InvalidPlan(format!("group {name} is empty")))?;
        let node = graph
            .nodes
            .get(first)
            .ok_or_else(|| Error::InvalidPlan(format!("layer {first} does not exist")))?;
        let signature = Signature::of(&node.kind);
        check_isomorphic(&graph.nodes, &signature, members)?;
        for &m in members {
            if owner.insert(m, groups.len()).is_some() {
                return Err(Error::InvalidPlan(format!("layer {m} is in two groups")));
            }
        }
        let mut members = members.clone();
        members.sort_unstable();
        groups.push(PlanGroup {
            name: name.clone(),
            signature,
            members,
        });
    }
    for site in graph.conv_sites() {
        if !owner.contains_key(&site) {
            let node = &graph.nodes[site];
            groups.push(PlanGroup {
                name: node.name.clone(),
                signature: Signature::of(&node.kind),
                members: vec![site],
            });
        }
    }
    groups.sort_by_key(|g| g.members[0]);
    Ok(SharingPlan { groups })
}

/// Layer graph and sharing plan for a ConvMixer configuration.
pub fn build_convmixer(cfg: &ModelConfig) -> Result<(Graph, SharingPlan)> {
    if cfg.family != Family::ConvMixer {
        return Err(Error::Config("build_convmixer needs family convmixer".into()));
    }
    cfg.validate()?;
    let c = cfg.channels[0];
    let act = LayerKind::Activation(cfg.activation);
    let bn = |ch| {
        LayerKind::BatchNorm2d(BatchNormHyper {
            channels: ch,
            eps: cfg.bn_eps,
            momentum: cfg.bn_momentum,
        })
    };
    let mut g = Graph::new(cfg.input);
    let embed = Conv2dHyper {
        bias: cfg.conv_bias,
        ..Conv2dHyper::new(cfg.input[0], c, cfg.patch_size, cfg.patch_size, 0)
    };
    let e = g.push("embed.conv", LayerKind::Conv2d(embed), &[0]);
    let a = g.push("embed.act", act.clone(), &[e]);
    let mut x = g.push("embed.bn", bn(c), &[a]);

    let dw_hyper = Conv2dHyper {
        bias: cfg.conv_bias,
        ..Conv2dHyper::depthwise(c, cfg.dw_kernel)
    };
    let pw_hyper = Conv2dHyper {
        bias: cfg.conv_bias,
        ..Conv2dHyper::pointwise(c, c)
    };
    let mut dw_sites = Vec::with_capacity(cfg.depth);
    let mut pw_sites = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let dw = g.push(format!("blocks.{i}.dw"), LayerKind::Conv2d(dw_hyper), &[x]);
        let a = g.push(format!("blocks.{i}.dw_act"), act.clone(), &[dw]);
        let b = g.push(format!("blocks.{i}.dw_bn"), bn(c), &[a]);
        let r = g.push(format!("blocks.{i}.residual"), LayerKind::ResidualAdd, &[b, x]);
        let pw = g.push(format!("blocks.{i}.pw"), LayerKind::Conv2d(pw_hyper), &[r]);
        let a = g.push(format!("blocks.{i}.pw_act"), act.clone(), &[pw]);
        x = g.push(format!("blocks.{i}.pw_bn"), bn(c), &[a]);
        dw_sites.push(dw);
        pw_sites.push(pw);
    }
    let p = g.push("pool", LayerKind::GlobalAvgPool, &[x]);
    g.push(
        "head",
        LayerKind::Linear(LinearHyper {
            in_features: c,
            out_features: cfg.num_classes,
        }),
        &[p],
    );

    let directive = match cfg.sharing_preset.parts() {
        None => GroupingDirective::new(),
        Some(parts) => GroupingDirective::new()
            .split("blocks.dw.shared", &dw_sites, parts)?
            .split("blocks.pw.shared", &pw_sites, parts)?,
    };
    let plan = derive_sharing_plan(&g, &directive)?;
    Ok((g, plan))
}

/// Layer graph and sharing plan for an SE-ResNet configuration.
pub fn build_seresnet(cfg: &ModelConfig) -> Result<(Graph, SharingPlan)> {
    if cfg.family != Family::SeResnet {
        return Err(Error::Config("build_seresnet needs family se_resnet".into()));
    }
    cfg.validate()?;
    let bn = |ch| {
        LayerKind::BatchNorm2d(BatchNormHyper {
            channels: ch,
            eps: cfg.bn_eps,
            momentum: cfg.bn_momentum,
        })
    };
    let relu = LayerKind::Activation(Activation::Relu);
    let conv = |cin, cout, k, stride, pad| {
        LayerKind::Conv2d(Conv2dHyper {
            bias: cfg.conv_bias,
            ..Conv2dHyper::new(cin, cout, k, stride, pad)
        })
    };

    let mut g = Graph::new(cfg.input);
    let c0 = cfg.channels[0];
    let s = g.push("stem.conv", conv(cfg.input[0], c0, 3, 1, 1), &[0]);
    let s = g.push("stem.bn", bn(c0), &[s]);
    let mut x = g.push("stem.act", relu.clone(), &[s]);
    let mut cin = c0;
    let mut directive = GroupingDirective::new();

    for (si, &c) in cfg.channels.iter().enumerate() {
        let stage = si + 1;
        let iso = Signature::conv(&Conv2dHyper {
            bias: cfg.conv_bias,
            ..Conv2dHyper::new(c, c, 3, 1, 1)
        });
        let mut members = Vec::new();
        for b in 0..cfg.depth {
            let stride = if si > 0 && b == 0 { 2 } else { 1 };
            let pre = format!("stage{stage}.{b}");
            let c1 = g.push(format!("{pre}.conv1"), conv(cin, c, 3, stride, 1), &[x]);
            let y = g.push(format!("{pre}.bn1"), bn(c), &[c1]);
            let y = g.push(format!("{pre}.act1"), relu.clone(), &[y]);
            let c2 = g.push(format!("{pre}.conv2"), conv(c, c, 3, 1, 1), &[y]);
            let y = g.push(format!("{pre}.bn2"), bn(c), &[c2]);
            let y = g.push(
                format!("{pre}.se"),
                LayerKind::SeBlock(SeHyper {
                    channels: c,
                    ratio: cfg.se_ratio,
                }),
                &[y],
            );
            let shortcut = if stride != 1 || cin != c {
                let p = g.push(format!("{pre}.proj"), conv(cin, c, 1, stride, 0), &[x]);
                g.push(format!("{pre}.proj_bn"), bn(c), &[p])
            } else {
                x
            };
            let r = g.push(format!("{pre}.residual"), LayerKind::ResidualAdd, &[y, shortcut]);
            x = g.push(format!("{pre}.act2"), relu.clone(), &[r]);
            for site in [c1, c2] {
                if Signature::of(&g.nodes[site].kind) == iso {
                    members.push(site);
                }
            }
            cin = c;
        }
        if cfg.shared_stages.contains(&stage) {
            directive = directive.group(format!("stage{stage}.shared"), members);
        }
    }
    let p = g.push("pool", LayerKind::GlobalAvgPool, &[x]);
    g.push(
        "head",
        LayerKind::Linear(LinearHyper {
            in_features: cin,
            out_features: cfg.num_classes,
        }),
        &[p],
    );
    let plan = derive_sharing_plan(&g, &directive)?;
    Ok((g, plan))
}

pub fn build(cfg: &ModelConfig) -> Result<(Graph, SharingPlan)> {
    match cfg.family {
        Family::ConvMixer => build_convmixer(cfg),
        Family::SeResnet => build_seresnet(cfg),
    }
}

/// Loss, accuracy and parameter gradients of one training batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats<T> {
    pub loss: T,
    pub correct: usize,
}

/// A graph, its sharing plan, and the parameters bound to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub graph: Graph,
    pub plan: SharingPlan,
    pub store: ParameterStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let (graph, plan) = build(config)?;
        Self::from_parts(config.clone(), graph, plan, seed)
    }

    /// Binds parameters to `graph` following `plan`. Parameters are drawn
    /// in layer order; a shared kernel is drawn once, at its first site.
    pub fn from_parts(config: ModelConfig, mut graph: Graph, plan: SharingPlan, seed: u64) -> Result<Self> {
        graph.shapes()?;
        let mut rng = Rng::new(seed);
        let mut store = ParameterStore::new();
        for node in &mut graph.nodes {
            node.param_ids.clear();
        }
        for i in 0..graph.nodes.len() {
            let node = &graph.nodes[i];
            let name = node.name.clone();
            match node.kind.clone() {
                LayerKind::Conv2d(_) => {
                    if !node.param_ids.is_empty() {
                        continue;
                    }
                    let group = plan
                        .group_of(i)
                        .ok_or_else(|| Error::InvalidPlan(format!("convolution {name} is not covered by the plan")))?;
                    store.create_group(&mut graph.nodes, &group.name, group.signature, &group.members, &mut rng)?;
                }
                LayerKind::BatchNorm2d(h) => {
                    let c = [h.channels];
                    let ids = vec![
                        store.register(&format!("{name}.gamma"), ParamRole::BnGamma, Tensor::ones(&c), &[i])?,
                        store.register(&format!("{name}.beta"), ParamRole::BnBeta, Tensor::zeros(&c), &[i])?,
                        store.register(&format!("{name}.running_mean"), ParamRole::BnRunningMean, Tensor::zeros(&c), &[i])?,
                        store.register(&format!("{name}.running_var"), ParamRole::BnRunningVar, Tensor::ones(&c), &[i])?,
                    ];
                    graph.nodes[i].param_ids = ids;
                }
                LayerKind::Linear(h) => {
                    let bound = 1.0 / libm::sqrt(h.in_features as f64);
                    let w = Tensor::uniform(&[h.out_features, h.in_features], -bound, bound, &mut rng);
                    let b = Tensor::uniform(&[h.out_features], -bound, bound, &mut rng);
                    let ids = vec![
                        store.register(&format!("{name}.weight"), ParamRole::LinearWeight, w, &[i])?,
                        store.register(&format!("{name}.bias"), ParamRole::LinearBias, b, &[i])?,
                    ];
                    graph.nodes[i].param_ids = ids;
                }
                LayerKind::SeBlock(h) => {
                    let hid = h.hidden();
                    let b1 = 1.0 / libm::sqrt(h.channels as f64);
                    let b2 = 1.0 / libm::sqrt(hid as f64);
                    let w1 = Tensor::uniform(&[hid, h.channels], -b1, b1, &mut rng);
                    let c1 = Tensor::uniform(&[hid], -b1, b1, &mut rng);
                    let w2 = Tensor::uniform(&[h.channels, hid], -b2, b2, &mut rng);
                    let c2 = Tensor::uniform(&[h.channels], -b2, b2, &mut rng);
                    let ids = vec![
                        store.register(&format!("{name}.fc1.weight"), ParamRole::SeWeight, w1, &[i])?,
                        store.register(&format!("{name}.fc1.bias"), ParamRole::SeBias, c1, &[i])?,
                        store.register(&format!("{name}.fc2.weight"), ParamRole::SeWeight, w2, &[i])?,
                        store.register(&format!("{name}.fc2.bias"), ParamRole::SeBias, c2, &[i])?,
                    ];
                    graph.nodes[i].param_ids = ids;
                }
                _ => {}
            }
        }
        Ok(Self {
            config,
            graph,
            plan,
            store,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        graph::forward(&self.graph, &self.store, x, mode)
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, Mode::Eval)?.tape.output().clone())
    }

    pub fn backward(&self, pass: &ForwardPass<T>, grad_logits: &Tensor<T>) -> Result<Vec<SiteGrad<T>>> {
        graph::backward(&self.graph, &self.store, &pass.tape, grad_logits)
    }

    /// Mean cross-entropy without touching any state.
    pub fn loss(&self, x: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<T> {
        let pass = self.forward(x, mode)?;
        Ok(softmax_xent(pass.logits(), labels)?.0)
    }

    /// Forward, loss and backward on one batch: site gradients are summed
    /// into the store (on top of whatever it holds) and, in training mode,
    /// batchnorm running statistics are updated.
    pub fn accumulate_gradients(&mut self, x: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<StepStats<T>> {
        let pass = self.forward(x, mode)?;
        let (loss, grad) = softmax_xent(pass.logits(), labels)?;
        let correct = accuracy_count(pass.logits(), labels)?;
        let site_grads = self.backward(&pass, &grad)?;
        self.store.accumulate_shared_gradients(site_grads)?;
        graph::apply_bn_stats(&self.graph, &mut self.store, &pass.bn_stats);
        Ok(StepStats { loss, correct })
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.store.trainable_parameter_count()
    }

    /// Equivalent unshared model: every site gets its own copy of the kernel
    /// it was bound to. Forward outputs are identical to `self`.
    pub fn untied_clone(&self) -> Result<Self> {
        let plan = derive_sharing_plan(&self.graph, &GroupingDirective::new())?;
        let mut config = self.config.clone();
        config.sharing_preset = SharingPreset::None;
        config.shared_stages.clear();
        let mut clone = Self::from_parts(config, self.graph.clone(), plan, 0)?;
        for (src, dst) in self.graph.nodes.iter().zip(&clone.graph.nodes) {
            for (&a, &b) in src.param_ids.iter().zip(&dst.param_ids) {
                clone.store.param_mut(b).value = self.store.value(a).clone();
            }
        }
        Ok(clone)
    }

    /// Casts all parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        let mut out = Model::<U>::from_parts(self.config.clone(), self.graph.clone(), self.plan.clone(), 0)?;
        for id in self.store.ids() {
            out.store.param_mut(id).value = self.store.value(id).cast();
        }
        Ok(out)
    }
}
