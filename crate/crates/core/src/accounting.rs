//! Closed-form parameter and FLOP counts.
//!
//! Counts come from layer hyperparameters alone and never look at a
//! [`ParameterStore`](crate::sharing::ParameterStore), so they can serve as
//! an independent check on it. FLOPs are 2 per multiply-accumulate, counted
//! for convolutions and fully connected layers at batch size 1; batchnorm,
//! activations and pooling are free.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::Graph;
use crate::layers::{Conv2dHyper, LayerKind};
use crate::models::SharingPlan;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerCost {
    pub index: usize,
    pub name: String,
    pub kind: String,
    /// Parameters owned by this layer. A shared kernel is attributed to the
    /// first site of its group.
    pub params: u64,
    pub flops: u64,
    /// Group name when the layer's kernel is shared.
    pub shared: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostReport {
    pub trainable_params: u64,
    pub flops: u64,
    pub layers: Vec<LayerCost>,
}

fn conv_params(h: &Conv2dHyper) -> u64 {
    let w = h.out_channels * (h.in_channels / h.groups) * h.kernel.0 * h.kernel.1;
    (w + if h.bias { h.out_channels } else { 0 }) as u64
}

fn own_params(kind: &LayerKind) -> u64 {
    match kind {
        LayerKind::Conv2d(h) => conv_params(h),
        LayerKind::BatchNorm2d(h) => 2 * h.channels as u64,
        LayerKind::Linear(h) => (h.in_features * h.out_features + h.out_features) as u64,
        LayerKind::SeBlock(h) => {
            let hid = h.hidden();
            (2 * h.channels * hid + hid + h.channels) as u64
        }
        _ => 0,
    }
}

/// Distinct trainable parameters of `graph` under `plan`.
pub fn count_params(graph: &Graph, plan: &SharingPlan) -> u64 {
    let convs: u64 = plan
        .groups
        .iter()
        .map(|g| g.signature.conv_hyper().map_or(0, |h| conv_params(&h)))
        .sum();
    let others: u64 = graph
        .nodes
        .iter()
        .filter(|n| !matches!(n.kind, LayerKind::Conv2d(_)))
        .map(|n| own_params(&n.kind))
        .sum();
    convs + others
}

/// Forward FLOPs of one sample. Independent of any sharing plan.
pub fn count_flops(graph: &Graph) -> Result<u64> {
    Ok(per_layer_flops(graph)?.iter().sum())
}

fn per_layer_flops(graph: &Graph) -> Result<Vec<u64>> {
    let shapes = graph.shapes()?;
    Ok(graph
        .nodes
        .iter()
        .map(|n| match &n.kind {
            LayerKind::Conv2d(h) => {
                let out = &shapes[n.layer_index];
                let macs = out[1] * out[2] * h.out_channels * (h.in_channels / h.groups) * h.kernel.0 * h.kernel.1;
                2 * macs as u64
            }
            LayerKind::Linear(h) => 2 * (h.in_features * h.out_features) as u64,
            LayerKind::SeBlock(h) => 4 * (h.channels * h.hidden()) as u64,
            _ => 0,
        })
        .collect())
}

pub fn cost_report(graph: &Graph, plan: &SharingPlan) -> Result<CostReport> {
    let flops = per_layer_flops(graph)?;
    let mut layers = Vec::new();
    for (n, &f) in graph.nodes.iter().zip(&flops) {
        let (params, shared) = match &n.kind {
            LayerKind::Conv2d(_) => match plan.group_of(n.layer_index) {
                Some(g) => {
                    let owner = g.members[0] == n.layer_index;
                    let params = if owner { own_params(&n.kind) } else { 0 };
                    (params, (g.members.len() > 1).then(|| g.name.clone()))
                }
                None => (own_params(&n.kind), None),
            },
            kind => (own_params(kind), None),
        };
        if params == 0 && f == 0 && shared.is_none() {
            continue;
        }
        layers.push(LayerCost {
            index: n.layer_index,
            name: n.name.clone(),
            kind: String::from(n.kind.name()),
            params,
            flops: f,
            shared,
        });
    }
    Ok(CostReport {
        trainable_params: layers.iter().map(|l| l.params).sum(),
        flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    })
}

/// Baseline parameters per shared-model parameter.
pub fn sharing_ratio(baseline: &CostReport, shared: &CostReport) -> f64 {
    baseline.trainable_params as f64 / shared.trainable_params as f64
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    /// Aligned per-layer table followed by the totals.
    pub fn to_table(&self) -> String {
        let w = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(4).max(5);
        let mut out = format!("{:<w$}  {:<14} {:>12} {:>16}  shared\n", "layer", "kind", "params", "flops");
        for l in &self.layers {
            out.push_str(&format!(
                "{:<w$}  {:<14} {:>12} {:>16}  {}\n",
                l.name,
                l.kind,
                l.params,
                l.flops,
                l.shared.as_deref().unwrap_or("-")
            ));
        }
        out.push_str(&format!(
            "{:<w$}  {:<14} {:>12} {:>16}\n",
            "total", "", self.trainable_params, self.flops
        ));
        out.push_str(&format!("{:.4} GFLOPs\n", self.gflops()));
        out
    }
}
