//! Layer graph and its forward/backward executor.
//!
//! Nodes are stored in topological order; node 0 is the input. The executor
//! resolves each node's bound parameters in a [`ParameterStore`], so a
//! shared kernel is read from one place by all of its sites, while each site
//! still reports its own gradient.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::{
    activation_backward, activation_forward, batchnorm_backward, batchnorm_forward, conv2d_backward,
    conv2d_forward, global_avg_pool_backward, global_avg_pool_forward, linear_backward, linear_forward,
    residual_add_forward, se_block_backward, se_block_forward, BatchStats, BnCache, LayerKind, LayerNode,
    SeCache, Activation,
};
use crate::scalar::Scalar;
use crate::sharing::{ParamId, ParameterStore, SiteGrad};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub nodes: Vec<LayerNode>,
    /// Per-sample input extents (C, H, W).
    pub input_shape: [usize; 3],
}

impl Graph {
    pub fn new(input_shape: [usize; 3]) -> Self {
        Self {
            nodes: vec![LayerNode {
                kind: LayerKind::Input,
                name: String::from("input"),
                inputs: vec![],
                param_ids: vec![],
                layer_index: 0,
            }],
            input_shape,
        }
    }

    /// Appends a node and returns its layer index.
    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: &[usize]) -> usize {
        let idx = self.nodes.len();
        debug_assert!(inputs.iter().all(|&i| i < idx));
        self.nodes.push(LayerNode {
            kind,
            name: name.into(),
            inputs: inputs.to_vec(),
            param_ids: vec![],
            layer_index: idx,
        });
        idx
    }

    pub fn output(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Indices of convolution nodes.
    pub fn conv_sites(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Conv2d(_)))
            .map(|n| n.layer_index)
    }

    /// Per-sample output extents of every node: `[C, H, W]` for feature maps,
    /// `[F]` after pooling.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let input = |k: usize| -> Result<&Vec<usize>> {
                node.inputs
                    .get(k)
                    .map(|&i| &shapes[i])
                    .ok_or_else(|| Error::Geometry(format!("layer {} is missing input {k}", node.name)))
            };
            let image = |s: &Vec<usize>| -> Result<(usize, usize, usize)> {
                match *s.as_slice() {
                    [c, h, w] => Ok((c, h, w)),
                    _ => Err(Error::Geometry(format!("layer {} expects a feature map, got {s:?}", node.name))),
                }
            };
            let out = match &node.kind {
                LayerKind::Input => self.input_shape.to_vec(),
                LayerKind::Conv2d(h) => {
                    let (c, hh, ww) = image(input(0)?)?;
                    if c != h.in_channels {
                        return Err(Error::Geometry(format!(
                            "layer {}: {} input channels, expected {}",
                            node.name, c, h.in_channels
                        )));
                    }
                    let (ho, wo) = h.output_hw(hh, ww)?;
                    vec![h.out_channels, ho, wo]
                }
                LayerKind::BatchNorm2d(h) => {
                    let s = input(0)?.clone();
                    if image(&s)?.0 != h.channels {
                        return Err(Error::Geometry(format!("layer {}: channel mismatch", node.name)));
                    }
                    s
                }
                LayerKind::SeBlock(h) => {
                    h.validate()?;
                    let s = input(0)?.clone();
                    if image(&s)?.0 != h.channels {
                        return Err(Error::Geometry(format!("layer {}: channel mismatch", node.name)));
                    }
                    s
                }
                LayerKind::Activation(_) => input(0)?.clone(),
                LayerKind::GlobalAvgPool => vec![image(input(0)?)?.0],
                LayerKind::Linear(h) => {
                    if input(0)?.as_slice() != [h.in_features] {
                        return Err(Error::Geometry(format!("layer {}: feature mismatch", node.name)));
                    }
                    vec![h.out_features]
                }
                LayerKind::ResidualAdd => {
                    let (a, b) = (input(0)?, input(1)?);
                    if a != b {
                        return Err(Error::shape("residual_add", a, b));
                    }
                    a.clone()
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batchnorm; statistics are returned for updating.
    Train,
    /// Running statistics in batchnorm.
    Eval,
}

#[derive(Debug, Clone)]
enum NodeCache<T> {
    None,
    Bn(BnCache<T>),
    Se(SeCache<T>),
}

/// Saved activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    caches: Vec<NodeCache<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.values.last().expect("graph has an input node")
    }

    pub fn value(&self, layer: usize) -> &Tensor<T> {
        &self.values[layer]
    }

    /// Which side of zero every ReLU input sits on, over all ReLU layers and
    /// SE bottlenecks of `graph`. Two passes with equal patterns traverse the
    /// same linear pieces.
    pub fn relu_pattern(&self, graph: &Graph) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &graph.nodes {
            match (&node.kind, &self.caches[node.layer_index]) {
                (LayerKind::Activation(Activation::Relu), _) => {
                    out.extend(self.values[node.inputs[0]].data().iter().map(|&v| v > T::zero()))
                }
                (LayerKind::SeBlock(_), NodeCache::Se(c)) => out.extend(c.z1.data().iter().map(|&v| v > T::zero())),
                _ => {}
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    /// Batch statistics per batchnorm site (training mode only).
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.tape.output()
    }
}

fn bound<'a, T: Scalar>(store: &'a ParameterStore<T>, node: &LayerNode, slot: usize) -> Result<&'a Tensor<T>> {
    node.param_ids
        .get(slot)
        .map(|&id| store.value(id))
        .ok_or_else(|| Error::InvalidPlan(format!("layer {} has no parameter in slot {slot}", node.name)))
}

/// Runs the graph on a batch `x` of shape (N, C, H, W). Pure: parameters and
/// running statistics are not modified.
pub fn forward<T: Scalar>(
    graph: &Graph,
    store: &ParameterStore<T>,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<ForwardPass<T>> {
    let (n, c, h, w) = x.dims4()?;
    if [c, h, w] != graph.input_shape {
        return Err(Error::shape("model input", &[c, h, w], &graph.input_shape));
    }
    let training = mode == Mode::Train;
    let mut values: Vec<Tensor<T>> = Vec::with_capacity(graph.nodes.len());
    let mut caches = Vec::with_capacity(graph.nodes.len());
    let mut bn_stats = Vec::new();
    for node in &graph.nodes {
        let arg = |k: usize| -> &Tensor<T> { &values[node.inputs[k]] };
        let mut cache = NodeCache::None;
        let out = match &node.kind {
            LayerKind::Input => x.clone(),
            LayerKind::Conv2d(hy) => {
                let b = if hy.bias { Some(bound(store, node, 1)?) } else { None };
                conv2d_forward(arg(0), bound(store, node, 0)?, b, hy)?
            }
            LayerKind::BatchNorm2d(hy) => {
                let (y, c, stats) = batchnorm_forward(
                    arg(0),
                    bound(store, node, 0)?,
                    bound(store, node, 1)?,
                    bound(store, node, 2)?,
                    bound(store, node, 3)?,
                    hy,
                    training,
                )?;
                if let Some(s) = stats {
                    bn_stats.push((node.layer_index, s));
                }
                cache = NodeCache::Bn(c);
                y
            }
            LayerKind::Activation(kind) => activation_forward(*kind, arg(0)),
            LayerKind::GlobalAvgPool => global_avg_pool_forward(arg(0))?,
            LayerKind::Linear(hy) => linear_forward(arg(0), bound(store, node, 0)?, bound(store, node, 1)?, hy)?,
            LayerKind::ResidualAdd => residual_add_forward(arg(0), arg(1))?,
            LayerKind::SeBlock(hy) => {
                let (y, c) = se_block_forward(
                    arg(0),
                    bound(store, node, 0)?,
                    bound(store, node, 1)?,
                    bound(store, node, 2)?,
                    bound(store, node, 3)?,
                    hy,
                )?;
                cache = NodeCache::Se(c);
                y
            }
        };
        values.push(out);
        caches.push(cache);
    }
    debug_assert_eq!(values.last().map(|v| v.shape()[0]), Some(n));
    Ok(ForwardPass {
        tape: Tape { values, caches },
        bn_stats,
    })
}

fn push_grad<T: Scalar>(grads: &mut [Option<Tensor<T>>], at: usize, g: Tensor<T>) -> Result<()> {
    match &mut grads[at] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Backpropagates `grad_output` (gradient of the loss with respect to the
/// graph output) and returns one gradient per (site, bound trainable
/// parameter). Nothing is written to the store; pass the result to
/// [`ParameterStore::accumulate_shared_gradients`].
pub fn backward<T: Scalar>(
    graph: &Graph,
    store: &ParameterStore<T>,
    tape: &Tape<T>,
    grad_output: &Tensor<T>,
) -> Result<Vec<SiteGrad<T>>> {
    if grad_output.shape() != tape.output().shape() {
        return Err(Error::shape("backward", grad_output.shape(), tape.output().shape()));
    }
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; graph.nodes.len()];
    grads[graph.output()] = Some(grad_output.clone());
    let mut site_grads = Vec::new();
    let mut emit = |site: usize, id: ParamId, grad: Tensor<T>| site_grads.push(SiteGrad { site, param: id, grad });

    for node in graph.nodes.iter().rev() {
        let i = node.layer_index;
        let Some(g) = grads[i].take() else { continue };
        let input = |k: usize| &tape.values[node.inputs[k]];
        match &node.kind {
            LayerKind::Input => {}
            LayerKind::Conv2d(hy) => {
                let r = conv2d_backward(&g, input(0), bound(store, node, 0)?, hy)?;
                emit(i, node.param_ids[0], r.grad_w);
                if let Some(gb) = r.grad_b {
                    emit(i, node.param_ids[1], gb);
                }
                push_grad(&mut grads, node.inputs[0], r.grad_x)?;
            }
            LayerKind::BatchNorm2d(_) => {
                let NodeCache::Bn(cache) = &tape.caches[i] else {
                    return Err(Error::Geometry(format!("layer {} has no saved statistics", node.name)));
                };
                let r = batchnorm_backward(&g, cache, bound(store, node, 0)?)?;
                emit(i, node.param_ids[0], r.grad_gamma);
                emit(i, node.param_ids[1], r.grad_beta);
                push_grad(&mut grads, node.inputs[0], r.grad_x)?;
            }
            LayerKind::Activation(kind) => {
                let gx = activation_backward(*kind, input(0), &g)?;
                push_grad(&mut grads, node.inputs[0], gx)?;
            }
            LayerKind::GlobalAvgPool => {
                let gx = global_avg_pool_backward(&g, input(0).shape())?;
                push_grad(&mut grads, node.inputs[0], gx)?;
            }
            LayerKind::Linear(hy) => {
                let r = linear_backward(&g, input(0), bound(store, node, 0)?, hy)?;
                emit(i, node.param_ids[0], r.grad_w);
                emit(i, node.param_ids[1], r.grad_b);
                push_grad(&mut grads, node.inputs[0], r.grad_x)?;
            }
            LayerKind::ResidualAdd => {
                push_grad(&mut grads, node.inputs[0], g.clone())?;
                push_grad(&mut grads, node.inputs[1], g)?;
            }
            LayerKind::SeBlock(hy) => {
                let NodeCache::Se(cache) = &tape.caches[i] else {
                    return Err(Error::Geometry(format!("layer {} has no saved gates", node.name)));
                };
                let r = se_block_backward(&g, input(0), cache, bound(store, node, 0)?, bound(store, node, 2)?, hy)?;
                emit(i, node.param_ids[0], r.grad_w1);
                emit(i, node.param_ids[1], r.grad_b1);
                emit(i, node.param_ids[2], r.grad_w2);
                emit(i, node.param_ids[3], r.grad_b2);
                push_grad(&mut grads, node.inputs[0], r.grad_x)?;
            }
        }
    }
    Ok(site_grads)
}

/// Folds training-mode batch statistics into each site's running averages.
pub fn apply_bn_stats<T: Scalar>(graph: &Graph, store: &mut ParameterStore<T>, stats: &[(usize, BatchStats<T>)]) {
    for (site, s) in stats {
        let node = &graph.nodes[*site];
        let LayerKind::BatchNorm2d(hy) = &node.kind else { continue };
        let (mean_id, var_id) = (node.param_ids[2], node.param_ids[3]);
        let mut mean = core::mem::replace(&mut store.param_mut(mean_id).value, Tensor::scalar(T::zero()));
        let mut var = core::mem::replace(&mut store.param_mut(var_id).value, Tensor::scalar(T::zero()));
        s.apply(&mut mean, &mut var, hy.momentum);
        store.param_mut(mean_id).value = mean;
        store.param_mut(var_id).value = var;
    }
}
