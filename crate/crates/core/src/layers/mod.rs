//! Forward and backward kernels for every layer kind the two model families
//! use, plus the [`LayerNode`] description the graph is made of.
//!
//! The kernels are free functions over tensors. They never look up
//! parameters themselves; the graph executor resolves a node's `param_ids`
//! in the parameter store and passes the tensors in.

use alloc::string::String;
use alloc::vec::Vec;

pub mod activation;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod norm;
pub mod se;

pub use activation::{activation_backward, activation_forward, Activation};
pub use conv::{conv2d_backward, conv2d_forward, Conv2dHyper, ConvGrads};
pub use dense::{
    global_avg_pool_backward, global_avg_pool_forward, linear_backward, linear_forward,
    residual_add_backward, residual_add_forward, LinearGrads, LinearHyper,
};
pub use loss::{accuracy_count, softmax_xent};
pub use norm::{batchnorm_backward, batchnorm_forward, BatchNormHyper, BnCache, BnGrads, BnState, BatchStats};
pub use se::{se_block_backward, se_block_forward, SeCache, SeGrads, SeHyper};

use crate::sharing::ParamId;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Graph entry; carries no computation.
    Input,
    Conv2d(Conv2dHyper),
    BatchNorm2d(BatchNormHyper),
    Activation(Activation),
    GlobalAvgPool,
    Linear(LinearHyper),
    /// Sum of the node's two inputs.
    ResidualAdd,
    SeBlock(SeHyper),
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::BatchNorm2d(_) => "batchnorm2d",
            LayerKind::Activation(_) => "activation",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Linear(_) => "linear",
            LayerKind::ResidualAdd => "residual_add",
            LayerKind::SeBlock(_) => "se_block",
        }
    }

    /// Number of parameter slots a node of this kind binds, in order:
    /// conv `[weight, bias?]`, batchnorm `[gamma, beta, running_mean,
    /// running_var]`, linear `[weight, bias]`, SE `[w1, b1, w2, b2]`.
    pub fn param_slots(&self) -> usize {
        match self {
            LayerKind::Conv2d(h) => 1 + h.bias as usize,
            LayerKind::BatchNorm2d(_) => 4,
            LayerKind::Linear(_) => 2,
            LayerKind::SeBlock(_) => 4,
            _ => 0,
        }
    }
}

/// One layer site in topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub kind: LayerKind,
    pub name: String,
    /// Producer nodes, by index.
    pub inputs: Vec<usize>,
    /// Bound parameters; empty until the parameter store is instantiated.
    pub param_ids: Vec<ParamId>,
    pub layer_index: usize,
}
