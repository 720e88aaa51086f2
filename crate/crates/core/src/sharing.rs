//! Parameter store with inter-layer kernel sharing.
//!
//! A [`SharingGroup`] binds one convolution weight (and bias) to several
//! isomorphic layer sites. Every site computes its own gradient with respect
//! to the kernel during backpropagation; the store sums those contributions
//! into the single stored gradient, in ascending layer order:
//!
//! ```text
//! dL/dw_g = Σ_{l ∈ sites(g)} dL/dw_g,l
//! ```
//!
//! Batch normalization parameters are always per-site and can never be
//! part of a group.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::{Conv2dHyper, LayerKind, LayerNode};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    LinearWeight,
    LinearBias,
    SeWeight,
    SeBias,
}

impl ParamRole {
    /// Roles subject to weight decay (biases and batchnorm affine are exempt).
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::ConvWeight | ParamRole::LinearWeight | ParamRole::SeWeight)
    }

    pub fn is_batchnorm(self) -> bool {
        matches!(
            self,
            ParamRole::BnGamma | ParamRole::BnBeta | ParamRole::BnRunningMean | ParamRole::BnRunningVar
        )
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::BnRunningMean | ParamRole::BnRunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    /// Layer sites bound to this parameter, ascending.
    pub sites: Vec<usize>,
    contributions: usize,
}

impl<T> Param<T> {
    /// Site gradients accumulated since the last [`ParameterStore::zero_grads`].
    pub fn contributions(&self) -> usize {
        self.contributions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SiteKind {
    Conv2d,
    BatchNorm2d,
    Linear,
    SeBlock,
    Other,
}

/// Configuration that must match exactly for two layers to be isomorphic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature {
    pub kind: SiteKind,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
}

impl Signature {
    pub fn conv(h: &Conv2dHyper) -> Self {
        Self {
            kind: SiteKind::Conv2d,
            kernel: h.kernel,
            stride: h.stride,
            padding: h.padding,
            groups: h.groups,
            in_channels: h.in_channels,
            out_channels: h.out_channels,
            bias: h.bias,
        }
    }

    pub fn of(kind: &LayerKind) -> Self {
        let blank = Self {
            kind: SiteKind::Other,
            kernel: (0, 0),
            stride: (0, 0),
            padding: (0, 0),
            groups: 0,
            in_channels: 0,
            out_channels: 0,
            bias: false,
        };
        match kind {
            LayerKind::Conv2d(h) => Self::conv(h),
            LayerKind::BatchNorm2d(h) => Self {
                kind: SiteKind::BatchNorm2d,
                in_channels: h.channels,
                out_channels: h.channels,
                ..blank
            },
            LayerKind::Linear(h) => Self {
                kind: SiteKind::Linear,
                in_channels: h.in_features,
                out_channels: h.out_features,
                bias: true,
                ..blank
            },
            LayerKind::SeBlock(h) => Self {
                kind: SiteKind::SeBlock,
                in_channels: h.channels,
                out_channels: h.channels,
                ..blank
            },
            _ => blank,
        }
    }

    /// First differing field as `(field, expected, found)`.
    pub fn mismatch(&self, other: &Self) -> Option<(&'static str, String, String)> {
        fn d<V: core::fmt::Debug + PartialEq>(f: &'static str, a: V, b: V) -> Option<(&'static str, String, String)> {
            (a != b).then(|| (f, format!("{a:?}"), format!("{b:?}")))
        }
        d("kind", self.kind, other.kind)
            .or_else(|| d("kernel", self.kernel, other.kernel))
            .or_else(|| d("stride", self.stride, other.stride))
            .or_else(|| d("padding", self.padding, other.padding))
            .or_else(|| d("groups", self.groups, other.groups))
            .or_else(|| d("in_channels", self.in_channels, other.in_channels))
            .or_else(|| d("out_channels", self.out_channels, other.out_channels))
            .or_else(|| d("bias", self.bias, other.bias))
    }

    pub fn conv_hyper(&self) -> Option<Conv2dHyper> {
        (self.kind == SiteKind::Conv2d).then_some(Conv2dHyper {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
            bias: self.bias,
        })
    }
}

/// Checks that `members` can form one sharing group with `signature`.
pub fn check_isomorphic(nodes: &[LayerNode], signature: &Signature, members: &[usize]) -> Result<()> {
    if members.is_empty() {
        return Err(Error::InvalidPlan("sharing group has no members".into()));
    }
    let first = members[0];
    if signature.kind == SiteKind::BatchNorm2d {
        return Err(Error::SharedBatchNorm { site: first });
    }
    for (i, &site) in members.iter().enumerate() {
        if members[..i].contains(&site) {
            return Err(Error::InvalidPlan(format!("layer {site} listed twice in one group")));
        }
        let node = nodes
            .get(site)
            .ok_or_else(|| Error::InvalidPlan(format!("layer {site} does not exist")))?;
        if matches!(node.kind, LayerKind::BatchNorm2d(_)) {
            return Err(Error::SharedBatchNorm { site });
        }
        if let Some((field, expected, found)) = signature.mismatch(&Signature::of(&node.kind)) {
            return Err(Error::Isomorphism {
                site,
                field,
                expected,
                found,
            });
        }
    }
    if signature.kind != SiteKind::Conv2d {
        return Err(Error::Isomorphism {
            site: first,
            field: "kind",
            expected: "Conv2d".into(),
            found: format!("{:?}", signature.kind),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharingGroup {
    pub id: usize,
    pub name: String,
    pub signature: Signature,
    /// Ascending layer indices.
    pub member_sites: Vec<usize>,
    /// Shared weight, then bias when present.
    pub kernel_param_ids: Vec<ParamId>,
}

/// One site's gradient with respect to a bound parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteGrad<T> {
    pub site: usize,
    pub param: ParamId,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    params: Vec<Param<T>>,
    groups: Vec<SharingGroup>,
    names: BTreeMap<String, ParamId>,
}

impl<T> Default for ParameterStore<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            groups: Vec::new(),
            names: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len() as u32).map(ParamId)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.index()]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.index()]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.index()].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.index()].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn groups(&self) -> &[SharingGroup] {
        &self.groups
    }

    /// Adds a parameter bound to `sites`.
    pub fn register(&mut self, name: &str, role: ParamRole, value: Tensor<T>, sites: &[usize]) -> Result<ParamId> {
        if self.names.contains_key(name) {
            return Err(Error::InvalidPlan(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len() as u32);
        let mut sites = sites.to_vec();
        sites.sort_unstable();
        self.params.push(Param {
            name: name.to_string(),
            role,
            grad: Tensor::zeros_like(&value),
            value,
            trainable: role.is_trainable(),
            sites,
            contributions: 0,
        });
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    /// Allocates one weight (and bias) for all `members` and binds it at
    /// every member site. The kernel is drawn once, Kaiming-uniform on the
    /// fan-in (bound `1/√fan_in`, biases alike).
    pub fn create_group(
        &mut self,
        nodes: &mut [LayerNode],
        name: &str,
        signature: Signature,
        members: &[usize],
        rng: &mut Rng,
    ) -> Result<usize> {
        check_isomorphic(nodes, &signature, members)?;
        if let Some(&site) = members.iter().find(|&&s| !nodes[s].param_ids.is_empty()) {
            return Err(Error::InvalidPlan(format!("layer {site} already belongs to a group")));
        }
        let hyper = signature.conv_hyper().expect("checked conv signature");
        let mut sorted = members.to_vec();
        sorted.sort_unstable();
        let bound = 1.0 / libm::sqrt(hyper.fan_in() as f64);
        let weight = Tensor::uniform(&hyper.weight_shape(), -bound, bound, rng);
        let mut ids = alloc::vec![self.register(&format!("{name}.weight"), ParamRole::ConvWeight, weight, &sorted)?];
        if hyper.bias {
            let bias = Tensor::uniform(&[hyper.out_channels], -bound, bound, rng);
            ids.push(self.register(&format!("{name}.bias"), ParamRole::ConvBias, bias, &sorted)?);
        }
        for &site in &sorted {
            nodes[site].param_ids = ids.clone();
        }
        let id = self.groups.len();
        self.groups.push(SharingGroup {
            id,
            name: name.to_string(),
            signature,
            member_sites: sorted,
            kernel_param_ids: ids,
        });
        Ok(id)
    }

    /// Sums per-site gradients into the stored gradients.
    ///
    /// Every site bound to a parameter that appears in `site_grads` must
    /// contribute exactly once; contributions are added in ascending site
    /// order.
    pub fn accumulate_shared_gradients(&mut self, mut site_grads: Vec<SiteGrad<T>>) -> Result<()> {
        site_grads.sort_by_key(|g| (g.param, g.site));
        let mut chunks = Vec::new();
        let mut start = 0;
        while start < site_grads.len() {
            let id = site_grads[start].param;
            let end = start + site_grads[start..].iter().take_while(|g| g.param == id).count();
            self.check_contributions(id, &site_grads[start..end])?;
            chunks.push((id, start, end));
            start = end;
        }
        for (id, start, end) in chunks {
            let param = &mut self.params[id.index()];
            for g in &site_grads[start..end] {
                param.grad.add_assign(&g.grad)?;
            }
            param.contributions += end - start;
        }
        Ok(())
    }

    fn check_contributions(&self, id: ParamId, chunk: &[SiteGrad<T>]) -> Result<()> {
        let param = self
            .params
            .get(id.index())
            .ok_or_else(|| Error::UnknownParameter(format!("{id:?}")))?;
        if !param.trainable {
            return Err(Error::InvalidPlan(format!("gradient for non-trainable {}", param.name)));
        }
        for (i, &site) in param.sites.iter().enumerate() {
            match chunk.get(i) {
                Some(g) if g.site == site => {}
                Some(g) if g.site < site => {
                    return Err(Error::InvalidPlan(format!(
                        "unexpected gradient for {} from layer {}",
                        param.name, g.site
                    )))
                }
                _ => {
                    return Err(Error::MissingGradient {
                        name: param.name.clone(),
                        site,
                    })
                }
            }
        }
        if let Some(g) = chunk.get(param.sites.len()) {
            return Err(Error::InvalidPlan(format!(
                "unexpected gradient for {} from layer {}",
                param.name, g.site
            )));
        }
        if let Some(g) = chunk.iter().find(|g| g.grad.shape() != param.value.shape()) {
            return Err(Error::shape("accumulate_shared_gradients", g.grad.shape(), param.value.shape()));
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
            p.contributions = 0;
        }
    }

    /// Errors unless every trainable parameter received a whole number of
    /// contributions from all of its sites.
    pub fn step_ready(&self) -> Result<()> {
        for p in self.params.iter().filter(|p| p.trainable) {
            if p.contributions == 0 || p.contributions % p.sites.len().max(1) != 0 {
                return Err(Error::UntouchedParameter { name: p.name.clone() });
            }
        }
        Ok(())
    }

    /// Distinct trainable scalars; a shared kernel counts once.
    pub fn trainable_parameter_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}
