//! Parameters, the [`Module`] visitor trait and basic layers.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;
use crate::var::Var;
use crate::TensorError;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM: AtomicU64 = AtomicU64::new(0);

impl ParamId {
    fn fresh() -> ParamId {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named-by-position learnable tensor. Cloning yields an independent
/// parameter with a new identity.
#[derive(Debug)]
pub struct Param {
    id: ParamId,
    value: Tensor,
    trainable: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Param {
        Param { id: ParamId::fresh(), value, trainable: true }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn set(&mut self, value: Tensor) {
        assert_eq!(value.shape(), self.value.shape(), "parameter shape change");
        self.value = value;
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.trainable = on;
    }

    pub fn var(&self) -> Var {
        Var::from_param(self)
    }
}

impl Clone for Param {
    fn clone(&self) -> Param {
        Param { id: ParamId::fresh(), value: self.value.clone(), trainable: self.trainable }
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Visitor over the named parameters of a model component.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n, p)));
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value().numel()).sum()
    }

    fn trainable_param_count(&self) -> usize {
        self.named_params().iter().filter(|(_, p)| p.is_trainable()).map(|(_, p)| p.value().numel()).sum()
    }

    fn set_trainable(&mut self, on: bool) {
        self.visit_mut("", &mut |_, p| p.set_trainable(on));
    }

    fn state_dict(&self) -> BTreeMap<String, Tensor> {
        self.named_params().into_iter().map(|(n, p)| (n, p.value().clone())).collect()
    }

    /// Loads every parameter by name; missing names and shape changes are errors.
    fn load_state_dict(&mut self, state: &BTreeMap<String, Tensor>) -> Result<(), TensorError> {
        let mut err = None;
        self.visit_mut("", &mut |n, p| {
            if err.is_some() {
                return;
            }
            match state.get(&n) {
                None => err = Some(TensorError::MissingTensor(n)),
                Some(t) if t.shape() != p.value().shape() => {
                    err = Some(TensorError::ShapeMismatch {
                        name: n,
                        expected: p.value().shape().to_vec(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(t) => p.set(t.clone()),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// SHA-256 over parameter names and values in visit order.
    fn params_hash(&self) -> String {
        let mut h = Sha256::new();
        for (n, p) in self.named_params() {
            h.update(n.as_bytes());
            h.update(p.value().content_hash().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl Module for Param {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(prefix.to_string(), self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(prefix.to_string(), self)
    }
}

impl<T: Module> Module for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Module> Module for Option<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

impl<T: Module + ?Sized> Module for Box<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        (**self).visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        (**self).visit_mut(prefix, f)
    }
}

/// Borrowed named sub-modules viewed as one module, e.g. to give an
/// optimizer only part of a model.
pub struct ModuleGroup<'m> {
    parts: Vec<(String, &'m mut dyn Module)>,
}

impl<'m> ModuleGroup<'m> {
    pub fn new() -> ModuleGroup<'m> {
        ModuleGroup { parts: Vec::new() }
    }

    pub fn with(mut self, name: &str, m: &'m mut dyn Module) -> ModuleGroup<'m> {
        self.parts.push((name.to_string(), m));
        self
    }
}

impl Default for ModuleGroup<'_> {
    fn default() -> Self {
        ModuleGroup::new()
    }
}

impl Module for ModuleGroup<'_> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        for (n, m) in &self.parts {
            m.visit(&join(prefix, n), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (n, m) in self.parts.iter_mut() {
            m.visit_mut(&join(prefix, n), f);
        }
    }
}

/// Implements [`Module`] by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_module {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Module for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a $crate::nn::Param)) {
                $( $crate::nn::Module::visit(&self.$field, &$crate::nn::join_name(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::nn::Param)) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, &$crate::nn::join_name(prefix, stringify!($field)), f); )*
            }
        }
    };
}

#[doc(hidden)]
pub fn join_name(prefix: &str, name: &str) -> String {
    join(prefix, name)
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}
impl_module!(Linear { weight, bias });

impl Linear {
    pub fn new<R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Linear {
        let bound = 1.0 / (din as f64).sqrt();
        Linear {
            weight: Param::new(uniform(&[dout, din], bound, rng)),
            bias: Some(Param::new(uniform(&[dout], bound, rng))),
        }
    }

    /// All-zero weights and bias.
    pub fn zeros(din: usize, dout: usize) -> Linear {
        Linear {
            weight: Param::new(Tensor::zeros(&[dout, din])),
            bias: Some(Param::new(Tensor::zeros(&[dout]))),
        }
    }

    pub fn scaled<R: Rng + ?Sized>(din: usize, dout: usize, std: f64, rng: &mut R) -> Linear {
        Linear {
            weight: Param::new(Tensor::randn(&[dout, din], std, rng)),
            bias: Some(Param::new(Tensor::zeros(&[dout]))),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn forward(&self, x: &Var) -> Var {
        let b = self.bias.as_ref().map(Param::var);
        x.linear(&self.weight.var(), b.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}
impl_module!(Conv3d { weight, bias });

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3], rng: &mut R) -> Conv3d {
        let fan_in = (cin * kernel.iter().product::<usize>()) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Conv3d {
            weight: Param::new(uniform(&[cout, cin, kernel[0], kernel[1], kernel[2]], bound, rng)),
            bias: Some(Param::new(uniform(&[cout], bound, rng))),
            stride,
            pad,
        }
    }

    /// `k³` kernel, stride 1, same padding.
    pub fn same<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Conv3d {
        Conv3d::new(cin, cout, [k; 3], [1; 3], [k / 2; 3], rng)
    }

    /// Pointwise convolution with all-zero weights and bias.
    pub fn zeros(cin: usize, cout: usize) -> Conv3d {
        Conv3d {
            weight: Param::new(Tensor::zeros(&[cout, cin, 1, 1, 1])),
            bias: Some(Param::new(Tensor::zeros(&[cout]))),
            stride: [1; 3],
            pad: [0; 3],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn forward(&self, x: &Var) -> Var {
        let b = self.bias.as_ref().map(Param::var);
        x.conv3d(&self.weight.var(), b.as_ref(), self.stride, self.pad)
    }
}

/// 2D convolution over `(N, C, H, W)` via a unit-depth 3D kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub inner: Conv3d,
}
impl_module!(Conv2d { inner });

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Conv2d {
        Conv2d { inner: Conv3d::new(cin, cout, [1, k, k], [1, stride, stride], [0, pad, pad], rng) }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv2d input must be (N, C, H, W)");
        let y = self.inner.forward(&x.reshape(&[s[0], s[1], 1, s[2], s[3]]));
        let ys = y.shape().to_vec();
        y.reshape(&[ys[0], ys[1], ys[3], ys[4]])
    }
}

/// Group normalization with per-channel affine over `(N, C, ...)`.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub eps: f64,
    pub gamma: Param,
    pub beta: Param,
}
impl_module!(GroupNorm { gamma, beta });

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> GroupNorm {
        assert!(channels.is_multiple_of(groups), "{groups} groups do not divide {channels} channels");
        GroupNorm {
            groups,
            eps: 1e-5,
            gamma: Param::new(Tensor::ones(&[channels])),
            beta: Param::new(Tensor::zeros(&[channels])),
        }
    }

    /// Largest of 8, 4, 2, 1 groups dividing `channels`.
    pub fn auto(channels: usize) -> GroupNorm {
        let g = [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap();
        GroupNorm::new(g, channels)
    }

    pub fn forward(&self, x: &Var) -> Var {
        let c = x.shape()[1];
        let mut bshape = vec![1; x.shape().len()];
        bshape[1] = c;
        x.group_norm(self.groups, self.eps)
            .mul(&self.gamma.var().reshape(&bshape))
            .add(&self.beta.var().reshape(&bshape))
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: Param,
}
impl_module!(Embedding { table });

impl Embedding {
    pub fn new<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Embedding {
        Embedding { table: Param::new(Tensor::randn(&[n, dim], 0.02f64.max(1.0 / (dim as f64).sqrt()), rng)) }
    }

    pub fn len(&self) -> usize {
        self.table.value().shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, idx: &[usize]) -> Var {
        self.table.var().gather_rows(idx)
    }
}
