//! Parameter storage and the handful of layers the models are built from.

use std::ops::Index;

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph leaves for every parameter of a [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t.clone())).collect())
    }

    /// Places every parameter on `g` as a constant (frozen use).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Copies gradients from `g` into each tensor's `grad` field.
    pub fn collect_grads(&mut self, g: &Graph, bound: &Bound) {
        for (t, v) in self.tensors.iter_mut().zip(&bound.0) {
            t.grad = Some(
                g.grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()]),
            );
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Replaces parameter values by name; shapes must match exactly.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Checkpoint(format!(
                "parameter layout differs: expected {} tensors, found {}",
                self.names.len(),
                other.names.len()
            )));
        }
        for ((name, dst), src) in self.names.iter().zip(&mut self.tensors).zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
            dst.grad = None;
        }
        Ok(())
    }
}

/// 2-D convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let w = Tensor::randn(&[out_c, in_c, k, k], init_scale / fan_in.sqrt(), rng);
        Conv2d {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[out_c])),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

/// Dense layer on `[B, in]` rows.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::randn(&[fan_in, fan_out], init_scale / (fan_in as f64).sqrt(), rng);
        Linear {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_bias(y, p[self.b])
    }
}

/// Group normalization with learned per-channel affine.
#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, groups: usize) -> Self {
        GroupNorm {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.group_norm(
            x,
            Some(p[self.gamma]),
            Some(p[self.beta]),
            self.groups,
            GROUP_NORM_EPS,
        )
    }
}

/// Largest group count (at most 8) dividing `channels`.
pub fn groups_for(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}
