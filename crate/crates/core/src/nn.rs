//! Parameterised layers. A layer only remembers its name and geometry; its
//! weights live in a [`ParamStore`] under `<name>.weight` / `<name>.bias`.

use crate::autodiff::{Graph, PadMode, Var};
use crate::error::Result;
use crate::tensor::{fan_in_uniform, ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            pad_mode: PadMode::Zeros,
        }
    }

    pub fn pointwise(name: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        Self::new(name, in_channels, out_channels, 1, 1, 0)
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        let fan_in = self.in_channels * self.kernel * self.kernel;
        store.insert(self.weight_name(), fan_in_uniform(&self.weight_name(), &shape, fan_in, seed))?;
        store.insert(self.bias_name(), Tensor::zeros(&[self.out_channels]))
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        g.conv2d_padded(x, w, b, self.stride, self.pad, self.pad_mode)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self {
            name: name.into(),
            in_features,
            out_features,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        let shape = [self.out_features, self.in_features];
        store.insert(self.weight_name(), fan_in_uniform(&self.weight_name(), &shape, self.in_features, seed))?;
        store.insert(self.bias_name(), Tensor::zeros(&[self.out_features]))
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        g.linear(x, w, b)
    }
}
