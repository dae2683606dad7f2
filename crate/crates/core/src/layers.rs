//! Parameterized layers and residual blocks shared by every network.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::RngState;
use crate::tensor::{self, BatchNormStats, Element, NormMode, Tensor};

/// Whether a named tensor is trained or only tracked (running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Param,
    Buffer,
}

/// Anything that owns named tensors.
pub trait Module<T: Element> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Role));

    fn named_tensors(&self) -> Vec<(String, Tensor<T>, Role)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t, role| out.push((name, t.clone(), role)));
        out
    }

    fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, _, r)| *r == Role::Param)
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    fn zero_grad(&self) {
        for (_, t) in self.parameters() {
            t.zero_grad();
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn normal_param<T: Element>(shape: &[usize], std: f64, rng: &mut RngState) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    Tensor::param((0..n).map(|_| T::from_f64_lossy(rng.normal() * std)).collect(), shape)
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Element> Conv2d<T> {
    /// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        let fan_in = cin / groups * kernel * kernel;
        let weight = normal_param(&[cout, cin / groups, kernel, kernel], (2.0 / fan_in as f64).sqrt(), rng)?;
        let bias = if bias { Some(Tensor::param(vec![T::zero(); cout], &[cout])?) } else { None };
        Ok(Self { weight, bias, stride, padding: kernel / 2, groups })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding, self.groups)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_extent(&self, extent: usize) -> usize {
        (extent + 2 * self.padding - self.kernel()) / self.stride + 1
    }

    /// Multiply-adds for one frame of `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = (self.output_extent(h), self.output_extent(w));
        (self.weight.numel() * ho * wo) as u64
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Role)) {
        f(join(prefix, "weight"), &self.weight, Role::Param);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b, Role::Param);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: BatchNormStats<T>,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::param(vec![T::one(); channels], &[channels])?,
            beta: Tensor::param(vec![T::zero(); channels], &[channels])?,
            stats: BatchNormStats::new(channels),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        tensor::batchnorm2d(x, &self.gamma, &self.beta, &self.stats, mode)
    }
}

impl<T: Element> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Role)) {
        f(join(prefix, "gamma"), &self.gamma, Role::Param);
        f(join(prefix, "beta"), &self.beta, Role::Param);
        f(join(prefix, "running_mean"), &self.stats.running_mean, Role::Buffer);
        f(join(prefix, "running_var"), &self.stats.running_var, Role::Buffer);
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    /// Normal weights with `std = sqrt(1 / fan_in)`, zero bias.
    pub fn new(fin: usize, fout: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            weight: normal_param(&[fout, fin], (1.0 / fin as f64).sqrt(), rng)?,
            bias: Tensor::param(vec![T::zero(); fout], &[fout])?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::linear(x, &self.weight, Some(&self.bias))
    }

    pub fn macs(&self) -> u64 {
        self.weight.numel() as u64
    }
}

impl<T: Element> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Role)) {
        f(join(prefix, "weight"), &self.weight, Role::Param);
        f(join(prefix, "bias"), &self.bias, Role::Param);
    }
}

/// Convolution followed by batch norm.
#[derive(Clone, Debug)]
pub struct ConvBn<T: Element> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Element> ConvBn<T> {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, groups: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(cin, cout, kernel, stride, groups, false, rng)?,
            bn: BatchNorm2d::new(cout)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        self.bn.forward(&self.conv.forward(x)?, mode)
    }
}

impl<T: Element> Module<T> for ConvBn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Role)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// 1x1 reduce, 3x3, 1x1 expand (expansion 4).
    Bottleneck,
    /// Two 3x3 convolutions.
    Basic,
}

impl BlockKind {
    pub fn mid_channels(self, out: usize) -> usize {
        match self {
            BlockKind::Bottleneck => (out / 4).max(1),
            BlockKind::Basic => out,
        }
    }
}

/// Residual block `y = shortcut(x) + F(x)` with no activation after the
/// sum, so `F(x)` is exactly the increment added to the carried features.
/// The shortcut is the identity unless the block changes width or stride.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T: Element> {
    pub main: Vec<ConvBn<T>>,
    pub shortcut: Option<ConvBn<T>>,
    pub stride: usize,
}

impl<T: Element> ResidualBlock<T> {
    pub fn new(
        kind: BlockKind,
        cin: usize,
        cout: usize,
        stride: usize,
        groups: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mid = kind.mid_channels(cout);
        let main = match kind {
            BlockKind::Bottleneck => vec![
                ConvBn::new(cin, mid, 1, 1, groups, rng)?,
                ConvBn::new(mid, mid, 3, stride, groups, rng)?,
                ConvBn::new(mid, cout, 1, 1, groups, rng)?,
            ],
            BlockKind::Basic => vec![
                ConvBn::new(cin, mid, 3, stride, groups, rng)?,
                ConvBn::new(mid, cout, 3, 1, groups, rng)?,
            ],
        };
        let shortcut = if cin != cout || stride != 1 {
            Some(ConvBn::new(cin, cout, 1, stride, 1, rng)?)
        } else {
            None
        };
        Ok(Self { main, shortcut, stride })
    }

    pub fn is_shape_preserving(&self) -> bool {
        self.shortcut.is_none()
    }

    /// The residual increment `F(x)`.
    pub fn residual(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let last = self.main.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.main.iter().enumerate() {
            h = layer.forward(&h, mode)?;
            if i != last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn carry(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        match &self.shortcut {
            Some(s) => s.forward(x, mode),
            None => Ok(x.clone()),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        tensor::add(&self.carry(x, mode)?, &self.residual(x, mode)?)
    }

    /// Per-frame multiply-adds of the main path and of the shortcut.
    pub fn macs(&self, h: usize, w: usize) -> (u64, u64) {
        let (mut main, mut hh, mut ww) = (0, h, w);
        for l in &self.main {
            main += l.conv.macs(hh, ww);
            hh = l.conv.output_extent(hh);
            ww = l.conv.output_extent(ww);
        }
        let short = self.shortcut.as_ref().map_or(0, |s| s.conv.macs(h, w));
        (main, short)
    }

    pub fn output_extent(&self, extent: usize) -> usize {
        self.main.iter().fold(extent, |e, l| l.conv.output_extent(e))
    }
}

impl<T: Element> Module<T> for ResidualBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Role)) {
        for (i, l) in self.main.iter().enumerate() {
            l.visit(&join(prefix, &format!("main{i}")), f);
        }
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }
}
