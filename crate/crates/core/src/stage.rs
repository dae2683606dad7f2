//! The two-branch ample/focal stage.
//!
//! Features travel as `[B*T, C, H, W]` with frames of a video contiguous.
//! The ample branch runs every frame at half width and half resolution;
//! after each ample block a navigator picks frames for the matching focal
//! block, whose residual increment is computed only for those frames while
//! the rest carry their features forward. Both branches are fused with a
//! per-channel weight at the end of the stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, BlockKind, Conv2d, Linear, Module, ResidualBlock, Role};
use crate::model::temporal_shift;
use crate::navigation::{argmax_mask, gumbel_sample, soft_weights, SpatialMask, SpatialNavigator, TemporalMask, TemporalNavigator};
use crate::rng::RngState;
use crate::tensor::{self, concat, gather_rows, mul, nearest_upsample, scatter_rows, Element, NormMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Learned per-channel weight.
    Dynamic,
    /// Fixed weight 0.5.
    Addition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Compute every frame and multiply the increment by the gate.
    MaskMultiply,
    /// Compute only the selected frames and scatter them back.
    Gather,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialConfig {
    pub grid: usize,
    pub hidden: usize,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self { grid: 4, hidden: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AFStageConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub num_blocks: usize,
    /// Stride of the first focal block; the ample branch uses twice this.
    pub stride: usize,
    #[serde(default = "default_focal_groups")]
    pub focal_groups: usize,
    #[serde(default = "default_block")]
    pub block: BlockKind,
    #[serde(default = "default_fusion")]
    pub fusion: FusionMode,
    #[serde(default)]
    pub spatial: Option<SpatialConfig>,
}

fn default_focal_groups() -> usize {
    2
}
fn default_block() -> BlockKind {
    BlockKind::Bottleneck
}
fn default_fusion() -> FusionMode {
    FusionMode::Dynamic
}

impl AFStageConfig {
    pub fn new(in_channels: usize, out_channels: usize, num_blocks: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            num_blocks,
            stride,
            focal_groups: 2,
            block: BlockKind::Bottleneck,
            fusion: FusionMode::Dynamic,
            spatial: None,
        }
    }

    pub fn ample_channels(&self) -> usize {
        self.out_channels / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Config(format!("af stage: {d}")));
        if self.out_channels == 0 || self.out_channels % 2 != 0 {
            return bad(format!("out_channels must be even, got {}", self.out_channels));
        }
        if self.num_blocks == 0 {
            return bad("num_blocks must be at least 1".into());
        }
        if !(1..=2).contains(&self.stride) {
            return bad(format!("first block stride must be 1 or 2, got {}", self.stride));
        }
        let g = self.focal_groups;
        let mid = self.block.mid_channels(self.out_channels);
        if g == 0 || self.in_channels % g != 0 || mid % g != 0 || self.out_channels % g != 0 {
            return bad(format!(
                "focal groups {g} must divide in ({}), mid ({mid}) and out ({}) channels",
                self.in_channels, self.out_channels
            ));
        }
        Ok(())
    }

    /// Focal-branch spatial extent for a square input of `extent`.
    pub fn focal_extent(&self, extent: usize) -> usize {
        (extent + 2 - 3) / self.stride + 1
    }
}

/// Per-channel fusion weight from pooled branch outputs.
#[derive(Clone, Debug)]
pub struct FusionHead<T: Element> {
    pub linear: Linear<T>,
}

impl<T: Element> FusionHead<T> {
    pub fn new(channels: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self { linear: Linear::new(2 * channels, channels, rng)? })
    }

    /// `ample, focal: [B, T, C, HW]` -> `theta: [B, 1, C, 1]` in (0, 1).
    pub fn theta(&self, ample: &Tensor<T>, focal: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c) = (ample.shape()[0], ample.shape()[2]);
        let pa = ample.mean_to(&[b, 1, c, 1])?.reshape(&[b, c])?;
        let pf = focal.mean_to(&[b, 1, c, 1])?.reshape(&[b, c])?;
        self.linear.forward(&concat(&[pa, pf], 1)?)?.sigmoid().reshape(&[b, 1, c, 1])
    }
}

/// Where each block's frame mask comes from.
#[derive(Clone, Copy, Debug)]
pub enum FramePolicy<'a, T: Element> {
    /// Navigator: Gumbel sample in training, argmax in evaluation.
    Navigate,
    /// Navigator probabilities used directly as soft frame weights; region
    /// gates, when on, are soft as well.
    SoftWeights,
    /// Hand-set `[B*T]` masks: one shared by all blocks, or one per block.
    Fixed(&'a [Vec<T>]),
}

#[derive(Clone, Copy, Debug)]
pub enum RegionPolicy<'a, T: Element> {
    Off,
    Navigate,
    /// `[G*G]` hard cell mask applied to every frame.
    Fixed(&'a [T]),
}

/// Runtime switches for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Control<'a, T: Element> {
    pub mode: NormMode,
    pub exec: ExecMode,
    pub tau: f64,
    pub frames: FramePolicy<'a, T>,
    pub regions: RegionPolicy<'a, T>,
    /// Replaces the fusion weight with a constant.
    pub theta_override: Option<f64>,
    /// Temporal channel shift before each focal increment.
    pub shift_fraction: Option<f64>,
}

impl<T: Element> Control<'_, T> {
    pub fn train(tau: f64) -> Self {
        Self {
            mode: NormMode::Train,
            exec: ExecMode::MaskMultiply,
            tau,
            frames: FramePolicy::Navigate,
            regions: RegionPolicy::Off,
            theta_override: None,
            shift_fraction: None,
        }
    }

    pub fn eval() -> Self {
        Self { mode: NormMode::Eval, exec: ExecMode::Gather, ..Self::train(1.0) }
    }
}

/// What a stage decided, block by block.
#[derive(Clone, Debug)]
pub struct StageTrace<T: Element> {
    pub masks: Vec<TemporalMask<T>>,
    pub regions: Vec<Option<SpatialMask<T>>>,
    /// `[B * C_o]` fusion weights.
    pub theta: Vec<f64>,
    pub frames: usize,
}

impl<T: Element> StageTrace<T> {
    /// Selected frames per block and video.
    pub fn counts(&self) -> Vec<Vec<usize>> {
        self.masks.iter().map(|m| m.counts(self.frames)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct AFStage<T: Element> {
    pub config: AFStageConfig,
    pub frames: usize,
    pub ample: Vec<ResidualBlock<T>>,
    pub focal: Vec<ResidualBlock<T>>,
    pub navigators: Vec<TemporalNavigator<T>>,
    pub spatial: Vec<SpatialNavigator<T>>,
    /// 1x1 projection of ample features to the focal width before upsampling.
    pub projection: Conv2d<T>,
    pub head: FusionHead<T>,
}

impl<T: Element> AFStage<T> {
    pub fn new(config: AFStageConfig, frames: usize, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let (cin, co, ca) = (config.in_channels, config.out_channels, config.ample_channels());
        let mut ample = Vec::with_capacity(config.num_blocks);
        let mut focal = Vec::with_capacity(config.num_blocks);
        let mut navigators = Vec::with_capacity(config.num_blocks);
        let mut spatial = Vec::new();
        for n in 0..config.num_blocks {
            let (ai, fi, s) = if n == 0 { (cin, cin, config.stride) } else { (ca, co, 1) };
            ample.push(ResidualBlock::new(config.block, ai, ca, if n == 0 { 2 * s } else { 1 }, 1, rng)?);
            focal.push(ResidualBlock::new(config.block, fi, co, s, config.focal_groups, rng)?);
            navigators.push(TemporalNavigator::new(ca, frames, rng)?);
            if let Some(sp) = config.spatial {
                spatial.push(SpatialNavigator::new(ca, sp.hidden, sp.grid, rng)?);
            }
        }
        Ok(Self {
            projection: Conv2d::new(ca, co, 1, 1, 1, true, rng)?,
            head: FusionHead::new(co, rng)?,
            config,
            frames,
            ample,
            focal,
            navigators,
            spatial,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.config.num_blocks
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::dim("stage_forward", 1, format!("expected [B*T, {}, H, W], got {s:?}", self.config.in_channels)));
        }
        if s[0] % self.frames != 0 {
            return Err(Error::dim("stage_forward", 0, format!("{} frames not divisible by T = {}", s[0], self.frames)));
        }
        let div = 2 * self.config.stride;
        if s[2] % div != 0 || s[3] % div != 0 {
            return Err(Error::dim("stage_forward", 2, format!("spatial extent {}x{} not divisible by {div}", s[2], s[3])));
        }
        Ok((s[0], s[0] / self.frames))
    }

    pub fn ample_block(&self, n: usize, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        self.ample[n].forward(x, mode)
    }

    /// Runs the whole ample branch, returning every block's output.
    pub fn ample_forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.num_blocks());
        for n in 0..self.num_blocks() {
            let input = outs.last().unwrap_or(x);
            let y = self.ample_block(n, input, mode)?;
            outs.push(y);
        }
        Ok(outs)
    }

    /// One focal block under a frame mask (and optional region mask).
    pub fn focal_block(
        &self,
        n: usize,
        x: &Tensor<T>,
        mask: &TemporalMask<T>,
        region: Option<&SpatialMask<T>>,
        ctl: &Control<'_, T>,
    ) -> Result<Tensor<T>> {
        let rows = x.shape()[0];
        if mask.len() != rows {
            return Err(Error::dim("focal_forward", 0, format!("mask length {} vs {rows} frames", mask.len())));
        }
        let block = &self.focal[n];
        let carry = block.carry(x, ctl.mode)?;
        let input = match ctl.shift_fraction {
            Some(f) => temporal_shift(x, self.frames, f)?,
            None => x.clone(),
        };
        let gate = mask.gate.reshape(&[rows, 1, 1, 1])?;
        let out_extent = carry.shape()[2];
        let region_gate = match region {
            Some(r) => Some(r.upsampled(out_extent / r.grid)?),
            None => None,
        };
        match ctl.exec {
            ExecMode::MaskMultiply => {
                let mut inc = mul(&block.residual(&input, ctl.mode)?, &gate)?;
                if let Some(rg) = &region_gate {
                    inc = mul(&inc, rg)?;
                }
                tensor::add(&carry, &inc)
            }
            ExecMode::Gather => {
                let idx = mask.selected();
                if idx.is_empty() {
                    return Ok(carry);
                }
                let picked = gather_rows(&input, &idx)?;
                let mut inc = mul(&block.residual(&picked, ctl.mode)?, &gather_rows(&gate, &idx)?)?;
                if let Some(rg) = &region_gate {
                    inc = mul(&inc, &gather_rows(rg, &idx)?)?;
                }
                tensor::add(&carry, &scatter_rows(&inc, &idx, rows)?)
            }
        }
    }

    /// Runs the focal branch under fixed per-block masks.
    pub fn focal_forward(
        &self,
        x: &Tensor<T>,
        masks: &[TemporalMask<T>],
        regions: &[Option<SpatialMask<T>>],
        ctl: &Control<'_, T>,
    ) -> Result<Tensor<T>> {
        if masks.len() != self.num_blocks() {
            return Err(Error::dim("focal_forward", "blocks", format!("{} masks for {} blocks", masks.len(), self.num_blocks())));
        }
        let mut f = x.clone();
        for (n, m) in masks.iter().enumerate() {
            f = self.focal_block(n, &f, m, regions.get(n).and_then(|r| r.as_ref()), ctl)?;
        }
        Ok(f)
    }

    /// `theta * up(proj(ample)) + (1 - theta) * focal`; returns the fused
    /// features and the `[B * C_o]` weights.
    pub fn fuse(&self, ample: &Tensor<T>, focal: &Tensor<T>, ctl: &Control<'_, T>) -> Result<(Tensor<T>, Vec<f64>)> {
        let up = nearest_upsample(&self.projection.forward(ample)?, 2)?;
        if up.shape() != focal.shape() {
            return Err(Error::dim("fuse", "shape", format!("ample {:?} vs focal {:?}", up.shape(), focal.shape())));
        }
        let s = focal.shape().to_vec();
        let videos = s[0] / self.frames;
        let flat = [videos, self.frames, s[1], s[2] * s[3]];
        let (a4, f4) = (up.reshape(&flat)?, focal.reshape(&flat)?);
        let theta = match (ctl.theta_override, self.config.fusion) {
            (Some(v), _) => Tensor::full(&[videos, 1, s[1], 1], T::from_f64_lossy(v)),
            (None, FusionMode::Addition) => Tensor::full(&[videos, 1, s[1], 1], T::from_f64_lossy(0.5)),
            (None, FusionMode::Dynamic) => self.head.theta(&a4, &f4)?,
        };
        let fused = tensor::add(&mul(&a4, &theta)?, &mul(&f4, &theta.one_minus())?)?;
        Ok((fused.reshape(&s)?, theta.to_f64_vec()))
    }

    fn frame_mask(&self, n: usize, ample_out: &Tensor<T>, ctl: &Control<'_, T>, rng: &mut RngState) -> Result<TemporalMask<T>> {
        let rows = ample_out.shape()[0];
        match ctl.frames {
            FramePolicy::Fixed(masks) => {
                let m = masks.get(n).or_else(|| masks.first()).ok_or_else(|| Error::invalid("stage_forward", "no fixed masks given"))?;
                if m.len() != rows {
                    return Err(Error::dim("stage_forward", 0, format!("fixed mask length {} vs {rows} frames", m.len())));
                }
                TemporalMask::constant(m.clone())
            }
            FramePolicy::Navigate | FramePolicy::SoftWeights => {
                let logits = self.navigators[n].temporal_logits(ample_out, ctl.mode)?;
                match (ctl.frames, ctl.mode) {
                    (FramePolicy::SoftWeights, _) => soft_weights(&logits),
                    (_, NormMode::Train) => gumbel_sample(&logits, ctl.tau, rng),
                    (_, NormMode::Eval) => argmax_mask(&logits),
                }
            }
        }
    }

    fn region_mask(&self, n: usize, ample_out: &Tensor<T>, ctl: &Control<'_, T>, rng: &mut RngState) -> Result<Option<SpatialMask<T>>> {
        match ctl.regions {
            RegionPolicy::Off => Ok(None),
            RegionPolicy::Navigate => {
                // stages built without region gates ignore the request
                let Some(nav) = self.spatial.get(n) else { return Ok(None) };
                if let FramePolicy::SoftWeights = ctl.frames {
                    return nav.soft(ample_out, ctl.mode).map(Some);
                }
                let noise = (ctl.mode == NormMode::Train).then_some(rng);
                nav.sample(ample_out, ctl.mode, ctl.tau, noise).map(Some)
            }
            RegionPolicy::Fixed(cells) => {
                let grid = (cells.len() as f64).sqrt().round() as usize;
                if grid * grid != cells.len() {
                    return Err(Error::invalid("stage_forward", format!("{} cells is not a square grid", cells.len())));
                }
                let rows = ample_out.shape()[0];
                let hard: Vec<T> = (0..rows).flat_map(|_| cells.iter().copied()).collect();
                Ok(Some(SpatialMask { cells: TemporalMask::constant(hard)?, grid }))
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctl: &Control<'_, T>, rng: &mut RngState) -> Result<(Tensor<T>, StageTrace<T>)> {
        self.check_input(x)?;
        let mut a = x.clone();
        let mut f = x.clone();
        let mut masks = Vec::with_capacity(self.num_blocks());
        let mut regions = Vec::with_capacity(self.num_blocks());
        for n in 0..self.num_blocks() {
            a = self.ample_block(n, &a, ctl.mode)?;
            let mask = self.frame_mask(n, &a, ctl, rng)?;
            let region = self.region_mask(n, &a, ctl, rng)?;
            f = self.focal_block(n, &f, &mask, region.as_ref(), ctl)?;
            masks.push(mask);
            regions.push(region);
        }
        let (out, theta) = self.fuse(&a, &f, ctl)?;
        Ok((out, StageTrace { masks, regions, theta, frames: self.frames }))
    }
}

impl<T: Element> Module<T> for AFStage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Role)) {
        for (n, b) in self.ample.iter().enumerate() {
            b.visit(&join(prefix, &format!("ample{n}")), f);
        }
        for (n, b) in self.focal.iter().enumerate() {
            b.visit(&join(prefix, &format!("focal{n}")), f);
        }
        for (n, b) in self.navigators.iter().enumerate() {
            b.visit(&join(prefix, &format!("nav{n}")), f);
        }
        for (n, b) in self.spatial.iter().enumerate() {
            b.visit(&join(prefix, &format!("spatial{n}")), f);
        }
        self.projection.visit(&join(prefix, "projection"), f);
        self.head.linear.visit(&join(prefix, "fusion"), f);
    }
}
