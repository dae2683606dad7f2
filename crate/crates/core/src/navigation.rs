//! Frame and region gates driven by ample-branch features.
//!
//! Each gate produces two logits per frame (or grid cell): index 0 is
//! "skip", index 1 ([`SELECT`]) is "compute". Training draws a
//! Gumbel-perturbed hard sample and backpropagates through its
//! temperature-softened relaxation (straight-through); evaluation uses the
//! noise-free argmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, BatchNorm2d, Conv2d, ConvBn, Linear, Module, Role};
use crate::rng::RngState;
use crate::tensor::{self, avg_pool2d, global_avg_pool, softmax, straight_through, Element, NormMode, Tensor};

/// Logit index meaning "select this frame / cell".
pub const SELECT: usize = 1;

/// Floor applied to class probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-20;

/// Binary selection over rows (frames or cells) with its relaxation.
#[derive(Clone, Debug)]
pub struct TemporalMask<T: Element> {
    /// Exactly 0 or 1 per row.
    pub hard: Vec<T>,
    /// Relaxed "select" coordinate in [0, 1].
    pub soft: Tensor<T>,
    /// Value of `hard` with the gradient of `soft`; this is what gates compute.
    pub gate: Tensor<T>,
    pub logits: Option<Tensor<T>>,
}

impl<T: Element> TemporalMask<T> {
    /// A fixed mask with no learnable relaxation.
    pub fn constant(hard: Vec<T>) -> Result<Self> {
        let n = hard.len();
        let t = Tensor::from_vec(hard.clone(), &[n])?;
        Ok(Self { hard, soft: t.clone(), gate: t, logits: None })
    }

    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }

    pub fn selected(&self) -> Vec<usize> {
        self.hard.iter().enumerate().filter(|(_, v)| **v > T::zero()).map(|(i, _)| i).collect()
    }

    /// Selected frame count per video for `frames` frames per video.
    pub fn counts(&self, frames: usize) -> Vec<usize> {
        self.hard
            .chunks(frames)
            .map(|c| c.iter().filter(|v| **v > T::zero()).count())
            .collect()
    }

    pub fn hard_ratio(&self) -> f64 {
        self.hard.iter().map(|v| v.as_f64()).sum::<f64>() / self.hard.len().max(1) as f64
    }
}

fn check_pairs<T: Element>(op: &'static str, logits: &Tensor<T>) -> Result<usize> {
    match *logits.shape() {
        [rows, 2] => Ok(rows),
        _ => Err(Error::dim(op, 1, format!("expected [rows, 2] logits, got {:?}", logits.shape()))),
    }
}

/// Gumbel-softmax relaxation with explicit noise `[g_skip, g_select]` per row.
pub fn gumbel_sample_with_noise<T: Element>(logits: &Tensor<T>, tau: f64, noise: &[f64]) -> Result<TemporalMask<T>> {
    const OP: &str = "gumbel_sample";
    let rows = check_pairs(OP, logits)?;
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::invalid(OP, format!("temperature must be positive, got {tau}")));
    }
    if noise.len() != 2 * rows {
        return Err(Error::dim(OP, 0, format!("{} noise values for {rows} rows", noise.len())));
    }
    let log_probs = softmax(logits, 1)?.clamp_min(PROB_FLOOR).ln();
    let perturbed = tensor::add(&log_probs, &Tensor::from_f64(noise, &[rows, 2])?)?;
    let hard: Vec<T> = perturbed
        .data()
        .chunks(2)
        .map(|p| if p[SELECT] > p[1 - SELECT] { T::one() } else { T::zero() })
        .collect();
    let soft = softmax(&perturbed.scale(1.0 / tau), 1)?.narrow(1, SELECT, 1)?.reshape(&[rows])?;
    let gate = straight_through(&hard, &soft)?;
    Ok(TemporalMask { hard, soft, gate, logits: Some(logits.clone()) })
}

pub fn gumbel_sample<T: Element>(logits: &Tensor<T>, tau: f64, rng: &mut RngState) -> Result<TemporalMask<T>> {
    let rows = check_pairs("gumbel_sample", logits)?;
    let noise: Vec<f64> = (0..2 * rows).map(|_| rng.gumbel()).collect();
    gumbel_sample_with_noise(logits, tau, &noise)
}

/// Deterministic inference mask: select where the select logit wins.
pub fn argmax_mask<T: Element>(logits: &Tensor<T>) -> Result<TemporalMask<T>> {
    let rows = check_pairs("argmax_mask", logits)?;
    let hard: Vec<T> = logits
        .data()
        .chunks(2)
        .map(|p| if p[SELECT] > p[1 - SELECT] { T::one() } else { T::zero() })
        .collect();
    let soft = softmax(logits, 1)?.narrow(1, SELECT, 1)?.reshape(&[rows])?;
    let gate = straight_through(&hard, &soft)?;
    Ok(TemporalMask { hard, soft, gate, logits: Some(logits.clone()) })
}

/// Soft frame weights `softmax(logits)[select]` used directly as the gate.
pub fn soft_weights<T: Element>(logits: &Tensor<T>) -> Result<TemporalMask<T>> {
    let rows = check_pairs("soft_weights", logits)?;
    let soft = softmax(logits, 1)?.narrow(1, SELECT, 1)?.reshape(&[rows])?;
    let hard = soft.data().iter().map(|&v| if v.as_f64() >= 0.5 { T::one() } else { T::zero() }).collect();
    Ok(TemporalMask { hard, gate: soft.clone(), soft, logits: Some(logits.clone()) })
}

/// Temporal gate for one block: pool, 1x1 conv to 2 channels, BN, ReLU,
/// then a full `2T -> 2T` mixing map across the frames of each video.
#[derive(Clone, Debug)]
pub struct TemporalNavigator<T: Element> {
    pub reduce: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub mix: Linear<T>,
    pub frames: usize,
}

impl<T: Element> TemporalNavigator<T> {
    pub fn new(channels: usize, frames: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(channels, 2, 1, 1, 1, false, rng)?,
            bn: BatchNorm2d::new(2)?,
            mix: Linear::new(2 * frames, 2 * frames, rng)?,
            frames,
        })
    }

    /// `[B*T, C, H, W] -> [B*T, 2]`.
    pub fn temporal_logits(&self, features: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let rows = features.shape()[0];
        if rows % self.frames != 0 || self.mix.weight.shape()[0] != 2 * self.frames {
            return Err(Error::dim(
                "temporal_logits",
                0,
                format!("{rows} frames is not a multiple of the navigator's T = {}", self.frames),
            ));
        }
        let videos = rows / self.frames;
        let pooled = global_avg_pool(features)?;
        let h = self.bn.forward(&self.reduce.forward(&pooled)?, mode)?.relu();
        let mixed = self.mix.forward(&h.reshape(&[videos, 2 * self.frames])?)?;
        mixed.reshape(&[rows, 2])
    }

    pub fn macs_per_video(&self, channels: usize) -> u64 {
        (self.frames * channels * 2) as u64 + self.mix.macs()
    }
}

impl<T: Element> Module<T> for TemporalNavigator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Role)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.mix.visit(&join(prefix, "mix"), f);
    }
}

/// Per-cell region mask on a `grid x grid` partition of each frame.
#[derive(Clone, Debug)]
pub struct SpatialMask<T: Element> {
    pub cells: TemporalMask<T>,
    pub grid: usize,
}

impl<T: Element> SpatialMask<T> {
    /// Gate broadcast to pixels: `[rows, 1, grid * factor, grid * factor]`.
    pub fn upsampled(&self, factor: usize) -> Result<Tensor<T>> {
        let rows = self.cells.len() / (self.grid * self.grid);
        let g = self.cells.gate.reshape(&[rows, 1, self.grid, self.grid])?;
        tensor::nearest_upsample(&g, factor)
    }

    /// Hard mask restricted to a subset of frames.
    pub fn rows(&self, frames: &[usize]) -> Result<SpatialMask<T>> {
        let cell = self.grid * self.grid;
        let rows = self.cells.len() / cell;
        let gate = tensor::gather_rows(&self.cells.gate.reshape(&[rows, cell])?, frames)?;
        let soft = tensor::gather_rows(&self.cells.soft.reshape(&[rows, cell])?, frames)?;
        let hard = frames.iter().flat_map(|&f| self.cells.hard[f * cell..(f + 1) * cell].to_vec()).collect();
        let n = frames.len() * cell;
        Ok(SpatialMask {
            cells: TemporalMask { hard, soft: soft.reshape(&[n])?, gate: gate.reshape(&[n])?, logits: None },
            grid: self.grid,
        })
    }
}

/// Region gate: 3x3 conv + BN + ReLU, average pool to the grid, 1x1 conv to 2 logits.
#[derive(Clone, Debug)]
pub struct SpatialNavigator<T: Element> {
    pub conv: ConvBn<T>,
    pub head: Conv2d<T>,
    pub grid: usize,
}

impl<T: Element> SpatialNavigator<T> {
    pub fn new(channels: usize, hidden: usize, grid: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            conv: ConvBn::new(channels, hidden, 3, 1, 1, rng)?,
            head: Conv2d::new(hidden, 2, 1, 1, 1, true, rng)?,
            grid,
        })
    }

    /// `[M, C, H, W] -> [M, G, G, 2]`.
    pub fn spatial_logits(&self, features: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let (h, w) = (features.shape()[2], features.shape()[3]);
        if self.grid == 0 || h % self.grid != 0 || w % self.grid != 0 || h != w {
            return Err(Error::dim(
                "spatial_logits",
                2,
                format!("square extent {h}x{w} must be divisible by grid {}", self.grid),
            ));
        }
        let k = h / self.grid;
        let pooled = avg_pool2d(&self.conv.forward(features, mode)?.relu(), k, k)?;
        self.head.forward(&pooled)?.permute(&[0, 2, 3, 1])
    }

    pub fn sample(&self, features: &Tensor<T>, mode: NormMode, tau: f64, rng: Option<&mut RngState>) -> Result<SpatialMask<T>> {
        let logits = self.spatial_logits(features, mode)?;
        let rows = logits.numel() / 2;
        let pairs = logits.reshape(&[rows, 2])?;
        let cells = match rng {
            Some(rng) => gumbel_sample(&pairs, tau, rng)?,
            None => argmax_mask(&pairs)?,
        };
        Ok(SpatialMask { cells, grid: self.grid })
    }

    /// Cell probabilities used directly as the gate.
    pub fn soft(&self, features: &Tensor<T>, mode: NormMode) -> Result<SpatialMask<T>> {
        let logits = self.spatial_logits(features, mode)?;
        let rows = logits.numel() / 2;
        Ok(SpatialMask { cells: soft_weights(&logits.reshape(&[rows, 2])?)?, grid: self.grid })
    }

    pub fn macs_per_frame(&self, h: usize, w: usize) -> u64 {
        self.conv.conv.macs(h, w) + self.head.macs(self.grid, self.grid)
    }
}

impl<T: Element> Module<T> for SpatialNavigator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Role)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    Exponential,
    Cosine,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_steps: u64,
    pub mode: DecayMode,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self { tau_start: 1.0, tau_end: 0.01, total_steps: 1, mode: DecayMode::Exponential }
    }
}

impl TemperatureSchedule {
    pub fn temperature_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(
                "temperature_at",
                format!("step {step} beyond schedule length {}", self.total_steps),
            ));
        }
        let frac = if self.total_steps == 0 { 1.0 } else { step as f64 / self.total_steps as f64 };
        let (a, b) = (self.tau_start, self.tau_end);
        Ok(match self.mode {
            DecayMode::Exponential => (a.ln() + frac * (b.ln() - a.ln())).exp(),
            DecayMode::Cosine => b + (a - b) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
            DecayMode::Linear => a + frac * (b - a),
        })
    }
}

/// Target region ratio: linear from 1 at step 0 to `rs_target` at `warm_steps`.
pub fn rs_at(step: u64, rs_target: f64, warm_steps: u64) -> f64 {
    if step >= warm_steps {
        return rs_target;
    }
    1.0 + (rs_target - 1.0) * step as f64 / warm_steps as f64
}
