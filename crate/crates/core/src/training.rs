//! Loss, optimizer, synthetic salient-frame videos, fixed sampling
//! policies and the training loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::model::{Model, Prediction};
use crate::navigation::{rs_at, TemperatureSchedule, TemporalMask};
use crate::rng::RngState;
use crate::stage::{Control, ExecMode, FramePolicy, RegionPolicy, StageTrace};
use crate::tensor::{self, cross_entropy, Element, NormMode, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    /// `(r_n - RT)^2` per navigated block, in stage then block order.
    pub ratio_penalties: Vec<f64>,
    /// `(s_n - RS)^2` per block with a region gate.
    pub region_penalties: Vec<f64>,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn penalty(&self) -> f64 {
        self.ratio_penalties.iter().chain(&self.region_penalties).sum()
    }
}

/// `CE(mean frame logits) + lambda * sum_n (r_n - RT)^2` where `r_n` is the
/// batch mean of block n's soft select coordinate. Region gates, when
/// present, add `lambda * sum_n (s_n - RS)^2` in the same way.
pub fn total_loss<T: Element>(
    pred: &Prediction<T>,
    labels: &[usize],
    traces: &[StageTrace<T>],
    rt: f64,
    rs: f64,
    lambda: f64,
) -> Result<(Tensor<T>, LossBreakdown)> {
    let ce = cross_entropy(&pred.video_logits, labels)?;
    let mut loss = ce.clone();
    let mut ratio_penalties = Vec::new();
    let mut region_penalties = Vec::new();
    let add_penalty = |loss: &mut Tensor<T>, m: &TemporalMask<T>, target: f64, into: &mut Vec<f64>| {
        let gap = m.soft.mean().add_scalar(-target);
        let sq = tensor::mul(&gap, &gap)?;
        into.push(sq.item().as_f64());
        *loss = tensor::add(loss, &sq.scale(lambda))?;
        Ok::<_, Error>(())
    };
    for trace in traces {
        for (m, r) in trace.masks.iter().zip(&trace.regions) {
            if m.logits.is_some() {
                add_penalty(&mut loss, m, rt, &mut ratio_penalties)?;
            }
            if let Some(r) = r {
                if r.cells.logits.is_some() {
                    add_penalty(&mut loss, &r.cells, rs, &mut region_penalties)?;
                }
            }
        }
    }
    if lambda > 0.0 && ratio_penalties.is_empty() && region_penalties.is_empty() {
        return Err(Error::invalid("total_loss", "lambda > 0 but no navigated blocks in the traces"));
    }
    let breakdown = LossBreakdown {
        cross_entropy: ce.item().as_f64(),
        total: loss.item().as_f64(),
        ratio_penalties,
        region_penalties,
        lambda,
    };
    Ok((loss, breakdown))
}

/// SGD with classical momentum: `v = mu v + (g + wd p)`, `p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Element> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// Every listed parameter must carry a gradient.
    pub fn step(&mut self, params: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        let (mu, wd, lr) = (T::from_f64_lossy(self.momentum), T::from_f64_lossy(self.weight_decay), T::from_f64_lossy(lr));
        for (name, p) in params {
            let g = p.grad().ok_or_else(|| Error::invalid("sgd_step", format!("parameter {name} has no gradient")))?;
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            p.update_data(|d| {
                for ((x, &gi), vi) in d.iter_mut().zip(&g).zip(v.iter_mut()) {
                    *vi = mu * *vi + gi + wd * *x;
                    *x = *x - lr * *vi;
                }
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticVideoSpec {
    pub classes: usize,
    pub frames: usize,
    /// Frames per video that carry the class template.
    pub salient: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub resolution: usize,
    #[serde(default = "three")]
    pub channels: usize,
    /// Amplitude of a fresh random pattern, on the template grid, added to
    /// each non-salient frame. Carries no class information.
    #[serde(default)]
    pub distractor: f64,
    /// Side of the coarse random grid each template is drawn on.
    #[serde(default = "four")]
    pub template_cells: usize,
    #[serde(default)]
    pub template_seed: u64,
    /// Amplitude of a class-independent pattern shared by every salient frame.
    #[serde(default)]
    pub marker: f64,
    /// Side of the grid the marker is drawn on.
    #[serde(default = "two")]
    pub marker_cells: usize,
}

fn three() -> usize {
    3
}
fn four() -> usize {
    4
}
fn two() -> usize {
    2
}

impl SyntheticVideoSpec {
    pub fn validate(&self) -> Result<()> {
        if self.salient > self.frames {
            return Err(Error::invalid("synthetic", format!("{} salient frames exceed T = {}", self.salient, self.frames)));
        }
        if self.classes == 0 || self.frames == 0 || self.resolution == 0 || self.channels == 0 {
            return Err(Error::invalid("synthetic", "classes, frames, resolution and channels must be positive"));
        }
        for (name, cells) in [("template", self.template_cells), ("marker", self.marker_cells)] {
            if cells == 0 || self.resolution % cells != 0 {
                return Err(Error::invalid("synthetic", format!("{name} cells {cells} must divide resolution {}", self.resolution)));
            }
        }
        if self.noise < 0.0 || self.distractor < 0.0 || self.marker < 0.0 {
            return Err(Error::invalid("synthetic", "noise, distractor and marker must be nonnegative"));
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    /// A `±1` pattern on a `cells` grid, replicated to full resolution.
    fn grid_pattern(&self, cells: usize, rng: &mut RngState) -> Vec<f64> {
        let coarse: Vec<f64> = (0..self.channels * cells * cells).map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 }).collect();
        self.replicate(&coarse, cells)
    }

    fn replicate(&self, coarse: &[f64], cells: usize) -> Vec<f64> {
        let (r, c) = (self.resolution, self.channels);
        let cell = r / cells;
        let mut full = vec![0.0; self.frame_len()];
        for ch in 0..c {
            for y in 0..r {
                for x in 0..r {
                    full[(ch * r + y) * r + x] = coarse[(ch * cells + y / cell) * cells + x / cell];
                }
            }
        }
        full
    }

    /// One `±1` pattern per class on the template grid. Classes with
    /// identical patterns are redrawn.
    pub fn templates(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut rng = RngState::derive(self.template_seed, 0x7e3a);
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.classes);
        while out.len() < self.classes {
            let p = self.grid_pattern(self.template_cells, &mut rng);
            if !out.contains(&p) {
                out.push(p);
            }
        }
        Ok(out)
    }

    /// The class-independent salient-frame pattern, unscaled.
    pub fn marker_pattern(&self) -> Vec<f64> {
        self.grid_pattern(self.marker_cells, &mut RngState::derive(self.template_seed, 0x3a7e))
    }

    pub fn sample(&self, templates: &[Vec<f64>], rng: &mut RngState) -> VideoSample {
        let label = rng.below(self.classes);
        let salient = rng.subset(self.frames, self.salient);
        let marker = (self.marker > 0.0).then(|| self.marker_pattern());
        let mut pixels = Vec::with_capacity(self.frames * self.frame_len());
        for t in 0..self.frames {
            let base: Vec<f64> = if salient.contains(&t) {
                match &marker {
                    Some(m) => templates[label].iter().zip(m).map(|(&a, &b)| a + self.marker * b).collect(),
                    None => templates[label].clone(),
                }
            } else if self.distractor > 0.0 {
                self.grid_pattern(self.template_cells, rng).iter().map(|&v| self.distractor * v).collect()
            } else {
                vec![0.0; self.frame_len()]
            };
            pixels.extend(base.iter().map(|&b| b + self.noise * rng.normal()));
        }
        VideoSample { pixels, label, salient }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    /// `[T, C, H, W]` row-major.
    pub pixels: Vec<f64>,
    pub label: usize,
    pub salient: Vec<usize>,
}

/// Frames `[B, T, C, H, W]` with labels and planted salient frames.
#[derive(Clone, Debug)]
pub struct VideoBatch<T: Element> {
    pub frames: Tensor<T>,
    pub labels: Vec<usize>,
    pub salient: Vec<Vec<usize>>,
}

impl<T: Element> VideoBatch<T> {
    pub fn from_samples(spec: &SyntheticVideoSpec, samples: &[&VideoSample]) -> Result<Self> {
        let data: Vec<T> = samples.iter().flat_map(|s| s.pixels.iter().map(|&v| T::from_f64_lossy(v))).collect();
        let (r, c) = (spec.resolution, spec.channels);
        Ok(Self {
            frames: Tensor::from_vec(data, &[samples.len(), spec.frames, c, r, r])?,
            labels: samples.iter().map(|s| s.label).collect(),
            salient: samples.iter().map(|s| s.salient.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn make_synthetic_batch<T: Element>(spec: &SyntheticVideoSpec, size: usize, rng: &mut RngState) -> Result<VideoBatch<T>> {
    let templates = spec.templates()?;
    let samples: Vec<VideoSample> = (0..size).map(|_| spec.sample(&templates, rng)).collect();
    VideoBatch::from_samples(spec, &samples.iter().collect::<Vec<_>>())
}

/// A fixed sample set; sample `i` is drawn from its own stream `(seed, i)`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SyntheticVideoSpec,
    pub samples: Vec<VideoSample>,
}

impl Dataset {
    pub fn generate(spec: &SyntheticVideoSpec, size: usize, seed: u64) -> Result<Self> {
        let templates = spec.templates()?;
        let samples = (0..size).map(|i| spec.sample(&templates, &mut RngState::derive(seed, i as u64))).collect();
        Ok(Self { spec: spec.clone(), samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch<T: Element>(&self, indices: &[usize]) -> Result<VideoBatch<T>> {
        VideoBatch::from_samples(&self.spec, &indices.iter().map(|&i| &self.samples[i]).collect::<Vec<_>>())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Navigation,
    Random,
    Uniform,
    Normal,
    /// All frames, with only the central cells of each frame active.
    CenterCrop,
}

impl Policy {
    pub const ALL: [Policy; 5] = [Policy::Navigation, Policy::Random, Policy::Uniform, Policy::Normal, Policy::CenterCrop];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Navigation => "navigation",
            Policy::Random => "random",
            Policy::Uniform => "uniform",
            Policy::Normal => "normal",
            Policy::CenterCrop => "center_crop",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}; expected one of navigation, random, uniform, normal, center_crop")))
    }
}

/// `round(ratio * n)`.
pub fn selected_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).min(n)
}

/// Frame indices chosen by a fixed policy for one video.
pub fn policy_frames(policy: Policy, frames: usize, ratio: f64, rng: &mut RngState) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid("fixed_policy_mask", format!("ratio must lie in (0, 1], got {ratio}")));
    }
    let k = selected_count(frames, ratio);
    Ok(match policy {
        Policy::Navigation => return Err(Error::invalid("fixed_policy_mask", "navigation is not a fixed policy")),
        Policy::CenterCrop => (0..frames).collect(),
        _ if k == frames => (0..frames).collect(),
        Policy::Random => rng.subset(frames, k),
        Policy::Uniform => (0..k).map(|i| i * frames / k).collect(),
        Policy::Normal => {
            // Sequential draws without replacement, each from the remaining
            // frames in proportion to their mass under round(N(centre, 1)).
            // Equivalent to rejecting repeats, but never stalls for large T.
            let centre = (frames as f64 - 1.0) / 2.0;
            let mut mass: Vec<f64> = (0..frames).map(|t| cell_mass(t as f64 - centre)).collect();
            let mut picked = Vec::with_capacity(k);
            while picked.len() < k {
                let total: f64 = mass.iter().sum();
                let t = if total > 0.0 {
                    let mut u = rng.uniform() * total;
                    let mut chosen = None;
                    for (t, &m) in mass.iter().enumerate() {
                        if m > 0.0 {
                            chosen = Some(t);
                            if u < m {
                                break;
                            }
                            u -= m;
                        }
                    }
                    chosen.expect("positive total mass")
                } else {
                    // every remaining frame is beyond f64 tail resolution
                    (0..frames).filter(|t| !picked.contains(t)).min_by(|&a, &b| (a as f64 - centre).abs().total_cmp(&(b as f64 - centre).abs())).expect("k <= T")
                };
                mass[t] = 0.0;
                picked.push(t);
            }
            picked.sort_unstable();
            picked
        }
    })
}

/// Standard normal mass of `[d - 1/2, d + 1/2)`, computed on the near side
/// of the tail so far cells keep their relative precision.
fn cell_mass(d: f64) -> f64 {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let (lo, hi) = (d - 0.5, d + 0.5);
    if lo >= 0.0 {
        0.5 * (libm::erfc(lo * h) - libm::erfc(hi * h))
    } else if hi <= 0.0 {
        0.5 * (libm::erfc(-hi * h) - libm::erfc(-lo * h))
    } else {
        1.0 - 0.5 * (libm::erfc(-lo * h) + libm::erfc(hi * h))
    }
}

/// `[videos * T]` mask drawn independently per video.
pub fn fixed_policy_mask<T: Element>(policy: Policy, frames: usize, ratio: f64, videos: usize, rng: &mut RngState) -> Result<TemporalMask<T>> {
    let mut hard = vec![T::zero(); videos * frames];
    for v in 0..videos {
        for t in policy_frames(policy, frames, ratio, rng)? {
            hard[v * frames + t] = T::one();
        }
    }
    TemporalMask::constant(hard)
}

/// The `round(ratio * G^2)` cells nearest the grid centre, as a `[G*G]` mask.
pub fn center_crop_cells<T: Element>(grid: usize, ratio: f64) -> Vec<T> {
    let k = selected_count(grid * grid, ratio);
    let c = (grid as f64 - 1.0) / 2.0;
    let mut order: Vec<usize> = (0..grid * grid).collect();
    let dist = |i: usize| {
        let (y, x) = ((i / grid) as f64 - c, (i % grid) as f64 - c);
        y * y + x * x
    };
    order.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
    let mut cells = vec![T::zero(); grid * grid];
    for &i in &order[..k] {
        cells[i] = T::one();
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Target ratio of selected frames.
    pub rt: f64,
    /// Target ratio of active regions.
    #[serde(default = "unit")]
    pub rs: f64,
    pub lambda: f64,
    pub lr: f64,
    #[serde(default = "momentum")]
    pub momentum: f64,
    #[serde(default = "weight_decay")]
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "navigation")]
    pub policy: Policy,
    /// Replace Gumbel sampling by the navigator's softmax weights.
    #[serde(default)]
    pub soft_weights: bool,
    /// Steps over which the region target ramps from 1 to `rs`.
    #[serde(default)]
    pub rs_warm_steps: u64,
    /// Epoch fractions after which the learning rate drops by `lr_decay`.
    #[serde(default = "milestones")]
    pub lr_milestones: Vec<f64>,
    #[serde(default = "lr_decay")]
    pub lr_decay: f64,
    /// Set from the experiment seed; not part of the serialized section.
    #[serde(skip)]
    pub seed: u64,
}

fn unit() -> f64 {
    1.0
}
fn momentum() -> f64 {
    0.9
}
fn weight_decay() -> f64 {
    1e-4
}
fn navigation() -> Policy {
    Policy::Navigation
}
fn milestones() -> Vec<f64> {
    vec![0.6, 0.9]
}
fn lr_decay() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rt: 0.5,
            rs: 1.0,
            lambda: 1.0,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 32,
            policy: Policy::Navigation,
            soft_weights: false,
            rs_warm_steps: 0,
            lr_milestones: milestones(),
            lr_decay: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Config(format!("training: {d}")));
        if !(self.rt > 0.0 && self.rt <= 1.0) || !(self.rs > 0.0 && self.rs <= 1.0) {
            return bad(format!("rt and rs must lie in (0, 1], got {} and {}", self.rt, self.rs));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for batch statistics".into());
        }
        if !(self.lr >= 0.0 && self.lambda >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return bad("lr, lambda, momentum and weight_decay must be nonnegative".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch as f64 >= (m * self.epochs as f64).round()).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    /// Penalty weight actually applied: fixed policies have nothing to regularize.
    pub fn effective_lambda(&self) -> f64 {
        if self.policy == Policy::Navigation || self.policy == Policy::CenterCrop {
            self.lambda
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub accuracy: f64,
    pub ce: f64,
    pub ratio_penalty: f64,
    /// Hard selected-frame ratio per navigated block.
    pub rt_blocks: Vec<f64>,
    pub tau: f64,
    /// Fraction of selected frames that are planted salient frames.
    pub precision_salient: f64,
}

/// Running sums over batches.
#[derive(Default)]
struct Tally {
    videos: usize,
    correct: usize,
    ce: f64,
    penalty: f64,
    batches: usize,
    selected: Vec<f64>,
    rows: Vec<f64>,
    hits: f64,
    picks: f64,
}

impl Tally {
    fn add<T: Element>(&mut self, batch: &VideoBatch<T>, pred: &Prediction<T>, traces: &[StageTrace<T>], loss: Option<&LossBreakdown>) {
        self.videos += batch.len();
        self.correct += pred.predicted().iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        self.batches += 1;
        if let Some(l) = loss {
            self.ce += l.cross_entropy;
            self.penalty += l.penalty();
        }
        let masks: Vec<&TemporalMask<T>> = traces.iter().flat_map(|t| &t.masks).collect();
        self.selected.resize(masks.len(), 0.0);
        self.rows.resize(masks.len(), 0.0);
        for (n, m) in masks.iter().enumerate() {
            let frames = m.len() / batch.len();
            for (i, &h) in m.hard.iter().enumerate() {
                let h = h.as_f64();
                self.selected[n] += h;
                self.picks += h;
                if batch.salient[i / frames].contains(&(i % frames)) {
                    self.hits += h;
                }
            }
            self.rows[n] += m.len() as f64;
        }
    }

    fn finish(self, epoch: usize, split: Split, tau: f64) -> EpochMetrics {
        let nb = self.batches.max(1) as f64;
        EpochMetrics {
            epoch,
            split,
            accuracy: self.correct as f64 / self.videos.max(1) as f64,
            ce: self.ce / nb,
            ratio_penalty: self.penalty / nb,
            rt_blocks: self.selected.iter().zip(&self.rows).map(|(s, r)| s / r).collect(),
            tau,
            precision_salient: if self.picks > 0.0 { self.hits / self.picks } else { 0.0 },
        }
    }
}

/// Optimisation state that a checkpoint must carry to resume exactly.
#[derive(Clone, Debug)]
pub struct Trainer<T: Element> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub schedule: TemperatureSchedule,
    pub optimizer: Sgd<T>,
    /// Completed optimisation steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Gumbel noise and random policy draws during training.
    pub rng: RngState,
}

/// Stream offsets separating the derived streams of one seed.
const SHUFFLE_STREAM: u64 = 1 << 40;
const EVAL_STREAM: u64 = 2 << 40;

impl<T: Element> Trainer<T> {
    /// `steps_per_epoch` sizes the temperature schedule.
    pub fn new(model: Model<T>, config: TrainConfig, mut schedule: TemperatureSchedule, train_size: usize) -> Result<Self> {
        config.validate()?;
        schedule.total_steps = (config.epochs * steps_per_epoch(train_size, config.batch_size)) as u64;
        Ok(Self {
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            rng: RngState::derive(config.seed, 0),
            model,
            config,
            schedule,
            step: 0,
            epoch: 0,
        })
    }

    pub fn tau(&self) -> f64 {
        self.schedule.temperature_at(self.step.min(self.schedule.total_steps)).unwrap_or(self.schedule.tau_end)
    }

    fn region_ratio(&self) -> f64 {
        rs_at(self.step, self.config.rs, self.config.rs_warm_steps)
    }

    fn control<'a>(&self, mode: NormMode, frames: &'a [Vec<T>], cells: &'a [T], tau: f64) -> Control<'a, T> {
        let c = &self.config;
        let spatial = self.model.config.spatial.is_some();
        Control {
            mode,
            exec: if mode == NormMode::Train || c.soft_weights { ExecMode::MaskMultiply } else { ExecMode::Gather },
            tau,
            frames: match (c.policy, c.soft_weights) {
                (Policy::Navigation, true) => FramePolicy::SoftWeights,
                (Policy::Navigation, false) => FramePolicy::Navigate,
                _ => FramePolicy::Fixed(frames),
            },
            regions: match c.policy {
                Policy::CenterCrop if spatial => RegionPolicy::Fixed(cells),
                _ if spatial => RegionPolicy::Navigate,
                _ => RegionPolicy::Off,
            },
            theta_override: None,
            shift_fraction: None,
        }
    }

    fn policy_masks(&self, videos: usize, rng: &mut RngState) -> Result<(Vec<Vec<T>>, Vec<T>)> {
        let c = &self.config;
        let frames = self.model.config.frames;
        match c.policy {
            Policy::Navigation => Ok((Vec::new(), Vec::new())),
            Policy::CenterCrop => {
                let grid = self.model.af_stages().find_map(|s| s.config.spatial.map(|sp| sp.grid)).unwrap_or(1);
                Ok((vec![vec![T::one(); videos * frames]], center_crop_cells(grid, c.rs)))
            }
            p => Ok((vec![fixed_policy_mask::<T>(p, frames, c.rt, videos, rng)?.hard], Vec::new())),
        }
    }

    /// One pass over `data` in a seed-dependent order.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        RngState::derive(self.config.seed, SHUFFLE_STREAM + self.epoch as u64).shuffle(&mut order);
        let lr = self.config.lr_at(self.epoch);
        let lambda = self.config.effective_lambda();
        let mut tally = Tally::default();
        let mut tau = self.tau();
        for chunk in order.chunks(self.config.batch_size).filter(|c| c.len() >= 2) {
            tau = self.tau();
            let batch = data.batch::<T>(chunk)?;
            let mut rng = self.rng.clone();
            let (frames, cells) = self.policy_masks(batch.len(), &mut rng)?;
            let ctl = self.control(NormMode::Train, &frames, &cells, tau);
            self.model.zero_grad();
            let (pred, traces) = self.model.forward(&batch.frames, &ctl, &mut rng)?;
            self.rng = rng;
            let (loss, parts) = total_loss(&pred, &batch.labels, &traces, self.config.rt, self.region_ratio(), lambda)?;
            if !parts.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {} step {}: ce {}, penalty {}",
                    self.epoch, self.step, parts.cross_entropy, parts.penalty()
                )));
            }
            loss.backward()?;
            let params: Vec<_> = self.model.parameters().into_iter().filter(|(_, t)| t.grad().is_some()).collect();
            self.optimizer.step(&params, lr)?;
            if let Some((name, _)) = params.iter().find(|(_, t)| t.data().iter().any(|v| !v.as_f64().is_finite())) {
                return Err(Error::Numeric(format!("non-finite parameter {name} after epoch {} step {}", self.epoch, self.step)));
            }
            self.step += 1;
            tally.add(&batch, &pred, &traces, Some(&parts));
        }
        self.epoch += 1;
        Ok(tally.finish(self.epoch - 1, Split::Train, tau))
    }

    /// Evaluation pass: running statistics, deterministic masks.
    pub fn evaluate(&self, data: &Dataset) -> Result<(EpochMetrics, Vec<StageTraceRecord>)> {
        let _g = tensor::no_grad();
        let mut rng = RngState::derive(self.config.seed, EVAL_STREAM);
        let mut tally = Tally::default();
        let mut records = Vec::new();
        let lambda = self.config.effective_lambda();
        let tau = self.tau();
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(self.config.batch_size) {
            let batch = data.batch::<T>(chunk)?;
            let (frames, cells) = self.policy_masks(batch.len(), &mut rng)?;
            let ctl = self.control(NormMode::Eval, &frames, &cells, tau);
            let (pred, traces) = self.model.forward(&batch.frames, &ctl, &mut rng)?;
            if pred.probabilities.iter().any(|p| !p.is_finite()) {
                return Err(Error::Numeric(format!("non-finite class scores in evaluation after epoch {}", self.epoch)));
            }
            let (_, parts) = total_loss(&pred, &batch.labels, &traces, self.config.rt, self.config.rs, lambda)?;
            tally.add(&batch, &pred, &traces, Some(&parts));
            records.extend(StageTraceRecord::from_batch(chunk, &batch, &traces));
        }
        let epoch = self.epoch.saturating_sub(1);
        Ok((tally.finish(epoch, Split::Eval, tau), records))
    }

    /// Trains until `config.epochs`, returning train and eval metrics per epoch.
    pub fn run(&mut self, train: &Dataset, eval: &Dataset) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            history.push(self.train_epoch(train)?);
            history.push(self.evaluate(eval)?.0);
        }
        Ok(history)
    }
}

pub fn steps_per_epoch(train_size: usize, batch_size: usize) -> usize {
    (0..train_size).step_by(batch_size.max(1)).filter(|&s| train_size - s >= 2).count()
}

/// Hard frame selections of one video at every navigated block.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTraceRecord {
    pub sample: usize,
    /// `[block][frame]`, blocks numbered across stages.
    pub selected: Vec<Vec<bool>>,
    pub salient: Vec<usize>,
}

impl StageTraceRecord {
    pub fn from_batch<T: Element>(ids: &[usize], batch: &VideoBatch<T>, traces: &[StageTrace<T>]) -> Vec<Self> {
        ids.iter()
            .enumerate()
            .map(|(v, &sample)| StageTraceRecord {
                sample,
                selected: traces
                    .iter()
                    .flat_map(|t| {
                        t.masks.iter().map(move |m| m.hard[v * t.frames..(v + 1) * t.frames].iter().map(|h| h.as_f64() > 0.5).collect())
                    })
                    .collect(),
                salient: batch.salient[v].clone(),
            })
            .collect()
    }
}

/// Builds a trainer and runs it to completion.
pub fn train<T: Element>(
    model: Model<T>,
    train_data: &Dataset,
    eval_data: &Dataset,
    config: TrainConfig,
    schedule: TemperatureSchedule,
) -> Result<(Model<T>, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(model, config, schedule, train_data.len())?;
    let history = trainer.run(train_data, eval_data)?;
    Ok((trainer.model, history))
}
