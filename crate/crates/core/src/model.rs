//! Whole networks: stem, ample/focal stages, plain stages and a per-frame
//! classifier whose outputs are averaged over the frames of each video.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, BlockKind, ConvBn, Linear, Module, ResidualBlock, Role};
use crate::rng::RngState;
use crate::stage::{AFStage, AFStageConfig, Control, FusionMode, SpatialConfig, StageTrace};
use crate::tensor::{self, global_avg_pool, softmax, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Stages flagged `af` become ample/focal stages.
    AfNet,
    /// Every stage is a plain residual stage applied to all frames.
    Tsn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub out_channels: usize,
    pub num_blocks: usize,
    pub stride: usize,
    #[serde(default)]
    pub af: bool,
    /// Convolution groups for a plain stage's main path.
    #[serde(default = "one")]
    pub groups: usize,
}

fn one() -> usize {
    1
}

impl StageSpec {
    pub fn af(out_channels: usize, num_blocks: usize, stride: usize) -> Self {
        Self { out_channels, num_blocks, stride, af: true, groups: 1 }
    }

    pub fn plain(out_channels: usize, num_blocks: usize, stride: usize) -> Self {
        Self { out_channels, num_blocks, stride, af: false, groups: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub frames: usize,
    pub in_channels: usize,
    pub resolution: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub classes: usize,
    #[serde(default = "bottleneck")]
    pub block: BlockKind,
    #[serde(default = "dynamic")]
    pub fusion: FusionMode,
    #[serde(default = "two")]
    pub focal_groups: usize,
    #[serde(default)]
    pub spatial: Option<SpatialConfig>,
    #[serde(default)]
    pub shift_enabled: bool,
    #[serde(default = "eighth")]
    pub shift_fraction: f64,
}

fn bottleneck() -> BlockKind {
    BlockKind::Bottleneck
}
fn dynamic() -> FusionMode {
    FusionMode::Dynamic
}
fn two() -> usize {
    2
}
fn eighth() -> f64 {
    0.125
}

impl ModelConfig {
    /// Eight 32x32 frames, two ample/focal stages and one plain stage.
    pub fn desk() -> Self {
        Self {
            kind: ModelKind::AfNet,
            frames: 8,
            in_channels: 3,
            resolution: 32,
            stem_channels: 32,
            stages: vec![StageSpec::af(64, 2, 2), StageSpec::af(128, 2, 2), StageSpec::plain(128, 1, 2)],
            classes: 4,
            block: BlockKind::Bottleneck,
            fusion: FusionMode::Dynamic,
            focal_groups: 2,
            spatial: None,
            shift_enabled: false,
            shift_fraction: 0.125,
        }
    }

    /// The same layout at 16x16 and reduced width, sized for a single core.
    pub fn compact() -> Self {
        Self {
            resolution: 16,
            stem_channels: 16,
            stages: vec![StageSpec::af(32, 2, 1), StageSpec::af(64, 2, 2), StageSpec::plain(64, 1, 2)],
            ..Self::desk()
        }
    }

    pub fn shift(&self) -> Option<f64> {
        self.shift_enabled.then_some(self.shift_fraction)
    }

    pub fn is_af(&self, stage: usize) -> bool {
        self.kind == ModelKind::AfNet && self.stages[stage].af
    }

    /// Config of stage `i` as an ample/focal stage, given its input width and extent.
    pub fn af_stage_config(&self, i: usize, in_channels: usize, extent: usize) -> AFStageConfig {
        let s = &self.stages[i];
        let spatial = self.spatial.map(|sp| {
            let ample = extent / (2 * s.stride);
            SpatialConfig { grid: sp.grid.min(ample).max(1), ..sp }
        });
        AFStageConfig {
            in_channels,
            out_channels: s.out_channels,
            num_blocks: s.num_blocks,
            stride: s.stride,
            focal_groups: self.focal_groups,
            block: self.block,
            fusion: self.fusion,
            spatial,
        }
    }

    /// `(in_channels, in_extent)` of every stage.
    pub fn stage_inputs(&self) -> Vec<(usize, usize)> {
        let (mut c, mut e) = (self.stem_channels, self.resolution);
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            out.push((c, e));
            c = s.out_channels;
            e = (e - 1) / s.stride + 1;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Config(format!("model: {d}")));
        if self.frames == 0 || self.classes < 2 || self.in_channels == 0 || self.stem_channels == 0 {
            return bad("frames, in_channels and stem_channels must be positive and classes at least 2".into());
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.kind == ModelKind::AfNet && !self.stages.iter().any(|s| s.af) {
            return bad("an af_net model needs at least one stage with af = true".into());
        }
        if self.shift_enabled && !(self.shift_fraction > 0.0 && self.shift_fraction <= 0.5) {
            return bad(format!("shift_fraction must lie in (0, 0.5], got {}", self.shift_fraction));
        }
        for (i, &(c, e)) in self.stage_inputs().iter().enumerate() {
            let s = &self.stages[i];
            if self.is_af(i) {
                let cfg = self.af_stage_config(i, c, e);
                cfg.validate().map_err(|err| Error::Config(format!("stage {i}: {err}")))?;
                if e % (2 * s.stride) != 0 {
                    return bad(format!("stage {i}: extent {e} not divisible by ample stride {}", 2 * s.stride));
                }
                if let Some(sp) = cfg.spatial {
                    if (e / (2 * s.stride)) % sp.grid != 0 {
                        return bad(format!("stage {i}: ample extent not divisible by grid {}", sp.grid));
                    }
                }
            } else {
                let mid = self.block.mid_channels(s.out_channels);
                if s.num_blocks == 0 || !(1..=2).contains(&s.stride) || s.groups == 0 || c % s.groups != 0 || mid % s.groups != 0 {
                    return bad(format!("stage {i}: invalid plain stage {s:?} for {c} input channels"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Stage<T: Element> {
    AF(AFStage<T>),
    Plain(Vec<ResidualBlock<T>>),
}

#[derive(Clone, Debug)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub stem: ConvBn<T>,
    pub stages: Vec<Stage<T>>,
    pub classifier: Linear<T>,
}

/// Per-frame and per-video class scores.
#[derive(Clone, Debug)]
pub struct Prediction<T: Element> {
    /// `[B*T, K]`.
    pub frame_logits: Tensor<T>,
    /// `[B, K]`, the frame mean.
    pub video_logits: Tensor<T>,
    /// `[B * K]` softmax of the video logits.
    pub probabilities: Vec<f64>,
}

impl<T: Element> Prediction<T> {
    pub fn predicted(&self) -> Vec<usize> {
        let k = self.video_logits.shape()[1];
        self.probabilities
            .chunks(k)
            .map(|p| (0..k).fold(0, |best, j| if p[j] > p[best] { j } else { best }))
            .collect()
    }
}

impl<T: Element> Model<T> {
    pub fn build(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::new(config.in_channels, config.stem_channels, 3, 1, 1, rng)?;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, &(c, e)) in config.stage_inputs().iter().enumerate() {
            let s = &config.stages[i];
            if config.is_af(i) {
                stages.push(Stage::AF(AFStage::new(config.af_stage_config(i, c, e), config.frames, rng)?));
            } else {
                let mut blocks = Vec::with_capacity(s.num_blocks);
                for n in 0..s.num_blocks {
                    let (cin, stride) = if n == 0 { (c, s.stride) } else { (s.out_channels, 1) };
                    blocks.push(ResidualBlock::new(config.block, cin, s.out_channels, stride, s.groups, rng)?);
                }
                stages.push(Stage::Plain(blocks));
            }
        }
        let width = config.stages.last().map_or(config.stem_channels, |s| s.out_channels);
        let classifier = Linear::new(width, config.classes, rng)?;
        Ok(Self { config, stem, stages, classifier })
    }

    pub fn af_stages(&self) -> impl Iterator<Item = &AFStage<T>> {
        self.stages.iter().filter_map(|s| match s {
            Stage::AF(a) => Some(a),
            Stage::Plain(_) => None,
        })
    }

    /// Navigation-equipped blocks across all stages.
    pub fn af_block_count(&self) -> usize {
        self.af_stages().map(|s| s.num_blocks()).sum()
    }

    /// Per-frame features after the last stage, `[B*T, C, h, w]`.
    pub fn features(&self, frames: &Tensor<T>, ctl: &Control<'_, T>, rng: &mut RngState) -> Result<(Tensor<T>, Vec<StageTrace<T>>)> {
        let s = frames.shape();
        let c = &self.config;
        if s.len() != 5 || s[1] != c.frames || s[2] != c.in_channels || s[3] != c.resolution || s[4] != c.resolution {
            return Err(Error::dim(
                "model_forward",
                "input",
                format!("expected [B, {}, {}, {}, {}], got {s:?}", c.frames, c.in_channels, c.resolution, c.resolution),
            ));
        }
        let ctl = Control { shift_fraction: c.shift(), ..*ctl };
        let mut z = self.stem.forward(&frames.reshape(&[s[0] * s[1], s[2], s[3], s[4]])?, ctl.mode)?.relu();
        let mut traces = Vec::new();
        for stage in &self.stages {
            match stage {
                Stage::AF(a) => {
                    let (out, trace) = a.forward(&z, &ctl, rng)?;
                    z = out;
                    traces.push(trace);
                }
                Stage::Plain(blocks) => {
                    for b in blocks {
                        let carry = b.carry(&z, ctl.mode)?;
                        let input = match ctl.shift_fraction {
                            Some(f) => temporal_shift(&z, c.frames, f)?,
                            None => z.clone(),
                        };
                        z = tensor::add(&carry, &b.residual(&input, ctl.mode)?)?;
                    }
                }
            }
        }
        Ok((z, traces))
    }

    /// Video predictions for `frames: [B, T, C, H, W]`.
    pub fn forward(&self, frames: &Tensor<T>, ctl: &Control<'_, T>, rng: &mut RngState) -> Result<(Prediction<T>, Vec<StageTrace<T>>)> {
        let (b, t) = (frames.shape()[0], frames.shape()[1]);
        let (z, traces) = self.features(frames, ctl, rng)?;
        let width = z.shape()[1];
        let pooled = global_avg_pool(&z)?.reshape(&[b * t, width])?;
        let frame_logits = self.classifier.forward(&pooled)?;
        let k = self.config.classes;
        let video_logits = frame_logits.reshape(&[b, t, k])?.mean_to(&[b, 1, k])?.reshape(&[b, k])?;
        let probabilities = {
            let _g = tensor::no_grad();
            softmax(&video_logits, 1)?.to_f64_vec()
        };
        Ok((Prediction { frame_logits, video_logits, probabilities }, traces))
    }

    /// Copies every parameter and buffer from `other`; names must match.
    pub fn load_state_from(&self, other: &Model<T>) -> Result<()> {
        let src = other.named_tensors();
        let dst = self.named_tensors();
        if src.len() != dst.len() {
            return Err(Error::invalid("load_state", format!("{} tensors vs {}", src.len(), dst.len())));
        }
        for ((sn, st, _), (dn, dt, _)) in src.iter().zip(&dst) {
            if sn != dn || st.shape() != dt.shape() {
                return Err(Error::invalid("load_state", format!("{sn} {:?} vs {dn} {:?}", st.shape(), dt.shape())));
            }
            dt.set_data(&st.data())?;
        }
        Ok(())
    }
}

impl<T: Element> Module<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Role)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stages.{i}"));
            match s {
                Stage::AF(a) => a.visit(&p, f),
                Stage::Plain(blocks) => {
                    for (n, b) in blocks.iter().enumerate() {
                        b.visit(&join(&p, &format!("block{n}")), f);
                    }
                }
            }
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }
}

/// Shifts the first `floor(fraction * C)` channels one frame forward in time
/// (frame `t` receives `t - 1`) and the next as many one frame backward;
/// vacated boundary frames are zero. `x: [B*T, C, H, W]`.
pub fn temporal_shift<T: Element>(x: &Tensor<T>, frames: usize, fraction: f64) -> Result<Tensor<T>> {
    const OP: &str = "temporal_shift";
    let s = x.shape().to_vec();
    if s.len() != 4 || frames == 0 || s[0] % frames != 0 {
        return Err(Error::dim(OP, 0, format!("{s:?} is not [B*T, C, H, W] with T = {frames}")));
    }
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::invalid(OP, format!("fraction must lie in (0, 0.5], got {fraction}")));
    }
    let (c, plane) = (s[1], s[2] * s[3]);
    let fold = (fraction * c as f64).floor() as usize;
    // source row for each (row, channel), or None when zero-filled
    let source = move |row: usize, ch: usize| -> Option<usize> {
        let t = row % frames;
        if ch < fold {
            (t > 0).then(|| row - 1)
        } else if ch < 2 * fold {
            (t + 1 < frames).then(|| row + 1)
        } else {
            Some(row)
        }
    };
    let mut out = vec![T::zero(); x.numel()];
    {
        let d = x.data();
        for row in 0..s[0] {
            for ch in 0..c {
                if let Some(src) = source(row, ch) {
                    let (o, i) = ((row * c + ch) * plane, (src * c + ch) * plane);
                    out[o..o + plane].copy_from_slice(&d[i..i + plane]);
                }
            }
        }
    }
    let (rows, total) = (s[0], x.numel());
    Ok(Tensor::from_op(
        out,
        s,
        OP,
        vec![x.clone()],
        Box::new(move |g| {
            let mut dx = vec![T::zero(); total];
            for row in 0..rows {
                for ch in 0..c {
                    if let Some(src) = source(row, ch) {
                        let (o, i) = ((row * c + ch) * plane, (src * c + ch) * plane);
                        for k in 0..plane {
                            dx[i + k] = dx[i + k] + g[o + k];
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}
