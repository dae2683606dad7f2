//! Product-form reconstruction of a stage, multiply-add cost model and
//! frame-selection statistics.
//!
//! Inside a stage whose blocks after the first keep their shape, block n
//! updates `v_n = v_{n-1} + L_n F_n(v_{n-1})`. Writing
//! `dv_n = F_n(v_{n-1}) / v_{n-1}` elementwise gives
//! `v_N = v_1 * prod_n (1 + L_n dv_n)`, so each branch output is its first
//! block's output reweighted by per-frame coefficients.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::ResidualBlock;
use crate::model::{Model, ModelConfig, ModelKind, Stage, StageSpec};
use crate::navigation::TemporalMask;
use crate::rng::RngState;
use crate::stage::{AFStage, Control, ExecMode, FramePolicy, RegionPolicy};
use crate::tensor::{nearest_upsample, no_grad, Element, NormMode, Tensor};
use crate::training::StageTraceRecord;

/// Smallest feature magnitude the elementwise ratio is taken over.
pub const DIVISION_GUARD: f64 = 1e-6;

/// Multiplicative form of both branches of one stage.
#[derive(Clone, Debug)]
pub struct EffectiveWeights {
    pub shape_ample: Vec<usize>,
    pub shape_focal: Vec<usize>,
    /// First-block outputs `v_1` of each branch.
    pub ample_base: Vec<f64>,
    pub focal_base: Vec<f64>,
    /// `dv_n` for blocks `1..N`.
    pub ample_increments: Vec<Vec<f64>>,
    pub focal_increments: Vec<Vec<f64>>,
    /// `prod_n (1 + dv_n^a)`.
    pub ample: Vec<f64>,
    /// `prod_n (1 + L_n dv_n^f)`.
    pub focal: Vec<f64>,
}

fn ratio(op: &'static str, inc: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    inc.iter()
        .zip(v)
        .map(|(&f, &x)| {
            if x.abs() > DIVISION_GUARD {
                Ok(f / x)
            } else {
                Err(Error::Degenerate(format!("{op}: feature magnitude {x:e} below {DIVISION_GUARD:e}")))
            }
        })
        .collect()
}

fn check_product_region<T: Element>(stage: &AFStage<T>) -> Result<()> {
    let bad = stage.ample[1..].iter().chain(&stage.focal[1..]).any(|b| !b.is_shape_preserving());
    if bad {
        return Err(Error::invalid("effective_weights", "blocks after the first must preserve shape"));
    }
    Ok(())
}

/// Per-frame weights `[B*T]` for each block.
fn mask_values<T: Element>(masks: &[Vec<f64>], blocks: usize, rows: usize) -> Result<Vec<TemporalMask<T>>> {
    if masks.len() != blocks {
        return Err(Error::dim("effective_weights", "blocks", format!("{} masks for {blocks} blocks", masks.len())));
    }
    masks
        .iter()
        .map(|m| {
            if m.len() != rows {
                return Err(Error::dim("effective_weights", 0, format!("mask length {} vs {rows} frames", m.len())));
            }
            TemporalMask::constant(m.iter().map(|&v| T::from_f64_lossy(v)).collect())
        })
        .collect()
}

/// Runs both branches block by block in eval mode and factors each into
/// its first-block output and the product of `1 + L_n dv_n`.
pub fn effective_weights<T: Element>(stage: &AFStage<T>, input: &Tensor<T>, masks: &[Vec<f64>]) -> Result<EffectiveWeights> {
    check_product_region(stage)?;
    let _g = no_grad();
    let mode = NormMode::Eval;
    let rows = input.shape()[0];
    let masks = mask_values::<T>(masks, stage.num_blocks(), rows)?;

    let mut a = stage.ample[0].forward(input, mode)?;
    let ample_base = a.to_f64_vec();
    let mut ample = vec![1.0; a.numel()];
    let mut ample_increments = Vec::new();
    for block in &stage.ample[1..] {
        let f = block.residual(&a, mode)?;
        let dv = ratio("ample", &f.to_f64_vec(), &a.to_f64_vec())?;
        ample.iter_mut().zip(&dv).for_each(|(p, d)| *p *= 1.0 + d);
        a = crate::tensor::add(&a, &f)?;
        ample_increments.push(dv);
    }

    let ctl = Control::<T> { exec: ExecMode::MaskMultiply, ..Control::eval() };
    let mut v = stage.focal_block(0, input, &masks[0], None, &ctl)?;
    let focal_base = v.to_f64_vec();
    let per_frame = v.numel() / rows;
    let mut focal = vec![1.0; v.numel()];
    let mut focal_increments = Vec::new();
    for (n, block) in stage.focal.iter().enumerate().skip(1) {
        let f = block.residual(&v, mode)?;
        let dv = ratio("focal", &f.to_f64_vec(), &v.to_f64_vec())?;
        let l = &masks[n].hard;
        focal.iter_mut().zip(&dv).enumerate().for_each(|(i, (p, d))| *p *= 1.0 + l[i / per_frame].as_f64() * d);
        v = stage.focal_block(n, &v, &masks[n], None, &ctl)?;
        focal_increments.push(dv);
    }

    Ok(EffectiveWeights {
        shape_ample: a.shape().to_vec(),
        shape_focal: v.shape().to_vec(),
        ample_base,
        focal_base,
        ample_increments,
        focal_increments,
        ample,
        focal,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProductFormReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the stage output with `theta * up(proj(v_1^a * P^a)) +
/// (1 - theta) * v_1^f * P^f`, theta broadcast over frames and pixels.
/// `theta` overrides the fusion weight when given; otherwise the learned
/// head's value from the direct pass is used.
pub fn verify_product_form<T: Element>(
    stage: &AFStage<T>,
    input: &Tensor<T>,
    masks: &[Vec<f64>],
    theta: Option<f64>,
    tol: f64,
) -> Result<ProductFormReport> {
    let w = effective_weights(stage, input, masks)?;
    let _g = no_grad();
    let consts = mask_values::<T>(masks, stage.num_blocks(), input.shape()[0])?;
    let fixed: Vec<Vec<T>> = consts.iter().map(|m| m.hard.clone()).collect();
    let ctl = Control {
        exec: ExecMode::MaskMultiply,
        frames: FramePolicy::Fixed(&fixed),
        regions: RegionPolicy::Off,
        theta_override: theta,
        ..Control::eval()
    };
    let (direct, trace) = stage.forward(input, &ctl, &mut RngState::new(0))?;
    let direct = direct.to_f64_vec();

    let a_n: Vec<f64> = w.ample_base.iter().zip(&w.ample).map(|(v, p)| v * p).collect();
    let a_t = Tensor::<T>::from_vec(a_n.iter().map(|&v| T::from_f64_lossy(v)).collect(), &w.shape_ample)?;
    let up = nearest_upsample(&stage.projection.forward(&a_t)?, 2)?.to_f64_vec();
    let s = &w.shape_focal;
    let (c, plane) = (s[1], s[2] * s[3]);
    let per_video = stage.frames * c * plane;
    let mut report = ProductFormReport { max_rel_err: 0.0, max_abs_err: 0.0, entries: direct.len(), tolerance: tol, passed: false };
    for (i, d) in direct.iter().enumerate() {
        let th = trace.theta[(i / per_video) * c + (i / plane) % c];
        let p = th * up[i] + (1.0 - th) * w.focal_base[i] * w.focal[i];
        let abs = (d - p).abs();
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(abs / d.abs().max(f64::MIN_POSITIVE));
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

/// Multiply-adds of one navigated block, per video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockCost {
    pub stage: usize,
    pub block: usize,
    pub ample: u64,
    /// Full-frame cost of the focal main path, before any selection.
    pub focal_main: u64,
    pub focal_shortcut: u64,
    pub navigation: u64,
    pub region_navigation: u64,
}

/// Multiply-adds per video. One MAC counts as two FLOPs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub frames: usize,
    pub rt: f64,
    pub rs: f64,
    pub spatial: bool,
    pub stem: u64,
    pub blocks: Vec<BlockCost>,
    /// Projection plus fusion head per ample/focal stage.
    pub fusion: Vec<u64>,
    pub plain: u64,
    pub classifier: u64,
    /// Everything not scaled by the selection ratios.
    pub fixed: u64,
    /// Sum of all `focal_main` entries.
    pub focal_main: u64,
    /// `fixed + rt * rs * focal_main` (`rs` only with region gates).
    pub total: f64,
    /// All frames through plain full-width stages.
    pub baseline: u64,
}

impl CostReport {
    pub fn selected_fraction(&self) -> f64 {
        self.rt * if self.spatial { self.rs } else { 1.0 }
    }

    pub fn ratio_to_baseline(&self) -> f64 {
        self.total / self.baseline as f64
    }

    /// Cost under recorded per-block selected fractions.
    pub fn realized(&self, fractions: &[f64]) -> Result<f64> {
        if fractions.len() != self.blocks.len() {
            return Err(Error::dim("realized_cost", "blocks", format!("{} fractions for {} blocks", fractions.len(), self.blocks.len())));
        }
        let region = if self.spatial { self.rs } else { 1.0 };
        Ok(self.fixed as f64 + self.blocks.iter().zip(fractions).map(|(b, f)| f * region * b.focal_main as f64).sum::<f64>())
    }

    pub fn gflops(&self) -> f64 {
        2.0 * self.total / 1e9
    }
}

fn residual_macs<T: Element>(b: &ResidualBlock<T>, extent: usize) -> (u64, u64) {
    b.macs(extent, extent)
}

/// Analytic multiply-add count for `config` at ratios `(rt, rs)`.
pub fn count_flops(config: &ModelConfig, rt: f64, rs: f64) -> Result<CostReport> {
    let model = Model::<f32>::build(config.clone(), &mut RngState::new(0))?;
    let t = config.frames as u64;
    let inputs = config.stage_inputs();
    let r = config.resolution;
    let stem = model.stem.conv.macs(r, r) * t;
    let mut blocks = Vec::new();
    let mut fusion = Vec::new();
    let mut plain = 0;
    for (i, stage) in model.stages.iter().enumerate() {
        let e = inputs[i].1;
        match stage {
            Stage::AF(s) => {
                let stride = s.config.stride;
                let (ae, fe) = (e / (2 * stride), (e - 1) / stride + 1);
                let ca = s.config.ample_channels();
                for n in 0..s.num_blocks() {
                    let (ai, fi) = if n == 0 { (e, e) } else { (ae, fe) };
                    let (am, ash) = residual_macs(&s.ample[n], ai);
                    let (fm, fsh) = residual_macs(&s.focal[n], fi);
                    let region = s.spatial.get(n).map_or(0, |sp| sp.macs_per_frame(ae, ae) * t);
                    blocks.push(BlockCost {
                        stage: i,
                        block: n,
                        ample: (am + ash) * t,
                        focal_main: fm * t,
                        focal_shortcut: fsh * t,
                        navigation: s.navigators[n].macs_per_video(ca),
                        region_navigation: region,
                    });
                }
                fusion.push(s.projection.macs(ae, ae) * t + s.head.linear.macs());
            }
            Stage::Plain(bs) => {
                let mut ext = e;
                for b in bs {
                    let (m, sh) = residual_macs(b, ext);
                    plain += (m + sh) * t;
                    ext = b.output_extent(ext);
                }
            }
        }
    }
    let classifier = model.classifier.macs() * t;
    let focal_main: u64 = blocks.iter().map(|b| b.focal_main).sum();
    let fixed = stem
        + blocks.iter().map(|b| b.ample + b.focal_shortcut + b.navigation + b.region_navigation).sum::<u64>()
        + fusion.iter().sum::<u64>()
        + plain
        + classifier;
    let spatial = model.af_stages().any(|s| !s.spatial.is_empty());
    let mut report = CostReport {
        frames: config.frames,
        rt,
        rs,
        spatial,
        stem,
        blocks,
        fusion,
        plain,
        classifier,
        fixed,
        focal_main,
        total: 0.0,
        baseline: 0,
    };
    report.total = fixed as f64 + report.selected_fraction() * focal_main as f64;
    report.baseline = baseline_macs(config)?;
    Ok(report)
}

/// The same stage widths as plain, ungrouped stages over every frame.
pub fn baseline_config(config: &ModelConfig) -> ModelConfig {
    ModelConfig {
        kind: ModelKind::Tsn,
        stages: config.stages.iter().map(|s| StageSpec { af: false, groups: 1, ..s.clone() }).collect(),
        spatial: None,
        ..config.clone()
    }
}

fn baseline_macs(config: &ModelConfig) -> Result<u64> {
    let base = baseline_config(config);
    let model = Model::<f32>::build(base.clone(), &mut RngState::new(0))?;
    let t = base.frames as u64;
    let mut total = model.stem.conv.macs(base.resolution, base.resolution) * t;
    for (stage, (_, e)) in model.stages.iter().zip(base.stage_inputs()) {
        if let Stage::Plain(bs) = stage {
            let mut ext = e;
            for b in bs {
                let (m, sh) = b.macs(ext, ext);
                total += (m + sh) * t;
                ext = b.output_extent(ext);
            }
        }
    }
    Ok(total + model.classifier.macs() * t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionStats {
    /// Hard selected-frame ratio per block, averaged over samples.
    pub rt_mean: Vec<f64>,
    pub rt_std: Vec<f64>,
    /// `[block][frame]` selection frequency.
    pub frame_frequency: Vec<Vec<f64>>,
    /// Selected frames that are salient, over all selected frames.
    pub precision: Option<f64>,
    /// Salient frames that are selected, over all salient frames.
    pub recall: Option<f64>,
    /// Cubic trend of `rt_mean` over block index, lowest degree first.
    pub trend: Vec<f64>,
}

impl SelectionStats {
    /// Mean slope of the fitted trend between the first and last block.
    pub fn trend_slope(&self) -> f64 {
        let n = self.rt_mean.len();
        if n < 2 {
            return 0.0;
        }
        (polyval(&self.trend, (n - 1) as f64) - polyval(&self.trend, 0.0)) / (n - 1) as f64
    }
}

pub fn polyval(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap_or(col);
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::Numeric("singular system in polynomial fit".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}

/// Least-squares polynomial of `degree`; with fewer points than
/// coefficients, the minimum-norm interpolant.
pub fn fit_polynomial(xs: &[f64], ys: &[f64], degree: usize) -> Result<Vec<f64>> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::invalid("fit_polynomial", "need matching, nonempty abscissae and values"));
    }
    let p = degree + 1;
    let rows: Vec<Vec<f64>> = xs.iter().map(|&x| (0..p).map(|k| x.powi(k as i32)).collect()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    if xs.len() <= p {
        // c = X^T (X X^T)^{-1} y
        let gram: Vec<Vec<f64>> = rows.iter().map(|r| rows.iter().map(|s| dot(r, s)).collect()).collect();
        let z = solve(gram, ys.to_vec())?;
        Ok((0..p).map(|k| rows.iter().zip(&z).map(|(r, zi)| r[k] * zi).sum()).collect())
    } else {
        let cols: Vec<Vec<f64>> = (0..p).map(|k| rows.iter().map(|r| r[k]).collect()).collect();
        let gram: Vec<Vec<f64>> = cols.iter().map(|a| cols.iter().map(|b| dot(a, b)).collect()).collect();
        let rhs: Vec<f64> = cols.iter().map(|c| dot(c, ys)).collect();
        solve(gram, rhs)
    }
}

pub fn selection_stats(records: &[StageTraceRecord]) -> Result<SelectionStats> {
    let first = records.first().ok_or_else(|| Error::invalid("selection_stats", "no traces"))?;
    let blocks = first.selected.len();
    let frames = first.selected.first().map_or(0, |b| b.len());
    let mut rt_mean = vec![0.0; blocks];
    let mut rt_sq = vec![0.0; blocks];
    let mut freq = vec![vec![0.0; frames]; blocks];
    let (mut hits, mut picks, mut planted) = (0.0, 0.0, 0.0);
    for r in records {
        if r.selected.len() != blocks {
            return Err(Error::dim("selection_stats", "blocks", "records disagree on block count".to_string()));
        }
        for (n, sel) in r.selected.iter().enumerate() {
            let k = sel.iter().filter(|&&s| s).count() as f64;
            let ratio = k / frames as f64;
            rt_mean[n] += ratio;
            rt_sq[n] += ratio * ratio;
            for (t, &s) in sel.iter().enumerate() {
                if s {
                    freq[n][t] += 1.0;
                    picks += 1.0;
                    if r.salient.contains(&t) {
                        hits += 1.0;
                    }
                }
            }
            planted += r.salient.len() as f64;
        }
    }
    let m = records.len() as f64;
    let rt_std = rt_mean.iter().zip(&rt_sq).map(|(s, q)| ((q / m) - (s / m).powi(2)).max(0.0).sqrt()).collect();
    rt_mean.iter_mut().for_each(|v| *v /= m);
    freq.iter_mut().flatten().for_each(|v| *v /= m);
    let xs: Vec<f64> = (0..blocks).map(|i| i as f64).collect();
    let trend = if blocks == 0 { Vec::new() } else { fit_polynomial(&xs, &rt_mean, 3)? };
    Ok(SelectionStats {
        rt_mean,
        rt_std,
        frame_frequency: freq,
        precision: (picks > 0.0 && planted > 0.0).then(|| hits / picks),
        recall: (planted > 0.0).then(|| hits / planted),
        trend,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// `sample_id, block, frame, selected`.
pub fn export_selection(records: &[StageTraceRecord], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["sample_id", "block", "frame", "selected"]).map_err(csv_err)?;
    for r in records {
        for (n, sel) in r.selected.iter().enumerate() {
            for (t, &s) in sel.iter().enumerate() {
                w.write_record([r.sample.to_string(), n.to_string(), t.to_string(), (s as u8).to_string()]).map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `block, branch, macs`; the closing `total` rows give the expected cost
/// under the report's ratios (multiply-adds; 1 MAC = 2 FLOPs).
pub fn export_cost(report: &CostReport, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["block", "branch", "macs"]).map_err(csv_err)?;
    let mut row = |b: &str, br: &str, v: String| w.write_record([b, br, &v]).map_err(csv_err);
    row("stem", "stem", report.stem.to_string())?;
    for b in &report.blocks {
        let id = format!("s{}b{}", b.stage, b.block);
        row(&id, "ample", b.ample.to_string())?;
        row(&id, "focal_main", b.focal_main.to_string())?;
        row(&id, "focal_shortcut", b.focal_shortcut.to_string())?;
        row(&id, "navigation", b.navigation.to_string())?;
        row(&id, "region_navigation", b.region_navigation.to_string())?;
    }
    for (i, f) in report.fusion.iter().enumerate() {
        row(&format!("s{i}"), "fusion", f.to_string())?;
    }
    row("plain", "plain", report.plain.to_string())?;
    row("classifier", "classifier", report.classifier.to_string())?;
    row("total", "fixed", report.fixed.to_string())?;
    row("total", "focal_main_full", report.focal_main.to_string())?;
    row("total", "expected", format!("{}", report.total))?;
    row("total", "baseline", report.baseline.to_string())?;
    w.flush()?;
    Ok(())
}

/// `block, rt_mean, rt_std`.
pub fn export_stats(stats: &SelectionStats, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["block", "rt_mean", "rt_std"]).map_err(csv_err)?;
    for (n, (m, s)) in stats.rt_mean.iter().zip(&stats.rt_std).enumerate() {
        w.write_record([n.to_string(), format!("{m}"), format!("{s}")]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Human-readable cost summary.
pub fn write_cost_summary(report: &CostReport, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "multiply-adds per video (1 MAC = 2 FLOPs), RT = {}, RS = {}", report.rt, report.rs)?;
    writeln!(out, "fixed {}  focal main at full selection {}", report.fixed, report.focal_main)?;
    writeln!(out, "expected {:.0} ({:.6} GFLOPs), baseline {} , ratio {:.4}", report.total, report.gflops(), report.baseline, report.ratio_to_baseline())
}
