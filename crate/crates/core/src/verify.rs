//! Identity and gradient checks that hold for any weights, trained or not.

use std::io::Write;

use crate::analysis::{count_flops, verify_product_form};
use crate::error::Result;
use crate::gradcheck::{check_gradients, GradCheck};
use crate::layers::Module;
use crate::model::{temporal_shift, Model, ModelConfig, StageSpec};
use crate::navigation::{gumbel_sample, gumbel_sample_with_noise, SELECT};
use crate::rng::RngState;
use crate::stage::{AFStage, AFStageConfig, Control, ExecMode, FramePolicy, RegionPolicy, SpatialConfig};
use crate::tensor::{
    self, avg_pool2d, batchnorm2d, concat, conv2d, cross_entropy, gather_rows, global_avg_pool, linear, max_pool2d, mul,
    nearest_upsample, no_grad, scatter_rows, softmax, BatchNormStats, MacCounter, NormMode, Tensor,
};
use crate::training::total_loss;

pub const GRAD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;
pub const GUMBEL_DRAWS: usize = 100_000;
pub const GUMBEL_TOL: f64 = 0.01;
pub const PRODUCT_TOL: f64 = 1e-6;
pub const EXEC_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured < tolerance`.
    pub fn below(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self { name: name.into(), measured, tolerance, passed: measured < tolerance }
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// One `PASS|FAIL name measured tolerance` line per check.
    pub fn write_text(&self, out: &mut impl Write) -> std::io::Result<()> {
        for c in &self.checks {
            writeln!(out, "{} {} measured={:e} tolerance={:e}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.measured, c.tolerance)?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(std::io::Error::other)?;
        w.write_record(["check", "measured", "tolerance", "passed"]).map_err(std::io::Error::other)?;
        for c in &self.checks {
            w.write_record([c.name.clone(), format!("{:e}", c.measured), format!("{:e}", c.tolerance), c.passed.to_string()])
                .map_err(std::io::Error::other)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Every check in this module.
pub fn run_verify() -> Result<VerifyReport> {
    let mut checks = gradient_suite(7)?;
    checks.push(gumbel_statistics(GUMBEL_DRAWS, 5, 17)?);
    checks.extend(straight_through_contract(23)?);
    checks.push(product_form(10)?);
    checks.push(execution_modes(10)?);
    checks.push(cost_counter(&counter_config())?);
    Ok(VerifyReport { checks })
}

fn normals(rng: &mut RngState, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn param(rng: &mut RngState, shape: &[usize]) -> Result<Tensor<f64>> {
    Tensor::param(normals(rng, shape.iter().product()), shape)
}

/// Entries at least `gap` away from zero, for ops with a kink there.
fn param_off_zero(rng: &mut RngState, shape: &[usize], gap: f64) -> Result<Tensor<f64>> {
    let v = normals(rng, shape.iter().product()).into_iter().map(|x| x + gap.copysign(x)).collect();
    Tensor::param(v, shape)
}

/// Checks `sum(w * f(wrt))` for a fixed random `w`.
fn op_check<F>(name: &str, wrt: &[Tensor<f64>], f: F, rng: &mut RngState) -> Result<Check>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let shape = {
        let _g = no_grad();
        f(wrt)?.shape().to_vec()
    };
    let w = Tensor::from_vec(normals(rng, shape.iter().product()), &shape)?;
    let r = check_gradients(wrt, || Ok(mul(&f(wrt)?, &w)?.sum()), GRAD_STEP)?;
    Ok(Check::below(format!("grad/{name}"), r.max_rel_err, GRAD_TOL))
}

/// Central differences for each differentiable operation and a small
/// end-to-end model including navigation, region gates, fusion, temporal
/// shift and the regularized loss.
pub fn gradient_suite(seed: u64) -> Result<Vec<Check>> {
    let rng = &mut RngState::new(seed);
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, [$($p:expr),*], |$x:ident| $body:expr) => {{
            let wrt = vec![$($p?),*];
            out.push(op_check($name, &wrt, |$x: &[Tensor<f64>]| -> Result<Tensor<f64>> { $body }, rng)?);
        }};
    }
    check!("add", [param(rng, &[2, 3, 4]), param(rng, &[1, 3, 1])], |x| tensor::add(&x[0], &x[1]));
    check!("sub", [param(rng, &[3, 4]), param(rng, &[3, 4])], |x| tensor::sub(&x[0], &x[1]));
    check!("mul", [param(rng, &[2, 3, 4]), param(rng, &[2, 1, 4])], |x| mul(&x[0], &x[1]));
    check!("affine", [param(rng, &[5])], |x| Ok(x[0].scale(1.7).add_scalar(0.3).one_minus()));
    check!("relu", [param_off_zero(rng, &[12], 0.05)], |x| Ok(x[0].relu()));
    check!("sigmoid", [param(rng, &[6])], |x| Ok(x[0].sigmoid()));
    check!("exp", [param(rng, &[6])], |x| Ok(x[0].exp()));
    check!("ln", [param(rng, &[6])], |x| Ok(mul(&x[0], &x[0])?.add_scalar(0.5).ln()));
    check!("clamp_min", [param_off_zero(rng, &[10], 0.05)], |x| Ok(x[0].clamp_min(0.0)));
    check!("sum", [param(rng, &[3, 2])], |x| Ok(x[0].sum()));
    check!("mean", [param(rng, &[3, 2])], |x| Ok(x[0].mean()));
    check!("sum_to", [param(rng, &[2, 3, 4])], |x| x[0].sum_to(&[1, 3, 1]));
    check!("mean_to", [param(rng, &[2, 3, 4])], |x| x[0].mean_to(&[2, 1, 4]));
    check!("permute_reshape", [param(rng, &[2, 3, 4])], |x| x[0].permute(&[2, 0, 1])?.reshape(&[4, 6]));
    check!("narrow", [param(rng, &[3, 5])], |x| x[0].narrow(1, 1, 3));
    check!("concat", [param(rng, &[2, 3]), param(rng, &[2, 2])], |x| concat(&[x[0].clone(), x[1].clone()], 1));
    check!("softmax", [param(rng, &[3, 4])], |x| softmax(&x[0], 1));
    check!("cross_entropy", [param(rng, &[3, 4])], |x| cross_entropy(&x[0], &[0, 2, 3]));
    check!("linear", [param(rng, &[3, 5]), param(rng, &[4, 5]), param(rng, &[4])], |x| linear(&x[0], &x[1], Some(&x[2])));
    check!("conv2d", [param(rng, &[2, 4, 5, 5]), param(rng, &[4, 2, 3, 3]), param(rng, &[4])], |x| {
        conv2d(&x[0], &x[1], Some(&x[2]), 2, 1, 2)
    });
    check!("conv2d_pointwise", [param(rng, &[2, 3, 3, 3]), param(rng, &[4, 3, 1, 1])], |x| conv2d(&x[0], &x[1], None, 1, 0, 1));
    let stats = BatchNormStats::<f64> {
        running_mean: Tensor::from_vec(vec![0.2, -0.1, 0.4], &[3])?,
        running_var: Tensor::from_vec(vec![1.5, 0.7, 1.1], &[3])?,
        ..BatchNormStats::new(3)
    };
    check!("batchnorm_train", [param(rng, &[2, 3, 2, 2]), param(rng, &[3]), param(rng, &[3])], |x| {
        batchnorm2d(&x[0], &x[1], &x[2], &BatchNormStats::new(3), NormMode::Train)
    });
    check!("batchnorm_eval", [param(rng, &[2, 3, 2, 2]), param(rng, &[3]), param(rng, &[3])], |x| {
        batchnorm2d(&x[0], &x[1], &x[2], &stats, NormMode::Eval)
    });
    check!("avg_pool", [param(rng, &[2, 2, 4, 4])], |x| avg_pool2d(&x[0], 2, 2));
    {
        // distinct values so no window's maximum is within a step of the runner-up
        let mut order: Vec<usize> = (0..32).collect();
        rng.shuffle(&mut order);
        let v = order.into_iter().map(|i| i as f64 * 0.1).collect();
        let x = vec![Tensor::param(v, &[2, 1, 4, 4])?];
        out.push(op_check("max_pool", &x, |x| max_pool2d(&x[0], 2, 2), rng)?);
    }
    check!("global_avg_pool", [param(rng, &[2, 3, 3, 3])], |x| global_avg_pool(&x[0]));
    check!("upsample", [param(rng, &[2, 2, 2, 2])], |x| nearest_upsample(&x[0], 2));
    check!("gather_rows", [param(rng, &[4, 3])], |x| gather_rows(&x[0], &[0, 2, 3]));
    check!("scatter_rows", [param(rng, &[2, 3])], |x| scatter_rows(&x[0], &[1, 3], 4));
    check!("temporal_shift", [param(rng, &[8, 8, 2, 2])], |x| temporal_shift(&x[0], 4, 0.25));
    out.extend(model_checks(seed)?);
    Ok(out)
}

/// Two frames, one two-block stage with frame and region gates, shift on.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        frames: 2,
        in_channels: 2,
        resolution: 4,
        stem_channels: 4,
        stages: vec![StageSpec::af(8, 2, 1)],
        classes: 3,
        spatial: Some(SpatialConfig { grid: 2, hidden: 4 }),
        shift_enabled: true,
        shift_fraction: 0.25,
        ..ModelConfig::desk()
    }
}

/// Largest fraction of entries allowed to straddle a ReLU kink.
pub const MAX_SKIPPED: f64 = 0.2;

/// Every parameter of a small model under the regularized training
/// objective, with the Gumbel noise frozen by reseeding each evaluation.
/// Gates are soft here; hard straight-through gates are piecewise
/// constant in the forward pass and are covered by
/// [`straight_through_contract`].
pub fn model_gradients(cfg: &ModelConfig, videos: usize, mode: NormMode, seed: u64) -> Result<GradCheck> {
    let model = Model::<f64>::build(cfg.clone(), &mut RngState::derive(seed, 1))?;
    let rng = &mut RngState::derive(seed, 2);
    let shape = [videos, cfg.frames, cfg.in_channels, cfg.resolution, cfg.resolution];
    let x = Tensor::from_vec(normals(rng, shape.iter().product()), &shape)?;
    let labels: Vec<usize> = (0..videos).map(|v| v % cfg.classes).collect();
    let params: Vec<Tensor<f64>> = model.parameters().into_iter().map(|(_, t)| t).collect();
    let loss = || {
        let ctl = Control {
            mode,
            exec: ExecMode::MaskMultiply,
            frames: FramePolicy::SoftWeights,
            regions: RegionPolicy::Navigate,
            ..Control::train(0.7)
        };
        let (pred, traces) = model.forward(&x, &ctl, &mut RngState::derive(seed, 3))?;
        Ok(total_loss(&pred, &labels, &traces, 0.5, 0.5, 1.0)?.0)
    };
    check_gradients(&params, loss, GRAD_STEP)
}

/// Elementwise on the small model with fixed normalization statistics;
/// per tensor on a wider model with batch statistics, whose smallest
/// entries sit below the truncation error of a 1e-3 step.
fn model_checks(seed: u64) -> Result<Vec<Check>> {
    let fixed = model_gradients(&gradcheck_model_config(), 2, NormMode::Eval, seed)?;
    let wide = ModelConfig { stem_channels: 8, stages: vec![StageSpec::af(16, 2, 1)], ..gradcheck_model_config() };
    let batch = model_gradients(&wide, 4, NormMode::Train, seed)?;
    Ok(vec![
        Check::below("grad/model", fixed.max_rel_err, GRAD_TOL),
        Check::below("grad/model_kink_skips", fixed.skipped_fraction(), MAX_SKIPPED),
        Check::below("grad/model_batch_stats", batch.max_tensor_rel_err, GRAD_TOL),
        Check::below("grad/model_batch_stats_kink_skips", batch.skipped_fraction(), MAX_SKIPPED),
    ])
}

/// Hard-sample frequencies against `softmax(logits)[select]`.
pub fn gumbel_statistics(draws: usize, vectors: usize, seed: u64) -> Result<Check> {
    let rng = &mut RngState::new(seed);
    let _g = no_grad();
    let mut worst: f64 = 0.0;
    for _ in 0..vectors {
        let l = [1.5 * rng.normal(), 1.5 * rng.normal()];
        let logits = Tensor::<f64>::from_vec(l.repeat(draws), &[draws, 2])?;
        let m = gumbel_sample(&logits, 1.0, rng)?;
        let freq = m.hard_ratio();
        let p = 1.0 / (1.0 + (l[1 - SELECT] - l[SELECT]).exp());
        // the skip coordinate is the complement, with the same error
        worst = worst.max((freq - p).abs());
    }
    Ok(Check::below("gumbel/frequency", worst, GUMBEL_TOL))
}

/// Forward gates are exactly binary, the gate carries the soft path's
/// gradient, and that gradient matches central differences under frozen noise.
pub fn straight_through_contract(seed: u64) -> Result<Vec<Check>> {
    let rng = &mut RngState::new(seed);
    let rows = 6;
    let logits = param(rng, &[rows, 2])?;
    let noise: Vec<f64> = (0..2 * rows).map(|_| rng.gumbel()).collect();
    let w = Tensor::from_vec(normals(rng, rows), &[rows])?;
    let tau = 0.5;
    let m = gumbel_sample_with_noise(&logits, tau, &noise)?;
    let binary = m.gate.data().iter().zip(&m.hard).all(|(&g, &h)| g == h && (h == 0.0 || h == 1.0));

    logits.zero_grad();
    mul(&m.gate, &w)?.sum().backward()?;
    let via_gate = logits.grad().unwrap_or_default();
    logits.zero_grad();
    let m2 = gumbel_sample_with_noise(&logits, tau, &noise)?;
    mul(&m2.soft, &w)?.sum().backward()?;
    let via_soft = logits.grad().unwrap_or_default();
    let gap = via_gate.iter().zip(&via_soft).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let fd = check_gradients(
        std::slice::from_ref(&logits),
        || Ok(mul(&gumbel_sample_with_noise(&logits, tau, &noise)?.soft, &w)?.sum()),
        GRAD_STEP,
    )?;
    Ok(vec![
        Check { name: "straight_through/binary_forward".into(), measured: if binary { 0.0 } else { 1.0 }, tolerance: 0.5, passed: binary },
        Check::below("straight_through/gate_grad_is_soft_grad", gap, 1e-15),
        Check::below("straight_through/soft_path_fd", fd.max_rel_err, GRAD_TOL),
    ])
}

/// Three-block shape-preserving stage on soft per-frame weights.
pub fn product_form_stage(seed: u64) -> Result<(AFStage<f64>, Tensor<f64>, Vec<Vec<f64>>)> {
    let rng = &mut RngState::new(seed);
    let (frames, videos, c, e) = (4, 2, 8, 8);
    let stage = AFStage::<f64>::new(AFStageConfig::new(c, c, 3, 1), frames, rng)?;
    let input = Tensor::from_vec(normals(rng, videos * frames * c * e * e), &[videos * frames, c, e, e])?;
    let masks = (0..3).map(|_| (0..videos * frames).map(|_| rng.uniform()).collect()).collect();
    Ok((stage, input, masks))
}

/// Worst elementwise relative error of the product-form reconstruction.
pub fn product_form(seeds: u64) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let (stage, input, masks) = product_form_stage(seed)?;
        worst = worst.max(verify_product_form(&stage, &input, &masks, None, PRODUCT_TOL)?.max_rel_err);
    }
    Ok(Check::below("identity/product_form", worst, PRODUCT_TOL))
}

/// Gather and mask-multiply evaluation on the compact model under random
/// hard masks, including the all-off and all-on patterns.
pub fn execution_modes(patterns: u64) -> Result<Check> {
    let cfg = ModelConfig::compact();
    let model = Model::<f32>::build(cfg.clone(), &mut RngState::new(5))?;
    let rng = &mut RngState::new(6);
    let videos = 2;
    let rows = videos * cfg.frames;
    let n = rows * cfg.in_channels * cfg.resolution * cfg.resolution;
    let x = Tensor::<f32>::from_f64(&normals(rng, n), &[videos, cfg.frames, cfg.in_channels, cfg.resolution, cfg.resolution])?;
    let blocks = model.af_stages().map(|s| s.num_blocks()).max().unwrap_or(0);
    let _g = no_grad();
    let mut worst: f64 = 0.0;
    for p in 0..patterns {
        let density = p as f64 / (patterns - 1).max(1) as f64;
        let masks: Vec<Vec<f32>> = (0..blocks)
            .map(|_| (0..rows).map(|_| if rng.uniform() < density { 1.0 } else { 0.0 }).collect())
            .collect();
        let run = |exec| -> Result<Vec<f64>> {
            let ctl = Control { exec, frames: FramePolicy::Fixed(&masks), ..Control::eval() };
            Ok(model.features(&x, &ctl, &mut RngState::new(0))?.0.to_f64_vec())
        };
        let (a, b) = (run(ExecMode::Gather)?, run(ExecMode::MaskMultiply)?);
        worst = worst.max(a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max));
    }
    Ok(Check::below("identity/execution_modes", worst, EXEC_TOL))
}

/// Compact model with region gates, so every counted component runs.
pub fn counter_config() -> ModelConfig {
    ModelConfig { spatial: Some(SpatialConfig::default()), ..ModelConfig::compact() }
}

/// Multiply-adds executed by one video's forward pass with every frame and
/// cell computed, against the analytic count at `RT = RS = 1`.
pub fn cost_counter(cfg: &ModelConfig) -> Result<Check> {
    let model = Model::<f32>::build(cfg.clone(), &mut RngState::new(0))?;
    let x = Tensor::<f32>::zeros(&[1, cfg.frames, cfg.in_channels, cfg.resolution, cfg.resolution]);
    let _g = no_grad();
    let counter = MacCounter::start();
    let ctl = Control { exec: ExecMode::MaskMultiply, frames: FramePolicy::Navigate, regions: RegionPolicy::Navigate, ..Control::eval() };
    model.forward(&x, &ctl, &mut RngState::new(0))?;
    let executed = counter.count() as f64;
    let analytic = count_flops(cfg, 1.0, 1.0)?.total;
    Ok(Check::below("cost/counter_equals_model", (executed - analytic).abs(), 0.5))
}
