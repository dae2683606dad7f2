//! Browser bindings for three small views of the model: temperature
//! schedules, Gumbel gate statistics and analytic cost against the ratios.
//!
//! The plain functions are the native API; the `#[wasm_bindgen]` wrappers
//! only convert errors.

use afnet::analysis::count_flops;
use afnet::model::ModelConfig;
use afnet::navigation::{gumbel_sample_with_noise, DecayMode, TemperatureSchedule};
use afnet::stage::SpatialConfig;
use afnet::{Error, Result, RngState, Tensor};
use wasm_bindgen::prelude::*;

pub fn parse_mode(mode: &str) -> Result<DecayMode> {
    match mode {
        "exponential" => Ok(DecayMode::Exponential),
        "cosine" => Ok(DecayMode::Cosine),
        "linear" => Ok(DecayMode::Linear),
        other => Err(Error::Config(format!("unknown decay mode {other:?}, expected exponential, cosine or linear"))),
    }
}

/// Temperature at steps `0..=steps`.
pub fn temperature_curve(tau_start: f64, tau_end: f64, steps: u32, mode: &str) -> Result<Vec<f64>> {
    if !(tau_start > 0.0 && tau_end > 0.0 && tau_start.is_finite() && tau_end.is_finite()) {
        return Err(Error::Config(format!("temperatures must be positive, got {tau_start} and {tau_end}")));
    }
    let schedule = TemperatureSchedule { tau_start, tau_end, total_steps: steps as u64, mode: parse_mode(mode)? };
    (0..=steps as u64).map(|s| schedule.temperature_at(s)).collect()
}

/// Outcome of repeated Gumbel-softmax draws for one `[skip, select]` logit pair.
#[wasm_bindgen]
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelHistogram {
    select_frequency: f64,
    select_probability: f64,
    bins: Vec<f64>,
}

#[wasm_bindgen]
impl GumbelHistogram {
    /// Fraction of draws whose hard gate selected the frame.
    #[wasm_bindgen(getter)]
    pub fn select_frequency(&self) -> f64 {
        self.select_frequency
    }

    /// `softmax(logits)[select]`, the limit of `select_frequency`.
    #[wasm_bindgen(getter)]
    pub fn select_probability(&self) -> f64 {
        self.select_probability
    }

    /// Fractions of relaxed gate values in equal-width bins over `[0, 1]`.
    #[wasm_bindgen(getter)]
    pub fn bins(&self) -> Vec<f64> {
        self.bins.clone()
    }
}

pub fn gumbel_histogram(logit_skip: f64, logit_select: f64, tau: f64, draws: u32, bins: u32, seed: u64) -> Result<GumbelHistogram> {
    if draws == 0 || bins == 0 {
        return Err(Error::Config("draws and bins must be positive".into()));
    }
    let n = draws as usize;
    let mut logits = Vec::with_capacity(2 * n);
    for _ in 0..n {
        logits.extend_from_slice(&[logit_skip, logit_select]);
    }
    let logits = Tensor::<f64>::from_f64(&logits, &[n, 2])?;
    let mut rng = RngState::new(seed);
    let noise: Vec<f64> = (0..2 * n).map(|_| rng.gumbel()).collect();
    let mask = gumbel_sample_with_noise(&logits, tau, &noise)?;
    let select_frequency = mask.hard_ratio();
    let mut counts = vec![0.0; bins as usize];
    for &v in mask.soft.data().iter() {
        let b = ((v * bins as f64) as usize).min(bins as usize - 1);
        counts[b] += 1.0;
    }
    counts.iter_mut().for_each(|c| *c /= n as f64);
    let m = logit_skip.max(logit_select);
    let (es, ek) = ((logit_select - m).exp(), (logit_skip - m).exp());
    Ok(GumbelHistogram { select_frequency, select_probability: es / (es + ek), bins: counts })
}

/// The default 32x32 model, with region gates when `spatial`.
pub fn demo_model(spatial: bool) -> ModelConfig {
    ModelConfig { spatial: spatial.then(SpatialConfig::default), ..ModelConfig::desk() }
}

/// GFLOPs per video at each frame ratio in `rts`.
pub fn cost_curve(rts: &[f64], rs: f64, spatial: bool) -> Result<Vec<f64>> {
    let cfg = demo_model(spatial);
    rts.iter().map(|&rt| count_flops(&cfg, rt, rs).map(|c| c.gflops())).collect()
}

/// GFLOPs per video of the plain network with every frame at full width.
pub fn baseline_gflops(spatial: bool) -> Result<f64> {
    Ok(2.0 * count_flops(&demo_model(spatial), 1.0, 1.0)?.baseline as f64 / 1e9)
}

#[wasm_bindgen(js_name = temperatureCurve)]
pub fn temperature_curve_js(tau_start: f64, tau_end: f64, steps: u32, mode: &str) -> std::result::Result<Vec<f64>, JsError> {
    Ok(temperature_curve(tau_start, tau_end, steps, mode)?)
}

#[wasm_bindgen(js_name = gumbelHistogram)]
pub fn gumbel_histogram_js(logit_skip: f64, logit_select: f64, tau: f64, draws: u32, bins: u32, seed: u32) -> std::result::Result<GumbelHistogram, JsError> {
    Ok(gumbel_histogram(logit_skip, logit_select, tau, draws, bins, seed as u64)?)
}

#[wasm_bindgen(js_name = costCurve)]
pub fn cost_curve_js(rts: &[f64], rs: f64, spatial: bool) -> std::result::Result<Vec<f64>, JsError> {
    Ok(cost_curve(rts, rs, spatial)?)
}

#[wasm_bindgen(js_name = baselineGflops)]
pub fn baseline_gflops_js(spatial: bool) -> std::result::Result<f64, JsError> {
    Ok(baseline_gflops(spatial)?)
}
