//! Central finite-difference checks against reverse-mode gradients.
//!
//! An entry whose `+h` and `-h` evaluations take different branches of a
//! piecewise op (a ReLU input changing sign, a max-pool winner changing)
//! has no valid central difference; it is counted in `skipped` instead of
//! compared.

use crate::error::Result;
use crate::tensor::{no_grad, BranchTrace, Tensor};

/// Outcome of comparing autodiff gradients with central differences.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Worst `|a - n|_2 / max(|a|_2, |n|_2)` over whole tensors.
    pub max_tensor_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheck {
    pub fn skipped_fraction(&self) -> f64 {
        self.skipped as f64 / (self.checked + self.skipped).max(1) as f64
    }

    pub fn merge(mut self, other: GradCheck) -> GradCheck {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.max_tensor_rel_err = self.max_tensor_rel_err.max(other.max_tensor_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
        self
    }
}

/// Relative error with a small absolute floor so that entries whose true
/// gradient is zero do not divide by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks every entry of every tensor in `wrt`. `loss` must rebuild the
/// scalar loss from the current contents of `wrt`; it is called `2n + 1`
/// times.
pub fn check_gradients<F>(wrt: &[Tensor<f64>], loss: F, h: f64) -> Result<GradCheck>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for t in wrt {
        t.zero_grad();
    }
    loss()?.backward()?;
    let analytic: Vec<Vec<f64>> = wrt
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let _guard = no_grad();
    let mut report = GradCheck::default();
    for (t, grads) in wrt.iter().zip(&analytic) {
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for (i, &a) in grads.iter().enumerate() {
            let orig = t.data()[i];
            let eval = |v: f64| -> Result<(f64, u64)> {
                t.update_data(|d| d[i] = v);
                let trace = BranchTrace::start();
                let l = loss()?.item();
                Ok((l, trace.pattern()))
            };
            let (up, up_branch) = eval(orig + h)?;
            let (down, down_branch) = eval(orig - h)?;
            t.update_data(|d| d[i] = orig);
            if up_branch != down_branch {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
            report.checked += 1;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let tensor_rel = diff2.sqrt() / f64::max(a2, n2).sqrt().max(1e-6);
        report.max_tensor_rel_err = report.max_tensor_rel_err.max(tensor_rel);
    }
    Ok(report)
}
