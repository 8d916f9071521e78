//! Image fidelity metrics, trajectory discrepancies and correlation.

mod report;

pub use report::{Aggregate, PromptRegime, ReconMetrics, ReconReport, ReconRow};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::Tensor;
use crate::scheduler::{Direction, StepRecord, Trajectory};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn check_unit_range(t: &Tensor) -> Result<()> {
    if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(arg_err!("image values must lie in [0, 1]"));
    }
    Ok(())
}

/// Mean squared difference over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(total / a.len() as f64)
}

/// `10·log₁₀(1/mse)`; `+∞` for a zero error.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// PSNR in dB for images in `[0, 1]`; identical images give `+∞`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_unit_range(a)?;
    check_unit_range(b)?;
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Mean SSIM over all valid 7×7 windows of each channel, averaged over
/// channels. Accepts `[H, W]` or `[C, H, W]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    check_unit_range(a)?;
    check_unit_range(b)?;
    let (c, h, w) = match *a.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => {
            return Err(dim_err!(
                "ssim expects [H, W] or [C, H, W], got {:?}",
                a.shape()
            ))
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(arg_err!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        ));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut per_channel = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..][..h * w];
        let pb = &b.data()[ch * h * w..][..h * w];
        let mut total = 0.0;
        for y in 0..=h - SSIM_WINDOW {
            for x in 0..=w - SSIM_WINDOW {
                let pixels = || {
                    (y..y + SSIM_WINDOW)
                        .flat_map(move |yy| (x..x + SSIM_WINDOW).map(move |xx| yy * w + xx))
                };
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in pixels() {
                    ma += pa[i] as f64;
                    mb += pb[i] as f64;
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in pixels() {
                    let (da, db) = (pa[i] as f64 - ma, pb[i] as f64 - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
                va /= n;
                vb /= n;
                cov /= n;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        per_channel += total / ((h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)) as f64;
    }
    Ok(per_channel / c as f64)
}

/// Inversion and reconstruction records covering the same transition.
fn paired<'a>(
    inv: &'a Trajectory,
    rec: &'a Trajectory,
) -> Result<Vec<(&'a StepRecord, &'a StepRecord)>> {
    if inv.direction != Direction::Inversion || rec.direction != Direction::Reconstruction {
        return Err(arg_err!(
            "expected an inversion and a reconstruction trajectory"
        ));
    }
    if inv.len() != rec.len() {
        return Err(arg_err!(
            "trajectories have {} and {} steps",
            inv.len(),
            rec.len()
        ));
    }
    inv.records
        .iter()
        .zip(rec.records.iter().rev())
        .map(|(a, b)| {
            if a.t != b.t {
                return Err(arg_err!("unpaired timesteps {} and {}", a.t, b.t));
            }
            Ok((a, b))
        })
        .collect()
}

/// Sum over paired steps and attention layers of the element-wise MSE
/// between the captured cross-attention terms.
pub fn attention_discrepancy(inv: &Trajectory, rec: &Trajectory) -> Result<f64> {
    let mut total = 0.0;
    for (a, b) in paired(inv, rec)? {
        if a.attn.len() != b.attn.len() {
            return Err(arg_err!(
                "step t={} captured {} vs {} layers",
                a.t,
                a.attn.len(),
                b.attn.len()
            ));
        }
        for (x, y) in a.attn.iter().zip(&b.attn) {
            total += mse(x, y).map_err(|e| arg_err!("{e}"))?;
        }
    }
    Ok(total)
}

/// Sum over paired steps of the MSE between clean-image predictions.
pub fn z0_discrepancy(inv: &Trajectory, rec: &Trajectory) -> Result<f64> {
    let mut total = 0.0;
    for (a, b) in paired(inv, rec)? {
        total += mse(&a.z0_hat, &b.z0_hat).map_err(|e| arg_err!("{e}"))?;
    }
    Ok(total)
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(arg_err!("{} xs but {} ys", xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 points, got {}",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
