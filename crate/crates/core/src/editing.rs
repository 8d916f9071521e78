//! Mask-guided editing with three parallel DDIM branches.
//!
//! * auxiliary: null prompt, Uniform attention, inverted and reconstructed;
//! * source: source prompt, Standard attention;
//! * target: target prompt, Standard attention, started from the source `z_T`.
//!
//! At each step the target and source clean predictions are compared, the
//! per-pixel difference is thresholded at its `q`-quantile and dilated, and
//! for `t < T_mask` the agreeing region of the target prediction is replaced
//! by the auxiliary one.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::denoiser::Prompt;
use crate::error::{arg_err, dim_err, Result};
use crate::numerics::{quantile, Tensor};
use crate::scheduler::{
    guided_prediction, invert, predict_clean, renoise, NoisePredictor, NoiseSchedule, SamplerConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub source: Prompt,
    pub target: Prompt,
    /// Quantile of the difference map used as the threshold `λ`.
    pub quantile: f32,
    /// Blending is active while the diffusion timestep is below this value.
    pub t_mask: usize,
    /// Side of the square dilation kernel; odd.
    pub kernel: usize,
    /// Guidance scale of the source and target branches.
    pub guidance_scale: f32,
}

impl EditConfig {
    pub fn new(source: Prompt, target: Prompt) -> Self {
        Self {
            source,
            target,
            quantile: 0.5,
            t_mask: 200,
            kernel: 3,
            guidance_scale: 1.0,
        }
    }

    pub fn validate(&self, train_steps: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.quantile) {
            return Err(arg_err!("quantile {} outside [0, 1]", self.quantile));
        }
        if self.t_mask > train_steps {
            return Err(arg_err!("T_mask {} exceeds T = {train_steps}", self.t_mask));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(arg_err!(
                "dilation kernel {} must be odd and at least 1",
                self.kernel
            ));
        }
        Ok(())
    }
}

/// Binary `[H, W]` map; 1 marks pixels taken from the auxiliary branch.
#[derive(Clone, Debug, PartialEq)]
pub struct EditMask(Tensor);

impl EditMask {
    pub fn new(mask: Tensor) -> Result<Self> {
        if mask.rank() != 2 {
            return Err(dim_err!("mask must be [H, W], got {:?}", mask.shape()));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(arg_err!("mask values must be exactly 0 or 1"));
        }
        Ok(Self(mask))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.0.shape()[0], self.0.shape()[1])
    }

    pub fn count_ones(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Whether every 1 of `self` is also a 1 of `other`.
    pub fn is_subset_of(&self, other: &EditMask) -> bool {
        self.0.shape() == other.0.shape()
            && self
                .0
                .data()
                .iter()
                .zip(other.0.data())
                .all(|(&a, &b)| a <= b)
    }
}

/// Channel mean of `|tgt − src|`, `[C, H, W] -> [H, W]`.
pub fn compute_diff(z0_tgt: &Tensor, z0_src: &Tensor) -> Result<Tensor> {
    if z0_tgt.shape() != z0_src.shape() || z0_tgt.rank() != 3 {
        return Err(dim_err!(
            "diff needs matching [C, H, W] inputs, got {:?} and {:?}",
            z0_tgt.shape(),
            z0_src.shape()
        ));
    }
    let &[c, h, w] = z0_tgt.shape() else {
        unreachable!()
    };
    let plane = h * w;
    let mut out = vec![0.0f32; plane];
    for ch in 0..c {
        let (a, b) = (
            &z0_tgt.data()[ch * plane..][..plane],
            &z0_src.data()[ch * plane..][..plane],
        );
        for i in 0..plane {
            out[i] += (a[i] - b[i]).abs();
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f32);
    Tensor::new(vec![h, w], out)
}

/// Binary dilation with a `kernel × kernel` square; the window is clamped at
/// the image border.
pub fn dilate(mask: &EditMask, kernel: usize) -> Result<EditMask> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(arg_err!(
            "dilation kernel {kernel} must be odd and at least 1"
        ));
    }
    let (h, w) = mask.shape();
    let r = kernel / 2;
    let m = mask.0.data();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let hit = (y.saturating_sub(r)..=(y + r).min(h - 1)).any(|yy| {
                (x.saturating_sub(r)..=(x + r).min(w - 1)).any(|xx| m[yy * w + xx] == 1.0)
            });
            out[y * w + x] = hit as u8 as f32;
        }
    }
    Ok(EditMask(Tensor::from_parts(vec![h, w], out)))
}

/// Threshold `diff` at `λ = quantile(diff, q)` (keeping `diff ≤ λ`) and
/// dilate the result.
pub fn adaptive_mask(diff: &Tensor, q: f32, kernel: usize) -> Result<EditMask> {
    if diff.rank() != 2 {
        return Err(dim_err!(
            "difference map must be [H, W], got {:?}",
            diff.shape()
        ));
    }
    if diff.data().iter().any(|&v| v < 0.0) {
        return Err(arg_err!("difference map must be nonnegative"));
    }
    let lambda = quantile(diff.data(), q)?;
    let raw = diff.map(|v| (v <= lambda) as u8 as f32)?;
    dilate(&EditMask(raw), kernel)
}

/// `mask ⊙ aux + (1 − mask) ⊙ tgt`, with the `[H, W]` mask broadcast over
/// every leading axis.
pub fn blend_clean(z0_aux: &Tensor, z0_tgt: &Tensor, mask: &EditMask) -> Result<Tensor> {
    let (h, w) = mask.shape();
    let s = z0_tgt.shape();
    if z0_aux.shape() != s || s.len() < 2 || s[s.len() - 2..] != [h, w] {
        return Err(dim_err!(
            "cannot blend {:?} and {:?} with a {h}x{w} mask",
            z0_aux.shape(),
            s
        ));
    }
    let m = mask.0.data();
    let data = z0_aux
        .data()
        .chunks(h * w)
        .zip(z0_tgt.data().chunks(h * w))
        .flat_map(|(a, t)| (0..h * w).map(move |i| if m[i] == 1.0 { a[i] } else { t[i] }))
        .collect();
    Tensor::new(s.to_vec(), data)
}

/// Clean predictions and mask of one denoising step.
#[derive(Clone, Debug)]
pub struct EditStep {
    pub t: usize,
    pub mask: EditMask,
    pub blended: bool,
    pub z0_aux: Tensor,
    pub z0_src: Tensor,
    /// Target prediction after any blending.
    pub z0_tgt: Tensor,
}

#[derive(Clone, Debug)]
pub struct EditResult {
    /// Final target latent `[C, H, W]`.
    pub output: Tensor,
    /// Final auxiliary and source latents.
    pub auxiliary: Tensor,
    pub source: Tensor,
    pub steps: Vec<EditStep>,
}

impl EditResult {
    pub fn masks(&self) -> impl Iterator<Item = &EditMask> {
        self.steps.iter().map(|s| &s.mask)
    }
}

fn single(t: &Tensor) -> Result<Tensor> {
    t.unstack()
        .into_iter()
        .next()
        .ok_or_else(|| dim_err!("empty batch"))
}

/// Edit one clean latent `z0: [C, H, W]` from `cfg.source` towards
/// `cfg.target`.
pub fn edit(
    z0: &Tensor,
    cfg: &EditConfig,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
) -> Result<EditResult> {
    cfg.validate(sched.train_steps())?;
    if z0.rank() != 3 {
        return Err(dim_err!(
            "edit expects one [C, H, W] latent, got {:?}",
            z0.shape()
        ));
    }
    let batch = Tensor::stack(std::slice::from_ref(z0))?;
    let null = [Prompt::null()];
    let aux_cfg = SamplerConfig::with_mode(AttentionMode::Uniform);
    let src_cfg = SamplerConfig::with_mode(AttentionMode::Standard);
    let guided = SamplerConfig {
        guidance_scale: cfg.guidance_scale,
        ..src_cfg
    };

    let mut z_aux = invert(&batch, model, &null, sched, &aux_cfg)?.final_latent;
    let mut z_src = invert(&batch, model, &[cfg.source], sched, &src_cfg)?.final_latent;
    let mut z_tgt = z_src.clone();

    let mut steps = Vec::with_capacity(sched.ddim_steps());
    for (t, t_prev) in sched.reverse_pairs() {
        let ab_prev = sched.alpha_bar(t_prev)?;
        let eps_aux = guided_prediction(model, &z_aux, t, &null, &aux_cfg)?.eps;
        let eps_src = guided_prediction(model, &z_src, t, &[cfg.source], &guided)?.eps;
        let eps_tgt = guided_prediction(model, &z_tgt, t, &[cfg.target], &guided)?.eps;
        let z0_aux = predict_clean(&z_aux, &eps_aux, t, sched)?;
        let z0_src = predict_clean(&z_src, &eps_src, t, sched)?;
        let mut z0_tgt = predict_clean(&z_tgt, &eps_tgt, t, sched)?;

        let diff = compute_diff(&single(&z0_tgt)?, &single(&z0_src)?)?;
        let mask = adaptive_mask(&diff, cfg.quantile, cfg.kernel)?;
        let blended = t < cfg.t_mask;
        if blended {
            z0_tgt = blend_clean(&z0_aux, &z0_tgt, &mask)?;
        }

        z_aux = renoise(&z0_aux, &eps_aux, ab_prev)?;
        z_src = renoise(&z0_src, &eps_src, ab_prev)?;
        z_tgt = renoise(&z0_tgt, &eps_tgt, ab_prev)?;
        steps.push(EditStep {
            t,
            mask,
            blended,
            z0_aux: single(&z0_aux)?,
            z0_src: single(&z0_src)?,
            z0_tgt: single(&z0_tgt)?,
        });
    }
    Ok(EditResult {
        output: single(&z_tgt)?,
        auxiliary: single(&z_aux)?,
        source: single(&z_src)?,
        steps,
    })
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn mask_grows_with_quantile(seed in any::<u64>(), q1 in 0.0f32..=1.0, q2 in 0.0f32..=1.0, k in 0usize..3) {
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let diff = Rng::new(seed).randn(&[6, 7]).map(f32::abs).unwrap();
            let kernel = 2 * k + 1;
            prop_assert!(adaptive_mask(&diff, lo, 1).unwrap().is_subset_of(&adaptive_mask(&diff, hi, 1).unwrap()));
            prop_assert!(adaptive_mask(&diff, lo, kernel).unwrap().is_subset_of(&adaptive_mask(&diff, hi, kernel).unwrap()));
        }

        #[test]
        fn dilation_is_extensive(seed in any::<u64>(), k in 0usize..3) {
            let mut rng = Rng::new(seed);
            let m = EditMask::new(Tensor::from_fn(&[5, 6], |_| (rng.uniform() < 0.2) as u8 as f32).unwrap()).unwrap();
            let d = dilate(&m, 2 * k + 1).unwrap();
            prop_assert!(m.is_subset_of(&d));
            if k == 0 {
                prop_assert_eq!(&d, &m);
            }
        }

        #[test]
        fn blending_a_tensor_with_itself_is_identity(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = rng.randn(&[3, 4, 4]);
            let m = EditMask::new(Tensor::from_fn(&[4, 4], |_| (rng.uniform() < 0.5) as u8 as f32).unwrap()).unwrap();
            prop_assert_eq!(blend_clean(&a, &a, &m).unwrap(), a);
        }
    }
}
