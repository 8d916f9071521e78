//! DDIM inversion and reconstruction loops over any noise predictor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schedule::{
    cfg_combine, clean_from_alpha, ddim_inversion_step, ddim_reverse_step, predict_clean,
    NoiseSchedule,
};
use crate::attention::AttentionMode;
use crate::denoiser::Prompt;
use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::{io, Tensor};

/// Noise estimate plus the cross-attention terms captured while making it.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[B, C, H, W]`
    pub eps: Tensor,
    /// One `[B, M, d_x]` tensor per cross-attention layer.
    pub attn: Vec<Tensor>,
}

/// Anything that estimates `ε(z_t, t, c)` for a batch sharing one timestep.
pub trait NoisePredictor: Sync {
    fn predict(
        &self,
        z: &Tensor,
        t: usize,
        prompts: &[Prompt],
        mode: AttentionMode,
    ) -> Result<Prediction>;
}

/// A predictor that returns the same noise everywhere, ignoring its inputs.
#[derive(Clone, Debug)]
pub struct ConstantDenoiser {
    /// Per-image noise `[C, H, W]`, broadcast over the batch.
    pub eps: Tensor,
}

impl NoisePredictor for ConstantDenoiser {
    fn predict(
        &self,
        z: &Tensor,
        _t: usize,
        _prompts: &[Prompt],
        _mode: AttentionMode,
    ) -> Result<Prediction> {
        let b = z.shape()[0];
        if z.shape()[1..] != *self.eps.shape() {
            return Err(dim_err!(
                "constant noise {:?} vs latent {:?}",
                self.eps.shape(),
                z.shape()
            ));
        }
        Ok(Prediction {
            eps: Tensor::stack(&vec![self.eps.clone(); b])?,
            attn: Vec::new(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: AttentionMode,
    /// `w = 1` is unguided; only then is the null-prompt pass skipped.
    pub guidance_scale: f32,
    pub null_prompt: Prompt,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: AttentionMode::Standard,
            guidance_scale: 1.0,
            null_prompt: Prompt::null(),
        }
    }
}

impl SamplerConfig {
    pub fn with_mode(mode: AttentionMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }
}

/// Conditional prediction, combined with the null-prompt prediction when
/// `guidance_scale != 1`. Attention terms come from the conditional pass.
pub fn guided_prediction(
    model: &dyn NoisePredictor,
    z: &Tensor,
    t: usize,
    prompts: &[Prompt],
    cfg: &SamplerConfig,
) -> Result<Prediction> {
    let cond = model.predict(z, t, prompts, cfg.mode)?;
    if cfg.guidance_scale == 1.0 {
        return Ok(cond);
    }
    let nulls = vec![cfg.null_prompt; prompts.len()];
    let uncond = model.predict(z, t, &nulls, cfg.mode)?;
    Ok(Prediction {
        eps: cfg_combine(&cond.eps, &uncond.eps, cfg.guidance_scale)?,
        attn: cond.attn,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Inversion,
    Reconstruction,
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    /// Timestep the record belongs to: the step's target for inversion,
    /// the step's source for reconstruction.
    pub t: usize,
    /// Latent at `t`.
    pub z_t: Tensor,
    pub z0_hat: Tensor,
    pub attn: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub direction: Direction,
    pub records: Vec<StepRecord>,
    /// `z_T` after inversion, `z_0` after reconstruction.
    pub final_latent: Tensor,
}

fn check_batch(z: &Tensor, prompts: &[Prompt]) -> Result<()> {
    if z.rank() != 4 {
        return Err(dim_err!(
            "latents must be [B, C, H, W], got {:?}",
            z.shape()
        ));
    }
    if z.shape()[0] != prompts.len() {
        return Err(dim_err!(
            "{} latents but {} prompts",
            z.shape()[0],
            prompts.len()
        ));
    }
    Ok(())
}

/// Map `z₀` to `z_T` by iterating the inversion step over the subsequence,
/// each step reusing the noise estimated at its starting timestep.
pub fn invert(
    z0: &Tensor,
    model: &dyn NoisePredictor,
    prompts: &[Prompt],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Trajectory> {
    check_batch(z0, prompts)?;
    let mut z = z0.clone();
    let mut records = Vec::with_capacity(sched.ddim_steps());
    for (t_prev, t) in sched.inversion_pairs() {
        let pred = guided_prediction(model, &z, t_prev, prompts, cfg)?;
        let z0_hat = clean_from_alpha(&z, &pred.eps, sched.alpha_bar(t_prev)?)?;
        z = ddim_inversion_step(&z, &pred.eps, t_prev, t, sched)?;
        records.push(StepRecord {
            t,
            z_t: z.clone(),
            z0_hat,
            attn: pred.attn,
        });
    }
    Ok(Trajectory {
        direction: Direction::Inversion,
        records,
        final_latent: z,
    })
}

/// Deterministic DDIM sampling from `z_T` down to `z₀`.
pub fn reconstruct(
    z_t: &Tensor,
    model: &dyn NoisePredictor,
    prompts: &[Prompt],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Trajectory> {
    check_batch(z_t, prompts)?;
    let mut z = z_t.clone();
    let mut records = Vec::with_capacity(sched.ddim_steps());
    for (t, t_prev) in sched.reverse_pairs() {
        let pred = guided_prediction(model, &z, t, prompts, cfg)?;
        let z0_hat = predict_clean(&z, &pred.eps, t, sched)?;
        let next = ddim_reverse_step(&z, &pred.eps, t, t_prev, sched)?;
        records.push(StepRecord {
            t,
            z_t: std::mem::replace(&mut z, next),
            z0_hat,
            attn: pred.attn,
        });
    }
    Ok(Trajectory {
        direction: Direction::Reconstruction,
        records,
        final_latent: z,
    })
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.t).collect()
    }

    /// The single-image trajectory for batch entry `i`.
    pub fn select(&self, i: usize) -> Result<Trajectory> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            t.unstack()
                .into_iter()
                .nth(i)
                .map(|x| Tensor::stack(&[x]))
                .ok_or_else(|| arg_err!("batch index {i} out of range"))?
        };
        let records = self
            .records
            .iter()
            .map(|r| {
                Ok(StepRecord {
                    t: r.t,
                    z_t: pick(&r.z_t)?,
                    z0_hat: pick(&r.z0_hat)?,
                    attn: r.attn.iter().map(pick).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Trajectory {
            direction: self.direction,
            records,
            final_latent: pick(&self.final_latent)?,
        })
    }

    /// Write one UTNS file per record field plus `manifest.txt`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let dir_name = match self.direction {
            Direction::Inversion => "inversion",
            Direction::Reconstruction => "reconstruction",
        };
        let mut manifest = format!("direction {dir_name}\nsteps {}\n", self.records.len());
        for (k, r) in self.records.iter().enumerate() {
            let z = format!("step{k:03}_z.utns");
            let z0 = format!("step{k:03}_z0.utns");
            io::write_tensor(&dir.join(&z), &r.z_t)?;
            io::write_tensor(&dir.join(&z0), &r.z0_hat)?;
            let mut attn_files = Vec::new();
            for (l, a) in r.attn.iter().enumerate() {
                let name = format!("step{k:03}_attn{l}.utns");
                io::write_tensor(&dir.join(&name), a)?;
                attn_files.push(name);
            }
            manifest.push_str(&format!(
                "record {k} t={} z={z} z0={z0} attn={}\n",
                r.t,
                attn_files.join(",")
            ));
        }
        io::write_tensor(&dir.join("final.utns"), &self.final_latent)?;
        manifest.push_str("final final.utns\n");
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Trajectory> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
        let mut direction = None;
        let mut records = Vec::new();
        let mut final_latent = None;
        for line in text.lines() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("direction") => {
                    direction = Some(match parts.next() {
                        Some("inversion") => Direction::Inversion,
                        Some("reconstruction") => Direction::Reconstruction,
                        _ => return Err(bad("unknown direction")),
                    })
                }
                Some("record") => {
                    let _index = parts.next();
                    let mut t = None;
                    let (mut z, mut z0, mut attn) = (None, None, Vec::new());
                    for kv in parts {
                        let (k, v) = kv.split_once('=').ok_or_else(|| bad("malformed record"))?;
                        match k {
                            "t" => t = v.parse().ok(),
                            "z" => z = Some(io::read_tensor(&dir.join(v))?),
                            "z0" => z0 = Some(io::read_tensor(&dir.join(v))?),
                            "attn" => {
                                for f in v.split(',').filter(|f| !f.is_empty()) {
                                    attn.push(io::read_tensor(&dir.join(f))?);
                                }
                            }
                            _ => return Err(bad("unknown record field")),
                        }
                    }
                    records.push(StepRecord {
                        t: t.ok_or_else(|| bad("record without t"))?,
                        z_t: z.ok_or_else(|| bad("record without z"))?,
                        z0_hat: z0.ok_or_else(|| bad("record without z0"))?,
                        attn,
                    });
                }
                Some("final") => {
                    let f = parts.next().ok_or_else(|| bad("final without file"))?;
                    final_latent = Some(io::read_tensor(&dir.join(f))?);
                }
                Some("steps") | None => {}
                Some(_) => return Err(bad("unknown manifest line")),
            }
        }
        Ok(Trajectory {
            direction: direction.ok_or_else(|| bad("missing direction"))?,
            records,
            final_latent: final_latent.ok_or_else(|| bad("missing final latent"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::scheduler::{make_schedule, ScheduleParams};

    fn sched(n: usize) -> NoiseSchedule {
        make_schedule(ScheduleParams::default(), n).unwrap()
    }

    /// ε depends on z, so the adjacent-step approximation is inexact.
    struct Linear;
    impl NoisePredictor for Linear {
        fn predict(
            &self,
            z: &Tensor,
            t: usize,
            _p: &[Prompt],
            _m: AttentionMode,
        ) -> Result<Prediction> {
            Ok(Prediction {
                eps: z.scale(0.3 + t as f32 * 1e-4)?,
                attn: vec![z.reshape(&[z.shape()[0], 1, z.len() / z.shape()[0]])?],
            })
        }
    }

    #[test]
    fn constant_noise_round_trip_is_exact() {
        let mut rng = Rng::new(1);
        let z0 = rng.randn(&[1, 3, 4, 4]);
        let model = ConstantDenoiser {
            eps: rng.randn(&[3, 4, 4]),
        };
        let prompts = [Prompt::null()];
        let s = sched(20);
        let cfg = SamplerConfig::default();
        let inv = invert(&z0, &model, &prompts, &s, &cfg).unwrap();
        let rec = reconstruct(&inv.final_latent, &model, &prompts, &s, &cfg).unwrap();
        assert!(rec.final_latent.max_abs_diff(&z0).unwrap() < 1e-4);
    }

    #[test]
    fn zero_noise_inversion_telescopes() {
        let z0 = Rng::new(2).randn(&[1, 3, 2, 2]);
        let model = ConstantDenoiser {
            eps: Tensor::zeros(&[3, 2, 2]),
        };
        let s = sched(20);
        let inv = invert(
            &z0,
            &model,
            &[Prompt::null()],
            &s,
            &SamplerConfig::default(),
        )
        .unwrap();
        let expect = z0.scale(s.alpha_bar(1000).unwrap().sqrt() as f32).unwrap();
        assert!(inv.final_latent.max_abs_diff(&expect).unwrap() < 1e-6);
    }

    #[test]
    fn records_are_monotone_and_counted() {
        let z0 = Rng::new(3).randn(&[2, 3, 2, 2]);
        let s = sched(10);
        let p = [Prompt::null(); 2];
        let cfg = SamplerConfig::default();
        let inv = invert(&z0, &Linear, &p, &s, &cfg).unwrap();
        let rec = reconstruct(&inv.final_latent, &Linear, &p, &s, &cfg).unwrap();
        assert_eq!(inv.len(), 10);
        assert_eq!(rec.len(), 10);
        assert!(inv.timesteps().windows(2).all(|w| w[0] < w[1]));
        assert!(rec.timesteps().windows(2).all(|w| w[0] > w[1]));
        assert_eq!(inv.records.last().unwrap().z_t, inv.final_latent);
        // z-dependent noise: the round trip is no longer exact
        assert!(rec.final_latent.max_abs_diff(&z0).unwrap() > 1e-6);
    }

    #[test]
    fn reconstruction_is_deterministic() {
        let zt = Rng::new(4).randn(&[1, 3, 2, 2]);
        let s = sched(10);
        let cfg = SamplerConfig::default();
        let a = reconstruct(&zt, &Linear, &[Prompt::null()], &s, &cfg).unwrap();
        let b = reconstruct(&zt, &Linear, &[Prompt::null()], &s, &cfg).unwrap();
        assert_eq!(a.final_latent, b.final_latent);
    }

    #[test]
    fn guidance_one_skips_the_unconditional_pass() {
        struct Counting(std::sync::atomic::AtomicUsize);
        impl NoisePredictor for Counting {
            fn predict(
                &self,
                z: &Tensor,
                _t: usize,
                _p: &[Prompt],
                _m: AttentionMode,
            ) -> Result<Prediction> {
                self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                Ok(Prediction {
                    eps: z.clone(),
                    attn: vec![],
                })
            }
        }
        let m = Counting(Default::default());
        let z = Tensor::ones(&[1, 1, 1, 1]);
        let mut cfg = SamplerConfig::default();
        guided_prediction(&m, &z, 5, &[Prompt::null()], &cfg).unwrap();
        assert_eq!(m.0.load(std::sync::atomic::Ordering::SeqCst), 1);
        cfg.guidance_scale = 3.0;
        guided_prediction(&m, &z, 5, &[Prompt::null()], &cfg).unwrap();
        assert_eq!(m.0.load(std::sync::atomic::Ordering::SeqCst), 3);
    }

    #[test]
    fn dump_and_load_round_trip() {
        let z0 = Rng::new(5).randn(&[1, 3, 2, 2]);
        let s = sched(4);
        let inv = invert(
            &z0,
            &Linear,
            &[Prompt::null()],
            &s,
            &SamplerConfig::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        inv.dump(dir.path()).unwrap();
        let back = Trajectory::load(dir.path()).unwrap();
        assert_eq!(back.direction, Direction::Inversion);
        assert_eq!(back.timesteps(), inv.timesteps());
        assert_eq!(back.final_latent, inv.final_latent);
        assert_eq!(back.records[2].attn, inv.records[2].attn);
        assert_eq!(back.records[1].z0_hat, inv.records[1].z0_hat);
    }

    #[test]
    fn batch_prompt_mismatch_is_rejected() {
        let z0 = Tensor::zeros(&[2, 3, 2, 2]);
        let err = invert(
            &z0,
            &Linear,
            &[Prompt::null()],
            &sched(4),
            &SamplerConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
