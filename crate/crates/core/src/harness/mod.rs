//! Training and study commands, run directories and report files.
//!
//! Every command writes into a fresh `<out>/<kind>-NNNN` directory holding
//! `config.json` (the resolved config) next to its outputs:
//!
//! | command       | outputs                                                            |
//! |---------------|--------------------------------------------------------------------|
//! | `train`       | `checkpoint/`, `loss.csv`                                          |
//! | `recon-study` | `recon.csv`, `summary.txt`                                         |
//! | `corr-study`  | `correlation.csv`, `correlation.txt`                               |
//! | `edit`        | `ablation.csv`, `summary.txt`, `images/*.ppm`, `masks/*.ppm`, `steps/` |
//!
//! Edited images are named `img{i}_q{q}_t{T_mask}.ppm`; the matching mask
//! sheet in `masks/` shows one mask per denoising step, left to right from
//! `t = T`. With `edit.dump_steps` the per-step masks and clean predictions
//! are also written as UTNS under `steps/img{i}_q{q}_t{T_mask}/`.

mod config;
pub mod ppm;

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use config::{EditGrid, Overrides, StudyConfig, StudyKind};
pub use ppm::{color_table, gray_to_ppm, image_to_ppm, render_heatmap, Ppm};

use crate::attention::AttentionMode;
use crate::denoiser::{
    classify, generate_dataset, image_to_latent, latent_to_image, load_checkpoint, save_checkpoint,
    train, Color, DenoiserModel, Prompt, Sample, Shape,
};
use crate::editing::{dilate, edit, EditConfig, EditMask};
use crate::error::{arg_err, Error, Result};
use crate::metrics::{
    attention_discrepancy, mean_std, mse, pearson, psnr_from_mse, ssim, z0_discrepancy,
    PromptRegime, ReconMetrics, ReconReport, ReconRow,
};
use crate::numerics::{io, Rng, Tensor};
use crate::scheduler::{
    invert, make_schedule, reconstruct, NoisePredictor, NoiseSchedule, SamplerConfig,
};

const HELD_OUT_STREAM: u64 = 0x4e1d;
const INIT_STREAM: u64 = 0x1417;

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Format(e.to_string())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Create the next unused `<out>/<kind>-NNNN` directory and write the
/// config snapshot into it. Existing runs are never touched.
pub fn create_run_dir(config: &StudyConfig, kind: StudyKind) -> Result<PathBuf> {
    create_dir(&config.out)?;
    let mut seq = 1;
    let dir = loop {
        let dir = config.out.join(format!("{kind}-{seq:04}"));
        match fs::create_dir(&dir) {
            Ok(()) => break dir,
            Err(e) if e.kind() == ErrorKind::AlreadyExists => seq += 1,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    };
    let mut snapshot = config.clone();
    snapshot.kind = Some(kind);
    write_file(&dir.join("config.json"), snapshot.to_json()? + "\n")?;
    Ok(dir)
}

/// Images the studies evaluate on; drawn from a stream training never uses.
pub fn held_out_images(seed: u64, count: usize) -> Result<Vec<Sample>> {
    generate_dataset(&Rng::new(seed).split(u64::MAX, HELD_OUT_STREAM), count)
}

/// Both attributes advanced by one, so neither matches the source.
pub fn mismatched_prompt(p: Prompt) -> Prompt {
    match (p.color(), p.shape()) {
        (Some(c), Some(s)) => {
            let next = |i: usize| (i + 1) % 3;
            let ci = Color::ALL.iter().position(|&x| x == c).unwrap();
            let si = Shape::ALL.iter().position(|&x| x == s).unwrap();
            Prompt::new(Color::ALL[next(ci)], Shape::ALL[next(si)])
        }
        _ => p,
    }
}

/// Editing target: the same shape recolored (red→blue, green→red, blue→green).
pub fn edit_target(p: Prompt) -> Prompt {
    match (p.color(), p.shape()) {
        (Some(c), Some(s)) => {
            let ci = Color::ALL.iter().position(|&x| x == c).unwrap();
            Prompt::new(Color::ALL[(ci + 2) % 3], s)
        }
        _ => p,
    }
}

pub fn regime_prompt(regime: PromptRegime, label: Prompt) -> Prompt {
    match regime {
        PromptRegime::Null => Prompt::null(),
        PromptRegime::Source => label,
        PromptRegime::Mismatched => mismatched_prompt(label),
    }
}

fn batch_of(t: &Tensor, n: usize) -> Result<Tensor> {
    Tensor::stack(&vec![t.clone(); n])
}

/// Inversion then reconstruction of one image under several prompts in one
/// batch. Returns `None` if the trajectory left the finite range.
fn recon_metrics(
    model: &dyn NoisePredictor,
    sample: &Sample,
    prompts: &[Prompt],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Option<Vec<ReconMetrics>>> {
    let z0 = batch_of(&image_to_latent(&sample.image)?, prompts.len())?;
    let run = || -> Result<Vec<ReconMetrics>> {
        let inv = invert(&z0, model, prompts, sched, cfg)?;
        let rec = reconstruct(&inv.final_latent, model, prompts, sched, cfg)?;
        rec.final_latent
            .unstack()
            .iter()
            .enumerate()
            .map(|(k, out)| {
                let x_rec = latent_to_image(out)?;
                let err = mse(&x_rec, &sample.image)?;
                Ok(ReconMetrics {
                    mse: err,
                    psnr_db: psnr_from_mse(err),
                    ssim: ssim(&x_rec, &sample.image)?,
                    attn_discrepancy: attention_discrepancy(&inv.select(k)?, &rec.select(k)?)?,
                })
            })
            .collect()
    };
    match run() {
        Ok(m) => Ok(Some(m)),
        Err(Error::NonFinite(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Unguided inversion then reconstruction of every sample under every
/// (mode, regime) pair. Rows are ordered by image, then mode, then regime.
/// A regime whose trajectory overflows gets a row without metrics.
pub fn recon_rows(
    model: &dyn NoisePredictor,
    samples: &[Sample],
    sched: &NoiseSchedule,
    modes: &[AttentionMode],
    regimes: &[PromptRegime],
) -> Result<Vec<ReconRow>> {
    let per_image: Vec<Vec<ReconRow>> = samples
        .par_iter()
        .enumerate()
        .map(|(id, sample)| {
            let prompts: Vec<Prompt> = regimes
                .iter()
                .map(|&r| regime_prompt(r, sample.prompt))
                .collect();
            let mut rows = Vec::with_capacity(modes.len() * regimes.len());
            for &mode in modes {
                let cfg = SamplerConfig::with_mode(mode);
                let metrics = match recon_metrics(model, sample, &prompts, sched, &cfg)? {
                    Some(all) => all.into_iter().map(Some).collect(),
                    None => prompts
                        .iter()
                        .map(|p| {
                            Ok(
                                recon_metrics(model, sample, std::slice::from_ref(p), sched, &cfg)?
                                    .map(|m| m[0]),
                            )
                        })
                        .collect::<Result<Vec<_>>>()?,
                };
                for (&regime, metrics) in regimes.iter().zip(metrics) {
                    rows.push(ReconRow {
                        image_id: id,
                        mode,
                        prompt_regime: regime,
                        metrics,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Per-image `(attention discrepancy, summed ẑ₀ discrepancy)`.
pub fn correlation_pairs(
    model: &dyn NoisePredictor,
    samples: &[Sample],
    sched: &NoiseSchedule,
    mode: AttentionMode,
    regime: PromptRegime,
) -> Result<Vec<(f64, f64)>> {
    let cfg = SamplerConfig::with_mode(mode);
    samples
        .par_iter()
        .map(|sample| {
            let z0 = batch_of(&image_to_latent(&sample.image)?, 1)?;
            let prompts = [regime_prompt(regime, sample.prompt)];
            let inv = invert(&z0, model, &prompts, sched, &cfg)?;
            let rec = reconstruct(&inv.final_latent, model, &prompts, sched, &cfg)?;
            Ok((
                attention_discrepancy(&inv, &rec)?,
                z0_discrepancy(&inv, &rec)?,
            ))
        })
        .collect()
}

/// MSE over pixels outside the dilated shape footprint.
pub fn background_mse(a: &Tensor, b: &Tensor, coverage: &Tensor, kernel: usize) -> Result<f64> {
    let fg = dilate(
        &EditMask::new(coverage.map(|v| (v > 0.0) as u8 as f32)?)?,
        kernel,
    )?;
    let m = fg.tensor().data();
    let plane = m.len();
    if a.shape() != b.shape() || !a.len().is_multiple_of(plane) {
        return Err(arg_err!("background MSE needs matching [C, H, W] images"));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if m[i % plane] == 0.0 {
            sum += ((x - y) as f64).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(arg_err!("no background pixels"));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditRow {
    pub image_id: usize,
    pub source: Prompt,
    pub target: Prompt,
    pub quantile: f32,
    pub t_mask: usize,
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub background_mse: f64,
    /// The procedural classifier reads the target label off the output.
    pub target_hit: bool,
}

pub const EDIT_CSV_HEADER: [&str; 10] = [
    "image_id",
    "source",
    "target",
    "quantile",
    "t_mask",
    "mse",
    "psnr_db",
    "ssim",
    "background_mse",
    "target_hit",
];

fn prompt_label(p: Prompt) -> String {
    match (p.color(), p.shape()) {
        (Some(c), Some(s)) => format!("{c:?} {s:?}").to_lowercase(),
        _ => "<null>".into(),
    }
}

fn grid_tag(q: f32, t_mask: usize) -> String {
    format!("q{q:.2}_t{t_mask:04}")
}

/// Run the `(q, T_mask)` grid on every sample. When `dir` is given, each
/// image's PPMs (and UTNS dumps) are written by the worker handling it.
pub fn edit_rows(
    model: &dyn NoisePredictor,
    samples: &[Sample],
    sched: &NoiseSchedule,
    grid: &EditGrid,
    dir: Option<&Path>,
) -> Result<Vec<EditRow>> {
    let per_image: Vec<Vec<EditRow>> = samples
        .par_iter()
        .enumerate()
        .map(|(id, sample)| {
            let z0 = image_to_latent(&sample.image)?;
            let target = edit_target(sample.prompt);
            if let Some(dir) = dir {
                image_to_ppm(&sample.image)?
                    .write(&dir.join(format!("images/img{id:03}_original.ppm")))?;
            }
            let mut rows = Vec::new();
            for &quantile in &grid.quantiles {
                for &t_mask in &grid.t_masks {
                    let cfg = EditConfig {
                        quantile,
                        t_mask,
                        kernel: grid.kernel,
                        guidance_scale: grid.guidance_scale,
                        ..EditConfig::new(sample.prompt, target)
                    };
                    let result = edit(&z0, &cfg, model, sched)?;
                    let out = latent_to_image(&result.output)?;
                    let err = mse(&out, &sample.image)?;
                    if let Some(dir) = dir {
                        let tag = format!("img{id:03}_{}", grid_tag(quantile, t_mask));
                        image_to_ppm(&out)?.write(&dir.join(format!("images/{tag}.ppm")))?;
                        let sheets = result
                            .masks()
                            .map(|m| gray_to_ppm(m.tensor()))
                            .collect::<Result<Vec<_>>>()?;
                        Ppm::tile(&sheets, [255, 0, 0])?
                            .write(&dir.join(format!("masks/{tag}.ppm")))?;
                        if grid.dump_steps {
                            let step_dir = dir.join("steps").join(&tag);
                            create_dir(&step_dir)?;
                            for (k, s) in result.steps.iter().enumerate() {
                                io::write_tensor(
                                    &step_dir.join(format!("{k:03}_t{:04}_mask.utns", s.t)),
                                    s.mask.tensor(),
                                )?;
                                io::write_tensor(
                                    &step_dir.join(format!("{k:03}_t{:04}_z0_tgt.utns", s.t)),
                                    &s.z0_tgt,
                                )?;
                                io::write_tensor(
                                    &step_dir.join(format!("{k:03}_t{:04}_z0_aux.utns", s.t)),
                                    &s.z0_aux,
                                )?;
                            }
                        }
                    }
                    rows.push(EditRow {
                        image_id: id,
                        source: sample.prompt,
                        target,
                        quantile,
                        t_mask,
                        mse: err,
                        psnr_db: psnr_from_mse(err),
                        ssim: ssim(&out, &sample.image)?,
                        background_mse: background_mse(&out, &sample.image, &sample.coverage, 3)?,
                        target_hit: classify(&out) == target.color().zip(target.shape()),
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn edit_csv(rows: &[EditRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EDIT_CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.image_id.to_string(),
            prompt_label(r.source),
            prompt_label(r.target),
            r.quantile.to_string(),
            r.t_mask.to_string(),
            r.mse.to_string(),
            r.psnr_db.to_string(),
            r.ssim.to_string(),
            r.background_mse.to_string(),
            (r.target_hit as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(csv_err)
}

/// Mean background MSE and target hit rate per grid cell, in grid order.
pub fn edit_summary(rows: &[EditRow]) -> Vec<(f32, usize, f64, f64)> {
    let mut cells: Vec<(f32, usize)> = Vec::new();
    for r in rows {
        if !cells.contains(&(r.quantile, r.t_mask)) {
            cells.push((r.quantile, r.t_mask));
        }
    }
    cells
        .into_iter()
        .map(|(q, t)| {
            let group: Vec<&EditRow> = rows
                .iter()
                .filter(|r| r.quantile == q && r.t_mask == t)
                .collect();
            let bg = mean_std(&group.iter().map(|r| r.background_mse).collect::<Vec<_>>()).0;
            let hits = group.iter().filter(|r| r.target_hit).count() as f64 / group.len() as f64;
            (q, t, bg, hits)
        })
        .collect()
}

pub fn correlation_csv(pairs: &[(f64, f64)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "attn_mse", "z0_mse"])
        .map_err(csv_err)?;
    for (i, (a, z)) in pairs.iter().enumerate() {
        w.write_record([i.to_string(), a.to_string(), z.to_string()])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(csv_err)
}

fn load_model(config: &StudyConfig, ddim_steps: usize) -> Result<(DenoiserModel, NoiseSchedule)> {
    let model = load_checkpoint(config.checkpoint_path()?)?;
    let sched = make_schedule(model.schedule(), ddim_steps)?;
    Ok((model, sched))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub losses: Vec<f32>,
}

/// Initialise from `seed`, train, and save `checkpoint/` and `loss.csv`.
pub fn cmd_train(config: &StudyConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let run_dir = create_run_dir(config, StudyKind::Train)?;
    let root = Rng::new(config.seed);
    let mut model = DenoiserModel::new(
        config.model.clone(),
        config.schedule,
        &mut root.split(0, INIT_STREAM),
    )?;
    let sched = make_schedule(config.schedule, config.ddim_steps)?;
    let losses = train(&mut model, &sched, &config.train, &root, |_, _| {})?;
    let checkpoint = run_dir.join("checkpoint");
    save_checkpoint(&model, &checkpoint)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write_file(&run_dir.join("loss.csv"), csv)?;
    Ok(TrainOutcome {
        run_dir,
        checkpoint,
        losses,
    })
}

#[derive(Debug)]
pub struct ReconOutcome {
    pub run_dir: PathBuf,
    pub report: ReconReport,
}

pub fn cmd_recon_study(config: &StudyConfig) -> Result<ReconOutcome> {
    config.validate()?;
    let (model, sched) = load_model(config, config.ddim_steps)?;
    let samples = held_out_images(config.seed, config.dataset_size)?;
    let rows = recon_rows(
        &model,
        &samples,
        &sched,
        &config.modes,
        &config.prompt_regimes,
    )?;
    let report = ReconReport {
        rows,
        ddim_steps: config.ddim_steps,
        seed: config.seed,
    };
    let run_dir = create_run_dir(config, StudyKind::ReconStudy)?;
    report.write_csv(&run_dir.join("recon.csv"))?;
    write_file(&run_dir.join("summary.txt"), report.summary())?;
    Ok(ReconOutcome { run_dir, report })
}

#[derive(Debug)]
pub struct CorrOutcome {
    pub run_dir: PathBuf,
    pub pairs: Vec<(f64, f64)>,
    pub r: f64,
}

/// Uses the first configured mode and prompt regime.
pub fn cmd_correlation_study(config: &StudyConfig) -> Result<CorrOutcome> {
    config.validate()?;
    if config.dataset_size < 2 {
        return Err(arg_err!(
            "correlation needs at least 2 images, got {}",
            config.dataset_size
        ));
    }
    let (model, sched) = load_model(config, config.ddim_steps)?;
    let samples = held_out_images(config.seed, config.dataset_size)?;
    let pairs = correlation_pairs(
        &model,
        &samples,
        &sched,
        config.modes[0],
        config.prompt_regimes[0],
    )?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let r = pearson(&xs, &ys)?;
    let run_dir = create_run_dir(config, StudyKind::CorrStudy)?;
    write_file(&run_dir.join("correlation.csv"), correlation_csv(&pairs)?)?;
    write_file(
        &run_dir.join("correlation.txt"),
        format!("n = {}\nr = {r}\n", pairs.len()),
    )?;
    Ok(CorrOutcome { run_dir, pairs, r })
}

#[derive(Debug)]
pub struct EditOutcome {
    pub run_dir: PathBuf,
    pub rows: Vec<EditRow>,
}

pub fn cmd_edit(config: &StudyConfig) -> Result<EditOutcome> {
    config.validate()?;
    let (model, sched) = load_model(config, config.edit.ddim_steps)?;
    let samples = held_out_images(config.seed, config.edit.images)?;
    let run_dir = create_run_dir(config, StudyKind::Edit)?;
    create_dir(&run_dir.join("images"))?;
    create_dir(&run_dir.join("masks"))?;
    let rows = edit_rows(&model, &samples, &sched, &config.edit, Some(&run_dir))?;
    write_file(&run_dir.join("ablation.csv"), edit_csv(&rows)?)?;
    let mut summary = String::from("quantile t_mask background_mse target_hit_rate\n");
    for (q, t, bg, hits) in edit_summary(&rows) {
        summary.push_str(&format!("{q:.2} {t} {bg:.6e} {hits:.3}\n"));
    }
    write_file(&run_dir.join("summary.txt"), summary)?;
    Ok(EditOutcome { run_dir, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::{ConstantDenoiser, ScheduleParams};

    fn tiny_study(out: &Path) -> StudyConfig {
        StudyConfig {
            dataset_size: 3,
            ddim_steps: 4,
            out: out.to_path_buf(),
            ..StudyConfig::default()
        }
    }

    #[test]
    fn run_dirs_are_append_only() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_study(&tmp.path().join("nested/out"));
        let a = create_run_dir(&cfg, StudyKind::ReconStudy).unwrap();
        let b = create_run_dir(&cfg, StudyKind::ReconStudy).unwrap();
        assert!(a.ends_with("recon-study-0001") && b.ends_with("recon-study-0002"));
        let snap = StudyConfig::load(&a.join("config.json")).unwrap();
        assert_eq!(snap.kind, Some(StudyKind::ReconStudy));
        assert_eq!(snap.dataset_size, 3);
    }

    /// Overflows whenever the null prompt is in the batch.
    struct NullOverflows(ConstantDenoiser);

    impl NoisePredictor for NullOverflows {
        fn predict(
            &self,
            z: &Tensor,
            t: usize,
            prompts: &[Prompt],
            mode: AttentionMode,
        ) -> Result<crate::scheduler::Prediction> {
            if prompts.iter().any(|p| p.is_null()) {
                return Err(Error::NonFinite("eps overflow".into()));
            }
            self.0.predict(z, t, prompts, mode)
        }
    }

    #[test]
    fn diverged_regimes_keep_their_rows() {
        let samples = held_out_images(5, 2).unwrap();
        let sched = make_schedule(ScheduleParams::default(), 4).unwrap();
        let eps = Rng::new(1).randn(&[3, 32, 32]);
        let model = NullOverflows(ConstantDenoiser { eps });
        let modes = [AttentionMode::Standard];
        let rows = recon_rows(&model, &samples, &sched, &modes, &PromptRegime::ALL).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            assert_eq!(r.metrics.is_none(), r.prompt_regime == PromptRegime::Null);
        }
        let alone = recon_rows(&model, &samples, &sched, &modes, &[PromptRegime::Source]).unwrap();
        assert_eq!(alone[0].metrics, rows[1].metrics);
        assert!(alone[0].metrics.unwrap().mse < 1e-8);
    }

    #[test]
    fn prompt_rules() {
        let p = Prompt::new(Color::Red, Shape::Circle);
        assert_eq!(
            mismatched_prompt(p),
            Prompt::new(Color::Green, Shape::Square)
        );
        assert_eq!(edit_target(p), Prompt::new(Color::Blue, Shape::Circle));
        for c in Color::ALL {
            for s in Shape::ALL {
                let q = mismatched_prompt(Prompt::new(c, s));
                assert!(q.color() != Some(c) && q.shape() != Some(s));
                assert_ne!(edit_target(Prompt::new(c, s)).color(), Some(c));
            }
        }
        assert!(regime_prompt(PromptRegime::Null, p).is_null());
    }

    #[test]
    fn held_out_is_deterministic_and_seeded() {
        let a = held_out_images(3, 4).unwrap();
        let b = held_out_images(3, 4).unwrap();
        let c = held_out_images(4, 4).unwrap();
        assert_eq!(a[2].image, b[2].image);
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn background_mse_ignores_the_footprint() {
        let mut cov = Tensor::zeros(&[8, 8]).into_data();
        cov[3 * 8 + 3] = 0.5;
        let cov = Tensor::new(vec![8, 8], cov).unwrap();
        let a = Tensor::full(&[3, 8, 8], 0.5).unwrap();
        let mut d = a.clone().into_data();
        for ch in 0..3 {
            for (y, x) in [(2, 2), (4, 4), (3, 3)] {
                d[ch * 64 + y * 8 + x] = 1.0;
            }
        }
        let b = Tensor::new(vec![3, 8, 8], d.clone()).unwrap();
        assert_eq!(background_mse(&a, &b, &cov, 3).unwrap(), 0.0);
        d[7] = 0.0;
        let c = Tensor::new(vec![3, 8, 8], d).unwrap();
        assert!((background_mse(&a, &c, &cov, 3).unwrap() - 0.25 / (3.0 * 55.0)).abs() < 1e-12);
    }

    #[test]
    fn constant_denoiser_correlation_is_undefined() {
        let samples = held_out_images(0, 3).unwrap();
        let model = ConstantDenoiser {
            eps: Rng::new(5).randn(&[3, 32, 32]),
        };
        let sched = make_schedule(ScheduleParams::default(), 5).unwrap();
        let pairs = correlation_pairs(
            &model,
            &samples,
            &sched,
            AttentionMode::Standard,
            PromptRegime::Source,
        )
        .unwrap();
        assert!(pairs.iter().all(|&(a, _)| a == 0.0));
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        assert_eq!(pearson(&xs, &ys).unwrap_err().category(), "correlation");
    }

    #[test]
    fn csv_formats() {
        let text = String::from_utf8(correlation_csv(&[(0.5, 1.0), (0.25, 2.0)]).unwrap()).unwrap();
        assert_eq!(text, "image_id,attn_mse,z0_mse\n0,0.5,1\n1,0.25,2\n");
        let row = EditRow {
            image_id: 0,
            source: Prompt::new(Color::Red, Shape::Circle),
            target: Prompt::new(Color::Blue, Shape::Circle),
            quantile: 0.5,
            t_mask: 200,
            mse: 0.1,
            psnr_db: 10.0,
            ssim: 0.5,
            background_mse: 0.01,
            target_hit: true,
        };
        let text = String::from_utf8(edit_csv(std::slice::from_ref(&row)).unwrap()).unwrap();
        assert_eq!(
            text.lines().nth(1),
            Some("0,red circle,blue circle,0.5,200,0.1,10,0.5,0.01,1")
        );
        assert_eq!(
            edit_summary(&[
                row.clone(),
                EditRow {
                    background_mse: 0.03,
                    target_hit: false,
                    ..row
                }
            ]),
            vec![(0.5, 200, 0.02, 0.5)]
        );
    }
}
