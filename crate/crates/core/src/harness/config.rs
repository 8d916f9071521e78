use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::denoiser::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::PromptRegime;
use crate::scheduler::{make_schedule, ScheduleParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    Train,
    ReconStudy,
    CorrStudy,
    Edit,
}

impl StudyKind {
    pub const ALL: [StudyKind; 4] = [Self::Train, Self::ReconStudy, Self::CorrStudy, Self::Edit];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::ReconStudy => "recon-study",
            Self::CorrStudy => "corr-study",
            Self::Edit => "edit",
        }
    }
}

impl fmt::Display for StudyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StudyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown study kind {s:?}")))
    }
}

/// The `(q, T_mask)` ablation grid of an editing study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditGrid {
    /// Number of held-out images to edit.
    pub images: usize,
    pub ddim_steps: usize,
    pub quantiles: Vec<f32>,
    pub t_masks: Vec<usize>,
    pub kernel: usize,
    pub guidance_scale: f32,
    /// Also write each step's mask and clean predictions as UTNS tensors.
    pub dump_steps: bool,
}

impl Default for EditGrid {
    fn default() -> Self {
        Self {
            images: 8,
            ddim_steps: 50,
            quantiles: vec![0.3, 0.5, 0.7],
            t_masks: vec![0, 200, 400],
            kernel: 3,
            guidance_scale: 7.5,
            dump_steps: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// Filled in by the command that runs the config.
    pub kind: Option<StudyKind>,
    pub seed: u64,
    /// Held-out images for the studies.
    pub dataset_size: usize,
    pub checkpoint: Option<PathBuf>,
    /// Used for training; studies take the schedule stored in the checkpoint.
    pub schedule: ScheduleParams,
    pub ddim_steps: usize,
    pub modes: Vec<AttentionMode>,
    pub prompt_regimes: Vec<PromptRegime>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub edit: EditGrid,
    pub out: PathBuf,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            kind: None,
            seed: 0,
            dataset_size: 50,
            checkpoint: None,
            schedule: ScheduleParams::default(),
            ddim_steps: 20,
            modes: AttentionMode::ALL.to_vec(),
            prompt_regimes: PromptRegime::ALL.to_vec(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            edit: EditGrid::default(),
            out: PathBuf::from("runs"),
        }
    }
}

/// Command-line values that replace fields of a loaded config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Training steps for `train`, DDIM steps otherwise.
    pub steps: Option<usize>,
    pub mode: Option<AttentionMode>,
    pub quantile: Option<f32>,
    pub t_mask: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

fn config_err(e: impl fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Pretty JSON with every default materialised.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(config_err)
    }

    pub fn apply(&mut self, kind: StudyKind, o: &Overrides) {
        self.kind = Some(kind);
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(steps) = o.steps {
            match kind {
                StudyKind::Train => self.train.steps = steps,
                StudyKind::Edit => self.edit.ddim_steps = steps,
                _ => self.ddim_steps = steps,
            }
        }
        if let Some(mode) = o.mode {
            self.modes = vec![mode];
        }
        if let Some(q) = o.quantile {
            self.edit.quantiles = vec![q];
        }
        if let Some(t) = o.t_mask {
            self.edit.t_masks = vec![t];
        }
        if let Some(ck) = &o.checkpoint {
            self.checkpoint = Some(ck.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dataset_size == 0 {
            return bad("dataset_size must be at least 1".into());
        }
        if self.modes.is_empty() || self.prompt_regimes.is_empty() {
            return bad("modes and prompt_regimes must be non-empty".into());
        }
        make_schedule(self.schedule, self.ddim_steps).map_err(config_err)?;
        make_schedule(self.schedule, self.edit.ddim_steps).map_err(config_err)?;
        self.model.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        let e = &self.edit;
        if e.images == 0 || e.quantiles.is_empty() || e.t_masks.is_empty() {
            return bad("edit grid needs at least one image, quantile and T_mask".into());
        }
        if let Some(q) = e.quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return bad(format!("quantile {q} outside [0, 1]"));
        }
        if let Some(t) = e.t_masks.iter().find(|&&t| t > self.schedule.train_steps) {
            return bad(format!(
                "T_mask {t} exceeds T = {}",
                self.schedule.train_steps
            ));
        }
        if e.kernel.is_multiple_of(2) {
            return bad(format!("dilation kernel {} must be odd", e.kernel));
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("this command needs a checkpoint path".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = StudyConfig::default();
        cfg.validate().unwrap();
        let json = cfg.to_json().unwrap();
        assert_eq!(StudyConfig::from_json(&json).unwrap(), cfg);
        assert_eq!(StudyConfig::from_json("{}").unwrap(), cfg);
        assert!(json.contains("\"quantiles\""));
    }

    #[test]
    fn partial_and_unknown_fields() {
        let cfg =
            StudyConfig::from_json(r#"{"seed": 7, "modes": ["uniform"], "edit": {"images": 2}}"#)
                .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.modes, vec![AttentionMode::Uniform]);
        assert_eq!(cfg.edit.images, 2);
        assert_eq!(cfg.edit.kernel, 3);
        let err = StudyConfig::from_json(r#"{"sed": 7}"#).unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(StudyConfig::from_json(r#"{"train": {"stepz": 1}}"#).is_err());
        let nested =
            StudyConfig::from_json(r#"{"model": {"widths": [16, 32, 64]}, "train": {"steps": 9}}"#)
                .unwrap();
        assert_eq!(
            (nested.model.widths, nested.model.d_c, nested.train.steps),
            ([16, 32, 64], 32, 9)
        );
    }

    #[test]
    fn steps_override_depends_on_kind() {
        let o = Overrides {
            steps: Some(5),
            ..Overrides::default()
        };
        let mut a = StudyConfig::default();
        a.apply(StudyKind::Train, &o);
        assert_eq!((a.train.steps, a.ddim_steps), (5, 20));
        let mut b = StudyConfig::default();
        b.apply(StudyKind::ReconStudy, &o);
        assert_eq!((b.train.steps, b.ddim_steps), (20_000, 5));
        let mut c = StudyConfig::default();
        c.apply(
            StudyKind::Edit,
            &Overrides {
                steps: Some(7),
                quantile: Some(0.9),
                t_mask: Some(0),
                ..o
            },
        );
        assert_eq!(
            (
                c.edit.ddim_steps,
                c.edit.quantiles.clone(),
                c.edit.t_masks.clone()
            ),
            (7, vec![0.9], vec![0])
        );
        assert_eq!(c.kind, Some(StudyKind::Edit));
    }

    #[test]
    fn validation() {
        let mut cfg = StudyConfig::default();
        cfg.edit.quantiles = vec![1.5];
        assert!(cfg.validate().is_err());
        let cfg = StudyConfig {
            ddim_steps: 0,
            ..StudyConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = StudyConfig::default();
        cfg.edit.t_masks = vec![1001];
        assert!(cfg.validate().is_err());
        assert!(StudyConfig::default().checkpoint_path().is_err());
    }
}
