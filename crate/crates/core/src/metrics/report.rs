use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::mean_std;
use crate::attention::AttentionMode;
use crate::error::{arg_err, Error, Result};

/// Which prompt drives inversion and reconstruction of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptRegime {
    /// The null prompt.
    Null,
    /// The image's own label.
    Source,
    /// A label that differs from the image in both color and shape.
    Mismatched,
}

impl PromptRegime {
    pub const ALL: [PromptRegime; 3] = [Self::Null, Self::Source, Self::Mismatched];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Null => "null",
            Self::Source => "source",
            Self::Mismatched => "mismatched",
        }
    }
}

impl fmt::Display for PromptRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| arg_err!("unknown prompt regime {s:?} (null|source|mismatched)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconRow {
    pub image_id: usize,
    pub mode: AttentionMode,
    pub prompt_regime: PromptRegime,
    /// `None` when the trajectory left the finite range.
    pub metrics: Option<ReconMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub attn_discrepancy: f64,
}

/// Mean and standard deviation of each metric over one (mode, regime) group.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub mode: AttentionMode,
    pub prompt_regime: PromptRegime,
    /// Rows with finite metrics; only these enter the statistics.
    pub count: usize,
    pub diverged: usize,
    pub mse: (f64, f64),
    pub psnr_db: (f64, f64),
    pub ssim: (f64, f64),
    pub attn_discrepancy: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconReport {
    pub rows: Vec<ReconRow>,
    pub ddim_steps: usize,
    pub seed: u64,
}

pub const CSV_HEADER: [&str; 7] = [
    "image_id",
    "mode",
    "prompt_regime",
    "mse",
    "psnr_db",
    "ssim",
    "attn_discrepancy",
];

impl ReconReport {
    /// Groups in first-appearance order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut keys: Vec<(AttentionMode, PromptRegime)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.mode, r.prompt_regime)) {
                keys.push((r.mode, r.prompt_regime));
            }
        }
        keys.into_iter()
            .map(|(mode, regime)| {
                let group: Vec<&ReconRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.mode == mode && r.prompt_regime == regime)
                    .collect();
                let finite: Vec<&ReconMetrics> =
                    group.iter().filter_map(|r| r.metrics.as_ref()).collect();
                let col = |f: fn(&ReconMetrics) -> f64| {
                    mean_std(&finite.iter().map(|m| f(m)).collect::<Vec<_>>())
                };
                Aggregate {
                    mode,
                    prompt_regime: regime,
                    count: finite.len(),
                    diverged: group.len() - finite.len(),
                    mse: col(|r| r.mse),
                    psnr_db: col(|r| r.psnr_db),
                    ssim: col(|r| r.ssim),
                    attn_discrepancy: col(|r| r.attn_discrepancy),
                }
            })
            .collect()
    }

    pub fn aggregate(&self, mode: AttentionMode, regime: PromptRegime) -> Option<Aggregate> {
        self.aggregates()
            .into_iter()
            .find(|a| a.mode == mode && a.prompt_regime == regime)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(CSV_HEADER).map_err(fail)?;
        for r in &self.rows {
            let m = r.metrics.map_or([const { String::new() }; 4], |m| {
                [
                    m.mse.to_string(),
                    m.psnr_db.to_string(),
                    m.ssim.to_string(),
                    m.attn_discrepancy.to_string(),
                ]
            });
            let [mse, psnr_db, ssim, attn] = m;
            w.write_record([
                r.image_id.to_string(),
                r.mode.to_string(),
                r.prompt_regime.to_string(),
                mse,
                psnr_db,
                ssim,
                attn,
            ])
            .map_err(fail)?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// Plain-text table of the aggregates.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "{} steps, seed {}\n{:<9} {:<11} {:>4} {:>8} {:>22} {:>16} {:>16} {:>22}\n",
            self.ddim_steps,
            self.seed,
            "mode",
            "regime",
            "n",
            "diverged",
            "mse",
            "psnr_db",
            "ssim",
            "attn_discrepancy"
        );
        for a in self.aggregates() {
            let pm = |(m, s): (f64, f64)| format!("{m:.4e} ± {s:.1e}");
            let pf = |(m, s): (f64, f64)| format!("{m:.3} ± {s:.3}");
            out.push_str(&format!(
                "{:<9} {:<11} {:>4} {:>8} {:>22} {:>16} {:>16} {:>22}\n",
                a.mode.as_str(),
                a.prompt_regime.as_str(),
                a.count,
                a.diverged,
                pm(a.mse),
                pf(a.psnr_db),
                pf(a.ssim),
                pm(a.attn_discrepancy)
            ));
        }
        out
    }
}
