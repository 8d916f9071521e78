//! Checkpoints: one UTNS file per parameter plus `manifest.txt`.
//!
//! ```text
//! checkpoint 1
//! config {"image_size":32,...}
//! schedule train_steps=1000 beta_start=0.0001 beta_end=0.02
//! vocab red green blue circle square triangle <null> <pad>
//! param tok_emb tok_emb.utns
//! ...
//! ```

use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::model::{DenoiserModel, ModelConfig};
use super::prompt::VOCAB;
use crate::error::{Error, Result};
use crate::numerics::io;
use crate::scheduler::ScheduleParams;

pub const MANIFEST: &str = "manifest.txt";

pub fn save_checkpoint(model: &DenoiserModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = model.schedule();
    let config = serde_json::to_string(model.config()).map_err(|e| Error::Format(e.to_string()))?;
    let mut manifest = format!(
        "checkpoint 1\nconfig {config}\nschedule train_steps={} beta_start={} beta_end={}\nvocab {}\n",
        s.train_steps,
        s.beta_start,
        s.beta_end,
        VOCAB.join(" ")
    );
    for (name, p) in model.param_names().iter().zip(model.params()) {
        let file = format!("{name}.utns");
        io::write_tensor(&dir.join(&file), p)?;
        manifest.push_str(&format!("param {name} {file}\n"));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<DenoiserModel> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let mut config: Option<ModelConfig> = None;
    let mut schedule: Option<ScheduleParams> = None;
    let mut named = Vec::new();
    let mut lines = text.lines();
    if lines.next() != Some("checkpoint 1") {
        return Err(bad("not a version-1 checkpoint manifest".into()));
    }
    for line in lines {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "config" => config = Some(serde_json::from_str(rest).map_err(|e| bad(e.to_string()))?),
            "schedule" => {
                let mut p = ScheduleParams::default();
                for kv in rest.split_whitespace() {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| bad(format!("malformed {kv:?}")))?;
                    let num = |v: &str| {
                        v.parse::<f64>()
                            .map_err(|_| bad(format!("bad number {v:?}")))
                    };
                    match k {
                        "train_steps" => {
                            p.train_steps =
                                v.parse().map_err(|_| bad(format!("bad number {v:?}")))?
                        }
                        "beta_start" => p.beta_start = num(v)?,
                        "beta_end" => p.beta_end = num(v)?,
                        _ => return Err(bad(format!("unknown schedule field {k}"))),
                    }
                }
                schedule = Some(p);
            }
            "vocab" => {
                if rest.split_whitespace().ne(VOCAB.iter().copied()) {
                    return Err(bad(format!("vocabulary {rest:?} differs from this build")));
                }
            }
            "param" => {
                let (name, file) = rest
                    .split_once(' ')
                    .ok_or_else(|| bad(format!("malformed {line:?}")))?;
                named.push((
                    name.to_string(),
                    Arc::new(io::read_tensor(&dir.join(file))?),
                ));
            }
            "" => {}
            other => return Err(bad(format!("unknown manifest key {other:?}"))),
        }
    }
    DenoiserModel::from_params(
        config.ok_or_else(|| bad("missing config".into()))?,
        schedule.ok_or_else(|| bad("missing schedule".into()))?,
        named,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::model::tests::tiny_config;
    use crate::numerics::Rng;

    #[test]
    fn round_trip_and_byte_stability() {
        let model =
            DenoiserModel::new(tiny_config(), ScheduleParams::default(), &mut Rng::new(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save_checkpoint(&model, &a).unwrap();
        let back = load_checkpoint(&a).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.schedule(), model.schedule());
        for (x, y) in back.params().iter().zip(model.params()) {
            assert_eq!(x, y);
        }
        save_checkpoint(&back, &b).unwrap();
        for entry in fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(a.join(&name)).unwrap(),
                fs::read(b.join(&name)).unwrap()
            );
        }
    }

    #[test]
    fn missing_and_corrupt_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint(&dir.path().join("none")),
            Err(Error::Io { .. })
        ));
        let model =
            DenoiserModel::new(tiny_config(), ScheduleParams::default(), &mut Rng::new(4)).unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        fs::remove_file(dir.path().join("tok_emb.utns")).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
