//! The trained model shared by the slow integration targets.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use unimap_core::denoiser::{ModelConfig, TrainConfig};
use unimap_core::harness::{cmd_train, StudyConfig, StudyKind};
use unimap_core::Result;

pub fn train_config(out: &Path) -> StudyConfig {
    StudyConfig {
        seed: 0,
        model: ModelConfig {
            widths: [16, 32, 64],
            ..ModelConfig::default()
        },
        train: TrainConfig {
            steps: 12_000,
            batch_size: 16,
            learning_rate: 5e-4,
            ..TrainConfig::default()
        },
        out: out.to_path_buf(),
        ..StudyConfig::default()
    }
}

static LOCK: Mutex<()> = Mutex::new(());

/// Train once; reuse the cached run while its config snapshot matches.
/// Returns the run directory.
pub fn trained_run() -> Result<PathBuf> {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-model");
    let config = train_config(&root);
    let run = root.join("train-0001");
    let mut snapshot = config.clone();
    snapshot.kind = Some(StudyKind::Train);
    let expected = snapshot.to_json()? + "\n";
    let cached = fs::read_to_string(run.join("config.json")).is_ok_and(|s| s == expected)
        && run.join("checkpoint/manifest.txt").is_file()
        && run.join("loss.csv").is_file();
    if cached {
        println!("using cached model at {}", run.display());
        return Ok(run);
    }
    let _ = fs::remove_dir_all(&root);
    let start = Instant::now();
    let out = cmd_train(&config)?;
    let window = |w: &[f32]| w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
    println!(
        "trained {} steps in {:.0}s: mean loss first 200 {:.4}, last 200 {:.4}",
        out.losses.len(),
        start.elapsed().as_secs_f64(),
        window(&out.losses[..200]),
        window(&out.losses[out.losses.len() - 200..])
    );
    Ok(out.run_dir)
}

#[allow(dead_code)]
pub fn trained_checkpoint() -> Result<PathBuf> {
    Ok(trained_run()?.join("checkpoint"))
}
