//! Repeated training runs, their ensemble, and the test report.

use std::fs;
use std::path::{Path, PathBuf};

use gfk_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::read_dataset;
use crate::error::{Error, Result};
use crate::metrics::{dataset_report, EvalItem, Report, CSV_HEADER};
use crate::network::ModelConfig;
use crate::synth::{generate, SitsSample, SynthConfig};
use crate::train::ensemble::average_log_probs;
use crate::train::eval::{eval_items, predicted_masks};
use crate::train::{series_logits, train, TrainConfig};

/// Procedurally generated train/val/test splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthData {
    pub synth: SynthConfig,
    pub train_series: usize,
    pub val_series: usize,
    pub test_series: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SynthData {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train_series: 30,
            val_series: 8,
            test_series: 8,
            frames: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Directory with `train/`, `val/` and `test/` series folders.
    Path(PathBuf),
    Synth(SynthData),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub runs: usize,
    pub output_dir: PathBuf,
    /// Derives the per-run model and training seeds.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            data: DataSource::Synth(SynthData::default()),
            runs: 5,
            output_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        match &self.data {
            DataSource::Path(p) => {
                for split in ["train", "val", "test"] {
                    if !p.join(split).is_dir() {
                        return Err(Error::Config(format!("missing data directory {}", p.join(split).display())));
                    }
                }
            }
            DataSource::Synth(s) => {
                if s.train_series == 0 || s.val_series == 0 || s.test_series == 0 || s.frames == 0 {
                    return Err(Error::Config("synthetic splits need at least one series of one frame".into()));
                }
                if s.synth.size != self.model.context {
                    return Err(Error::Config(format!(
                        "synthetic size {} differs from model context {}",
                        s.synth.size, self.model.context
                    )));
                }
            }
        }
        Ok(())
    }

    /// Model and training seeds of run `r`.
    pub fn run_seeds(&self, r: usize) -> (u64, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(r as u64 + 1);
        (rng.random(), rng.random())
    }
}

pub struct Splits {
    pub train: Vec<SitsSample>,
    pub val: Vec<SitsSample>,
    pub test: Vec<SitsSample>,
}

/// Draws `count` valid series; scenes whose front would leave the image are skipped.
pub fn synth_split(cfg: &SynthConfig, count: usize, frames: usize, seed: u64, split: u64) -> Result<Vec<SitsSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split + 1);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        let seeds: Vec<u64> = (0..count - out.len()).map(|_| rng.random()).collect();
        attempts += seeds.len();
        if attempts > 20 * count + 20 {
            return Err(Error::Config("synthetic configuration rarely yields a valid scene".into()));
        }
        let got: Vec<Option<SitsSample>> = seeds
            .par_iter()
            .map(|&s| generate(&cfg.scene(s), frames).ok())
            .collect();
        out.extend(got.into_iter().flatten());
    }
    Ok(out)
}

pub fn load_splits(data: &DataSource) -> Result<Splits> {
    match data {
        DataSource::Path(p) => Ok(Splits {
            train: read_dataset(&p.join("train"))?,
            val: read_dataset(&p.join("val"))?,
            test: read_dataset(&p.join("test"))?,
        }),
        DataSource::Synth(s) => Ok(Splits {
            train: synth_split(&s.synth, s.train_series, s.frames, s.seed, 0)?,
            val: synth_split(&s.synth, s.val_series, s.frames, s.seed, 1)?,
            test: synth_split(&s.synth, s.test_series, s.frames, s.seed, 2)?,
        }),
    }
}

fn items_from_logits(set: &[SitsSample], logits: &[Tensor], crop: usize) -> Result<Vec<EvalItem>> {
    let mut items = Vec::new();
    for (s, l) in set.iter().zip(logits) {
        let preds = predicted_masks(l, crop, s.resolution_m_per_px)?;
        items.extend(eval_items(s, &preds, crop)?);
    }
    Ok(items)
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub members: Vec<Report>,
    pub ensemble: Report,
    pub run_dirs: Vec<PathBuf>,
    pub best_epochs: Vec<usize>,
}

pub fn report_csv(members: &[Report], ensemble: &Report) -> String {
    let mut csv = format!("{CSV_HEADER}\n");
    for (r, rep) in members.iter().enumerate() {
        csv.push_str(&rep.csv_row(&format!("run_{r}")));
        csv.push('\n');
    }
    csv.push_str(&ensemble.csv_row("ensemble"));
    csv.push('\n');
    csv
}

/// Trains `runs` members, evaluates each best checkpoint and their ensemble on
/// the test split, and writes `report.csv` to the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let splits = load_splits(&cfg.data)?;
    run_on_splits(cfg, &splits)
}

pub fn run_on_splits(cfg: &ExperimentConfig, splits: &Splits) -> Result<ExperimentResult> {
    let out = cfg.output_dir.as_path();
    fs::create_dir_all(out)?;
    fs::write(out.join("experiment.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    let crop = cfg.model.eval_crop;
    let mut members = Vec::with_capacity(cfg.runs);
    let mut member_logits: Vec<Vec<Tensor>> = Vec::with_capacity(cfg.runs);
    let mut run_dirs = Vec::with_capacity(cfg.runs);
    let mut best_epochs = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs {
        let (ms, ts) = cfg.run_seeds(r);
        let model = ModelConfig {
            seed: ms,
            ..cfg.model.clone()
        };
        let tc = TrainConfig {
            seed: ts,
            ..cfg.train.clone()
        };
        let dir = out.join(format!("run_{r}"));
        log::info!("run {r}: training into {}", dir.display());
        let res = train(&model, &tc, &splits.train, &splits.val, Some(&dir))?;
        let logits: Vec<Tensor> = splits
            .test
            .iter()
            .map(|s| series_logits(&res.best, s))
            .collect::<Result<_>>()?;
        let report = dataset_report(&items_from_logits(&splits.test, &logits, crop)?)?;
        log::info!("run {r}: test MDE {:.1} m, mIoU {:.4}", report.mde_m, report.iou_all);
        fs::write(dir.join("test_report.csv"), format!("{CSV_HEADER}\n{}\n", report.csv_row(&format!("run_{r}"))))?;
        members.push(report);
        member_logits.push(logits);
        run_dirs.push(dir);
        best_epochs.push(res.best_epoch);
    }
    let ens_logits: Vec<Tensor> = (0..splits.test.len())
        .map(|i| {
            let per: Vec<Tensor> = member_logits.iter().map(|m| m[i].clone()).collect();
            average_log_probs(&per)
        })
        .collect::<Result<_>>()?;
    let ensemble = dataset_report(&items_from_logits(&splits.test, &ens_logits, crop)?)?;
    fs::write(out.join("report.csv"), report_csv(&members, &ensemble))?;
    Ok(ExperimentResult {
        members,
        ensemble,
        run_dirs,
        best_epochs,
    })
}

/// Reads an experiment configuration from JSON.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), cfg);
        let p: ExperimentConfig = serde_json::from_str(r#"{"data": {"path": "/nonexistent"}, "runs": 2}"#).unwrap();
        assert_eq!(p.data, DataSource::Path("/nonexistent".into()));
        assert!(p.validate().is_err());
        assert!(ExperimentConfig { runs: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn seeds_differ_per_run() {
        let cfg = ExperimentConfig::default();
        assert_ne!(cfg.run_seeds(0), cfg.run_seeds(1));
        assert_eq!(cfg.run_seeds(2), cfg.run_seeds(2));
    }
}
