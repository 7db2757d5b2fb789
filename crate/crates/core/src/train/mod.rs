//! Training loop with validation-driven checkpoint selection.

pub mod augment;
pub mod ensemble;
pub mod eval;
pub mod loss;
pub mod optim;

use std::fs;
use std::path::Path;
use std::sync::mpsc;

use gfk_autodiff::{checkpoint, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ModelConfig, Network};
use crate::synth::SitsSample;
use crate::zones::ZoneMask;

pub use augment::AugmentConfig;
pub use ensemble::Ensemble;
pub use eval::{evaluate_network, selection_score, series_logits, Selection};
pub use optim::{Grads, PlateauConfig, ReduceOnPlateau, Sgd};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub scheduler: PlateauConfig,
    pub epochs: usize,
    pub series_per_epoch: usize,
    pub batch_series: usize,
    pub label_smoothing: f64,
    pub dice_smooth: f64,
    /// Window length drawn from each training series.
    pub frames: usize,
    /// Clip the global gradient norm of a batch; off when `None`.
    pub max_grad_norm: Option<f64>,
    pub augment: AugmentConfig,
    /// Batches prepared ahead of the optimiser.
    pub prefetch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.0,
            scheduler: PlateauConfig::default(),
            epochs: 80,
            series_per_epoch: 5000,
            batch_series: 32,
            label_smoothing: 0.1,
            dice_smooth: 1.0,
            frames: 8,
            max_grad_norm: None,
            augment: AugmentConfig::default(),
            prefetch: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("momentum must lie in [0, 1) and label_smoothing in [0, 1]".into()));
        }
        if !(self.scheduler.factor > 0.0 && self.scheduler.factor <= 1.0) || self.scheduler.patience == 0 {
            return Err(Error::Config("scheduler needs a factor in (0, 1] and patience >= 1".into()));
        }
        if self.epochs == 0 || self.series_per_epoch == 0 || self.batch_series == 0 || self.frames == 0 {
            return Err(Error::Config("epochs, series_per_epoch, batch_series and frames must be positive".into()));
        }
        if self.dice_smooth < 0.0 || self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::Config("dice_smooth must be >= 0 and max_grad_norm > 0".into()));
        }
        self.augment.validate()
    }
}

/// Everything needed to repeat a run; written as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mde_m: f64,
    pub val_miou: f64,
    pub lr: f64,
}

pub const CURVES_HEADER: &str = "epoch,train_loss,val_mde_m,val_miou,lr";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.6},{:.8},{:.10}",
            self.epoch, self.train_loss, self.val_mde_m, self.val_miou, self.lr
        )
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub best: Network,
    pub last: Network,
    pub best_epoch: usize,
    pub best_val_mde_m: f64,
    pub curves: Vec<EpochRecord>,
}

/// Loss and parameter gradients of one series.
pub fn sample_grads(net: &Network, s: &SitsSample, cfg: &TrainConfig) -> Result<(f64, Grads)> {
    let (x, dates) = eval::series_input(s)?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let y = net.forward(&mut g, xv, &dates)?;
    let masks: Vec<ZoneMask> = s.frames.iter().map(|f| f.mask.clone()).collect();
    let l = loss::segmentation_loss(&mut g, y, &masks, cfg.label_smoothing, cfg.dice_smooth)?;
    let value = g.value(l.total).item();
    g.backward(l.total)?;
    let mut grads = Grads::zeros(net.params.len());
    for (id, gr) in g.param_grads(&net.params) {
        grads.add(id.index(), gr);
    }
    Ok((value, grads))
}

fn random_window(rng: &mut impl Rng, s: &SitsSample, t: usize) -> SitsSample {
    let start = rng.random_range(0..=s.len() - t);
    s.window(start, t)
}

/// The augmented training windows of one epoch, in batch order.
fn epoch_batches(
    cfg: &TrainConfig,
    train_set: &[SitsSample],
    epoch: usize,
    tx: mpsc::SyncSender<Result<Vec<SitsSample>>>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64 + 1);
    let mut left = cfg.series_per_epoch;
    while left > 0 {
        let b = cfg.batch_series.min(left);
        left -= b;
        let plans: Vec<(usize, usize, u64)> = (0..b)
            .map(|_| {
                (
                    rng.random_range(0..train_set.len()),
                    rng.random_range(0..train_set.len()),
                    rng.random(),
                )
            })
            .collect();
        let batch = plans
            .into_par_iter()
            .map(|(i, j, seed)| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let s = random_window(&mut r, &train_set[i], cfg.frames);
                let d = random_window(&mut r, &train_set[j], cfg.frames);
                augment::augment(&s, Some(&d), &cfg.augment, &mut r)
            })
            .collect::<Result<Vec<_>>>();
        let stop = batch.is_err();
        if tx.send(batch).is_err() || stop {
            return;
        }
    }
}

fn write_run_file(dir: Option<&Path>, name: &str, contents: &str) -> Result<()> {
    if let Some(d) = dir {
        fs::write(d.join(name), contents)?;
    }
    Ok(())
}

/// Trains one model. With `run_dir`, writes `config.json`, `curves.csv`,
/// `best.ckpt` and `final.ckpt` there.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[SitsSample],
    val_set: &[SitsSample],
    run_dir: Option<&Path>,
) -> Result<RunResult> {
    cfg.validate()?;
    model.validate()?;
    if model.temporal.is_none() && cfg.frames != 1 {
        return Err(Error::Config("a mono-temporal model trains on windows of 1 frame".into()));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    if let Some(s) = train_set.iter().find(|s| s.len() < cfg.frames) {
        return Err(Error::Data(format!("series {} is shorter than {} frames", s.glacier_id, cfg.frames)));
    }
    if let Some(s) = train_set.iter().chain(val_set).find(|s| s.width() != model.context || s.height() != model.context) {
        return Err(Error::Data(format!(
            "series {} is {}x{}, the model expects {}x{}",
            s.glacier_id,
            s.width(),
            s.height(),
            model.context,
            model.context
        )));
    }
    if let Some(d) = run_dir {
        fs::create_dir_all(d)?;
        let rc = RunConfig {
            model: model.clone(),
            train: cfg.clone(),
        };
        write_run_file(run_dir, "config.json", &(serde_json::to_string_pretty(&rc)? + "\n"))?;
    }
    let mut net = Network::new(model)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut sched = ReduceOnPlateau::new(cfg.lr, cfg.scheduler);
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Network)> = None;
    let mut csv = format!("{CURVES_HEADER}\n");
    for epoch in 1..=cfg.epochs {
        opt.lr = sched.lr();
        let (mut loss_sum, mut seen, mut batch_no) = (0.0, 0usize, 0usize);
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel(cfg.prefetch.max(1));
            scope.spawn(|| epoch_batches(cfg, train_set, epoch, tx));
            for batch in rx {
                let batch = batch?;
                batch_no += 1;
                let results: Vec<(f64, Grads)> = batch
                    .par_iter()
                    .map(|s| sample_grads(&net, s, cfg))
                    .collect::<Result<_>>()?;
                let mut grads = Grads::zeros(net.params.len());
                let mut batch_loss = 0.0;
                for (l, g) in &results {
                    batch_loss += l;
                    grads.merge(g);
                }
                grads.scale(1.0 / results.len() as f64);
                if !batch_loss.is_finite() || !grads.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss or gradient in epoch {epoch}, batch {batch_no} (lr {})",
                        opt.lr
                    )));
                }
                if let Some(max) = cfg.max_grad_norm {
                    let norm = grads.norm();
                    if norm > max {
                        grads.scale(max / norm);
                    }
                }
                opt.step(&mut net.params, &grads);
                loss_sum += batch_loss;
                seen += results.len();
            }
            Ok(())
        })?;
        let items = evaluate_network(&net, val_set)?;
        let sel = selection_score(&items)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_mde_m: sel.mde_m,
            val_miou: sel.miou,
            lr: opt.lr,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, val MDE {:.1} m, val mIoU {:.4}, lr {:.5}",
            rec.train_loss,
            rec.val_mde_m,
            rec.val_miou,
            rec.lr
        );
        csv.push_str(&rec.csv_row());
        csv.push('\n');
        write_run_file(run_dir, "curves.csv", &csv)?;
        curves.push(rec);
        if best.as_ref().is_none_or(|(_, m, _)| sel.mde_m < *m) {
            if let Some(d) = run_dir {
                checkpoint::save(&net.params, d.join("best.ckpt"))?;
            }
            best = Some((epoch, sel.mde_m, net.clone()));
        }
        sched.step(sel.mde_m);
    }
    if let Some(d) = run_dir {
        checkpoint::save(&net.params, d.join("final.ckpt"))?;
    }
    let (best_epoch, best_val_mde_m, best_net) = best.expect("at least one epoch");
    Ok(RunResult {
        best: best_net,
        last: net,
        best_epoch,
        best_val_mde_m,
        curves,
    })
}

/// Loads a network from a run directory's `config.json` and a checkpoint in it.
pub fn load_run(dir: &Path, checkpoint_name: &str) -> Result<(RunConfig, Network)> {
    let rc: RunConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    let mut net = Network::new(&rc.model)?;
    let store = checkpoint::load(dir.join(checkpoint_name))?;
    net.load_params(&store)?;
    Ok((rc, net))
}
