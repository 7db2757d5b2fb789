//! `gfk`: synthetic data, training, evaluation and accounting from the shell.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gfk_core::dataset::{read_mask, read_series, series_dirs, write_mask, write_series};
use gfk_core::experiment::{load_config, load_splits, run_experiment, synth_split, ExperimentConfig};
use gfk_core::front::extract_front;
use gfk_core::metrics::{dataset_report, EvalItem, CSV_HEADER};
use gfk_core::network::{added_temporal_params, flops_estimate, param_count, ModelConfig};
use gfk_core::synth::SynthConfig;
use gfk_core::temporal::TemporalKind;
use gfk_core::train::eval::predicted_masks;
use gfk_core::train::{load_run, series_logits, train, TrainConfig};
use gfk_core::Error;

#[derive(Parser)]
#[command(name = "gfk", version, about = "Multi-temporal calving-front segmentation")]
struct Cli {
    /// Worker threads for data preparation and batched gradients.
    #[arg(long, global = true)]
    device_threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// none, conv, ltae or gru.
    #[arg(long)]
    temporal: Option<String>,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of series directories.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        series: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene distribution (JSON); defaults to the standard one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Strong mélange and snow confounders.
        #[arg(long)]
        heavy: bool,
    },
    /// Train one model on the configured data.
    Train(Overrides),
    /// Several runs, their ensemble and a test report.
    Experiment {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Predict zone masks for every series below a directory.
    Predict {
        /// Run directory holding config.json and a checkpoint.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "best.ckpt")]
        checkpoint: String,
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of predicted masks against ground truth series.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Also write the report CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        run: String,
    },
    /// Calving fronts of a mask as JSON.
    ExtractFront {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        resolution: f64,
        /// Static rock overlay applied before extraction.
        #[arg(long)]
        rock: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter and FLOP table of the temporal variants.
    Flops {
        /// Model configuration (JSON), or an experiment configuration with a `model` key.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
    },
}

type CliResult<T> = std::result::Result<T, Error>;

fn parse_temporal(s: &str) -> CliResult<Option<TemporalKind>> {
    TemporalKind::parse(s).ok_or_else(|| Error::Config(format!("unknown temporal connection {s:?}")))
}

fn experiment_config(o: &Overrides) -> CliResult<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &o.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    match &o.temporal {
        Some(t) => {
            let kind = parse_temporal(t)?;
            let frames = match kind {
                None => 1,
                Some(_) => o.frames.unwrap_or(if cfg.model.frames > 1 { cfg.model.frames } else { 8 }),
            };
            cfg.model = cfg.model.clone().with_temporal(kind, frames);
        }
        None => {
            if let Some(t) = o.frames {
                cfg.model.frames = t;
            }
        }
    }
    cfg.train.frames = cfg.model.frames;
    Ok(cfg)
}

fn set_threads(n: Option<usize>) -> CliResult<()> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn cmd_synth(out: &Path, series: usize, frames: usize, seed: u64, config: Option<&Path>, heavy: bool) -> CliResult<()> {
    let cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None if heavy => SynthConfig::heavy(),
        None => SynthConfig::default(),
    };
    if series == 0 || frames == 0 {
        return Err(Error::Config("--series and --frames must be positive".into()));
    }
    let set = synth_split(&cfg, series, frames, seed, 0)?;
    fs::create_dir_all(out)?;
    for (i, s) in set.iter().enumerate() {
        write_series(&out.join(format!("series_{i:04}")), s)?;
    }
    log::info!("wrote {series} series of {frames} frames to {}", out.display());
    Ok(())
}

fn cmd_train(o: &Overrides) -> CliResult<()> {
    let cfg = experiment_config(o)?;
    cfg.validate()?;
    let (ms, ts) = cfg.run_seeds(0);
    let model = ModelConfig { seed: ms, ..cfg.model.clone() };
    let tc = TrainConfig { seed: ts, ..cfg.train.clone() };
    let splits = load_splits(&cfg.data)?;
    let res = train(&model, &tc, &splits.train, &splits.val, Some(&cfg.output_dir))?;
    println!(
        "best epoch {} with validation MDE {:.1} m; run written to {}",
        res.best_epoch,
        res.best_val_mde_m,
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_experiment(o: &Overrides, runs: Option<usize>) -> CliResult<()> {
    let mut cfg = experiment_config(o)?;
    if let Some(r) = runs {
        cfg.runs = r;
    }
    let res = run_experiment(&cfg)?;
    print!("{}", gfk_core::experiment::report_csv(&res.members, &res.ensemble));
    Ok(())
}

fn cmd_predict(run: &Path, checkpoint: &str, series: &Path, out: &Path) -> CliResult<()> {
    let (_, net) = load_run(run, checkpoint)?;
    let crop = net.config().context;
    for dir in series_dirs(series)? {
        let s = read_series(&dir)?;
        let logits = series_logits(&net, &s)?;
        let masks = predicted_masks(&logits, crop, s.resolution_m_per_px)?;
        let target = out.join(dir.file_name().expect("series directory name"));
        fs::create_dir_all(&target)?;
        for (i, m) in masks.iter().enumerate() {
            write_mask(&target.join(format!("mask_{i:04}.pgm")), m, true)?;
        }
    }
    Ok(())
}

fn cmd_eval(gt: &Path, pred: &Path, out: Option<&Path>, run: &str) -> CliResult<()> {
    let mut items = Vec::new();
    for dir in series_dirs(gt)? {
        let s = read_series(&dir)?;
        let name = dir.file_name().expect("series directory name");
        let rock = s.static_rock();
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest = gfk_core::dataset::parse_manifest(&text)?;
        for (f, mf) in s.frames.iter().zip(&manifest.frames) {
            let p = pred.join(name).join(&mf.mask);
            let pm = read_mask(&p, s.resolution_m_per_px).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            items.push(EvalItem {
                gt: f.mask.clone(),
                pred: pm,
                gt_fronts: extract_front(&f.mask, None)?,
                ma_fronts: Some(extract_front(&f.mask, Some(&rock))?),
                rock_mask: Some(rock.clone()),
            });
        }
    }
    if items.is_empty() {
        return Err(Error::Data(format!("no series found in {}", gt.display())));
    }
    let rep = dataset_report(&items)?;
    let csv = format!("{CSV_HEADER}\n{}\n", rep.csv_row(run));
    print!("{csv}");
    if let Some(o) = out {
        fs::write(o, csv)?;
    }
    Ok(())
}

fn cmd_extract_front(mask: &Path, resolution: f64, rock: Option<&Path>, out: Option<&Path>) -> CliResult<()> {
    let m = read_mask(mask, resolution)?;
    let r = match rock {
        Some(p) => Some(read_mask(p, resolution)?),
        None => None,
    };
    let json = extract_front(&m, r.as_ref())?.to_json();
    match out {
        Some(o) => fs::write(o, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn model_from_file(p: &Path) -> CliResult<ModelConfig> {
    let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    if let Ok(m) = serde_json::from_str::<ModelConfig>(&text) {
        return Ok(m);
    }
    serde_json::from_str::<ExperimentConfig>(&text)
        .map(|e| e.model)
        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
}

fn cmd_flops(config: Option<&Path>, frames: Option<usize>) -> CliResult<()> {
    let base = match config {
        Some(p) => model_from_file(p)?,
        None => ModelConfig::desk(),
    };
    let t = frames.unwrap_or(if base.frames > 1 { base.frames } else { 8 });
    let mono = base.clone().with_temporal(None, 1);
    let p0 = param_count(&mono)?;
    let f0 = flops_estimate(&mono)?;
    println!("variant,params,added_params,gflops_per_frame,flops_overhead");
    println!("none,{p0},0,{:.3},0.0%", 2.0 * f0 / 1e9);
    for kind in [TemporalKind::Conv, TemporalKind::Ltae, TemporalKind::Gru] {
        let mut cfg = base.clone().with_temporal(Some(kind), t);
        if let Some(tc) = &base.temporal {
            cfg.temporal = Some(gfk_core::temporal::TemporalConfig { kind, ..tc.clone() });
        }
        let f = flops_estimate(&cfg)?;
        println!(
            "{},{},{},{:.3},{:.1}%",
            kind.name(),
            param_count(&cfg)?,
            added_temporal_params(&cfg)?,
            2.0 * f / 1e9,
            100.0 * (f / f0 - 1.0)
        );
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    set_threads(cli.device_threads)?;
    match &cli.cmd {
        Command::Synth {
            out,
            series,
            frames,
            seed,
            config,
            heavy,
        } => cmd_synth(out, *series, *frames, *seed, config.as_deref(), *heavy),
        Command::Train(o) => cmd_train(o),
        Command::Experiment { o, runs } => cmd_experiment(o, *runs),
        Command::Predict {
            run,
            checkpoint,
            series,
            out,
        } => cmd_predict(run, checkpoint, series, out),
        Command::Eval { gt, pred, out, run } => cmd_eval(gt, pred, out.as_deref(), run),
        Command::ExtractFront {
            mask,
            resolution,
            rock,
            out,
        } => cmd_extract_front(mask, *resolution, rock.as_deref(), out.as_deref()),
        Command::Flops { config, frames } => cmd_flops(config.as_deref(), *frames),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GFK_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("gfk: configuration error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("gfk: {e}");
            ExitCode::from(1)
        }
    }
}
