use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use activeseg::acquire::{acquisition_records, select_regions, AcquisitionMetric, RegionScore};
use activeseg::datapool::{DatasetSplits, PoolState, RegionGrid, IGNORE_INDEX};
use activeseg::harness::{self, ExperimentConfig, RunOptions, SynthConfig};
use activeseg::model::{ModelState, SegmentationModel, UNet};
use activeseg::ssl::{evaluate, train_cycle, TrainContext, TrainerState};
use activeseg::{Error, Result};

#[derive(Parser)]
#[command(name = "activeseg", version, about = "Region-based active learning for semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tail dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Take `[data.synthetic]` from this experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated class shares, background first.
        #[arg(long, value_delimiter = ',')]
        shares: Option<Vec<f64>>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Create the initial pool state for a dataset directory.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long, default_value_t = 30)]
        region_h: usize,
        #[arg(long, default_value_t = 30)]
        region_w: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run (or resume) a full experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        deterministic: bool,
        /// Pool bookkeeping only: print the labeled fraction per cycle.
        #[arg(long)]
        dry_run: bool,
    },
    /// Train one cycle on a pool state.
    TrainCycle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 0)]
        cycle: usize,
        /// Use the final-cycle epoch count.
        #[arg(long = "final")]
        final_cycle: bool,
        /// Trainer state from a previous cycle.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Where to write the trainer state.
        #[arg(long)]
        out: PathBuf,
        /// Where to write the selected teacher.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Score the regions of every image that still has unknown pixels.
    Score {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reveal the top-k scored regions per image.
    Select {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        cycle: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class IoU of a model on one split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write CSV tables and plot data for a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Serialize, Deserialize)]
struct ScoreFile {
    metric: AcquisitionMetric,
    regions: Vec<Vec<RegionScore>>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Format {
        what,
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec(value)?)?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<(UNet, ModelState)> {
    let model = UNet::new(&cfg.model, cfg.data.num_classes)?;
    let state: ModelState = read_json(path, "model state")?;
    model.check_state(&state)?;
    Ok((model, state))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            config,
            shares,
            size,
            train,
            val,
            test,
            seed,
        } => {
            let mut sc = match config {
                Some(p) => ExperimentConfig::load(&p)?
                    .data
                    .synthetic
                    .ok_or_else(|| Error::InvalidArgument("config has no [data.synthetic] section".into()))?,
                None => SynthConfig::default(),
            };
            if let Some(s) = shares {
                sc.shares = s;
            }
            if let Some(s) = size {
                sc.height = s;
                sc.width = s;
            }
            sc.train = train.unwrap_or(sc.train);
            sc.val = val.unwrap_or(sc.val);
            sc.test = test.unwrap_or(sc.test);
            sc.seed = seed.unwrap_or(sc.seed);
            sc.generate_splits()?.save(&out)?;
            eprintln!("wrote {} classes x {} images to {}", sc.num_classes(), sc.train + sc.val + sc.test, out.display());
            Ok(())
        }
        Command::Split {
            data,
            classes,
            fraction,
            region_h,
            region_w,
            seed,
            out,
        } => {
            let splits = DatasetSplits::load(&data, classes, IGNORE_INDEX)?;
            let grid = RegionGrid::new(splits.train.height(), splits.train.width(), region_h, region_w)?;
            let pool = PoolState::init_split_dataset(&splits.train, grid, fraction, seed)?;
            pool.save(&out)?;
            print_json(&serde_json::json!({
                "images": pool.len(),
                "labeled_fraction": pool.labeled_fraction(),
            }))
        }
        Command::Run {
            config,
            out,
            resume,
            deterministic,
            dry_run,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            if dry_run {
                let fractions = harness::dry_run(&cfg)?;
                return print_json(&serde_json::json!({ "labeled_fraction": fractions }));
            }
            let out = out.ok_or_else(|| Error::InvalidArgument("--out is required unless --dry-run".into()))?;
            let opts = RunOptions {
                resume,
                deterministic,
                stop_after_cycle: None,
            };
            let report = harness::run_experiment(&cfg, &out, &opts)?;
            for c in &report.cycles {
                print_json(&serde_json::json!({
                    "cycle": c.cycle,
                    "labeled_fraction": c.labeled_fraction,
                    "teacher_miou": c.teacher.as_ref().map(|r| r.miou),
                    "student_miou": c.student.as_ref().map(|r| r.miou),
                }))?;
            }
            Ok(())
        }
        Command::TrainCycle {
            config,
            pool,
            cycle,
            final_cycle,
            init,
            out,
            teacher,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            harness::device_from_env()?;
            let splits = cfg.data.load()?;
            let pool = PoolState::load(&pool)?;
            let model = UNet::new(&cfg.model, cfg.data.num_classes)?;
            let mut state = match init {
                Some(p) => read_json::<TrainerState>(&p, "trainer state")?,
                None => TrainerState::new(
                    &model,
                    &cfg.schedule,
                    cfg.cycle.replay_capacity,
                    ChaCha8Rng::seed_from_u64(cfg.cycle.seed),
                )?,
            };
            let ctx = TrainContext {
                model: &model,
                train: &splits.train,
                val: (!splits.val.is_empty()).then_some(&splits.val),
                pool: &pool,
                augment: &cfg.augment,
                schedule: &cfg.schedule,
            };
            let outcome = train_cycle(&ctx, &mut state, cycle, final_cycle, None, |_, p, _| {
                p.log.last().map_or(Ok(()), print_json)
            })?;
            write_json(&out, &state)?;
            if let Some(t) = teacher {
                write_json(&t, &outcome.teacher)?;
            }
            Ok(())
        }
        Command::Score {
            config,
            model,
            pool,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            harness::device_from_env()?;
            let (net, state) = load_model(&cfg, &model)?;
            let splits = cfg.data.load()?;
            let pool = PoolState::load(&pool)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores = harness::score_pool(
                &net,
                &state,
                &splits.train,
                &pool,
                cfg.cycle.metric,
                cfg.schedule.eval_batch,
                &mut rng,
            )?;
            write_json(&out, &ScoreFile { metric: cfg.cycle.metric, regions: scores })
        }
        Command::Select {
            pool,
            scores,
            k,
            cycle,
            out,
        } => {
            let mut state = PoolState::load(&pool)?;
            let ScoreFile { metric, regions: scores } = read_json(&scores, "region scores")?;
            if scores.iter().flatten().any(|s| s.image >= state.len()) {
                return Err(Error::InvalidArgument("scores refer to images outside the pool".into()));
            }
            let selections = select_regions(&scores, k)?;
            let records = acquisition_records(cycle, &state, &selections, &scores, metric);
            state.reveal_regions(&selections, cycle)?;
            state.save(&out)?;
            for r in &records {
                print_json(&serde_json::json!({
                    "cycle": r.cycle, "image_id": r.image_id, "row": r.row, "col": r.col, "score": r.score,
                }))?;
            }
            Ok(())
        }
        Command::Eval { config, model, split } => {
            let cfg = ExperimentConfig::load(&config)?;
            harness::device_from_env()?;
            let (net, state) = load_model(&cfg, &model)?;
            let splits = cfg.data.load()?;
            let ds = match split.as_str() {
                "train" => &splits.train,
                "val" => &splits.val,
                "test" => &splits.test,
                other => return Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
            };
            let ev = evaluate(&net, &state, ds, cfg.schedule.eval_batch)?;
            let iou = ev.confusion.iou()?;
            print_json(&serde_json::json!({ "miou": iou.miou, "per_class": iou.per_class, "loss": ev.loss }))
        }
        Command::Report { run } => {
            let report = harness::report(&run)?;
            print_json(&serde_json::json!({
                "cycles": report.cycles.len(),
                "complete": report.complete,
                "report_dir": run.join("report"),
            }))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
