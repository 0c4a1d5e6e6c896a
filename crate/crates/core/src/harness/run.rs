//! The outer loop (train, score, acquire, retrain) over a run directory
//! with checkpoints, resume and a lock file.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::report::{report, ExperimentReport};
use crate::acquire::{
    acquisition_records, pixel_scores, region_scores, select_regions, AcquisitionMetric, RegionScore,
};
use crate::datapool::{Dataset, PoolState, RegionGrid, Selection};
use crate::error::{Error, Result};
use crate::metrics::IouReport;
use crate::model::{ModelState, SegmentationModel, UNet};
use crate::ssl::{evaluate, predict_probs, train_cycle, CycleProgress, TrainContext, TrainerState};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEVICE_ENV: &str = "ACTIVESEG_DEVICE";

/// Compute device named by `ACTIVESEG_DEVICE`; unset or `auto` picks the
/// CPU, the only backend built in.
pub fn device_from_env() -> Result<String> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok("cpu".into()),
        Ok(v) if v.is_empty() || v == "auto" || v == "cpu" => Ok("cpu".into()),
        Ok(v) => Err(Error::invalid(format!("device `{v}` is not available (only `cpu`)"))),
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Accepted for interface compatibility; every run is single-threaded
    /// and reproducible from its seed.
    pub deterministic: bool,
    /// Stop (as if interrupted) after the checkpoint at the end of this cycle.
    pub stop_after_cycle: Option<usize>,
}

/// Evaluation of one cycle's models on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleResult {
    pub cycle: usize,
    pub labeled_fraction: f64,
    pub known_pixels: u64,
    pub total_pixels: u64,
    pub teacher: Option<IouReport>,
    pub student: Option<IouReport>,
    pub best_epoch: Option<usize>,
    pub best_val_miou: Option<f64>,
}

/// Ground-truth class make-up of the pixels revealed in one acquisition round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSummary {
    pub cycle: usize,
    pub regions: usize,
    pub pixels: u64,
    pub class_pixels: Vec<u64>,
    pub ignore_pixels: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config_sha256: String,
    pub device: String,
    pub deterministic: bool,
    pub next_cycle: usize,
    pub complete: bool,
    pub wall_clock_secs: f64,
}

/// Byte lengths of the append-only logs when a checkpoint was taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
struct LogMarks {
    metrics: u64,
    results: u64,
    acquisitions: u64,
    acquired_classes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config_sha256: String,
    next_cycle: usize,
    progress: Option<CycleProgress>,
    pool: PoolState,
    trainer: TrainerState,
    logs: LogMarks,
    elapsed_secs: f64,
}

/// File names inside a run directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn config_hash(&self) -> PathBuf {
        self.root.join("config.sha256")
    }
    pub fn lock(&self) -> PathBuf {
        self.root.join("run.lock")
    }
    pub fn info(&self) -> PathBuf {
        self.root.join("run.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn results(&self) -> PathBuf {
        self.root.join("results.jsonl")
    }
    pub fn acquisitions(&self) -> PathBuf {
        self.root.join("acquisitions.jsonl")
    }
    pub fn acquired_classes(&self) -> PathBuf {
        self.root.join("acquired_classes.jsonl")
    }
    pub fn pool(&self, cycle: usize) -> PathBuf {
        self.root.join("pools").join(format!("cycle{cycle}.json"))
    }
    pub fn latest_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("latest.json")
    }
    pub fn cycle_checkpoint(&self, cycle: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("cycle{cycle}.json"))
    }
    pub fn model(&self, cycle: usize, which: &str) -> PathBuf {
        self.root.join("models").join(format!("cycle{cycle}_{which}.json"))
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Exclusive ownership of a run directory; released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(path: &Path) -> Result<Self> {
        loop {
            match OpenOptions::new().write(true).create_new(true).open(path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id())?;
                    return Ok(Self { path: path.to_path_buf() });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(path).unwrap_or_default();
                    if lock_holder_alive(holder.trim()) {
                        return Err(Error::Locked(path.to_path_buf()));
                    }
                    fs::remove_file(path)?;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A lock left by a process that no longer exists is stale. Without a
/// process table to consult, every lock is treated as live.
fn lock_holder_alive(pid: &str) -> bool {
    let Ok(pid) = pid.parse::<u32>() else { return false };
    let proc_root = Path::new("/proc");
    if !proc_root.is_dir() {
        return true;
    }
    pid != std::process::id() && proc_root.join(pid.to_string()).exists()
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec(value)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what,
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub(crate) fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                what,
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn file_len(path: &Path) -> u64 {
    fs::metadata(path).map(|m| m.len()).unwrap_or(0)
}

fn truncate_to(path: &Path, len: u64) -> Result<()> {
    if path.exists() {
        OpenOptions::new().write(true).open(path)?.set_len(len)?;
    }
    Ok(())
}

/// Per-image region scores for every image that still has unknown pixels.
pub fn score_pool<M: SegmentationModel, R: Rng + ?Sized>(
    model: &M,
    teacher: &ModelState,
    ds: &Dataset,
    pool: &PoolState,
    metric: AcquisitionMetric,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<Vec<RegionScore>>> {
    let k = ds.num_classes();
    let (h, w) = (ds.height(), ds.width());
    let ids = pool.unlabeled_indices();
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(batch.max(1)) {
        let images: Vec<_> = chunk.iter().map(|&i| &ds.sample(i).image).collect();
        for (&i, probs) in chunk.iter().zip(predict_probs(model, teacher, &images, batch)?) {
            let map = pixel_scores(&probs, k, h, w, metric, rng)?;
            out.push(region_scores(&map, i, pool.grid(), pool.image(i).known_mask())?);
        }
    }
    Ok(out)
}

/// Class make-up of the still-unknown pixels in `selections`.
pub fn summarize_acquisition(cycle: usize, ds: &Dataset, pool: &PoolState, selections: &[Selection]) -> AcquisitionSummary {
    let mut class_pixels = vec![0u64; ds.num_classes()];
    let mut ignore_pixels = 0u64;
    let grid = pool.grid();
    for s in selections {
        let known = pool.image(s.image).known_mask();
        let label = &ds.sample(s.image).label.data;
        for p in grid.region(s.region).pixels(grid.width).filter(|&p| !known[p]) {
            match class_pixels.get_mut(label[p] as usize) {
                Some(c) => *c += 1,
                None => ignore_pixels += 1,
            }
        }
    }
    AcquisitionSummary {
        cycle,
        regions: selections.len(),
        pixels: class_pixels.iter().sum::<u64>() + ignore_pixels,
        class_pixels,
        ignore_pixels,
    }
}

/// Pool bookkeeping of a run without training: every round reveals
/// `per_image_k` randomly ranked regions per image. Returns the labeled
/// fraction before the first and after each round.
pub fn dry_run(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let d = &cfg.data;
    if d.train_images == 0 || d.height == 0 || d.width == 0 {
        return Err(Error::invalid("dry run needs data.train_images, data.height and data.width"));
    }
    let c = &cfg.cycle;
    let ids: Vec<String> = (0..d.train_images).map(|i| format!("{i:06}")).collect();
    let grid = RegionGrid::new(d.height, d.width, c.region_h, c.region_w)?;
    let mut pool = PoolState::init_split(&ids, grid.clone(), c.initial_fraction, c.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut fractions = vec![pool.labeled_fraction()];
    for cycle in 1..=c.num_cycles {
        let per_image: Vec<Vec<RegionScore>> = pool
            .unlabeled_indices()
            .into_iter()
            .map(|i| {
                grid.regions()
                    .filter_map(|r| {
                        let unknown = pool.unknown_in_region(i, r.id);
                        (unknown > 0).then(|| RegionScore {
                            image: i,
                            region: r.id,
                            score: rng.gen(),
                            unlabeled_pixels: unknown,
                        })
                    })
                    .collect()
            })
            .collect();
        let selections = select_regions(&per_image, c.per_image_k)?;
        pool.reveal_regions(&selections, cycle)?;
        fractions.push(pool.labeled_fraction());
    }
    Ok(fractions)
}

/// Runs (or resumes) the full experiment in `out` and returns its report.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate()?;
    let device = device_from_env()?;
    let layout = RunLayout::new(out);
    fs::create_dir_all(out)?;
    let _lock = RunLock::acquire(&layout.lock())?;
    let hash = cfg.hash();
    let started = Instant::now();

    let splits = cfg.data.load()?;
    let train = &splits.train;
    if train.is_empty() {
        return Err(Error::CannotTrain("training split is empty".into()));
    }
    let model = UNet::new(&cfg.model, cfg.data.num_classes)?;
    let val = (!splits.val.is_empty()).then_some(&splits.val);
    let test = if splits.test.is_empty() { val } else { Some(&splits.test) };
    let cc = &cfg.cycle;
    let sched = &cfg.schedule;

    let (start, mut progress, mut pool, mut trainer, elapsed0) = if opts.resume {
        let path = layout.latest_checkpoint();
        if !path.exists() {
            return Err(Error::IncompleteRun(format!("no checkpoint at {}", path.display())));
        }
        let ck: Checkpoint = read_json(&path, "checkpoint")?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                what: "checkpoint",
                path,
                reason: format!("version {} (expected {CHECKPOINT_VERSION})", ck.version),
            });
        }
        if ck.config_sha256 != hash {
            return Err(Error::ConfigConflict(format!(
                "checkpoint was written for config {}, current config is {hash}",
                ck.config_sha256
            )));
        }
        truncate_to(&layout.metrics(), ck.logs.metrics)?;
        truncate_to(&layout.results(), ck.logs.results)?;
        truncate_to(&layout.acquisitions(), ck.logs.acquisitions)?;
        truncate_to(&layout.acquired_classes(), ck.logs.acquired_classes)?;
        (ck.next_cycle, ck.progress, ck.pool, ck.trainer, ck.elapsed_secs)
    } else {
        if layout.latest_checkpoint().exists() || layout.results().exists() {
            return Err(Error::invalid(format!(
                "{} already holds a run; resume it or choose another directory",
                out.display()
            )));
        }
        fs::write(layout.config(), cfg.to_toml())?;
        fs::write(layout.config_hash(), format!("{hash}\n"))?;
        let grid = RegionGrid::new(train.height(), train.width(), cc.region_h, cc.region_w)?;
        let pool = PoolState::init_split_dataset(train, grid, cc.initial_fraction, cc.seed)?;
        let trainer = TrainerState::new(&model, sched, cc.replay_capacity, ChaCha8Rng::seed_from_u64(cc.seed))?;
        (0, None, pool, trainer, 0.0)
    };

    let elapsed = |started: &Instant| elapsed0 + started.elapsed().as_secs_f64();
    let marks = || LogMarks {
        metrics: file_len(&layout.metrics()),
        results: file_len(&layout.results()),
        acquisitions: file_len(&layout.acquisitions()),
        acquired_classes: file_len(&layout.acquired_classes()),
    };
    let info = |next_cycle: usize, complete: bool, secs: f64| RunInfo {
        config_sha256: hash.clone(),
        device: device.clone(),
        deterministic: opts.deterministic,
        next_cycle,
        complete,
        wall_clock_secs: secs,
    };
    write_json(&layout.info(), &info(start, false, elapsed(&started)))?;

    for cycle in start..=cc.num_cycles {
        let final_cycle = cycle == cc.num_cycles;
        if progress.is_none() {
            write_json(&layout.pool(cycle), &pool)?;
        }
        let ctx = TrainContext {
            model: &model,
            train,
            val,
            pool: &pool,
            augment: &cfg.augment,
            schedule: sched,
        };
        let outcome = train_cycle(&ctx, &mut trainer, cycle, final_cycle, progress.take(), |st, prog, due| {
            if let Some(rec) = prog.log.last() {
                append_jsonl(&layout.metrics(), rec)?;
            }
            if due {
                let ck = Checkpoint {
                    version: CHECKPOINT_VERSION,
                    config_sha256: hash.clone(),
                    next_cycle: cycle,
                    progress: Some(prog.clone()),
                    pool: pool.clone(),
                    trainer: st.clone(),
                    logs: marks(),
                    elapsed_secs: elapsed(&started),
                };
                write_json(&layout.latest_checkpoint(), &ck)?;
            }
            Ok(())
        })?;

        write_json(&layout.model(cycle, "teacher"), &outcome.teacher)?;
        write_json(&layout.model(cycle, "student"), &trainer.pair.student)?;
        let (teacher, student) = match test {
            Some(ds) => (
                Some(evaluate(&model, &outcome.teacher, ds, sched.eval_batch)?.confusion.iou()?),
                Some(evaluate(&model, &trainer.pair.student, ds, sched.eval_batch)?.confusion.iou()?),
            ),
            None => (None, None),
        };
        append_jsonl(
            &layout.results(),
            &CycleResult {
                cycle,
                labeled_fraction: pool.labeled_fraction(),
                known_pixels: pool.known_pixels(),
                total_pixels: pool.total_pixels(),
                teacher,
                student,
                best_epoch: outcome.best_epoch,
                best_val_miou: outcome.best_val_miou,
            },
        )?;

        if !final_cycle {
            let round = cycle + 1;
            let scores = score_pool(&model, &outcome.teacher, train, &pool, cc.metric, sched.eval_batch, &mut trainer.rng)?;
            let selections = select_regions(&scores, cc.per_image_k)?;
            let summary = summarize_acquisition(round, train, &pool, &selections);
            for rec in acquisition_records(round, &pool, &selections, &scores, cc.metric) {
                append_jsonl(&layout.acquisitions(), &rec)?;
            }
            pool.reveal_regions(&selections, round)?;
            append_jsonl(&layout.acquired_classes(), &summary)?;
        }

        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_sha256: hash.clone(),
            next_cycle: cycle + 1,
            progress: None,
            pool: pool.clone(),
            trainer: trainer.clone(),
            logs: marks(),
            elapsed_secs: elapsed(&started),
        };
        write_json(&layout.latest_checkpoint(), &ck)?;
        fs::copy(layout.latest_checkpoint(), layout.cycle_checkpoint(cycle))?;
        write_json(&layout.info(), &info(cycle + 1, final_cycle, elapsed(&started)))?;
        if !final_cycle && opts.stop_after_cycle == Some(cycle) {
            break;
        }
    }
    report(out)
}

/// Reads the hash recorded next to a run's config snapshot.
pub fn recorded_config_hash(layout: &RunLayout) -> Result<String> {
    Ok(fs::read_to_string(layout.config_hash())?.trim().to_string())
}

/// Hash of the config snapshot as stored on disk.
pub fn snapshot_config_hash(layout: &RunLayout) -> Result<String> {
    Ok(ExperimentConfig::load(&layout.config())?.hash())
}
