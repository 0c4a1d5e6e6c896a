//! Tables and plot data derived from a (possibly unfinished) run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::{read_json, read_jsonl, recorded_config_hash, snapshot_config_hash, write_json};
use super::run::{AcquisitionSummary, CycleResult, RunInfo, RunLayout};
use crate::acquire::AcquisitionRecord;
use crate::error::{Error, Result};
use crate::metrics::IouReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_sha256: String,
    pub complete: bool,
    pub wall_clock_secs: f64,
    pub cycles: Vec<CycleResult>,
    pub acquisitions: Vec<AcquisitionSummary>,
    pub acquired_regions: usize,
}

impl ExperimentReport {
    pub fn final_result(&self) -> Option<&CycleResult> {
        self.cycles.last()
    }
}

fn iou_table(cycles: &[CycleResult], pick: impl Fn(&CycleResult) -> Option<&IouReport>) -> String {
    let k = cycles
        .iter()
        .filter_map(|c| pick(c).map(|r| r.per_class.len()))
        .max()
        .unwrap_or(0);
    let mut out = String::from("cycle,labeled_fraction,miou");
    (0..k).for_each(|c| write!(out, ",class_{c}").unwrap());
    out.push('\n');
    for c in cycles {
        write!(out, "{},{:.6}", c.cycle, c.labeled_fraction).unwrap();
        match pick(c) {
            Some(r) => {
                write!(out, ",{:.6}", r.miou).unwrap();
                for v in &r.per_class {
                    match v {
                        Some(v) => write!(out, ",{v:.6}").unwrap(),
                        None => out.push(','),
                    }
                }
            }
            None => out.push_str(&",".repeat(k + 1)),
        }
        out.push('\n');
    }
    out
}

fn acquisition_table(rows: &[AcquisitionSummary]) -> String {
    let k = rows.iter().map(|r| r.class_pixels.len()).max().unwrap_or(0);
    let mut out = String::from("cycle,regions,pixels");
    (0..k).for_each(|c| write!(out, ",class_{c}").unwrap());
    out.push_str(",ignore\n");
    for r in rows {
        write!(out, "{},{},{}", r.cycle, r.regions, r.pixels).unwrap();
        r.class_pixels.iter().for_each(|v| write!(out, ",{v}").unwrap());
        writeln!(out, ",{}", r.ignore_pixels).unwrap();
    }
    out
}

fn plot_table(cycles: &[CycleResult]) -> String {
    let mut out = String::from("labeled_fraction,teacher_miou,student_miou\n");
    let fmt = |r: &Option<IouReport>| r.as_ref().map_or(String::new(), |r| format!("{:.6}", r.miou));
    for c in cycles {
        writeln!(out, "{:.6},{},{}", c.labeled_fraction, fmt(&c.teacher), fmt(&c.student)).unwrap();
    }
    out
}

/// Writes `report/` (IoU tables for teacher and student, acquisition
/// summary, mIoU-vs-fraction plot data, `report.json`) and returns the report.
pub fn report(run_dir: &Path) -> Result<ExperimentReport> {
    let layout = RunLayout::new(run_dir);
    if !layout.results().exists() || !layout.config().exists() {
        return Err(Error::IncompleteRun(format!("{} has no cycle results yet", run_dir.display())));
    }
    let recorded = recorded_config_hash(&layout)?;
    let actual = snapshot_config_hash(&layout)?;
    if recorded != actual {
        return Err(Error::ConfigConflict(format!(
            "config snapshot hashes to {actual}, run recorded {recorded}"
        )));
    }
    let cycles: Vec<CycleResult> = read_jsonl(&layout.results(), "results log")?;
    if cycles.is_empty() {
        return Err(Error::IncompleteRun(format!("{} has no cycle results yet", run_dir.display())));
    }
    let acquisitions: Vec<AcquisitionSummary> = if layout.acquired_classes().exists() {
        read_jsonl(&layout.acquired_classes(), "acquisition summary")?
    } else {
        Vec::new()
    };
    let acquired_regions = if layout.acquisitions().exists() {
        read_jsonl::<AcquisitionRecord>(&layout.acquisitions(), "acquisition log")?.len()
    } else {
        0
    };
    let info: Option<RunInfo> = layout
        .info()
        .exists()
        .then(|| read_json(&layout.info(), "run info"))
        .transpose()?;

    let dir = layout.report_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("iou_teacher.csv"), iou_table(&cycles, |c| c.teacher.as_ref()))?;
    fs::write(dir.join("iou_student.csv"), iou_table(&cycles, |c| c.student.as_ref()))?;
    fs::write(dir.join("acquisition_summary.csv"), acquisition_table(&acquisitions))?;
    fs::write(dir.join("miou_vs_fraction.csv"), plot_table(&cycles))?;
    let report = ExperimentReport {
        config_sha256: actual,
        complete: info.as_ref().is_some_and(|i| i.complete),
        wall_clock_secs: info.as_ref().map_or(0.0, |i| i.wall_clock_secs),
        cycles,
        acquisitions,
        acquired_regions,
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}
