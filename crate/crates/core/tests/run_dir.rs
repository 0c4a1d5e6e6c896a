mod common;

use std::fs;

use activeseg::acquire::AcquisitionRecord;
use activeseg::harness::{report, run_experiment, RunLayout, RunOptions};
use activeseg::Error;

#[test]
fn report_tables_match_the_run() {
    let cfg = common::tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let rep = run_experiment(&cfg, dir.path(), &RunOptions::default()).unwrap();
    assert!(rep.complete);
    assert_eq!(rep.cycles.len(), cfg.cycle.num_cycles + 1);

    let fractions: Vec<f64> = rep.cycles.iter().map(|c| c.labeled_fraction).collect();
    assert!(fractions.windows(2).all(|w| w[1] > w[0]), "{fractions:?}");

    // every acquired pixel shows up in the per-class summary, and the known
    // pixel count grows by exactly what was acquired
    for (s, w) in rep.acquisitions.iter().zip(rep.cycles.windows(2)) {
        let counted: u64 = s.class_pixels.iter().sum::<u64>() + s.ignore_pixels;
        assert_eq!(counted, s.pixels);
        assert_eq!(w[1].known_pixels - w[0].known_pixels, s.pixels);
    }

    let acq: Vec<AcquisitionRecord> = fs::read_to_string(dir.path().join("acquisitions.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(acq.len(), rep.acquired_regions);
    assert_eq!(acq.len(), rep.acquisitions.iter().map(|s| s.regions).sum::<usize>());

    let plot = fs::read_to_string(dir.path().join("report/miou_vs_fraction.csv")).unwrap();
    let rows: Vec<&str> = plot.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    let xs: Vec<f64> = rows.iter().map(|r| r.split(',').next().unwrap().parse().unwrap()).collect();
    assert!(xs.windows(2).all(|w| w[1] > w[0]));

    let teacher = fs::read_to_string(dir.path().join("report/iou_teacher.csv")).unwrap();
    assert_eq!(teacher.lines().next().unwrap(), "cycle,labeled_fraction,miou,class_0,class_1,class_2,class_3");
    assert_eq!(teacher.lines().count(), 4);

    let again = report(dir.path()).unwrap();
    assert_eq!(again, rep);
}

#[test]
fn fresh_run_refuses_an_existing_run_directory() {
    let mut cfg = common::tiny_config();
    cfg.cycle.num_cycles = 0;
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, dir.path(), &RunOptions::default()).unwrap();
    assert!(run_experiment(&cfg, dir.path(), &RunOptions::default()).is_err());
}

#[test]
fn resume_with_a_different_config_conflicts() {
    let cfg = common::tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let stop = RunOptions { stop_after_cycle: Some(0), ..RunOptions::default() };
    let partial = run_experiment(&cfg, dir.path(), &stop).unwrap();
    assert!(!partial.complete);
    assert_eq!(partial.cycles.len(), 1);

    let mut other = cfg.clone();
    other.schedule.lr0 *= 2.0;
    let resume = RunOptions { resume: true, ..RunOptions::default() };
    let err = run_experiment(&other, dir.path(), &resume).unwrap_err();
    assert!(matches!(err, Error::ConfigConflict(_)), "{err}");
    assert_eq!(err.exit_code(), 6);

    let done = run_experiment(&cfg, dir.path(), &resume).unwrap();
    assert!(done.complete);
    assert_eq!(done.cycles.len(), 3);
}

#[test]
fn resume_without_checkpoint_is_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    let resume = RunOptions { resume: true, ..RunOptions::default() };
    let err = run_experiment(&common::tiny_config(), dir.path(), &resume).unwrap_err();
    assert!(matches!(err, Error::IncompleteRun(_)), "{err}");
}

#[test]
fn live_lock_blocks_a_second_run() {
    let dir = tempfile::tempdir().unwrap();
    // pid 1 always exists, so this lock looks live
    fs::write(RunLayout::new(dir.path()).lock(), "1").unwrap();
    let err = run_experiment(&common::tiny_config(), dir.path(), &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Locked(_)), "{err}");
    assert_eq!(err.exit_code(), 9);
}

#[test]
fn stale_lock_is_taken_over() {
    let mut cfg = common::tiny_config();
    cfg.cycle.num_cycles = 0;
    let dir = tempfile::tempdir().unwrap();
    let lock = RunLayout::new(dir.path()).lock();
    fs::write(&lock, "4294967294").unwrap();
    run_experiment(&cfg, dir.path(), &RunOptions::default()).unwrap();
    assert!(!lock.exists());
}

#[test]
fn report_rejects_tampered_config_and_empty_dirs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(report(dir.path()), Err(Error::IncompleteRun(_))));

    let mut cfg = common::tiny_config();
    cfg.cycle.num_cycles = 0;
    run_experiment(&cfg, dir.path(), &RunOptions::default()).unwrap();
    let layout = RunLayout::new(dir.path());
    let text = fs::read_to_string(layout.config()).unwrap();
    fs::write(layout.config(), text.replace("seed = 0", "seed = 1")).unwrap();
    assert!(matches!(report(dir.path()), Err(Error::ConfigConflict(_))));
}
