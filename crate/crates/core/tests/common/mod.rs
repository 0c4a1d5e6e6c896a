use activeseg::harness::{ExperimentConfig, SynthConfig};

/// A config small enough to run a full two-cycle experiment in seconds.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.num_classes = 4;
    cfg.data.synthetic = Some(SynthConfig {
        height: 16,
        width: 16,
        train: 12,
        val: 3,
        test: 4,
        seed: 5,
        distractors: 2,
        ..SynthConfig::default()
    });
    cfg.model.widths = [4, 4, 8, 8];
    cfg.cycle.region_h = 4;
    cfg.cycle.region_w = 4;
    cfg.cycle.per_image_k = 2;
    cfg.cycle.initial_fraction = 0.25;
    cfg.cycle.replay_capacity = 6;
    cfg.schedule.epochs = 2;
    cfg.schedule.final_cycle_epochs = 3;
    cfg.schedule.warmup_epochs = 1;
    cfg.schedule.iters_per_epoch = 2;
    cfg.schedule.checkpoint_every = 1;
    cfg.augment.crop_h = 16;
    cfg.augment.crop_w = 16;
    cfg
}
