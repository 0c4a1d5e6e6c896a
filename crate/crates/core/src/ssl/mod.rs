//! Teacher-student semi-supervised training for one active-learning cycle.

pub mod loss;
pub mod trainer;

pub use loss::{
    eta, pseudo_label, reduce_eta_weighted, supervised_loss, total_loss, weighted_unsup_loss, LossBreakdown,
    LossGrad, PseudoLabelMap,
};
pub use trainer::{
    evaluate, predict_probs, train_cycle, CycleOutcome, CycleProgress, EpochRecord, Evaluation, TrainContext,
    TrainSchedule, TrainerState, ValidationRecord,
};
