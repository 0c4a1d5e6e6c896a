//! The per-cycle loop: supervised warmup, then mean-teacher epochs with
//! ClassMix inside the unlabeled batch and a replay stream mixed tail-first.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    eta, pseudo_label, reduce_eta_weighted, supervised_loss, total_loss, weighted_unsup_loss, LossBreakdown,
};
use crate::augment::{classmix, select_mix_classes, strong_augment, weak_augment, AugmentConfig, MixLayer};
use crate::datapool::{Dataset, Image, LabelMap, PoolImage, PoolState};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{ModelPair, ModelState, SegmentationModel, Sgd, Tensor};
use crate::replay::ReplayBuffer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub final_cycle_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub poly_power: f64,
    /// Supervised-only epochs at the start of every cycle.
    pub warmup_epochs: usize,
    /// Pseudo-label confidence above which a pixel counts towards eta.
    pub confidence_threshold: f64,
    pub ema_momentum: f64,
    pub balanced_classmix_start_cycle: usize,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Optimizer steps per epoch; 0 means one pass over the supervised stream.
    pub iters_per_epoch: usize,
    pub confidence_weighting: bool,
    pub balanced_classmix: bool,
    /// Continue from the previous cycle's student instead of re-initialising.
    pub warm_start: bool,
    pub val_every: usize,
    pub checkpoint_every: usize,
    pub eval_batch: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 100,
            final_cycle_epochs: 200,
            batch_size: 4,
            lr0: 1e-2,
            poly_power: 0.9,
            warmup_epochs: 10,
            confidence_threshold: 0.97,
            ema_momentum: 0.99,
            balanced_classmix_start_cycle: 1,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            iters_per_epoch: 0,
            confidence_weighting: true,
            balanced_classmix: true,
            warm_start: false,
            val_every: 1,
            checkpoint_every: 25,
            eval_batch: 8,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let tau = self.confidence_threshold;
        let checks = [
            (self.epochs >= 1 && self.final_cycle_epochs >= 1, "epochs must be positive"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (self.lr0 > 0.0 && self.lr0.is_finite(), "lr0 must be positive"),
            (self.poly_power >= 0.0, "poly_power must be non-negative"),
            (tau > 0.0 && tau < 1.0, "confidence_threshold must lie in (0, 1)"),
            ((0.0..=1.0).contains(&self.ema_momentum), "ema_momentum must lie in [0, 1]"),
            ((0.0..1.0).contains(&self.sgd_momentum), "sgd_momentum must lie in [0, 1)"),
            (self.weight_decay >= 0.0, "weight_decay must be non-negative"),
            (self.val_every >= 1 && self.checkpoint_every >= 1, "val_every and checkpoint_every must be positive"),
            (self.eval_batch >= 1, "eval_batch must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::invalid(*msg)),
            None => Ok(()),
        }
    }

    pub fn epochs_for(&self, final_cycle: bool) -> usize {
        if final_cycle {
            self.final_cycle_epochs
        } else {
            self.epochs
        }
    }

    /// Poly decay `lr0 * (1 - iter / max_iter)^power`.
    pub fn lr_at(&self, iter: usize, max_iter: usize) -> f64 {
        let frac = iter as f64 / max_iter.max(1) as f64;
        self.lr0 * (1.0 - frac).max(0.0).powf(self.poly_power)
    }
}

/// Everything the loop mutates; carried across cycles and checkpointed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub pair: ModelPair,
    pub optimizer: Sgd,
    pub replay: ReplayBuffer,
    pub rng: ChaCha8Rng,
}

impl TrainerState {
    pub fn new<M: SegmentationModel>(
        model: &M,
        schedule: &TrainSchedule,
        replay_capacity: usize,
        mut rng: ChaCha8Rng,
    ) -> Result<Self> {
        schedule.validate()?;
        let student = model.init_state(&mut rng);
        Ok(Self {
            optimizer: Sgd::new(&student, schedule.sgd_momentum as f32, schedule.weight_decay as f32),
            pair: ModelPair::new(student),
            replay: ReplayBuffer::new(replay_capacity)?,
            rng,
        })
    }
}

/// Read-only inputs of a cycle.
pub struct TrainContext<'a, M: SegmentationModel> {
    pub model: &'a M,
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub pool: &'a PoolState,
    pub augment: &'a AugmentConfig,
    pub schedule: &'a TrainSchedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub teacher_miou: f64,
    pub student_miou: f64,
    pub teacher_loss: f64,
    pub student_loss: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub cycle: usize,
    pub epoch: usize,
    pub ssl: bool,
    pub steps: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub val: Option<ValidationRecord>,
}

/// Resumable position inside a cycle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleProgress {
    pub next_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_miou: Option<f64>,
    pub best_teacher: Option<ModelState>,
}

#[derive(Clone, Debug)]
pub struct CycleOutcome {
    pub log: Vec<EpochRecord>,
    /// Best-validation teacher, or the final teacher without a validation set.
    pub teacher: ModelState,
    pub best_epoch: Option<usize>,
    pub best_val_miou: Option<f64>,
}

/// Confusion matrix and pooled cross-entropy of a model over a dataset.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub loss: f64,
}

/// Softmax maps (`K x P` each) in eval mode.
pub fn predict_probs<M: SegmentationModel>(
    model: &M,
    state: &ModelState,
    images: &[&Image],
    batch: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let probs = model.forward_eval(state, &Tensor::from_images(chunk)?)?.softmax_channels();
        out.extend((0..probs.n).map(|i| probs.item(i).to_vec()));
    }
    Ok(out)
}

pub fn evaluate<M: SegmentationModel>(model: &M, state: &ModelState, ds: &Dataset, batch: usize) -> Result<Evaluation> {
    let k = model.num_classes();
    let ignore = ds.ignore_index();
    let mut confusion = ConfusionMatrix::new(k);
    let (mut nll, mut count) = (0.0f64, 0usize);
    for chunk in ds.samples().chunks(batch.max(1)) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        for (s, probs) in chunk.iter().zip(predict_probs(model, state, &images, batch)?) {
            let pseudo = pseudo_label(&probs, k);
            confusion.accumulate(&pseudo.labels, &s.label.data, ignore)?;
            let p = s.label.data.len();
            for (i, &l) in s.label.data.iter().enumerate() {
                if l != ignore {
                    nll -= (probs[l as usize * p + i].max(f32::MIN_POSITIVE) as f64).ln();
                    count += 1;
                }
            }
        }
    }
    let loss = if count == 0 { 0.0 } else { nll / count as f64 };
    Ok(Evaluation { confusion, loss })
}

/// Cycles through a shuffled copy of `items`, reshuffling when exhausted.
struct Stream<'a> {
    items: &'a [usize],
    order: Vec<usize>,
    pos: usize,
}

impl<'a> Stream<'a> {
    fn new(items: &'a [usize]) -> Self {
        Self {
            items,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_batch<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order = self.items.to_vec();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Ground truth where revealed, ignore elsewhere.
fn known_label(label: &LabelMap, image: &PoolImage, ignore: u8) -> LabelMap {
    let data = label
        .data
        .iter()
        .zip(image.known_mask())
        .map(|(&l, &k)| if k { l } else { ignore })
        .collect();
    LabelMap {
        height: label.height,
        width: label.width,
        data,
    }
}

/// Per-step totals that fold into an epoch record.
#[derive(Default)]
struct EpochSums {
    steps: usize,
    l_sup: f64,
    unsup1: Vec<(f64, f64)>,
    unsup2: Vec<(f64, f64)>,
    lr: f64,
}

struct Step<'c, 'a, M: SegmentationModel> {
    ctx: &'c TrainContext<'a, M>,
    tail: &'c [usize],
}

impl<M: SegmentationModel> Step<'_, '_, M> {
    fn k(&self) -> usize {
        self.ctx.train.num_classes()
    }

    /// Weak views of unlabeled images with teacher pseudo labels. Revealed
    /// pixels carry their ground truth and are excluded from the loss.
    fn teacher_layers(&self, teacher: &ModelState, ids: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<MixLayer>> {
        let ds = self.ctx.train;
        let ignore = ds.ignore_index();
        let mut views = Vec::with_capacity(ids.len());
        for &i in ids {
            let s = ds.sample(i);
            let img = self.ctx.pool.image(i);
            let gt = known_label(&s.label, img, ignore);
            let v = weak_augment(&s.image, Some(&gt), self.ctx.augment, rng)?;
            let known = v.transform.warp_nearest(img.known_mask(), false);
            views.push((v, known));
        }
        let images: Vec<&Image> = views.iter().map(|(v, _)| &v.image).collect();
        let probs = predict_probs(self.ctx.model, teacher, &images, self.ctx.schedule.eval_batch)?;
        let mut layers = Vec::with_capacity(ids.len());
        for ((v, known), probs) in views.into_iter().zip(probs) {
            let pseudo = pseudo_label(&probs, self.k());
            let gt = v.label.expect("weak view keeps its label");
            let n = known.len();
            let label = (0..n).map(|p| if known[p] { gt.data[p] } else { pseudo.labels[p] }).collect();
            let confidence = (0..n).map(|p| if known[p] { 1.0 } else { pseudo.confidence[p] }).collect();
            layers.push(MixLayer {
                label: LabelMap {
                    height: gt.height,
                    width: gt.width,
                    data: label,
                },
                image: v.image,
                confidence,
                valid: known.iter().map(|k| !k).collect(),
            });
        }
        Ok(layers)
    }

    /// Pastes `sources[i]` onto `targets[i]` and applies the strong augmentation.
    fn mix_and_perturb(
        &self,
        sources: &[MixLayer],
        targets: &[&MixLayer],
        balanced: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<MixLayer>> {
        let mut out = Vec::with_capacity(sources.len());
        for (src, tgt) in sources.iter().zip(targets) {
            let present = src.present_classes(self.k());
            let classes = if present.is_empty() {
                Vec::new()
            } else {
                select_mix_classes(&present, self.tail, balanced, rng)?
            };
            let (mixed, _) = classmix(src, tgt, &classes)?;
            let (image, t) = strong_augment(&mixed.image, self.ctx.augment, rng);
            out.push(mixed.warp(&t, image));
        }
        Ok(out)
    }

    fn run(
        &self,
        state: &mut TrainerState,
        labeled: &[usize],
        unlabeled: Option<&[usize]>,
        replay: bool,
        lr: f64,
    ) -> Result<LossBreakdown> {
        let ctx = self.ctx;
        let ds = ctx.train;
        let (k, ignore) = (self.k(), ds.ignore_index());
        let rng = &mut state.rng;

        let mut images = Vec::new();
        let mut labels = Vec::new();
        for &i in labeled {
            let s = ds.sample(i);
            let gt = known_label(&s.label, ctx.pool.image(i), ignore);
            let v = weak_augment(&s.image, Some(&gt), ctx.augment, rng)?;
            images.push(v.image);
            labels.push(v.label.expect("weak view keeps its label"));
        }

        let mut stream1 = Vec::new();
        let mut stream2 = Vec::new();
        if let Some(ids) = unlabeled {
            let layers = self.teacher_layers(&state.pair.teacher, ids, rng)?;
            let n = layers.len();
            let targets: Vec<&MixLayer> = (0..n).map(|i| &layers[(i + 1) % n]).collect();
            stream1 = self.mix_and_perturb(&layers, &targets, false, rng)?;
            if replay {
                ids.iter().for_each(|&i| state.replay.push(i));
                let drawn = state.replay.sample(ctx.schedule.batch_size, rng)?;
                let sources = self.teacher_layers(&state.pair.teacher, &drawn, rng)?;
                let targets: Vec<&MixLayer> = (0..sources.len()).map(|i| &layers[i % n]).collect();
                stream2 = self.mix_and_perturb(&sources, &targets, true, rng)?;
            }
        }

        let all: Vec<&Image> = images
            .iter()
            .chain(stream1.iter().map(|l| &l.image))
            .chain(stream2.iter().map(|l| &l.image))
            .collect();
        let x = Tensor::from_images(&all)?;
        let (logits, cache) = ctx.model.forward_train(&mut state.pair.student, &x)?;
        let mut dlogits = Tensor::zeros(logits.n, logits.c, logits.h, logits.w);
        let item_f64 = |i: usize| logits.item(i).iter().map(|&v| v as f64).collect::<Vec<f64>>();

        // pooled mean over every labeled pixel of the batch
        let counts: Vec<usize> = labels
            .iter()
            .map(|l| l.data.iter().filter(|&&v| v != ignore).count())
            .collect();
        let total: usize = counts.iter().sum();
        let mut l_sup = 0.0;
        if total > 0 {
            for (i, label) in labels.iter().enumerate() {
                if counts[i] == 0 {
                    continue;
                }
                let w = counts[i] as f64 / total as f64;
                let lg = supervised_loss(&item_f64(i), k, &label.data, ignore)?;
                l_sup += w * lg.loss;
                for (d, g) in dlogits.item_mut(i).iter_mut().zip(&lg.grad) {
                    *d += (w * g) as f32;
                }
            }
        }

        let tau = ctx.schedule.confidence_threshold;
        let weighting = ctx.schedule.confidence_weighting;
        let unsup = |layers: &[MixLayer], offset: usize, dlogits: &mut Tensor| -> Result<(f64, f64)> {
            let n = layers.len() as f64;
            let mut items = Vec::with_capacity(layers.len());
            for (j, layer) in layers.iter().enumerate() {
                let weights = weighting.then_some(layer.confidence.as_slice());
                let lg = weighted_unsup_loss(&item_f64(offset + j), k, &layer.label.data, weights, &layer.valid)?;
                let e = eta(&layer.confidence, &layer.valid, tau);
                for (d, g) in dlogits.item_mut(offset + j).iter_mut().zip(&lg.grad) {
                    *d += (e / n * g) as f32;
                }
                items.push((e, lg.loss));
            }
            Ok(reduce_eta_weighted(&items))
        };
        let (eta1, l_u1) = unsup(&stream1, labels.len(), &mut dlogits)?;
        let (eta2, l_u2) = unsup(&stream2, labels.len() + stream1.len(), &mut dlogits)?;
        let breakdown = total_loss(l_sup, l_u1, (!stream2.is_empty()).then_some(l_u2), eta1, eta2)?;

        let grads = ctx.model.backward(&state.pair.student, cache, &dlogits);
        state.optimizer.step(&mut state.pair.student, &grads, lr as f32);
        if unlabeled.is_some() {
            state.pair.ema_update(ctx.schedule.ema_momentum)?;
        }
        Ok(breakdown)
    }
}

/// Trains one cycle. `resume` continues from a mid-cycle checkpoint;
/// `on_epoch` sees every finished epoch (the last log entry is the new
/// record) and whether a periodic checkpoint is due.
pub fn train_cycle<M: SegmentationModel>(
    ctx: &TrainContext<M>,
    state: &mut TrainerState,
    cycle: usize,
    final_cycle: bool,
    resume: Option<CycleProgress>,
    mut on_epoch: impl FnMut(&TrainerState, &CycleProgress, bool) -> Result<()>,
) -> Result<CycleOutcome> {
    let sched = ctx.schedule;
    sched.validate()?;
    if ctx.pool.len() != ctx.train.len() {
        return Err(Error::invalid("pool and dataset sizes differ"));
    }
    ctx.model.check_state(&state.pair.student)?;
    let labeled = ctx.pool.supervised_indices();
    if labeled.is_empty() {
        return Err(Error::CannotTrain("no labeled pixels in the pool".into()));
    }
    let unlabeled = ctx.pool.unlabeled_indices();
    let tail = ctx.pool.class_pixel_distribution(ctx.train)?.tail;
    let replay = sched.balanced_classmix && cycle >= sched.balanced_classmix_start_cycle;

    let mut progress = match resume {
        Some(p) => p,
        None => {
            if cycle > 0 && !sched.warm_start {
                state.pair.student = ctx.model.init_state(&mut state.rng);
            }
            state.pair.reset_teacher();
            state.optimizer = Sgd::new(&state.pair.student, sched.sgd_momentum as f32, sched.weight_decay as f32);
            CycleProgress::default()
        }
    };

    let epochs = sched.epochs_for(final_cycle);
    let per_epoch = match sched.iters_per_epoch {
        0 => labeled.len().div_ceil(sched.batch_size),
        n => n,
    };
    let max_iter = epochs * per_epoch;
    let step = Step { ctx, tail: &tail };
    let ssl_at = |epoch: usize| epoch >= sched.warmup_epochs && !unlabeled.is_empty();

    for epoch in progress.next_epoch..epochs {
        let ssl = ssl_at(epoch);
        if ssl && (epoch == 0 || !ssl_at(epoch - 1)) {
            state.pair.reset_teacher();
        }
        let mut lab_stream = Stream::new(&labeled);
        let mut unl_stream = Stream::new(&unlabeled);
        let mut sums = EpochSums::default();
        for s in 0..per_epoch {
            let lr = sched.lr_at(epoch * per_epoch + s, max_iter);
            let lab = lab_stream.next_batch(sched.batch_size, &mut state.rng);
            let unl = ssl.then(|| unl_stream.next_batch(sched.batch_size, &mut state.rng));
            let b = step.run(state, &lab, unl.as_deref(), replay, lr)?;
            sums.steps += 1;
            sums.l_sup += b.l_sup;
            sums.unsup1.push((b.eta1, b.l_unsup1));
            if replay && ssl {
                sums.unsup2.push((b.eta2, b.l_unsup2));
            }
            sums.lr = lr;
        }
        let last = epoch + 1 == epochs;
        if last && !ssl {
            state.pair.reset_teacher();
        }

        let (eta1, l_u1) = reduce_eta_weighted(&sums.unsup1);
        let (eta2, l_u2) = reduce_eta_weighted(&sums.unsup2);
        let l_sup = sums.l_sup / sums.steps.max(1) as f64;
        let loss = total_loss(l_sup, l_u1, (replay && ssl).then_some(l_u2), eta1, eta2)?;

        let mut val = None;
        if let Some(vds) = ctx.val.filter(|_| last || (epoch + 1) % sched.val_every == 0) {
            let t = evaluate(ctx.model, &state.pair.teacher, vds, sched.eval_batch)?;
            let s = evaluate(ctx.model, &state.pair.student, vds, sched.eval_batch)?;
            let rec = ValidationRecord {
                teacher_miou: t.confusion.iou()?.miou,
                student_miou: s.confusion.iou()?.miou,
                teacher_loss: t.loss,
                student_loss: s.loss,
            };
            let teacher_live = ssl || last;
            if teacher_live && progress.best_val_miou.is_none_or(|b| rec.teacher_miou > b) {
                progress.best_val_miou = Some(rec.teacher_miou);
                progress.best_epoch = Some(epoch);
                progress.best_teacher = Some(state.pair.teacher.clone());
            }
            val = Some(rec);
        }

        progress.log.push(EpochRecord {
            cycle,
            epoch,
            ssl,
            steps: sums.steps,
            lr: sums.lr,
            loss,
            val,
        });
        progress.next_epoch = epoch + 1;
        let due = !last && (epoch + 1) % sched.checkpoint_every == 0;
        on_epoch(state, &progress, due)?;
    }

    let teacher = progress
        .best_teacher
        .clone()
        .unwrap_or_else(|| state.pair.teacher.clone());
    Ok(CycleOutcome {
        log: progress.log,
        teacher,
        best_epoch: progress.best_epoch,
        best_val_miou: progress.best_val_miou,
    })
}
