//! Segmentation network interface, student/teacher pair and optimiser.
//!
//! The trainer only talks to [`SegmentationModel`]; the built-in [`UNet`]
//! is one implementation. Larger backbones plug in behind the same trait.

pub mod layers;
pub mod tensor;
pub mod unet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use tensor::Tensor;
pub use unet::{UNet, UNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Trainable parameters plus normalisation running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub params: Vec<Vec<f32>>,
    pub buffers: Vec<Vec<f32>>,
}

impl ModelState {
    pub fn same_layout(&self, other: &ModelState) -> bool {
        let lens = |v: &Vec<Vec<f32>>| v.iter().map(Vec::len).collect::<Vec<_>>();
        lens(&self.params) == lens(&other.params) && lens(&self.buffers) == lens(&other.buffers)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Vec<f32>> {
        self.params.iter().chain(&self.buffers)
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f32>> {
        self.params.iter_mut().chain(&mut self.buffers)
    }
}

pub trait SegmentationModel: Send + Sync {
    type Cache;

    fn num_classes(&self) -> usize;

    fn init_state<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelState;

    fn check_state(&self, state: &ModelState) -> Result<()>;

    /// Logits at input resolution using batch statistics; updates the
    /// running statistics and keeps what the backward pass needs.
    fn forward_train(&self, state: &mut ModelState, x: &Tensor) -> Result<(Tensor, Self::Cache)>;

    /// Logits using frozen running statistics.
    fn forward_eval(&self, state: &ModelState, x: &Tensor) -> Result<Tensor>;

    /// Parameter gradients (same layout as `state.params`).
    fn backward(&self, state: &ModelState, cache: Self::Cache, dlogits: &Tensor) -> Vec<Vec<f32>>;
}

/// Logits for a batch in the requested mode.
pub fn forward<M: SegmentationModel>(model: &M, state: &mut ModelState, x: &Tensor, mode: Mode) -> Result<Tensor> {
    match mode {
        Mode::Train => model.forward_train(state, x).map(|(logits, _)| logits),
        Mode::Eval => model.forward_eval(state, x),
    }
}

/// Student trained by gradient steps and its exponential-moving-average teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPair {
    pub student: ModelState,
    pub teacher: ModelState,
}

impl ModelPair {
    /// Teacher starts as an exact copy of the student.
    pub fn new(student: ModelState) -> Self {
        Self {
            teacher: student.clone(),
            student,
        }
    }

    pub fn reset_teacher(&mut self) {
        self.teacher = self.student.clone();
    }

    /// `teacher <- m * teacher + (1 - m) * student` for every parameter and
    /// running statistic.
    pub fn ema_update(&mut self, momentum: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid(format!("EMA momentum {momentum} outside [0, 1]")));
        }
        if !self.teacher.same_layout(&self.student) {
            return Err(Error::invalid("teacher and student layouts differ"));
        }
        let m = momentum as f32;
        let keep = 1.0 - m;
        for (t, s) in self.teacher.tensors_mut().zip(self.student.tensors()) {
            if momentum == 1.0 {
                continue;
            }
            for (tv, &sv) in t.iter_mut().zip(s) {
                *tv = m * *tv + keep * sv;
            }
        }
        Ok(())
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(state: &ModelState, momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: state.params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, state: &mut ModelState, grads: &[Vec<f32>], lr: f32) {
        for ((p, g), v) in state.params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + d;
                *pv -= lr * *vv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_pair(teacher: f32, student: f32) -> ModelPair {
        ModelPair {
            student: ModelState { params: vec![vec![student]], buffers: vec![vec![student]] },
            teacher: ModelState { params: vec![vec![teacher]], buffers: vec![vec![teacher]] },
        }
    }

    #[test]
    fn ema_single_step() {
        let mut p = scalar_pair(1.0, 0.0);
        p.ema_update(0.99).unwrap();
        assert!((p.teacher.params[0][0] - 0.99).abs() < 1e-7);
        assert!((p.teacher.buffers[0][0] - 0.99).abs() < 1e-7);
    }

    #[test]
    fn ema_boundaries() {
        let mut p = scalar_pair(0.3, 0.8);
        p.ema_update(1.0).unwrap();
        assert_eq!(p.teacher.params[0][0], 0.3);
        p.ema_update(0.0).unwrap();
        assert_eq!(p.teacher, p.student);
        assert!(matches!(p.ema_update(1.5), Err(Error::InvalidArgument(_))));
        assert!(p.ema_update(-0.1).is_err());
    }

    #[test]
    fn ema_matches_closed_form() {
        // oracle: theta_n = s + (theta_0 - s) * m^n
        let (t0, s, m) = (2.5f64, -0.75f64, 0.97f64);
        let mut p = scalar_pair(t0 as f32, s as f32);
        for n in 1..=200 {
            p.ema_update(m).unwrap();
            let expect = s + (t0 - s) * m.powi(n);
            assert!((p.teacher.params[0][0] as f64 - expect).abs() < 1e-6, "step {n}");
        }
    }

    #[test]
    fn unet_shapes_and_eval_determinism() {
        let net = UNet::new(&UNetConfig { widths: [4, 8, 8, 8] }, 3).unwrap();
        let mut state = net.init_state(&mut ChaCha8Rng::seed_from_u64(0));
        net.check_state(&state).unwrap();
        let mut x = Tensor::zeros(2, 3, 16, 24);
        x.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 13) as f32 / 13.0);
        let y = forward(&net, &mut state, &x, Mode::Train).unwrap();
        assert_eq!((y.n, y.c, y.h, y.w), (2, 3, 16, 24));
        let a = net.forward_eval(&state, &x).unwrap();
        let b = net.forward_eval(&state, &x).unwrap();
        assert_eq!(a, b);
        let probs = a.softmax_channels();
        for i in 0..2 {
            for p in 0..16 * 24 {
                let s: f32 = (0..3).map(|c| probs.item(i)[c * 384 + p]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
        assert!(net.forward_eval(&state, &Tensor::zeros(1, 3, 12, 16)).is_err());
        assert!(net.forward_eval(&state, &Tensor::zeros(1, 1, 16, 16)).is_err());
    }

    #[test]
    fn default_network_is_half_a_million_parameters() {
        let net = UNet::new(&UNetConfig::default(), 19).unwrap();
        let n = net.param_count();
        assert!((400_000..700_000).contains(&n), "{n}");
    }

    #[test]
    fn unet_gradient_matches_finite_differences() {
        let net = UNet::new(&UNetConfig { widths: [3, 4, 4, 4] }, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = net.init_state(&mut rng);
        let mut x = Tensor::zeros(2, 3, 32, 32);
        x.data.iter_mut().for_each(|v| *v = rng.gen());
        let mut g = Tensor::zeros(2, 2, 32, 32);
        g.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let loss = |s: &ModelState| -> f64 {
            let (y, _) = net.forward_train(&mut s.clone(), &x).unwrap();
            y.data.iter().zip(&g.data).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let (_, cache) = net.forward_train(&mut state.clone(), &x).unwrap();
        let grads = net.backward(&state, cache, &g);
        // one random direction per parameter tensor; f32 forward passes and
        // ReLU/max-pool kinks limit how tight this can be
        let eps = 1e-4f32;
        for grp in 0..23 {
            let dir: Vec<Vec<f32>> = state.params.iter().enumerate().map(|(i, p)| p.iter().map(|_| if i == grp { rng.gen_range(-1.0..1.0) } else { 0.0 }).collect()).collect();
            let shifted = |sign: f32| {
                let mut s = state.clone();
                for (p, d) in s.params.iter_mut().zip(&dir) {
                    p.iter_mut().zip(d).for_each(|(v, dv)| *v += sign * eps * dv);
                }
                s
            };
            let fd = (loss(&shifted(1.0)) - loss(&shifted(-1.0))) / (2.0 * eps as f64);
            let an: f64 = grads.iter().flatten().zip(dir.iter().flatten()).map(|(a, b)| *a as f64 * *b as f64).sum();
            assert!((fd - an).abs() < 6e-2 * (an.abs() + 1.0), "group {grp}: fd={fd} an={an}");
        }
    }

    #[test]
    fn overfits_two_images() {
        let net = UNet::new(&UNetConfig { widths: [8, 8, 16, 16] }, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = net.init_state(&mut rng);
        let mut x = Tensor::zeros(2, 3, 16, 16);
        let mut labels = vec![0usize; 2 * 256];
        for i in 0..2 {
            for p in 0..256 {
                let (y, xx) = (p / 16, p % 16);
                let c = if y < 8 { 0 } else if xx < 8 { 1 } else { 2 };
                labels[i * 256 + p] = (c + i) % 3;
                for ch in 0..3 {
                    x.item_mut(i)[ch * 256 + p] = if ch == labels[i * 256 + p] { 0.9 } else { 0.1 } + 0.05 * rng.gen::<f32>();
                }
            }
        }
        let mut opt = Sgd::new(&state, 0.9, 0.0);
        let mut prev = f64::INFINITY;
        let mut losses = Vec::new();
        for _ in 0..500 {
            let (y, cache) = net.forward_train(&mut state, &x).unwrap();
            let p = y.softmax_channels();
            let mut d = p.clone();
            let mut loss = 0.0f64;
            for i in 0..2 {
                for px in 0..256 {
                    let l = labels[i * 256 + px];
                    loss -= (p.item(i)[l * 256 + px] as f64).ln();
                    d.item_mut(i)[l * 256 + px] -= 1.0;
                }
            }
            loss /= 512.0;
            d.data.iter_mut().for_each(|v| *v /= 512.0);
            let g = net.backward(&state, cache, &d);
            opt.step(&mut state, &g, 0.05);
            losses.push(loss);
            prev = prev.min(loss);
            if loss < 0.1 {
                break;
            }
        }
        assert!(*losses.last().unwrap() < 0.1, "final loss {}", losses.last().unwrap());
    }

    proptest! {
        #[test]
        fn ema_is_elementwise(t in proptest::collection::vec(-5.0f32..5.0, 1..20), s in proptest::collection::vec(-5.0f32..5.0, 1..20), m in 0.0f64..1.0) {
            let n = t.len().min(s.len());
            let (t, s) = (&t[..n], &s[..n]);
            let mut whole = ModelPair {
                student: ModelState { params: vec![s.to_vec()], buffers: vec![] },
                teacher: ModelState { params: vec![t.to_vec()], buffers: vec![] },
            };
            whole.ema_update(m).unwrap();
            let split = n / 2;
            let mut parts = ModelPair {
                student: ModelState { params: vec![s[..split].to_vec(), s[split..].to_vec()], buffers: vec![] },
                teacher: ModelState { params: vec![t[..split].to_vec(), t[split..].to_vec()], buffers: vec![] },
            };
            parts.ema_update(m).unwrap();
            let joined: Vec<f32> = parts.teacher.params.concat();
            prop_assert_eq!(&joined, &whole.teacher.params[0]);

            // drift bound against a fixed student
            let mut p = whole.clone();
            let d0: f64 = t.iter().zip(s).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
            p.teacher.params[0] = t.to_vec();
            for k in 1..=10 {
                p.ema_update(m).unwrap();
                let dk: f64 = p.teacher.params[0].iter().zip(s).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
                prop_assert!(dk <= d0 * m.powi(k) + 1e-4);
            }
        }
    }
}
