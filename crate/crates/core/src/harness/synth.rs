//! Synthetic long-tail segmentation data: coloured shapes on a textured
//! background. Class 0 is the background; shapes of class `c` are painted
//! only over background so each class keeps the area it was given. Striped
//! distractors in class colours stay background, so colour alone does not
//! determine the class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datapool::{Dataset, DatasetSplits, Image, LabelMap, Sample, IGNORE_INDEX};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Target pixel share per class; index 0 is the background.
    pub shares: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    /// Standard deviation of per-pixel colour noise.
    pub noise: f32,
    /// Striped background shapes per image, coloured like the classes.
    pub distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shares: vec![0.55, 0.30, 0.10, 0.05],
            height: 64,
            width: 64,
            train: 200,
            val: 20,
            test: 50,
            seed: 0,
            noise: 0.12,
            distractors: 6,
        }
    }
}

impl SynthConfig {
    pub fn num_classes(&self) -> usize {
        self.shares.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.shares.len() < 3 {
            return Err(Error::invalid("synthetic data needs at least 3 classes"));
        }
        if self.shares.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("class shares must be positive"));
        }
        let sum: f64 = self.shares.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("class shares sum to {sum}, not 1")));
        }
        // foreground is painted over background only, so the background
        // must leave room for per-image variation
        if self.shares[0] < 0.2 {
            return Err(Error::invalid("background share below 0.2 is not achievable"));
        }
        if self.height < 8 || self.width < 8 || self.noise < 0.0 {
            return Err(Error::invalid("image size must be at least 8x8 and noise non-negative"));
        }
        Ok(())
    }

    /// Train/val/test splits, each from its own seed stream.
    pub fn generate_splits(&self) -> Result<DatasetSplits> {
        let split = |name: &str, n: usize, stream: u64| {
            generate_synthetic(self, n, self.seed.wrapping_mul(3).wrapping_add(stream), name)
        };
        Ok(DatasetSplits {
            train: split("train", self.train, 0)?,
            val: split("val", self.val, 1)?,
            test: split("test", self.test, 2)?,
        })
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
    Triangle,
}

impl Shape {
    fn contains(self, dy: f32, dx: f32, ry: f32, rx: f32) -> bool {
        let (u, v) = (dy / ry, dx / rx);
        match self {
            Shape::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Ellipse => u * u + v * v <= 1.0,
            Shape::Triangle => (-1.0..=1.0).contains(&u) && v.abs() <= (u + 1.0) / 2.0,
        }
    }

    /// Area of the shape relative to its bounding `2ry x 2rx` box.
    fn fill(self) -> f32 {
        match self {
            Shape::Rect => 1.0,
            Shape::Ellipse => std::f32::consts::FRAC_PI_4,
            Shape::Triangle => 0.5,
        }
    }
}

fn palette_hue(class: usize, k: usize) -> f32 {
    (class - 1) as f32 / (k - 1) as f32
}

/// Calls `f(y, x)` for every pixel of the shape inside the image.
#[allow(clippy::too_many_arguments)]
fn for_each_in(shape: Shape, cy: f32, cx: f32, ry: f32, rx: f32, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    let (y0, y1) = ((cy - ry).floor().max(0.0) as usize, ((cy + ry).ceil() as usize).min(h - 1));
    let (x0, x1) = ((cx - rx).floor().max(0.0) as usize, ((cx + rx).ceil() as usize).min(w - 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            if shape.contains(y as f32 - cy, x as f32 - cx, ry, rx) {
                f(y, x);
            }
        }
    }
}

/// `n` images with ids `<prefix>_<index>`; deterministic per seed.
pub fn generate_synthetic(cfg: &SynthConfig, n: usize, seed: u64, prefix: &str) -> Result<Dataset> {
    cfg.validate()?;
    let k = cfg.num_classes();
    let (h, w) = (cfg.height, cfg.width);
    let p = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, cfg.noise.max(1e-12)).expect("finite noise");

    let mut samples = Vec::with_capacity(n);
    for idx in 0..n {
        let mut label = vec![0u8; p];
        let mut colour = vec![[0f32; 3]; p];
        // textured background
        let (fy, fx, phase) = (rng.gen_range(0.1..0.5f32), rng.gen_range(0.1..0.5f32), rng.gen_range(0.0..6.3f32));
        let base = rng.gen_range(0.35..0.55f32);
        for y in 0..h {
            for x in 0..w {
                let v = base + 0.08 * (fy * y as f32 + fx * x as f32 + phase).sin();
                colour[y * w + x] = [v, v * 0.95, v * 0.9];
            }
        }
        for _ in 0..cfg.distractors {
            let shape = [Shape::Rect, Shape::Ellipse, Shape::Triangle][rng.gen_range(0..3)];
            let ry = rng.gen_range(2.0..(h as f32 / 6.0).max(2.5));
            let rx = rng.gen_range(2.0..(w as f32 / 6.0).max(2.5));
            let (cy, cx) = (rng.gen_range(0.0..h as f32), rng.gen_range(0.0..w as f32));
            let hue = palette_hue(rng.gen_range(1..k), k) + rng.gen_range(-0.05..0.05f32);
            let rgb = hsv(hue, rng.gen_range(0.4..0.9), rng.gen_range(0.5..0.95));
            let period = rng.gen_range(2..4usize);
            let vertical = rng.gen_bool(0.5);
            for_each_in(shape, cy, cx, ry, rx, h, w, |y, x| {
                let stripe = if vertical { x } else { y } / period % 2 == 0;
                let i = y * w + x;
                colour[i] = if stripe { rgb } else { colour[i] };
            });
        }
        // larger classes first; each shape claims background pixels only
        let mut order: Vec<usize> = (1..k).collect();
        order.sort_by(|&a, &b| cfg.shares[b].total_cmp(&cfg.shares[a]));
        for c in order {
            let target = (cfg.shares[c] * p as f64 * rng.gen_range(0.6..1.4)) as usize;
            let mut count = 0usize;
            for _ in 0..64 {
                if count + 4 >= target {
                    break;
                }
                let shape = [Shape::Rect, Shape::Ellipse, Shape::Triangle][rng.gen_range(0..3)];
                let area = ((target - count) as f32 * rng.gen_range(0.5..1.0f32)).clamp(9.0, 0.3 * p as f32);
                let aspect = rng.gen_range(0.6..1.6f32);
                let ry = ((area / shape.fill() / aspect).sqrt() / 2.0).max(1.5);
                let rx = (ry * aspect).max(1.5);
                let cy = rng.gen_range(0.0..h as f32);
                let cx = rng.gen_range(0.0..w as f32);
                let hue = palette_hue(c, k) + rng.gen_range(-0.05..0.05f32);
                let tint = hsv(hue, rng.gen_range(0.4..0.9), rng.gen_range(0.5..0.95));
                for_each_in(shape, cy, cx, ry, rx, h, w, |y, x| {
                    let i = y * w + x;
                    if label[i] == 0 {
                        label[i] = c as u8;
                        colour[i] = tint;
                        count += 1;
                    }
                });
            }
        }
        let mut data = vec![0f32; 3 * p];
        for (i, rgb) in colour.iter().enumerate() {
            for ch in 0..3 {
                data[ch * p + i] = (rgb[ch] + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        samples.push(Sample {
            id: format!("{prefix}_{idx:05}"),
            image: Image::new(h, w, data)?,
            label: LabelMap::new(h, w, label)?,
        });
    }
    Dataset::new(samples, k, IGNORE_INDEX)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn realized_shares(ds: &Dataset) -> Vec<f64> {
        let mut counts = vec![0u64; ds.num_classes()];
        for s in ds.samples() {
            for &l in &s.label.data {
                counts[l as usize] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    #[test]
    fn long_tail_shares_are_met() {
        let cfg = SynthConfig::default();
        let ds = generate_synthetic(&cfg, 200, 7, "t").unwrap();
        for (got, want) in realized_shares(&ds).iter().zip(&cfg.shares) {
            assert!((got - want).abs() <= 0.03, "share {got} vs {want}");
        }
        assert!(ds.samples().iter().all(|s| s.label.data.iter().all(|&l| (l as usize) < 4)));
    }

    #[test]
    fn same_seed_same_bits() {
        let cfg = SynthConfig::default();
        let a = generate_synthetic(&cfg, 5, 3, "x").unwrap();
        let b = generate_synthetic(&cfg, 5, 3, "x").unwrap();
        for (sa, sb) in a.samples().iter().zip(b.samples()) {
            assert_eq!(sa.label, sb.label);
            assert!(sa.image.data.iter().zip(&sb.image.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let c = generate_synthetic(&cfg, 5, 4, "x").unwrap();
        assert_ne!(a.samples()[0].label, c.samples()[0].label);
    }

    #[test]
    fn infeasible_configs_rejected() {
        let bad = |shares: Vec<f64>| SynthConfig { shares, ..SynthConfig::default() }.validate().is_err();
        assert!(bad(vec![0.5, 0.5]));
        assert!(bad(vec![0.5, 0.3, 0.1]));
        assert!(bad(vec![0.5, 0.6, -0.1]));
        assert!(bad(vec![0.1, 0.5, 0.4]));
        assert!(!bad(vec![0.4, 0.3, 0.3]));
    }
}
