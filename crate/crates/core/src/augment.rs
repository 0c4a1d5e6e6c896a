//! Weak/strong augmentation and ClassMix.
//!
//! Every geometric augmentation produces a [`Transform`] that maps output
//! pixels back to source coordinates, so label, confidence and mask maps can
//! be carried from one view to another with nearest-neighbour sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapool::{Image, LabelMap};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Weak-view crop size; `0` keeps the full image dimension.
    pub crop_h: usize,
    pub crop_w: usize,
    pub flip_prob: f64,
    pub scale_min: f32,
    pub scale_max: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_h: 0,
            crop_w: 0,
            flip_prob: 0.5,
            scale_min: 0.5,
            scale_max: 2.0,
            brightness: 0.25,
            contrast: 0.25,
            saturation: 0.25,
        }
    }
}

/// Per-axis affine map from output pixel to source coordinate:
/// `src_y = ay * y + by`, `src_x = ax * x + bx`. A horizontal flip is a
/// negative `ax`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub src_h: usize,
    pub src_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub ay: f32,
    pub by: f32,
    pub ax: f32,
    pub bx: f32,
}

impl Transform {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            src_h: h,
            src_w: w,
            out_h: h,
            out_w: w,
            ay: 1.0,
            by: 0.0,
            ax: 1.0,
            bx: 0.0,
        }
    }

    /// Crop of size `out_h x out_w` at offset `(oy, ox)`, optionally mirrored.
    pub fn crop(src_h: usize, src_w: usize, oy: usize, ox: usize, out_h: usize, out_w: usize, flip: bool) -> Self {
        let (ax, bx) = if flip {
            (-1.0, (ox + out_w - 1) as f32)
        } else {
            (1.0, ox as f32)
        };
        Self {
            src_h,
            src_w,
            out_h,
            out_w,
            ay: 1.0,
            by: oy as f32,
            ax,
            bx,
        }
    }

    /// Zoom by `scale` about the image centre, same output size, optional mirror.
    pub fn zoom(h: usize, w: usize, scale: f32, flip: bool) -> Self {
        let cy = (h as f32 - 1.0) / 2.0;
        let cx = (w as f32 - 1.0) / 2.0;
        let a = 1.0 / scale;
        let ax = if flip { -a } else { a };
        Self {
            src_h: h,
            src_w: w,
            out_h: h,
            out_w: w,
            ay: a,
            by: cy - a * cy,
            ax,
            bx: cx - ax * cx,
        }
    }

    pub fn is_flipped(&self) -> bool {
        self.ax < 0.0
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.src_h, self.src_w)
    }

    pub fn inverse(&self) -> Self {
        Self {
            src_h: self.out_h,
            src_w: self.out_w,
            out_h: self.src_h,
            out_w: self.src_w,
            ay: 1.0 / self.ay,
            by: -self.by / self.ay,
            ax: 1.0 / self.ax,
            bx: -self.bx / self.ax,
        }
    }

    #[inline]
    pub fn source_of(&self, y: usize, x: usize) -> (f32, f32) {
        (self.ay * y as f32 + self.by, self.ax * x as f32 + self.bx)
    }

    /// Nearest source pixel (flat index) for each output pixel; `None` outside the source.
    pub fn nearest_sources(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.out_h * self.out_w);
        for y in 0..self.out_h {
            for x in 0..self.out_w {
                let (sy, sx) = self.source_of(y, x);
                let (ry, rx) = (sy.round(), sx.round());
                if ry >= 0.0 && rx >= 0.0 && (ry as usize) < self.src_h && (rx as usize) < self.src_w {
                    out.push(Some(ry as usize * self.src_w + rx as usize));
                } else {
                    out.push(None);
                }
            }
        }
        out
    }

    /// Nearest-neighbour warp of any per-pixel map.
    pub fn warp_nearest<T: Copy>(&self, src: &[T], fill: T) -> Vec<T> {
        debug_assert_eq!(src.len(), self.src_h * self.src_w);
        self.nearest_sources()
            .into_iter()
            .map(|s| s.map_or(fill, |i| src[i]))
            .collect()
    }

    pub fn warp_labels(&self, src: &LabelMap, fill: u8) -> LabelMap {
        LabelMap {
            height: self.out_h,
            width: self.out_w,
            data: self.warp_nearest(&src.data, fill),
        }
    }

    /// Output pixels whose nearest source pixel lies inside the source.
    pub fn coverage(&self) -> Vec<bool> {
        self.nearest_sources().into_iter().map(|s| s.is_some()).collect()
    }

    /// Bilinear warp of an image; pixels mapping outside are zero.
    pub fn warp_image(&self, src: &Image) -> Image {
        debug_assert_eq!((src.height, src.width), (self.src_h, self.src_w));
        if self.ay == 1.0 && self.ax.abs() == 1.0 && self.by.fract() == 0.0 && self.bx.fract() == 0.0 {
            // integer crop/flip: exact copy
            let sources = self.nearest_sources();
            let mut out = Image::zeros(self.out_h, self.out_w);
            for c in 0..Image::CHANNELS {
                let plane = src.plane(c);
                for (o, s) in out.plane_mut(c).iter_mut().zip(&sources) {
                    if let Some(i) = *s {
                        *o = plane[i];
                    }
                }
            }
            return out;
        }
        let (h, w) = (self.src_h as f32, self.src_w as f32);
        let mut out = Image::zeros(self.out_h, self.out_w);
        let n = self.out_h * self.out_w;
        for y in 0..self.out_h {
            for x in 0..self.out_w {
                let (sy, sx) = self.source_of(y, x);
                if sy < -0.5 || sx < -0.5 || sy > h - 0.5 || sx > w - 0.5 {
                    continue;
                }
                let sy = sy.clamp(0.0, h - 1.0);
                let sx = sx.clamp(0.0, w - 1.0);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(self.src_h - 1), (x0 + 1).min(self.src_w - 1));
                let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
                for c in 0..Image::CHANNELS {
                    let p = src.plane(c);
                    let at = |yy: usize, xx: usize| p[yy * self.src_w + xx];
                    let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                    out.data[c * n + y * self.out_w + x] = v;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct WeakView {
    pub image: Image,
    pub label: Option<LabelMap>,
    pub transform: Transform,
}

/// Random horizontal flip plus random crop; the label map (if any) gets the
/// same geometry with nearest-neighbour semantics.
pub fn weak_augment<R: Rng + ?Sized>(
    image: &Image,
    label: Option<&LabelMap>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<WeakView> {
    let (h, w) = (image.height, image.width);
    let ch = if cfg.crop_h == 0 { h } else { cfg.crop_h };
    let cw = if cfg.crop_w == 0 { w } else { cfg.crop_w };
    if ch > h || cw > w {
        return Err(Error::invalid(format!(
            "crop {ch}x{cw} larger than image {h}x{w}"
        )));
    }
    let flip = rng.gen_bool(cfg.flip_prob);
    let oy = rng.gen_range(0..=h - ch);
    let ox = rng.gen_range(0..=w - cw);
    let transform = Transform::crop(h, w, oy, ox, ch, cw, flip);
    Ok(WeakView {
        image: transform.warp_image(image),
        label: label.map(|l| transform.warp_labels(l, crate::datapool::IGNORE_INDEX)),
        transform,
    })
}

/// Random zoom in `[scale_min, scale_max]`, flip, then brightness/contrast/
/// saturation jitter. Only the geometric part is recorded in the transform.
pub fn strong_augment<R: Rng + ?Sized>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> (Image, Transform) {
    let scale = if cfg.scale_max > cfg.scale_min {
        rng.gen_range(cfg.scale_min..=cfg.scale_max)
    } else {
        cfg.scale_min
    };
    let flip = rng.gen_bool(cfg.flip_prob);
    let transform = Transform::zoom(image.height, image.width, scale, flip);
    let mut out = if transform.is_identity() {
        image.clone()
    } else {
        transform.warp_image(image)
    };
    let jitter = |strength: f32, rng: &mut R| {
        (strength > 0.0).then(|| rng.gen_range(1.0 - strength..=1.0 + strength))
    };
    let b = jitter(cfg.brightness, rng);
    let c = jitter(cfg.contrast, rng);
    let s = jitter(cfg.saturation, rng);
    color_jitter(&mut out, b, c, s);
    (out, transform)
}

fn color_jitter(img: &mut Image, brightness: Option<f32>, contrast: Option<f32>, saturation: Option<f32>) {
    let n = img.pixels();
    if let Some(f) = brightness {
        img.data.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
    }
    let gray = |img: &Image, i: usize| 0.299 * img.data[i] + 0.587 * img.data[n + i] + 0.114 * img.data[2 * n + i];
    if let Some(f) = contrast {
        let mean = (0..n).map(|i| gray(img, i)).sum::<f32>() / n as f32;
        img.data
            .iter_mut()
            .for_each(|v| *v = ((*v - mean) * f + mean).clamp(0.0, 1.0));
    }
    if let Some(f) = saturation {
        for i in 0..n {
            let g = gray(img, i);
            for c in 0..Image::CHANNELS {
                let v = &mut img.data[c * n + i];
                *v = ((*v - g) * f + g).clamp(0.0, 1.0);
            }
        }
    }
}

/// Chooses `ceil(|present| / 2)` classes to paste. Uniform without
/// replacement, or (balanced) tail classes first in random order with the
/// remainder drawn from the head.
pub fn select_mix_classes<R: Rng + ?Sized>(
    present: &[usize],
    tail: &[usize],
    balanced: bool,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if present.is_empty() {
        return Err(Error::invalid("no classes present to mix"));
    }
    let k = present.len().div_ceil(2);
    let mut chosen = if balanced {
        let (mut tails, mut heads): (Vec<usize>, Vec<usize>) =
            present.iter().partition(|c| tail.contains(c));
        tails.shuffle(rng);
        heads.shuffle(rng);
        tails.into_iter().chain(heads).take(k).collect::<Vec<_>>()
    } else {
        rand::seq::index::sample(rng, present.len(), k)
            .into_iter()
            .map(|i| present[i])
            .collect()
    };
    chosen.sort_unstable();
    Ok(chosen)
}

/// Image plus per-pixel training targets, mixed together by ClassMix.
#[derive(Clone, Debug, PartialEq)]
pub struct MixLayer {
    pub image: Image,
    pub label: LabelMap,
    pub confidence: Vec<f32>,
    /// Pixels that contribute to the unsupervised loss.
    pub valid: Vec<bool>,
}

impl MixLayer {
    fn check(&self) -> Result<()> {
        let n = self.image.pixels();
        if self.label.data.len() != n || self.confidence.len() != n || self.valid.len() != n {
            return Err(Error::invalid("mix layer channels disagree in size"));
        }
        Ok(())
    }

    /// Distinct non-ignore classes in the label channel, ascending.
    pub fn present_classes(&self, num_classes: usize) -> Vec<usize> {
        let mut seen = vec![false; num_classes];
        for &l in &self.label.data {
            if (l as usize) < num_classes {
                seen[l as usize] = true;
            }
        }
        (0..num_classes).filter(|&c| seen[c]).collect()
    }

    /// Carries all channels through a geometric transform. Pixels falling
    /// outside the source become ignore / zero confidence / invalid.
    pub fn warp(&self, t: &Transform, image: Image) -> MixLayer {
        MixLayer {
            image,
            label: t.warp_labels(&self.label, crate::datapool::IGNORE_INDEX),
            confidence: t.warp_nearest(&self.confidence, 0.0),
            valid: t.warp_nearest(&self.valid, false),
        }
    }
}

/// Pastes every source pixel whose label is in `classes` onto the target.
/// Returns the mixed layer and the paste mask.
pub fn classmix(src: &MixLayer, tgt: &MixLayer, classes: &[usize]) -> Result<(MixLayer, Vec<bool>)> {
    src.check()?;
    tgt.check()?;
    if (src.image.height, src.image.width) != (tgt.image.height, tgt.image.width) {
        return Err(Error::invalid("classmix source and target differ in shape"));
    }
    let mask: Vec<bool> = src
        .label
        .data
        .iter()
        .map(|&l| classes.contains(&(l as usize)))
        .collect();
    let pick = |i: usize| mask[i];
    let n = mask.len();
    let mut image = tgt.image.clone();
    for c in 0..Image::CHANNELS {
        for i in (0..n).filter(|&i| pick(i)) {
            image.data[c * n + i] = src.image.data[c * n + i];
        }
    }
    let sel = |i: usize| if pick(i) { src } else { tgt };
    let label = LabelMap {
        height: tgt.label.height,
        width: tgt.label.width,
        data: (0..n).map(|i| sel(i).label.data[i]).collect(),
    };
    let confidence = (0..n).map(|i| sel(i).confidence[i]).collect();
    let valid = (0..n).map(|i| sel(i).valid[i]).collect();
    Ok((
        MixLayer {
            image,
            label,
            confidence,
            valid,
        },
        mask,
    ))
}
