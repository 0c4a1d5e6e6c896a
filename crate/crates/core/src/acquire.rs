//! Pixel informativeness scores, region aggregation and top-k selection.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapool::{PoolState, RegionGrid, RegionId, Selection};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionMetric {
    Random,
    LeastConfidence,
    Entropy,
    Margin,
}

impl AcquisitionMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::LeastConfidence => "least_confidence",
            Self::Entropy => "entropy",
            Self::Margin => "margin",
        }
    }
}

impl fmt::Display for AcquisitionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AcquisitionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "least_confidence" => Ok(Self::LeastConfidence),
            "entropy" => Ok(Self::Entropy),
            "margin" => Ok(Self::Margin),
            other => Err(Error::invalid(format!("unknown acquisition metric `{other}`"))),
        }
    }
}

/// Per-pixel scores; higher means more informative.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub metric: AcquisitionMetric,
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
}

/// Scores one softmax map laid out as `K` planes of `height * width`.
pub fn pixel_scores<R: Rng + ?Sized>(
    probs: &[f32],
    num_classes: usize,
    height: usize,
    width: usize,
    metric: AcquisitionMetric,
    rng: &mut R,
) -> Result<ScoreMap> {
    let n = height * width;
    if probs.len() != num_classes * n || num_classes == 0 {
        return Err(Error::invalid(format!(
            "probability map has {} values, expected {num_classes}x{height}x{width}",
            probs.len()
        )));
    }
    let mut scores = Vec::with_capacity(n);
    let mut p = vec![0f64; num_classes];
    for i in 0..n {
        for (c, v) in p.iter_mut().enumerate() {
            *v = probs[c * n + i] as f64;
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!(
                "pixel {i} probabilities sum to {sum}"
            )));
        }
        scores.push(match metric {
            AcquisitionMetric::Random => rng.gen::<f64>(),
            AcquisitionMetric::Entropy => entropy(&p),
            AcquisitionMetric::LeastConfidence => 1.0 - p.iter().copied().fold(f64::MIN, f64::max),
            AcquisitionMetric::Margin => {
                let (a, b) = top_two(&p);
                1.0 - (a - b)
            }
        });
    }
    Ok(ScoreMap {
        metric,
        height,
        width,
        scores,
    })
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

fn top_two(p: &[f64]) -> (f64, f64) {
    let mut first = f64::MIN;
    let mut second = if p.len() == 1 { 0.0 } else { f64::MIN };
    for &v in p {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    (first, second)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub image: usize,
    pub region: RegionId,
    pub score: f64,
    pub unlabeled_pixels: usize,
}

/// Mean score over the unrevealed pixels of each region; fully revealed
/// regions are omitted.
pub fn region_scores(map: &ScoreMap, image: usize, grid: &RegionGrid, known: &[bool]) -> Result<Vec<RegionScore>> {
    if (map.height, map.width) != (grid.height, grid.width) || known.len() != map.scores.len() {
        return Err(Error::invalid("score map, grid and mask disagree in shape"));
    }
    Ok(grid
        .regions()
        .filter_map(|r| {
            let (sum, count) = r
                .pixels(grid.width)
                .filter(|&p| !known[p])
                .fold((0.0, 0usize), |(s, c), p| (s + map.scores[p], c + 1));
            (count > 0).then(|| RegionScore {
                image,
                region: r.id,
                score: sum / count as f64,
                unlabeled_pixels: count,
            })
        })
        .collect())
}

/// Descending score, ties broken by `(row, col)` ascending.
fn rank(a: &RegionScore, b: &RegionScore) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.region.cmp(&b.region))
}

/// Top `min(k, available)` regions of every image.
pub fn select_regions(per_image: &[Vec<RegionScore>], per_image_k: usize) -> Result<Vec<Selection>> {
    if per_image_k == 0 {
        return Err(Error::invalid("per_image_k must be at least 1"));
    }
    let mut out = Vec::new();
    for scores in per_image {
        let mut ranked: Vec<&RegionScore> = scores.iter().filter(|s| s.unlabeled_pixels > 0).collect();
        ranked.sort_by(|a, b| rank(a, b));
        out.extend(ranked.into_iter().take(per_image_k).map(|s| Selection {
            image: s.image,
            region: s.region,
        }));
    }
    Ok(out)
}

/// Top `budget` regions across all images (ablation mode); ties fall back
/// to image index, then `(row, col)`.
pub fn select_regions_global(per_image: &[Vec<RegionScore>], budget: usize) -> Vec<Selection> {
    let mut all: Vec<&RegionScore> = per_image
        .iter()
        .flatten()
        .filter(|s| s.unlabeled_pixels > 0)
        .collect();
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then(a.region.cmp(&b.region))
    });
    all.into_iter()
        .take(budget)
        .map(|s| Selection {
            image: s.image,
            region: s.region,
        })
        .collect()
}

/// One line of the per-cycle acquisition record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionRecord {
    pub cycle: usize,
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    pub score: f64,
    pub metric: AcquisitionMetric,
}

pub fn acquisition_records(
    cycle: usize,
    pool: &PoolState,
    selections: &[Selection],
    per_image: &[Vec<RegionScore>],
    metric: AcquisitionMetric,
) -> Vec<AcquisitionRecord> {
    selections
        .iter()
        .map(|s| {
            let score = per_image
                .iter()
                .flatten()
                .find(|r| r.image == s.image && r.region == s.region)
                .map_or(f64::NAN, |r| r.score);
            AcquisitionRecord {
                cycle,
                image_id: pool.image(s.image).id.clone(),
                row: s.region.row,
                col: s.region.col,
                score,
                metric,
            }
        })
        .collect()
}
