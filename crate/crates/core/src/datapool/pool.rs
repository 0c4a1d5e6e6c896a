//! Labeling state of the training pool.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::grid::{RegionGrid, RegionId};
use crate::error::{Error, Result};

pub const POOL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Labeled,
    Unlabeled,
    Partial,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolImage {
    pub id: String,
    known: Vec<bool>,
    known_count: usize,
}

impl PoolImage {
    fn new(id: String, pixels: usize, labeled: bool) -> Self {
        Self {
            id,
            known: vec![labeled; pixels],
            known_count: if labeled { pixels } else { 0 },
        }
    }

    pub fn status(&self) -> Status {
        if self.known_count == self.known.len() {
            Status::Labeled
        } else if self.known_count == 0 {
            Status::Unlabeled
        } else {
            Status::Partial
        }
    }

    pub fn known_mask(&self) -> &[bool] {
        &self.known
    }

    pub fn known_count(&self) -> usize {
        self.known_count
    }

    pub fn pixels(&self) -> usize {
        self.known.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Acquisition {
    pub cycle: usize,
    pub image_id: String,
    pub row: usize,
    pub col: usize,
}

/// A region chosen for annotation; `image` indexes the pool (and train set).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Selection {
    pub image: usize,
    pub region: RegionId,
}

/// Per-class labeled pixel counts with the head/tail partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub pixel_count: Vec<u64>,
    pub head: Vec<usize>,
    pub tail: Vec<usize>,
}

impl ClassDistribution {
    /// Splits classes by share: tail iff `count / total < 1 / K`.
    pub fn from_counts(pixel_count: Vec<u64>) -> Result<Self> {
        let total: u64 = pixel_count.iter().sum();
        if total == 0 {
            return Err(Error::EmptyPool);
        }
        let k = pixel_count.len() as u64;
        let (tail, head): (Vec<usize>, Vec<usize>) =
            (0..pixel_count.len()).partition(|&c| pixel_count[c] * k < total);
        Ok(Self {
            pixel_count,
            head,
            tail,
        })
    }

    pub fn shares(&self) -> Vec<f64> {
        let total: u64 = self.pixel_count.iter().sum();
        self.pixel_count
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect()
    }

    pub fn is_tail(&self, class: usize) -> bool {
        self.tail.binary_search(&class).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoolFile", try_from = "PoolFile")]
pub struct PoolState {
    seed: u64,
    grid: RegionGrid,
    images: Vec<PoolImage>,
    log: Vec<Acquisition>,
}

impl PoolState {
    /// Marks `round(fraction * N)` (at least one) uniformly sampled images as
    /// fully labeled; the rest start unlabeled.
    pub fn init_split(ids: &[String], grid: RegionGrid, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::invalid(format!(
                "initial fraction {fraction} outside (0, 1)"
            )));
        }
        if ids.is_empty() {
            return Err(Error::invalid("cannot split an empty dataset"));
        }
        let n = ids.len();
        let count = initial_label_count(n, fraction);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen: HashSet<usize> = rand::seq::index::sample(&mut rng, n, count).into_iter().collect();
        let pixels = grid.height * grid.width;
        let images = ids
            .iter()
            .enumerate()
            .map(|(i, id)| PoolImage::new(id.clone(), pixels, chosen.contains(&i)))
            .collect();
        Ok(Self {
            seed,
            grid,
            images,
            log: Vec::new(),
        })
    }

    pub fn init_split_dataset(ds: &Dataset, grid: RegionGrid, fraction: f64, seed: u64) -> Result<Self> {
        if grid.height != ds.height() || grid.width != ds.width() {
            return Err(Error::invalid("region grid does not match dataset image size"));
        }
        Self::init_split(&ds.ids(), grid, fraction, seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid(&self) -> &RegionGrid {
        &self.grid
    }

    pub fn images(&self) -> &[PoolImage] {
        &self.images
    }

    pub fn image(&self, idx: usize) -> &PoolImage {
        &self.images[idx]
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn acquisition_log(&self) -> &[Acquisition] {
        &self.log
    }

    pub fn status(&self, idx: usize) -> Status {
        self.images[idx].status()
    }

    pub fn count(&self, status: Status) -> usize {
        self.images.iter().filter(|im| im.status() == status).count()
    }

    /// Images with any revealed pixel (supervised stream).
    pub fn supervised_indices(&self) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.images[i].known_count > 0)
            .collect()
    }

    /// Images with any unrevealed pixel (pseudo-label stream).
    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.images[i].status() != Status::Labeled)
            .collect()
    }

    pub fn known_pixels(&self) -> u64 {
        self.images.iter().map(|im| im.known_count as u64).sum()
    }

    pub fn total_pixels(&self) -> u64 {
        self.images.iter().map(|im| im.known.len() as u64).sum()
    }

    pub fn labeled_fraction(&self) -> f64 {
        let total = self.total_pixels();
        if total == 0 {
            return 0.0;
        }
        self.known_pixels() as f64 / total as f64
    }

    /// Number of unrevealed pixels inside one region.
    pub fn unknown_in_region(&self, image: usize, region: RegionId) -> usize {
        let r = self.grid.region(region);
        let known = &self.images[image].known;
        let w = self.grid.width;
        (r.y0..r.y0 + r.h)
            .map(|y| known[y * w + r.x0..y * w + r.x0 + r.w].iter().filter(|&&k| !k).count())
            .sum()
    }

    /// Reveals ground truth for every selected region. The whole batch is
    /// validated before any pixel changes; returns the newly revealed count.
    pub fn reveal_regions(&mut self, selections: &[Selection], cycle: usize) -> Result<u64> {
        let mut seen = HashSet::new();
        for s in selections {
            if s.image >= self.images.len() || !self.grid.contains(s.region) {
                return Err(Error::invalid(format!(
                    "selection {:?} outside the pool",
                    s
                )));
            }
            if !seen.insert(*s) || self.unknown_in_region(s.image, s.region) == 0 {
                return Err(Error::DuplicateAcquisition {
                    image_id: self.images[s.image].id.clone(),
                    row: s.region.row,
                    col: s.region.col,
                });
            }
        }
        let mut revealed = 0u64;
        let width = self.grid.width;
        for s in selections {
            let region = self.grid.region(s.region);
            let im = &mut self.images[s.image];
            for p in region.pixels(width) {
                if !im.known[p] {
                    im.known[p] = true;
                    im.known_count += 1;
                    revealed += 1;
                }
            }
            self.log.push(Acquisition {
                cycle,
                image_id: im.id.clone(),
                row: s.region.row,
                col: s.region.col,
            });
        }
        Ok(revealed)
    }

    /// Labeled pixel counts per class over revealed, non-ignore pixels.
    pub fn class_pixel_distribution(&self, ds: &Dataset) -> Result<ClassDistribution> {
        if self.known_pixels() == 0 {
            return Err(Error::EmptyPool);
        }
        let mut counts = vec![0u64; ds.num_classes()];
        let ignore = ds.ignore_index();
        for (im, sample) in self.images.iter().zip(ds.samples()) {
            for (&k, &l) in im.known.iter().zip(&sample.label.data) {
                if k && l != ignore {
                    counts[l as usize] += 1;
                }
            }
        }
        ClassDistribution::from_counts(counts)
    }

    fn to_file(&self) -> PoolFile {
        PoolFile {
            version: POOL_FORMAT_VERSION,
            seed: self.seed,
            grid: self.grid,
            images: self
                .images
                .iter()
                .map(|im| PoolImageRecord {
                    id: im.id.clone(),
                    status: im.status(),
                    known_rle: rle_encode(&im.known),
                })
                .collect(),
            acquisition_log: self.log.clone(),
        }
    }

    fn from_file(file: PoolFile) -> std::result::Result<Self, String> {
        if file.version != POOL_FORMAT_VERSION {
            return Err(format!("unsupported version {}", file.version));
        }
        let pixels = file.grid.height * file.grid.width;
        let mut images = Vec::with_capacity(file.images.len());
        for rec in file.images {
            let known = rle_decode(&rec.known_rle, pixels).ok_or_else(|| format!("bad run lengths for {}", rec.id))?;
            let known_count = known.iter().filter(|&&k| k).count();
            let im = PoolImage {
                id: rec.id,
                known,
                known_count,
            };
            if im.status() != rec.status {
                return Err(format!("status of {} disagrees with its mask", im.id));
            }
            images.push(im);
        }
        Ok(Self {
            seed: file.seed,
            grid: file.grid,
            images,
            log: file.acquisition_log,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::Format {
            what: "pool state",
            path: path.to_path_buf(),
            reason,
        };
        let file: PoolFile = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        Self::from_file(file).map_err(malformed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?, path)
    }
}

impl From<PoolState> for PoolFile {
    fn from(p: PoolState) -> Self {
        p.to_file()
    }
}

impl TryFrom<PoolFile> for PoolState {
    type Error = String;

    fn try_from(file: PoolFile) -> std::result::Result<Self, String> {
        Self::from_file(file)
    }
}

/// Round-half-up of `fraction * n`, never below one image.
pub fn initial_label_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 + 0.5).floor() as usize).clamp(1, n)
}

#[derive(Serialize, Deserialize)]
struct PoolFile {
    version: u32,
    seed: u64,
    grid: RegionGrid,
    images: Vec<PoolImageRecord>,
    acquisition_log: Vec<Acquisition>,
}

#[derive(Serialize, Deserialize)]
struct PoolImageRecord {
    id: String,
    status: Status,
    known_rle: Vec<u32>,
}

/// Alternating run lengths, starting with a (possibly empty) run of `false`.
fn rle_encode(mask: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &b in mask {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

fn rle_decode(runs: &[u32], pixels: usize) -> Option<Vec<bool>> {
    let mut mask = Vec::with_capacity(pixels);
    let mut value = false;
    for &r in runs {
        mask.extend(std::iter::repeat(value).take(r as usize));
        value = !value;
    }
    (mask.len() == pixels).then_some(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapool::dataset::{Image, LabelMap, Sample, IGNORE_INDEX};
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("im{i:04}")).collect()
    }

    fn camvid_pool(seed: u64) -> PoolState {
        let grid = RegionGrid::new(360, 480, 30, 30).unwrap();
        PoolState::init_split(&ids(367), grid, 0.1, seed).unwrap()
    }

    #[test]
    fn camvid_split_counts() {
        let pool = camvid_pool(0);
        assert_eq!(pool.count(Status::Labeled), 37);
        assert_eq!(pool.count(Status::Unlabeled), 330);
        assert!((pool.labeled_fraction() - 37.0 / 367.0).abs() < 1e-12);
        assert!((pool.labeled_fraction() - 0.1008).abs() < 5e-5);
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(initial_label_count(2675, 0.1), 268);
        assert_eq!(initial_label_count(367, 0.1), 37);
        assert_eq!(initial_label_count(3, 0.1), 1);
    }

    #[test]
    fn split_is_deterministic() {
        assert_eq!(camvid_pool(7), camvid_pool(7));
        assert_ne!(camvid_pool(7), camvid_pool(8));
    }

    #[test]
    fn fraction_outside_open_interval_is_rejected() {
        let grid = RegionGrid::new(4, 4, 2, 2).unwrap();
        for f in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(
                PoolState::init_split(&ids(10), grid, f, 0),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn reveal_transitions() {
        let mut pool = camvid_pool(0);
        let img = (0..pool.len()).find(|&i| pool.status(i) == Status::Unlabeled).unwrap();
        let before = pool.known_pixels();
        let sel = Selection { image: img, region: RegionId::new(3, 4) };
        assert_eq!(pool.reveal_regions(&[sel], 1).unwrap(), 900);
        assert_eq!(pool.status(img), Status::Partial);
        assert_eq!(pool.image(img).known_count(), 900);
        assert_eq!(pool.known_pixels(), before + 900);

        let err = pool.reveal_regions(&[sel], 2).unwrap_err();
        assert!(matches!(err, Error::DuplicateAcquisition { .. }));

        let rest: Vec<_> = pool
            .grid()
            .regions()
            .map(|r| r.id)
            .filter(|&id| id != sel.region)
            .map(|region| Selection { image: img, region })
            .collect();
        pool.reveal_regions(&rest, 2).unwrap();
        assert_eq!(pool.status(img), Status::Labeled);
        assert_eq!(pool.acquisition_log().len(), 192);
    }

    #[test]
    fn duplicate_within_batch_leaves_pool_untouched() {
        let mut pool = camvid_pool(0);
        let img = pool.unlabeled_indices()[0];
        let sel = Selection { image: img, region: RegionId::new(0, 0) };
        let snapshot = pool.clone();
        assert!(pool.reveal_regions(&[sel, sel], 1).is_err());
        assert_eq!(pool, snapshot);
        let labeled = (0..pool.len()).find(|&i| pool.status(i) == Status::Labeled).unwrap();
        let sel = Selection { image: labeled, region: RegionId::new(0, 0) };
        assert!(matches!(
            pool.reveal_regions(&[sel], 1),
            Err(Error::DuplicateAcquisition { .. })
        ));
    }

    #[test]
    fn fraction_extremes() {
        let grid = RegionGrid::new(4, 4, 2, 2).unwrap();
        let mut pool = PoolState::init_split(&ids(2), grid, 0.5, 0).unwrap();
        let un = pool.unlabeled_indices()[0];
        let lab = 1 - un;
        pool.images[lab] = PoolImage::new(pool.images[lab].id.clone(), 16, false);
        assert_eq!(pool.labeled_fraction(), 0.0);
        let all: Vec<_> = (0..2)
            .flat_map(|image| grid.regions().map(move |r| Selection { image, region: r.id }))
            .collect();
        pool.reveal_regions(&all, 0).unwrap();
        assert_eq!(pool.labeled_fraction(), 1.0);
    }

    #[test]
    fn head_tail_rule() {
        let d = ClassDistribution::from_counts(vec![50, 30, 15, 5]).unwrap();
        assert_eq!(d.head, vec![0, 1]);
        assert_eq!(d.tail, vec![2, 3]);
        let d = ClassDistribution::from_counts(vec![5, 5]).unwrap();
        assert_eq!(d.head, vec![0, 1]);
        assert!(d.tail.is_empty());
        assert!(matches!(ClassDistribution::from_counts(vec![0, 0]), Err(Error::EmptyPool)));
    }

    #[test]
    fn distribution_tracks_reveals_and_skips_ignore() {
        let grid = RegionGrid::new(2, 4, 2, 2).unwrap();
        let samples = (0..2)
            .map(|i| Sample {
                id: format!("s{i}"),
                image: Image::zeros(2, 4),
                label: LabelMap::new(2, 4, vec![0, 0, 1, 1, 0, IGNORE_INDEX, 2, 1]).unwrap(),
            })
            .collect();
        let ds = Dataset::new(samples, 3, IGNORE_INDEX).unwrap();
        let mut pool = PoolState::init_split_dataset(&ds, grid, 0.5, 3).unwrap();
        let d0 = pool.class_pixel_distribution(&ds).unwrap();
        assert_eq!(d0.pixel_count, vec![3, 3, 1]);
        let un = pool.unlabeled_indices()[0];
        pool.reveal_regions(&[Selection { image: un, region: RegionId::new(0, 1) }], 1)
            .unwrap();
        let d1 = pool.class_pixel_distribution(&ds).unwrap();
        assert_eq!(d1.pixel_count, vec![3, 6, 2]);
        // 3/11 < 1/3 as well
        assert_eq!(d1.tail, vec![0, 2]);
        assert_eq!(d1.head, vec![1]);
    }

    #[test]
    fn empty_pool_distribution_errors() {
        let grid = RegionGrid::new(1, 2, 1, 1).unwrap();
        let ds = Dataset::new(
            vec![Sample { id: "a".into(), image: Image::zeros(1, 2), label: LabelMap::filled(1, 2, 0) }],
            2,
            IGNORE_INDEX,
        )
        .unwrap();
        let mut pool = PoolState::init_split_dataset(&ds, grid, 0.5, 0).unwrap();
        pool.images[0] = PoolImage::new("a".into(), 2, false);
        assert!(matches!(pool.class_pixel_distribution(&ds), Err(Error::EmptyPool)));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut pool = camvid_pool(3);
        let un = pool.unlabeled_indices();
        let sels: Vec<_> = un
            .iter()
            .take(5)
            .map(|&image| Selection { image, region: RegionId::new(image % 12, image % 16) })
            .collect();
        pool.reveal_regions(&sels, 1).unwrap();
        let text = pool.to_json().unwrap();
        let back = PoolState::from_json(&text, Path::new("mem")).unwrap();
        assert_eq!(back, pool);
    }

    proptest! {
        #[test]
        fn rle_round_trip(mask in proptest::collection::vec(any::<bool>(), 0..200)) {
            let runs = rle_encode(&mask);
            prop_assert_eq!(rle_decode(&runs, mask.len()).unwrap(), mask);
        }

        #[test]
        fn reveals_are_monotone_and_conserve_pixels(
            picks in proptest::collection::vec((0usize..6, 0usize..3, 0usize..4), 1..30)
        ) {
            let grid = RegionGrid::new(9, 10, 3, 3).unwrap();
            let mut pool = PoolState::init_split(&ids(6), grid, 0.2, 11).unwrap();
            let total = pool.total_pixels() as f64;
            for (cycle, (image, row, col)) in picks.into_iter().enumerate() {
                let sel = Selection { image, region: RegionId::new(row, col) };
                let before = pool.clone();
                let f0 = pool.labeled_fraction();
                match pool.reveal_regions(&[sel], cycle) {
                    Ok(n) => {
                        let df = pool.labeled_fraction() - f0;
                        prop_assert!((df - n as f64 / total).abs() < 1e-12);
                        for (a, b) in before.images().iter().zip(pool.images()) {
                            for (&k0, &k1) in a.known_mask().iter().zip(b.known_mask()) {
                                prop_assert!(!k0 || k1);
                            }
                        }
                    }
                    Err(_) => prop_assert_eq!(&pool, &before),
                }
            }
            let uniq: HashSet<_> = pool.acquisition_log().iter().map(|a| (&a.image_id, a.row, a.col)).collect();
            prop_assert_eq!(uniq.len(), pool.acquisition_log().len());
        }
    }
}
