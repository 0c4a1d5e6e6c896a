use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid coordinates of a region, `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RegionId {
    pub row: usize,
    pub col: usize,
}

impl RegionId {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Pixel extent of one region: rows `y0..y0+h`, columns `x0..x0+w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub id: RegionId,
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl Region {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    /// Flat pixel indices covered by this region in an image of `width` columns.
    pub fn pixels(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        (self.y0..self.y0 + self.h)
            .flat_map(move |y| (self.x0..self.x0 + self.w).map(move |x| y * width + x))
    }
}

/// Tiling of an image into fixed-size regions. The last row and column are
/// ragged when the region size does not divide the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub height: usize,
    pub width: usize,
    pub region_h: usize,
    pub region_w: usize,
    pub rows: usize,
    pub cols: usize,
}

impl RegionGrid {
    pub fn new(height: usize, width: usize, region_h: usize, region_w: usize) -> Result<Self> {
        if height == 0 || width == 0 || region_h == 0 || region_w == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive (image {height}x{width}, region {region_h}x{region_w})"
            )));
        }
        Ok(Self {
            height,
            width,
            region_h,
            region_w,
            rows: height.div_ceil(region_h),
            cols: width.div_ceil(region_w),
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: RegionId) -> bool {
        id.row < self.rows && id.col < self.cols
    }

    pub fn region(&self, id: RegionId) -> Region {
        debug_assert!(self.contains(id));
        let y0 = id.row * self.region_h;
        let x0 = id.col * self.region_w;
        Region {
            id,
            y0,
            x0,
            h: self.region_h.min(self.height - y0),
            w: self.region_w.min(self.width - x0),
        }
    }

    /// Regions in row-major order.
    pub fn regions(&self) -> impl Iterator<Item = Region> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| self.region(RegionId::new(r, c))))
    }

    /// Region containing pixel `(y, x)`.
    pub fn locate(&self, y: usize, x: usize) -> RegionId {
        RegionId::new(y / self.region_h, x / self.region_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn camvid_and_cityscapes_grids() {
        let g = RegionGrid::new(360, 480, 30, 30).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (12, 16, 192));
        let g = RegionGrid::new(688, 688, 43, 43).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (16, 16, 256));
    }

    #[test]
    fn single_region_covers_image() {
        let g = RegionGrid::new(5, 5, 5, 5).unwrap();
        assert_eq!(g.len(), 1);
        let r = g.region(RegionId::new(0, 0));
        assert_eq!((r.y0, r.x0, r.h, r.w), (0, 0, 5, 5));
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(matches!(
            RegionGrid::new(0, 5, 1, 1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(RegionGrid::new(5, 5, 5, 0).is_err());
    }

    #[test]
    fn ragged_edges() {
        let g = RegionGrid::new(10, 7, 4, 3).unwrap();
        assert_eq!((g.rows, g.cols), (3, 3));
        let last = g.region(RegionId::new(2, 2));
        assert_eq!((last.h, last.w), (2, 1));
    }

    proptest! {
        #[test]
        fn regions_tile_exactly(h in 1usize..40, w in 1usize..40, rh in 1usize..12, rw in 1usize..12) {
            let g = RegionGrid::new(h, w, rh, rw).unwrap();
            let mut cover = vec![0u32; h * w];
            for r in g.regions() {
                for p in r.pixels(w) {
                    cover[p] += 1;
                }
            }
            prop_assert!(cover.iter().all(|&c| c == 1));
            for y in 0..h {
                for x in 0..w {
                    let r = g.region(g.locate(y, x));
                    prop_assert!(y >= r.y0 && y < r.y0 + r.h && x >= r.x0 && x < r.x0 + r.w);
                }
            }
        }
    }
}
