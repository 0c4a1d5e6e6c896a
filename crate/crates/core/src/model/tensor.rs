use crate::datapool::Image;
use crate::error::{Error, Result};

/// Dense `N x C x H x W` float tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_images(images: &[&Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("empty image batch"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for im in images {
            if (im.height, im.width) != (h, w) {
                return Err(Error::invalid("images in a batch must share a size"));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Self {
            n: images.len(),
            c: Image::CHANNELS,
            h,
            w,
            data,
        })
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f32] {
        let l = self.item_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        (self.n, self.c, self.h, self.w) == (other.n, other.c, other.h, other.w)
    }

    /// Channel-wise softmax, per pixel.
    pub fn softmax_channels(&self) -> Tensor {
        let mut out = self.clone();
        let hw = self.plane_len();
        for i in 0..self.n {
            let item = out.item_mut(i);
            for p in 0..hw {
                let max = (0..self.c).map(|c| item[c * hw + p]).fold(f32::MIN, f32::max);
                let mut sum = 0.0;
                for c in 0..self.c {
                    let e = (item[c * hw + p] - max).exp();
                    item[c * hw + p] = e;
                    sum += e;
                }
                for c in 0..self.c {
                    item[c * hw + p] /= sum;
                }
            }
        }
        out
    }
}
