//! Small four-level encoder-decoder for desk-scale runs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::{self, BnCache, ConvCache};
use super::tensor::Tensor;
use super::{ModelState, SegmentationModel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Channel widths of the four encoder levels, finest first.
    pub widths: [usize; 4],
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            widths: [24, 48, 96, 192],
        }
    }
}

const BLOCKS: usize = 7;
const HEAD_W: usize = 3 * BLOCKS;
const HEAD_B: usize = HEAD_W + 1;

/// conv3x3 -> BN -> ReLU per level; max-pool down, nearest-upsample and
/// skip concatenation up, 1x1 classifier head.
#[derive(Clone, Debug)]
pub struct UNet {
    widths: [usize; 4],
    num_classes: usize,
    /// (in, out) channels of each conv block in execution order.
    blocks: [(usize, usize); BLOCKS],
}

struct BlockCache {
    conv: ConvCache,
    bn: BnCache,
    out: Tensor,
}

pub struct UNetCache {
    blocks: Vec<BlockCache>,
    pools: Vec<(Vec<u8>, usize, usize)>,
    head: ConvCache,
}

impl UNet {
    pub fn new(cfg: &UNetConfig, num_classes: usize) -> Result<Self> {
        if cfg.widths.contains(&0) || num_classes < 2 {
            return Err(Error::invalid("network widths must be positive and K >= 2"));
        }
        let [c1, c2, c3, c4] = cfg.widths;
        Ok(Self {
            widths: cfg.widths,
            num_classes,
            blocks: [
                (3, c1),
                (c1, c2),
                (c2, c3),
                (c3, c4),
                (c4 + c3, c3),
                (c3 + c2, c2),
                (c2 + c1, c1),
            ],
        })
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().sum()
    }

    fn param_shapes(&self) -> Vec<usize> {
        let mut shapes = Vec::new();
        for &(i, o) in &self.blocks {
            shapes.extend([o * i * 9, o, o]);
        }
        shapes.extend([self.num_classes * self.widths[0], self.num_classes]);
        shapes
    }

    fn block(&self, b: usize, state: &ModelState, x: &Tensor, train: bool, caches: &mut Vec<BlockCache>) -> Tensor {
        let (_, out_c) = self.blocks[b];
        let (y, conv) = layers::conv_forward(x, &state.params[3 * b], None, out_c, 3, train);
        let (gamma, beta) = (&state.params[3 * b + 1], &state.params[3 * b + 2]);
        let (mean, var) = (&state.buffers[2 * b], &state.buffers[2 * b + 1]);
        let (z, bn) = layers::bn_relu_forward(&y, gamma, beta, mean, var, train);
        if train {
            caches.push(BlockCache {
                conv: conv.expect("train mode keeps patches"),
                bn: bn.expect("train mode keeps statistics"),
                out: z.clone(),
            });
        }
        z
    }

    fn run(&self, state: &ModelState, x: &Tensor, train: bool) -> (Tensor, Option<UNetCache>) {
        let mut caches = Vec::with_capacity(BLOCKS);
        let mut pools = Vec::with_capacity(3);
        let e1 = self.block(0, state, x, train, &mut caches);
        let (p1, a1) = layers::maxpool_forward(&e1);
        pools.push((a1, e1.h, e1.w));
        let e2 = self.block(1, state, &p1, train, &mut caches);
        let (p2, a2) = layers::maxpool_forward(&e2);
        pools.push((a2, e2.h, e2.w));
        let e3 = self.block(2, state, &p2, train, &mut caches);
        let (p3, a3) = layers::maxpool_forward(&e3);
        pools.push((a3, e3.h, e3.w));
        let e4 = self.block(3, state, &p3, train, &mut caches);
        let d3 = self.block(4, state, &layers::concat(&layers::upsample_forward(&e4), &e3), train, &mut caches);
        let d2 = self.block(5, state, &layers::concat(&layers::upsample_forward(&d3), &e2), train, &mut caches);
        let d1 = self.block(6, state, &layers::concat(&layers::upsample_forward(&d2), &e1), train, &mut caches);
        let (logits, head) = layers::conv_forward(
            &d1,
            &state.params[HEAD_W],
            Some(&state.params[HEAD_B]),
            self.num_classes,
            1,
            train,
        );
        let cache = train.then(|| UNetCache {
            blocks: caches,
            pools,
            head: head.expect("train mode keeps head input"),
        });
        (logits, cache)
    }

    fn block_backward(&self, b: usize, state: &ModelState, cache: &BlockCache, dy: &Tensor, grads: &mut [Vec<f32>]) -> Option<Tensor> {
        let (g_w, rest) = grads[3 * b..].split_at_mut(1);
        let (g_gamma, g_beta) = rest.split_at_mut(1);
        let dz = layers::bn_relu_backward(&cache.bn, &cache.out, dy, &state.params[3 * b + 1], &mut g_gamma[0], &mut g_beta[0]);
        layers::conv_backward(&cache.conv, &dz, &state.params[3 * b], 3, &mut g_w[0], None, b != 0)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c != 3 || x.h % 8 != 0 || x.w % 8 != 0 || x.h == 0 || x.w == 0 || x.n == 0 {
            return Err(Error::invalid(format!(
                "network expects N x 3 x H x W with H, W multiples of 8; got {}x{}x{}x{}",
                x.n, x.c, x.h, x.w
            )));
        }
        Ok(())
    }
}

impl SegmentationModel for UNet {
    type Cache = UNetCache;

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn init_state<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelState {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for &(i, o) in &self.blocks {
            let std = (2.0 / (i * 9) as f32).sqrt();
            params.push((0..o * i * 9).map(|_| std * rng.sample::<f32, _>(StandardNormal)).collect());
            params.push(vec![1.0; o]);
            params.push(vec![0.0; o]);
            buffers.push(vec![0.0; o]);
            buffers.push(vec![1.0; o]);
        }
        let std = (1.0 / self.widths[0] as f32).sqrt();
        params.push(
            (0..self.num_classes * self.widths[0])
                .map(|_| std * rng.sample::<f32, _>(StandardNormal))
                .collect(),
        );
        params.push(vec![0.0; self.num_classes]);
        ModelState { params, buffers }
    }

    fn check_state(&self, state: &ModelState) -> Result<()> {
        let shapes = self.param_shapes();
        let ok = state.params.len() == shapes.len()
            && state.params.iter().zip(&shapes).all(|(p, &s)| p.len() == s)
            && state.buffers.len() == 2 * BLOCKS
            && state
                .buffers
                .iter()
                .enumerate()
                .all(|(i, b)| b.len() == self.blocks[i / 2].1);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("model state does not match the network layout"))
        }
    }

    fn forward_train(&self, state: &mut ModelState, x: &Tensor) -> Result<(Tensor, UNetCache)> {
        self.check_input(x)?;
        let (logits, cache) = self.run(state, x, true);
        let cache = cache.expect("train mode builds a cache");
        for (b, bc) in cache.blocks.iter().enumerate() {
            let (mean, var) = state.buffers.split_at_mut(2 * b + 1);
            layers::bn_update_running(&bc.bn, &mut mean[2 * b], &mut var[0]);
        }
        Ok((logits, cache))
    }

    fn forward_eval(&self, state: &ModelState, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.run(state, x, false).0)
    }

    fn backward(&self, state: &ModelState, cache: UNetCache, dlogits: &Tensor) -> Vec<Vec<f32>> {
        let mut grads: Vec<Vec<f32>> = state.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let (gw, gb) = grads[HEAD_W..].split_at_mut(1);
        let dd1 = layers::conv_backward(&cache.head, dlogits, &state.params[HEAD_W], 1, &mut gw[0], Some(&mut gb[0]), true)
            .expect("head input gradient");
        let [_, c2, c3, c4] = self.widths;
        let b = &cache.blocks;
        // decoder
        let dcat1 = self.block_backward(6, state, &b[6], &dd1, &mut grads).unwrap();
        let (dup2, mut de1) = layers::split(&dcat1, c2);
        let dd2 = layers::upsample_backward(&dup2);
        let dcat2 = self.block_backward(5, state, &b[5], &dd2, &mut grads).unwrap();
        let (dup3, mut de2) = layers::split(&dcat2, c3);
        let dd3 = layers::upsample_backward(&dup3);
        let dcat3 = self.block_backward(4, state, &b[4], &dd3, &mut grads).unwrap();
        let (dup4, mut de3) = layers::split(&dcat3, c4);
        let de4 = layers::upsample_backward(&dup4);
        // encoder
        let dp3 = self.block_backward(3, state, &b[3], &de4, &mut grads).unwrap();
        add_into(&mut de3, &layers::maxpool_backward(&dp3, &cache.pools[2].0, cache.pools[2].1, cache.pools[2].2));
        let dp2 = self.block_backward(2, state, &b[2], &de3, &mut grads).unwrap();
        add_into(&mut de2, &layers::maxpool_backward(&dp2, &cache.pools[1].0, cache.pools[1].1, cache.pools[1].2));
        let dp1 = self.block_backward(1, state, &b[1], &de2, &mut grads).unwrap();
        add_into(&mut de1, &layers::maxpool_backward(&dp1, &cache.pools[0].0, cache.pools[0].1, cache.pools[0].2));
        self.block_backward(0, state, &b[0], &de1, &mut grads);
        grads
    }
}

fn add_into(a: &mut Tensor, b: &Tensor) {
    debug_assert!(a.same_shape(b));
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
}

