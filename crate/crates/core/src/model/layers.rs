//! Forward/backward kernels for the built-in network.

use matrixmultiply::sgemm;

use super::tensor::Tensor;

/// Unfolds one `c x h x w` image into `(c*k*k) x (h*w)` patches, zero padded.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, col: &mut [f32]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    dst[..x0].fill(0.0);
                    dst[x1..].fill(0.0);
                    let off = kx as isize - pad as isize;
                    let s0 = (x0 as isize + off) as usize;
                    dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im(col: &[f32], c: usize, h: usize, w: usize, k: usize, dx: &mut [f32]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let off = kx as isize - pad as isize;
                    let s0 = (x0 as isize + off) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..x1 - x0];
                    for (d, s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `C[m x n] = alpha * A * B + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    // SAFETY: slice bounds cover the strided extents asserted below.
    debug_assert!(c.len() >= m * n);
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cached patches of one convolution call.
pub struct ConvCache {
    cols: Vec<Vec<f32>>,
    in_c: usize,
}

/// Same-padded stride-1 convolution, `weight` laid out `[out][in][k][k]`.
pub fn conv_forward(x: &Tensor, weight: &[f32], bias: Option<&[f32]>, out_c: usize, k: usize, keep: bool) -> (Tensor, Option<ConvCache>) {
    let hw = x.plane_len();
    let kk = x.c * k * k;
    debug_assert_eq!(weight.len(), out_c * kk);
    let mut y = Tensor::zeros(x.n, out_c, x.h, x.w);
    let mut cols = Vec::new();
    for i in 0..x.n {
        let out = y.item_mut(i);
        let col = if k == 1 {
            x.item(i).to_vec()
        } else {
            let mut col = vec![0.0; kk * hw];
            im2col(x.item(i), x.c, x.h, x.w, k, &mut col);
            col
        };
        gemm(out_c, kk, hw, weight, kk as isize, 1, &col, hw as isize, 1, 0.0, out);
        if let Some(b) = bias {
            for (o, &bv) in out.chunks_mut(hw).zip(b) {
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
        if keep {
            cols.push(col);
        }
    }
    let cache = keep.then_some(ConvCache { cols, in_c: x.c });
    (y, cache)
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv_backward(
    cache: &ConvCache,
    dy: &Tensor,
    weight: &[f32],
    k: usize,
    grad_w: &mut [f32],
    grad_b: Option<&mut [f32]>,
    need_dx: bool,
) -> Option<Tensor> {
    let hw = dy.plane_len();
    let kk = cache.in_c * k * k;
    let out_c = dy.c;
    for i in 0..dy.n {
        gemm(out_c, hw, kk, dy.item(i), hw as isize, 1, &cache.cols[i], 1, hw as isize, 1.0, grad_w);
    }
    if let Some(gb) = grad_b {
        for i in 0..dy.n {
            for (g, plane) in gb.iter_mut().zip(dy.item(i).chunks(hw)) {
                *g += plane.iter().sum::<f32>();
            }
        }
    }
    if !need_dx {
        return None;
    }
    let mut dx = Tensor::zeros(dy.n, cache.in_c, dy.h, dy.w);
    let mut dcol = vec![0.0; kk * hw];
    for i in 0..dy.n {
        if k == 1 {
            gemm(kk, out_c, hw, weight, 1, kk as isize, dy.item(i), hw as isize, 1, 0.0, dx.item_mut(i));
        } else {
            gemm(kk, out_c, hw, weight, 1, kk as isize, dy.item(i), hw as isize, 1, 0.0, &mut dcol);
            col2im(&dcol, cache.in_c, dy.h, dy.w, k, dx.item_mut(i));
        }
    }
    Some(dx)
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
    /// Batch mean and unbiased variance, for the running-statistics update.
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

/// Moves running statistics towards the batch statistics of `cache`.
pub fn bn_update_running(cache: &BnCache, running_mean: &mut [f32], running_var: &mut [f32]) {
    for c in 0..running_mean.len() {
        running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * cache.batch_mean[c];
        running_var[c] = (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * cache.batch_var[c];
    }
}

/// Batch normalisation followed by ReLU. Training mode normalises with the
/// batch statistics; eval mode with the running ones.
pub fn bn_relu_forward(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    train: bool,
) -> (Tensor, Option<BnCache>) {
    let hw = x.plane_len();
    let m = (x.n * hw) as f32;
    let mut y = x.clone();
    if !train {
        for i in 0..x.n {
            let item = y.item_mut(i);
            for c in 0..x.c {
                let inv = 1.0 / (running_var[c] + BN_EPS).sqrt();
                let (g, b, mu) = (gamma[c], beta[c], running_mean[c]);
                for v in &mut item[c * hw..(c + 1) * hw] {
                    *v = ((*v - mu) * inv * g + b).max(0.0);
                }
            }
        }
        return (y, None);
    }
    let mut xhat = x.clone();
    let mut inv_std = vec![0.0; x.c];
    let mut batch_mean = vec![0.0; x.c];
    let mut batch_var = vec![0.0; x.c];
    for c in 0..x.c {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for i in 0..x.n {
            for &v in &x.item(i)[c * hw..(c + 1) * hw] {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        let mean = sum / m as f64;
        let var = (sq / m as f64 - mean * mean).max(0.0);
        let inv = 1.0 / (var as f32 + BN_EPS).sqrt();
        inv_std[c] = inv;
        let unbiased = if m > 1.0 { var as f32 * m / (m - 1.0) } else { var as f32 };
        batch_mean[c] = mean as f32;
        batch_var[c] = unbiased;
        let mean = mean as f32;
        for i in 0..x.n {
            let off = i * x.item_len() + c * hw;
            for p in off..off + hw {
                let xh = (x.data[p] - mean) * inv;
                xhat.data[p] = xh;
                y.data[p] = (xh * gamma[c] + beta[c]).max(0.0);
            }
        }
    }
    (
        y,
        Some(BnCache {
            xhat,
            inv_std,
            batch_mean,
            batch_var,
        }),
    )
}

/// Backward through ReLU and batch norm; `y` is the forward output.
pub fn bn_relu_backward(cache: &BnCache, y: &Tensor, dy: &Tensor, gamma: &[f32], grad_gamma: &mut [f32], grad_beta: &mut [f32]) -> Tensor {
    let hw = dy.plane_len();
    let m = (dy.n * hw) as f32;
    let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
    for c in 0..dy.c {
        let mut sum_d = 0.0f32;
        let mut sum_dx = 0.0f32;
        for i in 0..dy.n {
            let off = i * dy.item_len() + c * hw;
            for p in off..off + hw {
                let d = if y.data[p] > 0.0 { dy.data[p] } else { 0.0 };
                sum_d += d;
                sum_dx += d * cache.xhat.data[p];
            }
        }
        grad_beta[c] += sum_d;
        grad_gamma[c] += sum_dx;
        let scale = gamma[c] * cache.inv_std[c] / m;
        for i in 0..dy.n {
            let off = i * dy.item_len() + c * hw;
            for p in off..off + hw {
                let d = if y.data[p] > 0.0 { dy.data[p] } else { 0.0 };
                dx.data[p] = scale * (m * d - sum_d - cache.xhat.data[p] * sum_dx);
            }
        }
    }
    dx
}

/// 2x2 max pooling; returns the winning offset (0..4) per output cell.
pub fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u8; y.data.len()];
    let mut o = 0;
    for nc in 0..x.n * x.c {
        let plane = &x.data[nc * x.h * x.w..][..x.h * x.w];
        for yy in 0..oh {
            for xx in 0..ow {
                let base = 2 * yy * x.w + 2 * xx;
                let cand = [base, base + 1, base + x.w, base + x.w + 1];
                let mut best = 0;
                for j in 1..4 {
                    if plane[cand[j]] > plane[cand[best]] {
                        best = j;
                    }
                }
                y.data[o] = plane[cand[best]];
                arg[o] = best as u8;
                o += 1;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward(dy: &Tensor, arg: &[u8], h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let mut o = 0;
    for nc in 0..dy.n * dy.c {
        let plane = &mut dx.data[nc * h * w..][..h * w];
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                let j = arg[o] as usize;
                plane[(2 * yy + j / 2) * w + 2 * xx + j % 2] += dy.data[o];
                o += 1;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..][..x.h * x.w];
        let dst = &mut y.data[nc * oh * ow..][..oh * ow];
        for yy in 0..oh {
            for xx in 0..ow {
                dst[yy * ow + xx] = src[(yy / 2) * x.w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        let src = &dy.data[nc * dy.h * dy.w..][..dy.h * dy.w];
        let dst = &mut dx.data[nc * h * w..][..h * w];
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                dst[(yy / 2) * w + xx / 2] += src[yy * dy.w + xx];
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
    let mut y = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let out = y.item_mut(i);
        out[..a.item_len()].copy_from_slice(a.item(i));
        out[a.item_len()..].copy_from_slice(b.item(i));
    }
    y
}

pub fn split(dy: &Tensor, first_c: usize) -> (Tensor, Tensor) {
    let mut a = Tensor::zeros(dy.n, first_c, dy.h, dy.w);
    let mut b = Tensor::zeros(dy.n, dy.c - first_c, dy.h, dy.w);
    for i in 0..dy.n {
        let item = dy.item(i);
        let la = a.item_len();
        a.item_mut(i).copy_from_slice(&item[..la]);
        b.item_mut(i).copy_from_slice(&item[la..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::zeros(n, c, h, w);
        t.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        t
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(2, 3, 5, 4, &mut rng);
        let w: Vec<f32> = (0..2 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = [0.5f32, -0.25];
        let (y, _) = conv_forward(&x, &w, Some(&b), 2, 3, false);
        for n in 0..2 {
            for o in 0..2 {
                for yy in 0..5i32 {
                    for xx in 0..4i32 {
                        let mut s = b[o] as f64;
                        for c in 0..3 {
                            for ky in 0..3i32 {
                                for kx in 0..3i32 {
                                    let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                    if sy < 0 || sy >= 5 || sx < 0 || sx >= 4 {
                                        continue;
                                    }
                                    let wv = w[((o * 3 + c) * 3 + ky as usize) * 3 + kx as usize];
                                    s += wv as f64 * x.item(n)[c * 20 + (sy * 4 + sx) as usize] as f64;
                                }
                            }
                        }
                        let got = y.item(n)[o * 20 + (yy * 4 + xx) as usize] as f64;
                        assert!((got - s).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and w; its gradients must match the
        // finite-difference-free adjoint identity <dx, x> = <y - b, g>.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let x = random(2, 3, 4, 6, &mut rng);
            let w: Vec<f32> = (0..4 * 3 * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (y, cache) = conv_forward(&x, &w, None, 4, k, true);
            let g = random(2, 4, 4, 6, &mut rng);
            let mut gw = vec![0.0; w.len()];
            let dx = conv_backward(&cache.unwrap(), &g, &w, k, &mut gw, None, true).unwrap();
            let lhs = dot(&y, &g);
            assert!((dot(&dx, &x) - lhs).abs() < 1e-3 * lhs.abs().max(1.0));
            let gw_dot: f64 = gw.iter().zip(&w).map(|(a, b)| *a as f64 * *b as f64).sum();
            assert!((gw_dot - lhs).abs() < 1e-3 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn bn_relu_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(2, 2, 3, 3, &mut rng);
        let gamma = [1.3f32, 0.7];
        let beta = [0.1f32, -0.2];
        let g = random(2, 2, 3, 3, &mut rng);
        let loss = |x: &Tensor| {
            let (y, _) = bn_relu_forward(x, &gamma, &beta, &[0.0; 2], &[1.0; 2], true);
            dot(&y, &g)
        };
        let (y, cache) = bn_relu_forward(&x, &gamma, &beta, &[0.0; 2], &[1.0; 2], true);
        let dx = bn_relu_backward(&cache.unwrap(), &y, &g, &gamma, &mut [0.0; 2], &mut [0.0; 2]);
        let eps = 1e-2f32;
        for p in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[p] += eps;
            let mut xm = x.clone();
            xm.data[p] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps as f64);
            assert!((fd - dx.data[p] as f64).abs() < 2e-2, "p={p} fd={fd} an={}", dx.data[p]);
        }
    }

    #[test]
    fn pool_and_upsample_round_trip_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(1, 2, 4, 6, &mut rng);
        let (p, arg) = maxpool_forward(&x);
        assert_eq!((p.h, p.w), (2, 3));
        let g = random(1, 2, 2, 3, &mut rng);
        let dx = maxpool_backward(&g, &arg, 4, 6);
        assert!((dot(&dx, &x) - dot(&g, &p)).abs() < 1e-5);
        let u = upsample_forward(&p);
        assert_eq!((u.h, u.w), (4, 6));
        let gu = random(1, 2, 4, 6, &mut rng);
        assert!((dot(&upsample_backward(&gu), &p) - dot(&gu, &u)).abs() < 1e-4);
    }
}
