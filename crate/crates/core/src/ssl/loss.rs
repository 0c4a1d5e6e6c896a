//! Losses on per-pixel logits laid out as `K` planes of `P` pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar loss with its gradient with respect to the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Teacher output per pixel: argmax class and its probability.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMap {
    pub labels: Vec<u8>,
    pub confidence: Vec<f32>,
}

/// Argmax and max probability of a `K x P` softmax map. Ties go to the
/// lowest class index.
pub fn pseudo_label(probs: &[f32], num_classes: usize) -> PseudoLabelMap {
    let p = probs.len() / num_classes;
    let mut labels = Vec::with_capacity(p);
    let mut confidence = Vec::with_capacity(p);
    for i in 0..p {
        let mut best = 0;
        for c in 1..num_classes {
            if probs[c * p + i] > probs[best * p + i] {
                best = c;
            }
        }
        labels.push(best as u8);
        confidence.push(probs[best * p + i]);
    }
    PseudoLabelMap { labels, confidence }
}

/// Fraction of valid pixels whose confidence exceeds `tau`; zero when no
/// pixel is valid.
pub fn eta(confidence: &[f32], valid: &[bool], tau: f64) -> f64 {
    let tau = tau as f32;
    let (mut n, mut hit) = (0usize, 0usize);
    for (&c, &v) in confidence.iter().zip(valid) {
        if v {
            n += 1;
            if c > tau {
                hit += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

fn log_softmax_at(logits: &[f64], k: usize, p: usize, i: usize, probs: &mut [f64]) -> f64 {
    let max = (0..k).map(|c| logits[c * p + i]).fold(f64::MIN, f64::max);
    let mut sum = 0.0;
    for c in 0..k {
        let e = (logits[c * p + i] - max).exp();
        probs[c] = e;
        sum += e;
    }
    for v in probs.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Mean over selected pixels of `weight(x) * CE(softmax(x), target(x))`.
/// `weight` of `None` skips the pixel. Returns zero loss and gradient when
/// nothing is selected.
fn weighted_ce(logits: &[f64], k: usize, targets: &[u8], weight: impl Fn(usize) -> Option<f64>) -> Result<LossGrad> {
    let p = targets.len();
    if logits.len() != k * p {
        return Err(Error::invalid(format!(
            "logits have {} values, expected {k}x{p}",
            logits.len()
        )));
    }
    let mut grad = vec![0.0; logits.len()];
    let mut probs = vec![0.0; k];
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..p {
        let Some(w) = weight(i) else { continue };
        let t = targets[i] as usize;
        if t >= k {
            return Err(Error::invalid(format!("target class {t} outside 0..{k}")));
        }
        count += 1;
        let lse = log_softmax_at(logits, k, p, i, &mut probs);
        sum += w * (lse - logits[t * p + i]);
        for c in 0..k {
            let onehot = if c == t { 1.0 } else { 0.0 };
            grad[c * p + i] = w * (probs[c] - onehot);
        }
    }
    if count == 0 {
        return Ok(LossGrad { loss: 0.0, grad });
    }
    let n = count as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(LossGrad { loss: sum / n, grad })
}

/// Mean cross-entropy over pixels whose label is not `ignore_index`.
pub fn supervised_loss(logits: &[f64], k: usize, labels: &[u8], ignore_index: u8) -> Result<LossGrad> {
    weighted_ce(logits, k, labels, |i| (labels[i] != ignore_index).then_some(1.0))
}

/// Confidence-weighted pseudo-label cross-entropy: each valid pixel's CE is
/// scaled by its teacher confidence `p`. Pass `weights = None` for the
/// unweighted variant.
pub fn weighted_unsup_loss(
    logits: &[f64],
    k: usize,
    pseudo: &[u8],
    weights: Option<&[f32]>,
    valid: &[bool],
) -> Result<LossGrad> {
    if valid.len() != pseudo.len() || weights.is_some_and(|w| w.len() != pseudo.len()) {
        return Err(Error::invalid("pseudo-label channels disagree in size"));
    }
    weighted_ce(logits, k, pseudo, |i| {
        valid[i].then(|| weights.map_or(1.0, |w| w[i] as f64))
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_unsup1: f64,
    pub l_unsup2: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub l_total: f64,
}

/// `L = L_sup + eta1 * L_u1 + eta2 * L_u2`; with `l_u2 = None` (replay
/// stream inactive) the second term is absent.
pub fn total_loss(l_sup: f64, l_u1: f64, l_u2: Option<f64>, eta1: f64, eta2: f64) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&eta1) || !(0.0..=1.0).contains(&eta2) {
        return Err(Error::invalid(format!("eta ({eta1}, {eta2}) outside [0, 1]")));
    }
    let (l_unsup2, eta2) = match l_u2 {
        Some(l) => (l, eta2),
        None => (0.0, 0.0),
    };
    Ok(LossBreakdown {
        l_sup,
        l_unsup1: l_u1,
        l_unsup2,
        eta1,
        eta2,
        l_total: l_sup + eta1 * l_u1 + eta2 * l_unsup2,
    })
}

/// Folds per-image `(eta_i, L_i)` into a batch `(eta, L)` such that
/// `eta * L == mean_i(eta_i * L_i)`.
pub fn reduce_eta_weighted(items: &[(f64, f64)]) -> (f64, f64) {
    if items.is_empty() {
        return (0.0, 0.0);
    }
    let n = items.len() as f64;
    let eta_sum: f64 = items.iter().map(|(e, _)| e).sum();
    let eta = eta_sum / n;
    let loss = if eta_sum > 0.0 {
        items.iter().map(|(e, l)| e * l).sum::<f64>() / eta_sum
    } else {
        items.iter().map(|(_, l)| l).sum::<f64>() / n
    };
    (eta, loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Logits whose softmax is exactly `p` (up to rounding).
    fn logits_for(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.ln()).collect()
    }

    #[test]
    fn pseudo_label_argmax_and_ties() {
        let m = pseudo_label(&[0.7, 0.2, 0.1], 3);
        assert_eq!(m.labels, vec![0]);
        assert!((m.confidence[0] - 0.7).abs() < 1e-7);
        let third = 1.0f32 / 3.0;
        let m = pseudo_label(&[third, third, third], 3);
        assert_eq!(m.labels, vec![0]);
        assert_eq!(m.confidence[0], third);
    }

    #[test]
    fn eta_examples() {
        let valid = [true; 4];
        assert_eq!(eta(&[0.99, 0.5, 0.98, 0.2], &valid, 0.97), 0.5);
        assert_eq!(eta(&[1.0; 4], &valid, 0.97), 1.0);
        assert_eq!(eta(&[0.97, 0.5, 0.1, 0.9], &valid, 0.97), 0.0);
        assert_eq!(eta(&[1.0; 4], &[false; 4], 0.97), 0.0);
        assert_eq!(eta(&[0.99, 0.1], &[false, true], 0.97), 0.0);
    }

    #[test]
    fn supervised_examples() {
        let perfect = [50.0, -50.0, -50.0, 50.0];
        assert!(supervised_loss(&perfect, 2, &[0, 1], 255).unwrap().loss < 1e-12);
        // oracle: -ln 0.8
        let l = supervised_loss(&logits_for(&[0.8, 0.2]), 2, &[0], 255).unwrap().loss;
        assert!((l - (-(0.8f64).ln())).abs() < 1e-6);
        assert!((l - 0.2231).abs() < 1e-4);
        assert_eq!(supervised_loss(&[1.0, 2.0], 2, &[255], 255).unwrap().loss, 0.0);
    }

    #[test]
    fn ignore_pixels_are_masked() {
        let labels = [0u8, 255, 1];
        let a = [0.3, 9.0, -0.2, 0.1, -4.0, 0.8];
        let mut b = a;
        b[1] = -7.0;
        b[4] = 12.0;
        let la = supervised_loss(&a, 2, &labels, 255).unwrap();
        let lb = supervised_loss(&b, 2, &labels, 255).unwrap();
        assert_eq!(la.loss, lb.loss);
        assert_eq!(la.grad[1], 0.0);
    }

    #[test]
    fn unsup_examples() {
        let lg = logits_for(&[0.8, 0.2]);
        let plain = supervised_loss(&lg, 2, &[0], 255).unwrap().loss;
        let one = weighted_unsup_loss(&lg, 2, &[0], Some(&[1.0]), &[true]).unwrap().loss;
        assert!((one - plain).abs() < 1e-12);
        // oracle: 0.9 * -ln 0.8
        let w = weighted_unsup_loss(&lg, 2, &[0], Some(&[0.9]), &[true]).unwrap().loss;
        assert!((w - 0.9 * (-(0.8f64).ln())).abs() < 1e-6);
        assert!((w - 0.2008).abs() < 1e-4);
        let z = weighted_unsup_loss(&lg, 2, &[0], Some(&[0.0]), &[true]).unwrap().loss;
        assert_eq!(z, 0.0);
        assert_eq!(weighted_unsup_loss(&lg, 2, &[0], None, &[false]).unwrap().loss, 0.0);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.7, 3.0, Some(2.0), 0.0, 0.0).unwrap().l_total, 0.7);
        assert_eq!(total_loss(1.0, 0.5, Some(0.5), 1.0, 1.0).unwrap().l_total, 2.0);
        let b = total_loss(1.0, 0.5, None, 1.0, 1.0).unwrap();
        assert_eq!((b.l_unsup2, b.eta2, b.l_total), (0.0, 0.0, 1.5));
        assert!(total_loss(1.0, 0.5, None, 1.5, 0.0).is_err());
    }

    #[test]
    fn eta_reduction_is_exact() {
        let items = [(0.2, 1.5), (0.0, 9.0), (0.9, 0.25)];
        let (e, l) = reduce_eta_weighted(&items);
        let direct = items.iter().map(|(e, l)| e * l).sum::<f64>() / 3.0;
        assert!((e * l - direct).abs() < 1e-15);
        let (e, l) = reduce_eta_weighted(&[(0.0, 2.0), (0.0, 4.0)]);
        assert_eq!((e, l), (0.0, 3.0));
    }

    proptest! {
        #[test]
        fn eta_is_monotone_in_tau(conf in proptest::collection::vec(0.0f32..=1.0, 1..50), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let valid = vec![true; conf.len()];
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(eta(&conf, &valid, hi) <= eta(&conf, &valid, lo));
        }

        #[test]
        fn weighting_never_exceeds_plain_ce(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (k, p) = (4, 12);
            let logits: Vec<f64> = (0..k * p).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let targets: Vec<u8> = (0..p).map(|_| rng.gen_range(0..k as u8)).collect();
            let conf: Vec<f32> = (0..p).map(|_| rng.gen_range(0.25..=1.0)).collect();
            let valid: Vec<bool> = (0..p).map(|_| rng.gen_bool(0.8)).collect();
            let w = weighted_unsup_loss(&logits, k, &targets, Some(&conf), &valid).unwrap().loss;
            let u = weighted_unsup_loss(&logits, k, &targets, None, &valid).unwrap().loss;
            prop_assert!(w <= u + 1e-12);
        }

        #[test]
        fn pseudo_confidence_at_least_uniform(raw in proptest::collection::vec(0.001f32..1.0, 5)) {
            let s: f32 = raw.iter().sum();
            let probs: Vec<f32> = raw.iter().map(|v| v / s).collect();
            let m = pseudo_label(&probs, 5);
            prop_assert!(m.confidence[0] >= 0.2 - 1e-6);
            prop_assert!(probs.iter().all(|&p| p <= m.confidence[0]));
        }
    }
}
