//! Soft Dice and focal losses with gradients taken with respect to the
//! logits that produced the probabilities.

use crate::error::{Error, Result};
use crate::fastmath::ln_pos;
use crate::tensor::{LabelMap, ProbMap, IGNORE};

/// A scalar loss and its gradient with respect to the `K x H x W` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn check(p: &ProbMap, y: &LabelMap, w: Option<&[f64]>) -> Result<()> {
    if (p.height(), p.width()) != (y.height(), y.width()) || p.num_classes() != y.num_classes() {
        return Err(Error::shape(format!(
            "probabilities {:?} vs labels {}x{}x{}",
            p.shape(),
            y.num_classes(),
            y.height(),
            y.width()
        )));
    }
    if let Some(w) = w {
        if w.len() != y.len() {
            return Err(Error::shape(format!("{} pixel weights for {} pixels", w.len(), y.len())));
        }
    }
    Ok(())
}

/// Adds the pull-back of a probability gradient through the softmax to `out`.
fn softmax_backward_into(p: &ProbMap, dp: &[f64], out: &mut [f64]) {
    let n = p.plane_len();
    let pv = p.values();
    let mut dot = vec![0.0; n];
    for (pp, dd) in pv.chunks(n).zip(dp.chunks(n)) {
        for ((acc, &a), &b) in dot.iter_mut().zip(pp).zip(dd) {
            *acc += a * b;
        }
    }
    for ((o, pp), dd) in out.chunks_mut(n).zip(pv.chunks(n)).zip(dp.chunks(n)) {
        for (((o, &a), &b), &d) in o.iter_mut().zip(pp).zip(dd).zip(&dot) {
            *o += a * (b - d);
        }
    }
}

/// Dice loss and its gradient with respect to the probabilities, `None`
/// when no foreground class is present.
fn dice_parts(p: &ProbMap, y: &LabelMap, w: Option<&[f64]>, smooth: f64) -> (f64, Option<Vec<f64>>) {
    let n = p.plane_len();
    let k = p.num_classes();
    let labels = y.values();
    let mut present = vec![false; k];
    for &l in labels.iter().filter(|&&l| l != IGNORE) {
        present[l as usize] = true;
    }
    let fg = present[1..].iter().filter(|&&b| b).count() as f64;
    if fg == 0.0 {
        return (0.0, None);
    }
    // zero weight on IGNORE pixels removes them from every sum
    let wv: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(px, &l)| if l == IGNORE { 0.0 } else { w.map_or(1.0, |w| w[px]) })
        .collect();
    let mut dp = Vec::with_capacity(k * n);
    dp.resize(n, 0.0);
    let mut loss = 1.0;
    for c in 1..k {
        if !present[c] {
            dp.resize(dp.len() + n, 0.0);
            continue;
        }
        let plane = p.class_plane(c);
        let (mut inter, mut total) = (0.0, 0.0);
        for ((&pv, &wt), &l) in plane.iter().zip(&wv).zip(labels) {
            let yv = (l as usize == c) as u8 as f64;
            inter += wt * pv * yv;
            total += wt * (pv + yv);
        }
        let num = 2.0 * inter + smooth;
        let den = total + smooth;
        loss -= num / den / fg;
        let scale = 1.0 / (den * den * fg);
        dp.extend(wv.iter().zip(labels).map(|(&wt, &l)| {
            let yv = (l as usize == c) as u8 as f64;
            -wt * (2.0 * yv * den - num) * scale
        }));
    }
    (loss, Some(dp))
}

/// `1 - mean_k (2 I_k + s) / (S_k + s)` over the foreground classes present
/// among the non-IGNORE pixels of `y`, with `I_k = sum w p y` and
/// `S_k = sum w (p + y)` over those pixels. Zero when no foreground class is
/// present.
pub fn dice_loss(p: &ProbMap, y: &LabelMap, w: Option<&[f64]>, smooth: f64) -> Result<LossGrad> {
    check(p, y, w)?;
    let (loss, dp) = dice_parts(p, y, w, smooth);
    let mut grad = vec![0.0; p.values().len()];
    if let Some(dp) = dp {
        softmax_backward_into(p, &dp, &mut grad);
    }
    Ok(LossGrad { loss, grad })
}

/// Mean over non-IGNORE pixels of `-w (1 - p_t)^gamma log p_t`.
pub fn focal_loss(p: &ProbMap, y: &LabelMap, w: Option<&[f64]>, gamma: f64) -> Result<LossGrad> {
    check(p, y, w)?;
    let n = p.plane_len();
    let k = p.num_classes();
    let labels = y.values();
    let valid = labels.iter().filter(|&&l| l != IGNORE).count();
    if valid == 0 {
        return Ok(LossGrad {
            loss: 0.0,
            grad: vec![0.0; k * n],
        });
    }
    let inv = 1.0 / valid as f64;
    let pow = |x: f64, e: f64| {
        if e.fract() == 0.0 && e.abs() < 64.0 {
            x.powi(e as i32)
        } else {
            x.powf(e)
        }
    };
    let mut loss = 0.0;
    // coef is zero on IGNORE pixels, which removes them from the gradient
    let coef: Vec<f64> = (0..n)
        .map(|px| {
            if labels[px] == IGNORE {
                return 0.0;
            }
            let wp = w.map_or(1.0, |w| w[px]);
            let pt = p.get(labels[px] as usize, px);
            let log_pt = ln_pos(pt);
            let q = 1.0 - pt;
            let qg = pow(q, gamma);
            loss += wp * -qg * log_pt;
            // d FL / d z_j = (gamma q^(gamma-1) p_t log p_t - q^gamma) (delta_jt - p_j)
            let lead = if gamma == 0.0 || q <= 0.0 {
                0.0
            } else {
                gamma * pow(q, gamma - 1.0) * pt * log_pt
            };
            wp * inv * (lead - qg)
        })
        .collect();
    let mut grad = Vec::with_capacity(k * n);
    for j in 0..k {
        let plane = p.class_plane(j);
        grad.extend(
            coef.iter()
                .zip(plane)
                .zip(labels)
                .map(|((&cf, &pj), &l)| cf * ((l as usize == j) as u8 as f64 - pj)),
        );
    }
    Ok(LossGrad { loss: loss * inv, grad })
}

/// Dice plus focal loss with unit weights.
pub fn seg_loss(p: &ProbMap, y: &LabelMap, w: Option<&[f64]>, smooth: f64, gamma: f64) -> Result<LossGrad> {
    let mut out = focal_loss(p, y, w, gamma)?;
    let (dice, dp) = dice_parts(p, y, w, smooth);
    if let Some(dp) = dp {
        softmax_backward_into(p, &dp, &mut out.grad);
    }
    out.loss += dice;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::selftrain::decoder::softmax;
    use crate::tensor::FeatureMap;

    fn random_labels(rng: &mut SeededRng, k: usize, h: usize, w: usize, ignore_frac: f64) -> LabelMap {
        let values = (0..h * w)
            .map(|_| {
                if rng.next_f64() < ignore_frac {
                    IGNORE
                } else {
                    rng.below(k) as u8
                }
            })
            .collect();
        LabelMap::new(k, h, w, values).unwrap()
    }

    fn one_hot_exact(y: &LabelMap) -> ProbMap {
        ProbMap::one_hot(y)
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let mut y = LabelMap::filled(3, 32, 32, 0);
        for r in 0..16 {
            for c in 0..32 {
                y.set(r, c, if c < 16 { 1 } else { 2 });
            }
        }
        let perfect = dice_loss(&one_hot_exact(&y), &y, None, 1.0).unwrap();
        assert!(perfect.loss < 0.01 && perfect.loss >= 0.0);

        let shifted = LabelMap::new(
            3,
            32,
            32,
            y.values().iter().map(|&v| if v == 0 { 1 } else { 0 }).collect(),
        )
        .unwrap();
        let disjoint = dice_loss(&one_hot_exact(&shifted), &y, None, 1.0).unwrap();
        assert!(disjoint.loss > 0.99 && disjoint.loss <= 1.0);
    }

    #[test]
    fn all_ignore_is_vacuous() {
        let mut rng = SeededRng::new(1);
        let z = FeatureMap::new(3, 4, 4, (0..48).map(|_| rng.normal()).collect()).unwrap();
        let y = LabelMap::filled(3, 4, 4, IGNORE);
        let p = softmax(&z);
        let s = seg_loss(&p, &y, None, 1.0, 2.0).unwrap();
        assert_eq!(s.loss, 0.0);
        assert!(s.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn dice_skips_absent_classes() {
        let mut rng = SeededRng::new(3);
        let z = FeatureMap::new(3, 4, 4, (0..48).map(|_| rng.normal()).collect()).unwrap();
        let p = softmax(&z);
        let background = LabelMap::filled(3, 4, 4, 0);
        let d = dice_loss(&p, &background, None, 1.0).unwrap();
        assert_eq!(d.loss, 0.0);
        assert!(d.grad.iter().all(|&g| g == 0.0));

        // class 2 pruned: only the class-1 term remains
        let mut values = vec![0u8; 16];
        values[..4].fill(1);
        values[4..8].fill(IGNORE);
        let y = LabelMap::new(3, 4, 4, values).unwrap();
        let (mut inter, mut total) = (0.0, 0.0);
        for px in 0..16 {
            if (4..8).contains(&px) {
                continue;
            }
            let yv = (px < 4) as u8 as f64;
            inter += p.get(1, px) * yv;
            total += p.get(1, px) + yv;
        }
        let expected = 1.0 - (2.0 * inter + 1.0) / (total + 1.0);
        assert!((dice_loss(&p, &y, None, 1.0).unwrap().loss - expected).abs() < 1e-12);
    }

    #[test]
    fn focal_perfect_is_zero() {
        let y = LabelMap::new(3, 1, 3, vec![0, 1, 2]).unwrap();
        let f = focal_loss(&one_hot_exact(&y), &y, None, 2.0).unwrap();
        assert_eq!(f.loss, 0.0);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let mut rng = SeededRng::new(2);
        let z = FeatureMap::new(4, 6, 6, (0..144).map(|_| 2.0 * rng.normal()).collect()).unwrap();
        let p = softmax(&z);
        let y = random_labels(&mut rng, 4, 6, 6, 0.2);
        let f = focal_loss(&p, &y, None, 0.0).unwrap();
        let mut ce = 0.0;
        let mut n = 0;
        for px in 0..36 {
            let t = y.values()[px];
            if t != IGNORE {
                ce -= p.get(t as usize, px).ln();
                n += 1;
            }
        }
        assert!((f.loss - ce / n as f64).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = ProbMap::one_hot(&LabelMap::filled(3, 4, 4, 0));
        assert!(dice_loss(&p, &LabelMap::filled(3, 4, 5, 0), None, 1.0).is_err());
        assert!(focal_loss(&p, &LabelMap::filled(3, 4, 4, 0), Some(&[1.0]), 2.0).is_err());
    }
}
