//! Dice score and average surface distance.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, IGNORE};

fn check_same_shape(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// Class masks of `pred` and `gt`, both restricted to pixels where `gt` is
/// not IGNORE.
fn class_masks(pred: &LabelMap, gt: &LabelMap, k: u8) -> (Vec<bool>, Vec<bool>) {
    pred.values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| (g != IGNORE && p == k, g == k))
        .unzip()
}

/// `200 |P & G| / (|P| + |G|)`; 100 when both are empty.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap, k: u8) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (p, g) = class_masks(pred, gt, k);
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (a, b) in p.iter().zip(&g) {
        inter += (*a && *b) as usize;
        np += *a as usize;
        ng += *b as usize;
    }
    if np + ng == 0 {
        return Ok(100.0);
    }
    Ok(200.0 * inter as f64 / (np + ng) as f64)
}

/// Mask pixels with a 4-neighbour outside the mask or lying on the image
/// border, in row-major order.
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<usize> {
    (0..height * width)
        .filter(|&p| {
            if !mask[p] {
                return false;
            }
            let (y, x) = (p / width, p % width);
            y == 0
                || x == 0
                || y + 1 == height
                || x + 1 == width
                || !mask[p - width]
                || !mask[p + width]
                || !mask[p - 1]
                || !mask[p + 1]
        })
        .collect()
}

/// Exact squared Euclidean distance to the nearest seed, via two passes of
/// the lower-envelope-of-parabolas transform in integer arithmetic.
pub fn squared_distance_transform(seeds: &[usize], height: usize, width: usize) -> Vec<i64> {
    const INF: i64 = i64::MAX / 4;
    let mut grid = vec![INF; height * width];
    for &s in seeds {
        grid[s] = 0;
    }
    let mut buf = Vec::new();
    let mut out = Vec::new();
    for x in 0..width {
        buf.clear();
        buf.extend((0..height).map(|y| grid[y * width + x]));
        envelope_1d(&buf, &mut out);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        buf.clear();
        buf.extend_from_slice(&grid[y * width..(y + 1) * width]);
        envelope_1d(&buf, &mut out);
        grid[y * width..(y + 1) * width].copy_from_slice(&out);
    }
    grid
}

fn envelope_1d(f: &[i64], out: &mut Vec<i64>) {
    const INF: i64 = i64::MAX / 4;
    let n = f.len();
    out.clear();
    out.resize(n, INF);
    // parabola apexes (finite samples only) and the left boundaries of their
    // regions, as rationals compared by cross-multiplication
    let apex: Vec<usize> = (0..n).filter(|&q| f[q] < INF).collect();
    if apex.is_empty() {
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(apex.len());
    // z[i] = num / den: abscissa where parabola v[i] starts to dominate
    let mut z: Vec<(i64, i64)> = Vec::with_capacity(apex.len());
    for &q in &apex {
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push((i64::MIN / 4, 1));
                break;
            };
            let (qi, pi) = (q as i64, p as i64);
            let num = (f[q] + qi * qi) - (f[p] + pi * pi);
            let den = 2 * (qi - pi);
            let &(zn, zd) = z.last().expect("z tracks v");
            // intersection <= z.last() ?
            if (num as i128) * (zd as i128) <= (zn as i128) * (den as i128) {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push((num, den));
                break;
            }
        }
    }
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate() {
        let xi = x as i128;
        while k + 1 < v.len() {
            let (zn, zd) = z[k + 1];
            if (zn as i128) <= xi * zd as i128 {
                k += 1;
            } else {
                break;
            }
        }
        let d = x as i64 - v[k] as i64;
        *o = d * d + f[v[k]];
    }
}

/// Symmetric average surface distance in units of `spacing`.
///
/// Infinite when either boundary is empty.
pub fn asd(pred: &LabelMap, gt: &LabelMap, k: u8, spacing: f64) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (h, w) = (gt.height(), gt.width());
    let (p, g) = class_masks(pred, gt, k);
    let bp = boundary(&p, h, w);
    let bg = boundary(&g, h, w);
    if bp.is_empty() || bg.is_empty() {
        return Ok(f64::INFINITY);
    }
    let to_g = squared_distance_transform(&bg, h, w);
    let to_p = squared_distance_transform(&bp, h, w);
    let total: f64 = bp.iter().map(|&a| (to_g[a] as f64).sqrt()).sum::<f64>()
        + bg.iter().map(|&b| (to_p[b] as f64).sqrt()).sum::<f64>();
    Ok(spacing * total / (bp.len() + bg.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub class: u8,
    pub dsc: f64,
    /// `None` when a boundary is empty.
    pub asd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetric>,
    pub mean_dsc: f64,
    pub mean_asd: Option<f64>,
}

/// Metrics for every foreground class of one prediction.
pub fn evaluate(pred: &LabelMap, gt: &LabelMap, spacing: f64) -> Result<MetricReport> {
    let k = gt.num_classes();
    let per_class = (1..k as u8)
        .map(|c| {
            let a = asd(pred, gt, c, spacing)?;
            Ok(ClassMetric {
                class: c,
                dsc: dice_score(pred, gt, c)?,
                asd: a.is_finite().then_some(a),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(per_class))
}

fn summarize(per_class: Vec<ClassMetric>) -> MetricReport {
    let mean_dsc = per_class.iter().map(|c| c.dsc).sum::<f64>() / per_class.len().max(1) as f64;
    let finite: Vec<f64> = per_class.iter().filter_map(|c| c.asd).collect();
    if finite.len() < per_class.len() {
        warn!(
            "{} of {} classes have an empty boundary; excluded from mean ASD",
            per_class.len() - finite.len(),
            per_class.len()
        );
    }
    let mean_asd = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
    MetricReport {
        per_class,
        mean_dsc,
        mean_asd,
    }
}

/// Per-class metrics averaged over samples (ASD over finite values only).
pub fn evaluate_many(pairs: &[(LabelMap, LabelMap)], spacing: f64) -> Result<MetricReport> {
    let reports = pairs
        .iter()
        .map(|(p, g)| evaluate(p, g, spacing))
        .collect::<Result<Vec<_>>>()?;
    let Some(first) = reports.first() else {
        return Err(Error::invalid("no samples to evaluate"));
    };
    let per_class = first
        .per_class
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let dsc = reports.iter().map(|r| r.per_class[i].dsc).sum::<f64>() / reports.len() as f64;
            let finite: Vec<f64> = reports.iter().filter_map(|r| r.per_class[i].asd).collect();
            ClassMetric {
                class: c.class,
                dsc,
                asd: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
            }
        })
        .collect();
    Ok(summarize(per_class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn with_rect(mut m: LabelMap, k: u8, y0: usize, x0: usize, hh: usize, ww: usize) -> LabelMap {
        for y in y0..y0 + hh {
            for x in x0..x0 + ww {
                m.set(y, x, k);
            }
        }
        m
    }

    /// All-pairs oracle, independent of the distance transform.
    fn asd_brute(pred: &LabelMap, gt: &LabelMap, k: u8) -> f64 {
        let (h, w) = (gt.height(), gt.width());
        let (p, g) = class_masks(pred, gt, k);
        let bp = boundary(&p, h, w);
        let bg = boundary(&g, h, w);
        let nearest = |a: usize, set: &[usize]| {
            set.iter()
                .map(|&b| {
                    let dy = (a / w) as f64 - (b / w) as f64;
                    let dx = (a % w) as f64 - (b % w) as f64;
                    (dx * dx + dy * dy).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        };
        let total: f64 = bp.iter().map(|&a| nearest(a, &bg)).sum::<f64>()
            + bg.iter().map(|&b| nearest(b, &bp)).sum::<f64>();
        total / (bp.len() + bg.len()) as f64
    }

    #[test]
    fn dice_cases() {
        let a = with_rect(LabelMap::filled(3, 16, 16, 0), 1, 2, 2, 4, 8);
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 100.0);
        let b = with_rect(LabelMap::filled(3, 16, 16, 0), 1, 2, 6, 4, 8);
        assert_eq!(dice_score(&a, &b, 1).unwrap(), 50.0);
        assert_eq!(dice_score(&a, &b, 2).unwrap(), 100.0);
        let empty = LabelMap::filled(3, 16, 16, 0);
        assert_eq!(dice_score(&a, &empty, 1).unwrap(), 0.0);
        assert!(dice_score(&a, &LabelMap::filled(3, 8, 16, 0), 1).is_err());
    }

    #[test]
    fn dice_ignores_gt_ignore() {
        let gt = with_rect(LabelMap::filled(2, 4, 4, 1), IGNORE, 0, 0, 2, 4);
        let pred = LabelMap::filled(2, 4, 4, 1);
        assert_eq!(dice_score(&pred, &gt, 1).unwrap(), 100.0);
    }

    #[test]
    fn asd_cases() {
        let a = with_rect(LabelMap::filled(3, 16, 16, 0), 1, 3, 3, 5, 5);
        assert_eq!(asd(&a, &a, 1, 1.0).unwrap(), 0.0);
        let mut p = LabelMap::filled(2, 10, 10, 0);
        p.set(2, 1, 1);
        let mut g = LabelMap::filled(2, 10, 10, 0);
        g.set(2, 6, 1);
        assert_eq!(asd(&p, &g, 1, 1.0).unwrap(), 5.0);
        assert_eq!(asd(&p, &g, 1, 0.5).unwrap(), 2.5);
        let empty = LabelMap::filled(2, 10, 10, 0);
        assert_eq!(asd(&p, &empty, 1, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn asd_shifted_square_matches_brute_force() {
        let a = with_rect(LabelMap::filled(2, 32, 32, 0), 1, 4, 4, 20, 20);
        let b = with_rect(LabelMap::filled(2, 32, 32, 0), 1, 4, 6, 20, 20);
        assert_eq!(asd(&a, &b, 1, 1.0).unwrap(), asd_brute(&a, &b, 1));
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = SeededRng::new(17);
        for _ in 0..20 {
            let (h, w) = (1 + rng.below(30), 1 + rng.below(30));
            let seeds: Vec<usize> = (0..1 + rng.below(8)).map(|_| rng.below(h * w)).collect();
            let d = squared_distance_transform(&seeds, h, w);
            for p in 0..h * w {
                let best = seeds
                    .iter()
                    .map(|&s| {
                        let dy = (p / w) as i64 - (s / w) as i64;
                        let dx = (p % w) as i64 - (s % w) as i64;
                        dx * dx + dy * dy
                    })
                    .min()
                    .unwrap();
                assert_eq!(d[p], best);
            }
        }
    }

    #[test]
    fn report_excludes_infinite_asd() {
        let gt = with_rect(LabelMap::filled(3, 16, 16, 0), 1, 2, 2, 5, 5);
        let r = evaluate(&gt, &gt, 1.0).unwrap();
        assert_eq!(r.per_class[0].dsc, 100.0);
        assert_eq!(r.per_class[0].asd, Some(0.0));
        assert_eq!(r.per_class[1].asd, None);
        assert_eq!(r.mean_dsc, 100.0);
        assert_eq!(r.mean_asd, Some(0.0));
    }
}
