//! Hypergraph plausibility estimation.
//!
//! A predicted mask is viewed as a hypergraph whose vertices are its
//! foreground pixels, with one hyperedge per foreground class and a layout
//! hyperedge over the class centroids. Three scores are combined:
//!
//! * vertex: mean per-pixel certainty x ensemble consistency over foreground;
//! * intra-class: how typical each class shape (isoperimetric ratio) is
//!   relative to the current batch;
//! * inter-class: how typical the relative direction between each ordered
//!   pair of class centroids is relative to the batch.
//!
//! The structural scores gate the vertex score multiplicatively, and the
//! final score drives top-rho sample selection within an epoch.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastmath::ln_pos;
use crate::stats;
use crate::tensor::{LabelMap, PredictionEnsemble, IGNORE};

/// Fewer accumulated scores than this selects the whole batch.
pub const WARMUP_MIN_SCORES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    /// Weight of the intra-class score in the structural blend.
    pub alpha: f64,
    /// Softmax temperature of the outlier-penalizing aggregate.
    pub tau: f64,
    pub rho_0: f64,
    pub rho_max: f64,
    pub epsilon: f64,
    /// Floor on batch standard deviations.
    pub epsilon_stat: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            tau: 0.1,
            rho_0: 0.1,
            rho_max: 0.8,
            epsilon: 1e-6,
            epsilon_stat: 1e-3,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0,1], got {}", self.alpha)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.rho_0 > 0.0 && self.rho_0 <= self.rho_max && self.rho_max <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 < rho_0 <= rho_max <= 1, got {} / {}",
                self.rho_0, self.rho_max
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon_stat > 0.0) {
            return Err(Error::Config("epsilon and epsilon_stat must be positive".into()));
        }
        Ok(())
    }
}

/// Foreground pixels (flat indices) grouped by class.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralHypergraph {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub vertices: Vec<usize>,
    /// `class_edges[k - 1]` holds the pixels of class `k`.
    pub class_edges: Vec<Vec<usize>>,
    /// Centroids `(x, y)` of every non-empty class hyperedge.
    pub layout: Vec<(u8, (f64, f64))>,
}

impl StructuralHypergraph {
    pub fn class_edge(&self, k: u8) -> &[usize] {
        &self.class_edges[k as usize - 1]
    }

    pub fn present_classes(&self) -> impl Iterator<Item = u8> + '_ {
        self.layout.iter().map(|&(k, _)| k)
    }
}

pub fn build_hypergraph(m: &LabelMap) -> StructuralHypergraph {
    let k = m.num_classes();
    let mut class_edges = vec![Vec::new(); k - 1];
    let mut vertices = Vec::new();
    for (p, &v) in m.values().iter().enumerate() {
        if v != 0 && v != IGNORE {
            vertices.push(p);
            class_edges[v as usize - 1].push(p);
        }
    }
    let layout = class_edges
        .iter()
        .enumerate()
        .filter_map(|(i, e)| centroid(e, m.width()).map(|c| ((i + 1) as u8, c)))
        .collect();
    StructuralHypergraph {
        height: m.height(),
        width: m.width(),
        num_classes: k,
        vertices,
        class_edges,
        layout,
    }
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `1 - H(p) / ln K`.
pub fn pixel_certainty(mean: &[f64]) -> f64 {
    let k = mean.len() as f64;
    (1.0 - entropy(mean) / k.ln()).clamp(0.0, 1.0)
}

/// `1 - JSD / ln K`, where JSD is the entropy of the mean distribution minus
/// the mean member entropy. Clamped to `[0, 1]`.
pub fn pixel_consistency(members: &[Vec<f64>]) -> f64 {
    let k = members[0].len();
    let n = members.len() as f64;
    let mut mean = vec![0.0; k];
    for m in members {
        for (a, v) in mean.iter_mut().zip(m) {
            *a += v / n;
        }
    }
    let jsd = entropy(&mean) - members.iter().map(|m| entropy(m)).sum::<f64>() / n;
    (1.0 - jsd / (k as f64).ln()).clamp(0.0, 1.0)
}

/// Mean pixel weight over the foreground of `consensus`, and the weight map
/// over every pixel.
pub fn vertex_score(ens: &PredictionEnsemble, consensus: &LabelMap) -> Result<(f64, Vec<f64>)> {
    let (k, h, w) = ens.shape();
    if consensus.height() != h || consensus.width() != w || consensus.num_classes() != k {
        return Err(Error::shape(format!(
            "consensus {}x{} (K={}) does not match ensemble {k}x{h}x{w}",
            consensus.height(),
            consensus.width(),
            consensus.num_classes()
        )));
    }
    let n = h * w;
    let members = ens.members();
    let inv_n = 1.0 / members.len() as f64;
    let ln_k = (k as f64).ln();
    // plane-wise passes keep the inner loops free of branches
    let mut mean = vec![0.0; k * n];
    let mut member_entropy = vec![0.0; n];
    for m in members {
        for (c, acc) in mean.chunks_mut(n).enumerate() {
            let plane = m.class_plane(c);
            for ((a, h), &v) in acc.iter_mut().zip(member_entropy.iter_mut()).zip(plane) {
                *a += v * inv_n;
                *h -= v * ln_pos(v) * inv_n;
            }
        }
    }
    let mut h_mean = vec![0.0; n];
    for plane in mean.chunks(n) {
        for (h, &v) in h_mean.iter_mut().zip(plane) {
            *h -= v * ln_pos(v);
        }
    }
    let weights: Vec<f64> = h_mean
        .iter()
        .zip(&member_entropy)
        .map(|(&hm, &he)| {
            let certainty = (1.0 - hm / ln_k).clamp(0.0, 1.0);
            let consistency = (1.0 - (hm - he) / ln_k).clamp(0.0, 1.0);
            certainty * consistency
        })
        .collect();
    let fg: Vec<f64> = consensus
        .values()
        .iter()
        .zip(&weights)
        .filter(|(&l, _)| l != 0 && l != IGNORE)
        .map(|(_, &w)| w)
        .collect();
    let s_vertex = if fg.is_empty() { 0.0 } else { stats::mean(&fg) };
    Ok((s_vertex, weights))
}

/// Number of 4-neighbour edges leading from a class pixel to a non-class
/// pixel or off the image.
pub fn exposed_edges(pixels: &[usize], height: usize, width: usize) -> usize {
    let mut mask = vec![false; height * width];
    for &p in pixels {
        mask[p] = true;
    }
    let inside = |y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && mask[y as usize * width + x as usize]
    };
    pixels
        .iter()
        .map(|&p| {
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .filter(|(dy, dx)| !inside(y + dy, x + dx))
                .count()
        })
        .sum()
}

/// `4 pi Area / (Perimeter^2 + eps)` with the exposed-edge perimeter; 0 for
/// an empty mask.
pub fn isoperimetric(pixels: &[usize], height: usize, width: usize, eps: f64) -> f64 {
    if pixels.is_empty() {
        return 0.0;
    }
    let area = pixels.len() as f64;
    let perim = exposed_edges(pixels, height, width) as f64;
    4.0 * std::f64::consts::PI * (area / (perim * perim + eps))
}

/// Mean `(x, y)` = (column, row) of a pixel set.
pub fn centroid(pixels: &[usize], width: usize) -> Option<(f64, f64)> {
    if pixels.is_empty() {
        return None;
    }
    let (sx, sy) = pixels.iter().fold((0.0, 0.0), |(sx, sy), &p| {
        (sx + (p % width) as f64, sy + (p / width) as f64)
    });
    let n = pixels.len() as f64;
    Some((sx / n, sy / n))
}

/// Horizontal direction cosine of the vector from `ci` to `cj`.
pub fn direction_cosine(ci: (f64, f64), cj: (f64, f64), eps: f64) -> f64 {
    let (dx, dy) = (cj.0 - ci.0, cj.1 - ci.1);
    dx / ((dx * dx + dy * dy).sqrt() + eps)
}

/// Shape descriptors of one mask.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShapeDescriptors {
    pub phi: BTreeMap<u8, f64>,
    pub psi: BTreeMap<(u8, u8), f64>,
}

pub fn describe(g: &StructuralHypergraph, eps: f64) -> ShapeDescriptors {
    let mut d = ShapeDescriptors::default();
    for &(k, _) in &g.layout {
        d.phi.insert(k, isoperimetric(g.class_edge(k), g.height, g.width, eps));
    }
    for &(i, ci) in &g.layout {
        for &(j, cj) in &g.layout {
            if i != j {
                d.psi.insert((i, j), direction_cosine(ci, cj, eps));
            }
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchShapeStats {
    pub phi: BTreeMap<u8, Moments>,
    pub psi: BTreeMap<(u8, u8), Moments>,
}

fn moments(values: &[f64], floor: f64) -> Moments {
    Moments {
        mean: stats::mean(values),
        std: stats::std_population(values).max(floor),
        count: values.len(),
    }
}

/// Per-class and per-pair population moments over the samples in which the
/// class or pair is present, with std floored at `eps_stat`.
pub fn batch_stats(batch: &[ShapeDescriptors], eps_stat: f64) -> BatchShapeStats {
    let mut phi: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    let mut psi: BTreeMap<(u8, u8), Vec<f64>> = BTreeMap::new();
    for d in batch {
        for (&k, &v) in &d.phi {
            phi.entry(k).or_default().push(v);
        }
        for (&ij, &v) in &d.psi {
            psi.entry(ij).or_default().push(v);
        }
    }
    BatchShapeStats {
        phi: phi.into_iter().map(|(k, v)| (k, moments(&v, eps_stat))).collect(),
        psi: psi.into_iter().map(|(k, v)| (k, moments(&v, eps_stat))).collect(),
    }
}

/// `(z, exp(-|z|))` with `z = (v - mean) / (std + eps)`.
pub fn zscore_plausibility(v: f64, mean: f64, std: f64, eps: f64) -> (f64, f64) {
    let z = (v - mean) / (std + eps);
    (z, (-z.abs()).exp())
}

/// `sum_i s_i softmax(-s / tau)_i`: a soft minimum dominated by the lowest
/// scores. Empty input is vacuously plausible (1).
pub fn penalized_aggregate(scores: &[f64], tau: f64) -> f64 {
    let Some(min) = scores.iter().copied().reduce(f64::min) else {
        return 1.0;
    };
    let (num, den) = scores.iter().fold((0.0, 0.0), |(num, den), &s| {
        let w = (-(s - min) / tau).exp();
        (num + s * w, den + w)
    });
    num / den
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPlausibility {
    pub class: u8,
    pub phi: f64,
    pub z: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPlausibility {
    pub i: u8,
    pub j: u8,
    pub psi: f64,
    pub z: f64,
    pub score: f64,
}

pub fn intra_score(
    d: &ShapeDescriptors,
    batch: &BatchShapeStats,
    cfg: &GateConfig,
) -> (f64, Vec<ClassPlausibility>) {
    let detail: Vec<ClassPlausibility> = d
        .phi
        .iter()
        .map(|(&class, &phi)| {
            let (z, score) = match batch.phi.get(&class) {
                Some(m) => zscore_plausibility(phi, m.mean, m.std, cfg.epsilon),
                None => (0.0, 1.0),
            };
            ClassPlausibility { class, phi, z, score }
        })
        .collect();
    let scores: Vec<f64> = detail.iter().map(|c| c.score).collect();
    (penalized_aggregate(&scores, cfg.tau), detail)
}

pub fn inter_score(
    d: &ShapeDescriptors,
    batch: &BatchShapeStats,
    cfg: &GateConfig,
) -> (f64, Vec<PairPlausibility>) {
    let detail: Vec<PairPlausibility> = d
        .psi
        .iter()
        .map(|(&(i, j), &psi)| {
            let (z, score) = match batch.psi.get(&(i, j)) {
                Some(m) => zscore_plausibility(psi, m.mean, m.std, cfg.epsilon),
                None => (0.0, 1.0),
            };
            PairPlausibility { i, j, psi, z, score }
        })
        .collect();
    let scores: Vec<f64> = detail.iter().map(|c| c.score).collect();
    (penalized_aggregate(&scores, cfg.tau), detail)
}

pub fn final_score(s_vertex: f64, s_intra: f64, s_inter: f64, alpha: f64) -> f64 {
    s_vertex * (alpha * s_intra + (1.0 - alpha) * s_inter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityReport {
    pub s_vertex: f64,
    pub s_intra: f64,
    pub s_inter: f64,
    pub s_final: f64,
    pub per_class: Vec<ClassPlausibility>,
    pub per_pair: Vec<PairPlausibility>,
    #[serde(skip)]
    pub pixel_weights: Vec<f64>,
}

/// Scores every sample of a batch against the batch's own shape statistics.
/// Returns the consensus maps alongside the reports.
pub fn score_batch(
    ensembles: &[PredictionEnsemble],
    cfg: &GateConfig,
) -> Result<(Vec<LabelMap>, Vec<PlausibilityReport>)> {
    let prepared: Vec<(LabelMap, ShapeDescriptors, f64, Vec<f64>)> = ensembles
        .par_iter()
        .map(|ens| {
            let consensus = ens.consensus();
            let (s_vertex, weights) = vertex_score(ens, &consensus)?;
            let desc = describe(&build_hypergraph(&consensus), cfg.epsilon);
            Ok((consensus, desc, s_vertex, weights))
        })
        .collect::<Result<_>>()?;
    let descriptors: Vec<ShapeDescriptors> = prepared.iter().map(|p| p.1.clone()).collect();
    let batch = batch_stats(&descriptors, cfg.epsilon_stat);
    let mut consensus_maps = Vec::with_capacity(prepared.len());
    let mut reports = Vec::with_capacity(prepared.len());
    for (consensus, desc, s_vertex, pixel_weights) in prepared {
        let (s_intra, per_class) = intra_score(&desc, &batch, cfg);
        let (s_inter, per_pair) = inter_score(&desc, &batch, cfg);
        reports.push(PlausibilityReport {
            s_vertex,
            s_intra,
            s_inter,
            s_final: final_score(s_vertex, s_intra, s_inter, cfg.alpha),
            per_class,
            per_pair,
            pixel_weights,
        });
        consensus_maps.push(consensus);
    }
    Ok((consensus_maps, reports))
}

/// Final scores seen so far in the current epoch, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreAccumulator {
    epoch: usize,
    scores: Vec<f64>,
}

impl ScoreAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears the buffer when `epoch` differs from the current one.
    pub fn begin_epoch(&mut self, epoch: usize) {
        if epoch != self.epoch {
            self.epoch = epoch;
            self.scores.clear();
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn extend(&mut self, scores: &[f64]) {
        self.scores.extend_from_slice(scores);
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Adds `batch_scores` to the accumulator and returns the batch indices whose
/// score reaches the `(1 - rho)` quantile of everything accumulated.
pub fn select_samples(acc: &mut ScoreAccumulator, batch_scores: &[f64], rho: f64) -> Vec<usize> {
    acc.extend(batch_scores);
    if acc.len() < WARMUP_MIN_SCORES {
        return (0..batch_scores.len()).collect();
    }
    let threshold = stats::quantile(acc.scores(), 1.0 - rho).expect("non-empty accumulator");
    (0..batch_scores.len())
        .filter(|&i| batch_scores[i] >= threshold)
        .collect()
}
