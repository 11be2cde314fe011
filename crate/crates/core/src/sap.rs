//! Structural anomaly pruning.
//!
//! A class whose pixel count swings across the ensemble views is treated as
//! a hallucination: its instability (coefficient of variation of the count
//! vector) is compared against a batch percentile, and anomalous classes are
//! masked out of the consensus pseudo-label.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::tensor::{LabelMap, IGNORE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SapConfig {
    /// Percentile of batch instabilities used as the anomaly threshold.
    pub q: f64,
    /// Classes with a smaller mean pixel count are never pruned.
    pub min_count: f64,
    pub epsilon: f64,
}

impl Default for SapConfig {
    fn default() -> Self {
        Self {
            q: 50.0,
            min_count: 10.0,
            epsilon: 1e-10,
        }
    }
}

impl SapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.q) {
            return Err(Error::Config(format!("q must lie in [0,100], got {}", self.q)));
        }
        if !(self.min_count >= 1.0) {
            return Err(Error::Config(format!("min_count must be >= 1, got {}", self.min_count)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub class: u8,
    #[serde(rename = "count_vector")]
    pub counts: Vec<usize>,
    pub mean: f64,
    pub instability: f64,
}

impl ClassSignature {
    pub fn is_significant(&self, min_count: f64) -> bool {
        self.mean >= min_count
    }
}

/// Pixel counts of class `k` in each hard ensemble member and their
/// coefficient of variation (unbiased std over mean + eps).
pub fn class_signature(hard: &[LabelMap], k: u8, eps: f64) -> ClassSignature {
    signature_from_counts(k, hard.iter().map(|m| m.count(k)).collect(), eps)
}

pub fn signature_from_counts(class: u8, counts: Vec<usize>, eps: f64) -> ClassSignature {
    let as_f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let mean = stats::mean(&as_f);
    let instability = stats::std_sample(&as_f) / (mean + eps);
    ClassSignature {
        class,
        counts,
        mean,
        instability,
    }
}

/// Signatures of every foreground class `1..K`.
pub fn signatures(hard: &[LabelMap], eps: f64) -> Vec<ClassSignature> {
    let k = hard.first().map_or(0, LabelMap::num_classes);
    (1..k as u8).map(|c| class_signature(hard, c, eps)).collect()
}

/// `q`-th percentile of the given instabilities; `+inf` when empty.
pub fn anomaly_threshold(instabilities: &[f64], q: f64) -> f64 {
    stats::percentile(instabilities, q).unwrap_or(f64::INFINITY)
}

/// Significant classes whose instability strictly exceeds `theta`.
pub fn anomalous_set(sigs: &[ClassSignature], theta: f64, min_count: f64) -> Vec<u8> {
    sigs.iter()
        .filter(|s| s.is_significant(min_count) && s.instability > theta)
        .map(|s| s.class)
        .collect()
}

/// Replaces every pixel of an anomalous class with IGNORE.
pub fn prune(m: &LabelMap, anomalous: &[u8]) -> LabelMap {
    let mut drop = [false; 256];
    for &k in anomalous {
        drop[k as usize] = true;
    }
    let values = m
        .values()
        .iter()
        .map(|&v| if drop[v as usize] { IGNORE } else { v })
        .collect();
    LabelMap::from_raw(m.num_classes(), m.height(), m.width(), values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstabilityReport {
    pub signatures: Vec<ClassSignature>,
    pub theta: f64,
    pub anomalous: Vec<u8>,
    pub pruned: LabelMap,
}

impl InstabilityReport {
    /// Number of pixels turned into IGNORE.
    pub fn pruned_pixels(&self, consensus: &LabelMap) -> usize {
        consensus
            .values()
            .iter()
            .zip(self.pruned.values())
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn to_json(&self, pruned_path: Option<String>) -> InstabilityJson {
        InstabilityJson {
            per_class: self.signatures.clone(),
            theta: self.theta.is_finite().then_some(self.theta),
            anomalous: self.anomalous.clone(),
            pruned_path,
        }
    }
}

/// Serialized form; `theta: null` encodes an infinite threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilityJson {
    pub per_class: Vec<ClassSignature>,
    pub theta: Option<f64>,
    pub anomalous: Vec<u8>,
    pub pruned_path: Option<String>,
}

/// Prunes each sample's consensus map against a threshold pooled over the
/// significant classes of the whole batch (batch order).
///
/// `hard_members[i]` are the argmax maps of sample `i`'s ensemble.
pub fn prune_batch(
    hard_members: &[Vec<LabelMap>],
    consensus: &[LabelMap],
    cfg: &SapConfig,
) -> Result<Vec<InstabilityReport>> {
    if hard_members.len() != consensus.len() {
        return Err(Error::shape(format!(
            "{} ensembles but {} consensus maps",
            hard_members.len(),
            consensus.len()
        )));
    }
    let sigs: Vec<Vec<ClassSignature>> = hard_members
        .iter()
        .map(|h| {
            if h.len() < 2 {
                return Err(Error::invalid("instability needs at least 2 ensemble members"));
            }
            Ok(signatures(h, cfg.epsilon))
        })
        .collect::<Result<_>>()?;
    let pooled: Vec<f64> = sigs
        .iter()
        .flatten()
        .filter(|s| s.is_significant(cfg.min_count))
        .map(|s| s.instability)
        .collect();
    let theta = anomaly_threshold(&pooled, cfg.q);
    Ok(sigs
        .into_iter()
        .zip(consensus)
        .map(|(signatures, m)| {
            let anomalous = anomalous_set(&signatures, theta, cfg.min_count);
            let pruned = prune(m, &anomalous);
            InstabilityReport {
                signatures,
                theta,
                anomalous,
                pruned,
            }
        })
        .collect())
}
