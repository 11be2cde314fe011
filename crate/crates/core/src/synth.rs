//! Synthetic two-domain segmentation data.
//!
//! Labels are organic blobs arranged around the image centre in a fixed
//! class order. Features live on a coarser grid (`feature_stride`): each
//! cell mixes per-class prototype vectors by the class fractions of the
//! pixels it covers. The target domain applies a per-channel affine map to
//! the clean features before adding its own noise.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hfm::upsample_bilinear;
use crate::rng::SeededRng;
use crate::sht::{self, Payload};
use crate::tensor::{FeatureMap, LabelMap};

/// Stream index reserved for dataset-level draws (prototypes, shift).
const DATASET_STREAM: u64 = u64::MAX;
/// Side of the coarse noise grid behind each blob's boundary jitter.
const NOISE_GRID: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub feature_stride: usize,
    pub channels: usize,
    pub n_source: usize,
    pub n_target: usize,
    /// Nominal area of one blob as a fraction of the image, drawn per blob.
    pub blob_fraction: [f64; 2],
    /// Amplitude of the smoothed noise added to each blob's radial profile.
    pub roughness: f64,
    /// Distance of blob centres from the image centre, as a fraction of the size.
    pub layout_radius: f64,
    /// Per-channel gain range of the target domain.
    pub gain_range: [f64; 2],
    /// Per-channel offset range of the target domain.
    pub offset_range: [f64; 2],
    /// Std of the additive feature noise, both domains.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            image_size: 64,
            feature_stride: 4,
            channels: 16,
            n_source: 200,
            n_target: 200,
            blob_fraction: [0.04, 0.08],
            roughness: 0.3,
            layout_radius: 0.2,
            gain_range: [0.2, 5.0],
            offset_range: [-2.0, 2.0],
            noise: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v.is_power_of_two();
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes must lie in [2,255], got {}", self.num_classes)));
        }
        if !pow2(self.image_size) || !pow2(self.feature_stride) || self.feature_stride > self.image_size {
            return Err(Error::Config(format!(
                "image_size {} and feature_stride {} must be powers of two with stride <= size",
                self.image_size, self.feature_stride
            )));
        }
        if self.image_size < NOISE_GRID {
            return Err(Error::Config(format!("image_size must be at least {NOISE_GRID}")));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        let [flo, fhi] = self.blob_fraction;
        if !(flo > 0.0 && flo <= fhi && fhi < 1.0) {
            return Err(Error::Config(format!("bad blob_fraction [{flo}, {fhi}]")));
        }
        let [glo, ghi] = self.gain_range;
        if !(glo > 0.0 && glo <= ghi) {
            return Err(Error::Config(format!("gain_range must be positive and ordered, got [{glo}, {ghi}]")));
        }
        let [olo, ohi] = self.offset_range;
        if !(olo <= ohi) {
            return Err(Error::Config(format!("offset_range must be ordered, got [{olo}, {ohi}]")));
        }
        for (name, v) in [
            ("roughness", self.roughness),
            ("layout_radius", self.layout_radius),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / self.feature_stride
    }
}

/// Dataset-level quantities shared by every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    /// `prototypes[k]` is the clean feature vector of class `k`.
    pub prototypes: Vec<Vec<f64>>,
    pub gains: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl DomainShift {
    pub fn draw(cfg: &SynthConfig, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, DATASET_STREAM);
        let prototypes = (0..cfg.num_classes)
            .map(|_| (0..cfg.channels).map(|_| rng.normal()).collect())
            .collect();
        let gains = (0..cfg.channels)
            .map(|_| rng.uniform(cfg.gain_range[0], cfg.gain_range[1]))
            .collect();
        let offsets = (0..cfg.channels)
            .map(|_| rng.uniform(cfg.offset_range[0], cfg.offset_range[1]))
            .collect();
        Self {
            prototypes,
            gains,
            offsets,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub labels: LabelMap,
    pub source: FeatureMap,
    pub target: FeatureMap,
}

fn smooth_noise(size: usize, rng: &mut SeededRng) -> Vec<f64> {
    let coarse: Vec<f64> = (0..NOISE_GRID * NOISE_GRID).map(|_| rng.normal()).collect();
    let coarse = FeatureMap::from_raw(1, NOISE_GRID, NOISE_GRID, coarse);
    upsample_bilinear(&coarse, size / NOISE_GRID).into_values()
}

fn gen_labels(cfg: &SynthConfig, rng: &mut SeededRng) -> LabelMap {
    let n = cfg.image_size;
    let size = n as f64;
    let mut labels = LabelMap::filled(cfg.num_classes, n, n, 0);
    let fg = cfg.num_classes - 1;
    let cy = size / 2.0 + rng.uniform(-0.05, 0.05) * size;
    let cx = size / 2.0 + rng.uniform(-0.05, 0.05) * size;
    let rotation = rng.uniform(-0.3, 0.3);
    for k in 1..=fg {
        let angle = std::f64::consts::TAU * (k - 1) as f64 / fg as f64 + rotation;
        let dist = cfg.layout_radius * size * rng.uniform(0.85, 1.15);
        let (by, bx) = (cy + dist * angle.sin(), cx + dist * angle.cos());
        let frac = rng.uniform(cfg.blob_fraction[0], cfg.blob_fraction[1]);
        let radius = (frac * size * size / std::f64::consts::PI).sqrt();
        let noise = smooth_noise(n, rng);
        for y in 0..n {
            for x in 0..n {
                let d = ((y as f64 + 0.5 - by).powi(2) + (x as f64 + 0.5 - bx).powi(2)).sqrt();
                if 1.0 - d / radius + cfg.roughness * noise[y * n + x] > 0.0 {
                    labels.set(y, x, k as u8);
                }
            }
        }
    }
    labels
}

/// Per-cell class fractions mixed into prototype space.
fn clean_features(labels: &LabelMap, cfg: &SynthConfig, shift: &DomainShift) -> Vec<f64> {
    let s = cfg.feature_stride;
    let fs = cfg.feature_size();
    let plane = fs * fs;
    let inv = 1.0 / (s * s) as f64;
    let mut out = vec![0.0; cfg.channels * plane];
    for cy in 0..fs {
        for cx in 0..fs {
            let mut counts = vec![0usize; cfg.num_classes];
            for l in labels.block(cy * s, cx * s, s, s) {
                counts[l as usize] += 1;
            }
            for (k, &cnt) in counts.iter().enumerate().filter(|(_, &c)| c > 0) {
                let w = cnt as f64 * inv;
                for (c, &p) in shift.prototypes[k].iter().enumerate() {
                    out[c * plane + cy * fs + cx] += w * p;
                }
            }
        }
    }
    out
}

/// Stored precision; keeps in-memory and on-disk datasets identical.
fn quantize(values: Vec<f64>) -> Vec<f64> {
    values.into_iter().map(|v| v as f32 as f64).collect()
}

/// One label map with its source-domain and target-domain feature maps.
pub fn gen_sample(cfg: &SynthConfig, shift: &DomainShift, rng: &mut SeededRng) -> SynthSample {
    let labels = gen_labels(cfg, rng);
    let clean = clean_features(&labels, cfg, shift);
    let fs = cfg.feature_size();
    let plane = fs * fs;
    let source: Vec<f64> = clean.iter().map(|&v| v + cfg.noise * rng.normal()).collect();
    let target: Vec<f64> = clean
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            shift.gains[c] * (v + cfg.noise * rng.normal()) + shift.offsets[c]
        })
        .collect();
    SynthSample {
        labels,
        source: FeatureMap::from_raw(cfg.channels, fs, fs, quantize(source)),
        target: FeatureMap::from_raw(cfg.channels, fs, fs, quantize(target)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// A labelled feature map of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    pub id: String,
    pub labels: LabelMap,
    pub features: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub seed: u64,
    pub config: SynthConfig,
    pub source: Vec<DomainSample>,
    /// Target labels are for evaluation only.
    pub target: Vec<DomainSample>,
}

/// Sample `i` of the whole dataset (source first) draws from stream `i`.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    let shift = DomainShift::draw(cfg, seed);
    let total = cfg.n_source + cfg.n_target;
    let mut samples: Vec<DomainSample> = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut rng = SeededRng::derive(seed, i as u64);
            let s = gen_sample(cfg, &shift, &mut rng);
            if i < cfg.n_source {
                DomainSample {
                    id: format!("source_{i:04}"),
                    labels: s.labels,
                    features: s.source,
                }
            } else {
                DomainSample {
                    id: format!("target_{:04}", i - cfg.n_source),
                    labels: s.labels,
                    features: s.target,
                }
            }
        })
        .collect();
    let target = samples.split_off(cfg.n_source);
    Ok(SynthDataset {
        seed,
        config: cfg.clone(),
        source: samples,
        target,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub domain: Domain,
    pub label_path: String,
    pub feature_path: String,
    pub labels_eval_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `generate(cfg, seed)` under `out` and returns the manifest. Paths in the
/// manifest are relative to `out`.
pub fn gen_dataset(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<Manifest> {
    let data = generate(cfg, seed)?;
    let mut samples = Vec::with_capacity(data.source.len() + data.target.len());
    for (domain, list) in [(Domain::Source, &data.source), (Domain::Target, &data.target)] {
        let dir = match domain {
            Domain::Source => "source",
            Domain::Target => "target",
        };
        fs::create_dir_all(out.join(dir)).map_err(|e| Error::io(out.join(dir), e))?;
        for s in list {
            let label_path = format!("{dir}/{}_labels.sht", s.id);
            let feature_path = format!("{dir}/{}_features.sht", s.id);
            sht::write_tensor(&out.join(&label_path), Payload::Labels(&s.labels))?;
            sht::write_tensor(&out.join(&feature_path), Payload::Features(&s.features))?;
            samples.push(ManifestEntry {
                id: s.id.clone(),
                domain,
                label_path,
                feature_path,
                labels_eval_only: domain == Domain::Target,
            });
        }
    }
    let manifest = Manifest {
        seed,
        config: cfg.clone(),
        samples,
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.config.validate()?;
        Ok(m)
    }
}

/// Reads a dataset written by [`gen_dataset`]. `path` is the manifest file or
/// its directory.
pub fn load_dataset(path: &Path) -> Result<SynthDataset> {
    let (root, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_else(PathBuf::new);
        (root, path.to_path_buf())
    };
    let manifest = Manifest::load(&file)?;
    let k = manifest.config.num_classes;
    let mut source = Vec::new();
    let mut target = Vec::new();
    for e in &manifest.samples {
        let s = DomainSample {
            id: e.id.clone(),
            labels: sht::read_labels(&root.join(&e.label_path), Some(k))?,
            features: sht::read_features(&root.join(&e.feature_path))?,
        };
        if s.features.channels() != manifest.config.channels {
            return Err(Error::shape(format!(
                "{}: {} channels, manifest says {}",
                e.feature_path,
                s.features.channels(),
                manifest.config.channels
            )));
        }
        match e.domain {
            Domain::Source => source.push(s),
            Domain::Target => target.push(s),
        }
    }
    Ok(SynthDataset {
        seed: manifest.seed,
        config: manifest.config,
        source,
        target,
    })
}
