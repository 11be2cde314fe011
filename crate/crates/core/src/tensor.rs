//! Dense feature maps, probability volumes and hard label masks.
//!
//! All grids are stored C-order (slowest dimension first) in `f64`
//! (`u8` for labels).

use crate::error::{Error, Result};

/// Label value marking pixels excluded from supervision and scoring.
pub const IGNORE: u8 = 255;

/// Tolerance on per-pixel probability sums.
pub const PROB_SUM_TOL: f64 = 1e-5;

/// A `C x H x W` grid of finite activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "feature map dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature value at index {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0 && value.is_finite());
        Self {
            channels,
            height,
            width,
            values: vec![value; channels * height * width],
        }
    }

    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            values,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Channel vector at one spatial position.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        let n = self.plane_len();
        let p = y * self.width + x;
        (0..self.channels).map(|c| self.values[c * n + p]).collect()
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A `K x H x W` per-pixel class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    num_classes: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ProbMap {
    /// Validates value range and per-pixel normalization.
    pub fn new(num_classes: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if num_classes < 2 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "prob map needs K >= 2 and positive spatial dims, got {num_classes}x{height}x{width}"
            )));
        }
        if values.len() != num_classes * height * width {
            return Err(Error::shape(format!(
                "prob map {num_classes}x{height}x{width} needs {} values, got {}",
                num_classes * height * width,
                values.len()
            )));
        }
        let map = Self {
            num_classes,
            height,
            width,
            values,
        };
        map.validate()?;
        Ok(map)
    }

    pub(crate) fn from_raw(num_classes: usize, height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), num_classes * height * width);
        Self {
            num_classes,
            height,
            width,
            values,
        }
    }

    /// Encodes a label map as a one-hot volume. IGNORE pixels become uniform.
    pub fn one_hot(labels: &LabelMap) -> Self {
        let k = labels.num_classes();
        let n = labels.len();
        let mut values = vec![0.0; k * n];
        for (p, &l) in labels.values().iter().enumerate() {
            if l == IGNORE {
                for c in 0..k {
                    values[c * n + p] = 1.0 / k as f64;
                }
            } else {
                values[l as usize * n + p] = 1.0;
            }
        }
        Self::from_raw(k, labels.height(), labels.width(), values)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.plane_len();
        for p in 0..n {
            let mut sum = 0.0;
            for c in 0..self.num_classes {
                let v = self.values[c * n + p];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!(
                        "probability {v} out of [0,1] at class {c}, pixel {p}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::invalid(format!(
                    "probabilities at pixel {p} sum to {sum}"
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.num_classes, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn class_plane(&self, k: usize) -> &[f64] {
        let n = self.plane_len();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, p: usize) -> f64 {
        self.values[k * self.plane_len() + p]
    }

    /// Class distribution at flat pixel index `p`.
    pub fn pixel(&self, p: usize) -> Vec<f64> {
        let n = self.plane_len();
        (0..self.num_classes).map(|k| self.values[k * n + p]).collect()
    }
}

/// An `H x W` hard mask over classes `0..K` plus [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    num_classes: usize,
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl LabelMap {
    pub fn new(num_classes: usize, height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if !(2..=255).contains(&num_classes) || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "label map needs 2 <= K <= 255 and positive dims, got K={num_classes}, {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v != IGNORE && v as usize >= num_classes) {
            return Err(Error::invalid(format!(
                "label value {v} not below K={num_classes}"
            )));
        }
        Ok(Self {
            num_classes,
            height,
            width,
            values,
        })
    }

    pub fn filled(num_classes: usize, height: usize, width: usize, value: u8) -> Self {
        Self::new(num_classes, height, width, vec![value; height * width])
            .expect("filled label map must be valid")
    }

    pub(crate) fn from_raw(num_classes: usize, height: usize, width: usize, values: Vec<u8>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        Self {
            num_classes,
            height,
            width,
            values,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        assert!(v == IGNORE || (v as usize) < self.num_classes);
        self.values[y * self.width + x] = v;
    }

    /// Number of pixels equal to `k`.
    pub fn count(&self, k: u8) -> usize {
        self.values.iter().filter(|&&v| v == k).count()
    }

    /// Copy of the `rows x cols` block whose top-left corner is `(y0, x0)`.
    pub fn block(&self, y0: usize, x0: usize, rows: usize, cols: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(rows * cols);
        for y in y0..y0 + rows {
            out.extend_from_slice(&self.values[y * self.width + x0..y * self.width + x0 + cols]);
        }
        out
    }
}

/// Aligned predictions of one sample under several feature views.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionEnsemble {
    members: Vec<ProbMap>,
}

impl PredictionEnsemble {
    pub fn new(members: Vec<ProbMap>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::invalid(format!(
                "ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let shape = members[0].shape();
        if let Some(m) = members.iter().find(|m| m.shape() != shape) {
            return Err(Error::shape(format!(
                "ensemble member shape {:?} differs from {:?}",
                m.shape(),
                shape
            )));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[ProbMap] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.members[0].shape()
    }

    pub fn mean(&self) -> ProbMap {
        let first = &self.members[0];
        let scale = 1.0 / self.members.len() as f64;
        let mut values = vec![0.0; first.values().len()];
        for m in &self.members {
            for (acc, v) in values.iter_mut().zip(m.values()) {
                *acc += v;
            }
        }
        values.iter_mut().for_each(|v| *v *= scale);
        let (k, h, w) = first.shape();
        ProbMap::from_raw(k, h, w, values)
    }

    /// Argmax of the ensemble mean.
    pub fn consensus(&self) -> LabelMap {
        argmax_map(&self.mean())
    }

    pub fn hard_members(&self) -> Vec<LabelMap> {
        self.members.iter().map(argmax_map).collect()
    }
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn argmax_map(p: &ProbMap) -> LabelMap {
    let n = p.plane_len();
    let k = p.num_classes();
    let values = (0..n)
        .map(|px| {
            let mut best = 0;
            let mut best_v = p.values[px];
            for c in 1..k {
                let v = p.values[c * n + px];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::from_raw(k, p.height(), p.width(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pm(k: usize, pixels: &[&[f64]]) -> ProbMap {
        let n = pixels.len();
        let mut values = vec![0.0; k * n];
        for (p, dist) in pixels.iter().enumerate() {
            for c in 0..k {
                values[c * n + p] = dist[c];
            }
        }
        ProbMap::new(k, 1, n, values).unwrap()
    }

    #[test]
    fn argmax_recovers_one_hot() {
        let labels = LabelMap::new(3, 2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        assert_eq!(argmax_map(&ProbMap::one_hot(&labels)), labels);
    }

    #[test]
    fn argmax_tie_and_strict_max() {
        let p = pm(4, &[&[0.25, 0.25, 0.25, 0.25]]);
        assert_eq!(argmax_map(&p).values(), &[0]);
        let p = pm(3, &[&[0.1, 0.6, 0.3]]);
        assert_eq!(argmax_map(&p).values(), &[1]);
    }

    #[test]
    fn prob_map_rejects_bad_sums() {
        let err = ProbMap::new(2, 1, 1, vec![0.5, 0.6]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(ProbMap::new(2, 1, 1, vec![1.2, -0.2]).is_err());
    }

    #[test]
    fn label_map_rejects_out_of_range() {
        assert!(LabelMap::new(3, 1, 2, vec![0, 3]).is_err());
        assert!(LabelMap::new(3, 1, 2, vec![0, IGNORE]).is_ok());
        assert!(LabelMap::new(1, 1, 1, vec![0]).is_err());
    }

    #[test]
    fn feature_map_rejects_nan() {
        assert!(FeatureMap::new(1, 1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(FeatureMap::new(1, 1, 2, vec![0.0]).is_err());
    }

    #[test]
    fn ensemble_shape_checks() {
        let a = pm(2, &[&[1.0, 0.0]]);
        let b = pm(3, &[&[1.0, 0.0, 0.0]]);
        assert!(PredictionEnsemble::new(vec![a.clone()]).is_err());
        assert!(PredictionEnsemble::new(vec![a.clone(), b]).is_err());
        assert!(PredictionEnsemble::new(vec![a.clone(), a]).is_ok());
    }

    proptest! {
        #[test]
        fn argmax_permutation_equivariant(
            raw in prop::collection::vec(0.01f64..1.0, 4 * 6),
            perm_seed in 0u64..1000,
        ) {
            let k = 4;
            let n = 6;
            let mut values = raw.clone();
            for p in 0..n {
                let s: f64 = (0..k).map(|c| raw[c * n + p]).sum();
                for c in 0..k { values[c * n + p] = raw[c * n + p] / s; }
            }
            let p = ProbMap::new(k, 2, 3, values.clone()).unwrap();
            let mut perm: Vec<usize> = (0..k).collect();
            crate::rng::SeededRng::new(perm_seed).shuffle(&mut perm);
            // plane c of the permuted map is plane perm[c] of the original
            let mut pv = vec![0.0; values.len()];
            for c in 0..k {
                pv[c * n..(c + 1) * n].copy_from_slice(&values[perm[c] * n..(perm[c] + 1) * n]);
            }
            let permuted = ProbMap::new(k, 2, 3, pv).unwrap();
            let mut inverse = vec![0u8; k];
            for (c, &o) in perm.iter().enumerate() { inverse[o] = c as u8; }
            let a = argmax_map(&p);
            let b = argmax_map(&permuted);
            // continuous draws have no ties, so relabeling commutes exactly
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert_eq!(inverse[*x as usize], *y);
            }
        }
    }
}
