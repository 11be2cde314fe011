//! Hierarchical feature modulation.
//!
//! Two granularities of cross-domain restyling:
//!
//! * global: AdaIN swaps per-channel mean/std between domains;
//! * local: features are upsampled, unfolded into tokens, and each token is
//!   classified by the purity of the label sub-patch under it. Pure tokens
//!   are convexly mixed with a representative same-class token of the other
//!   domain, boundary (impure) tokens are restyled with interpolated
//!   boundary statistics.
//!
//! Every output map passes through the encoder's final layer norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{FeatureMap, LabelMap, IGNORE};

/// How the mixing factor is chosen for each forward call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSource {
    /// One draw from `U[0, 1]` per call.
    Uniform,
    Fixed(f64),
}

impl LambdaSource {
    pub fn draw(&self, rng: &mut SeededRng) -> f64 {
        match *self {
            LambdaSource::Uniform => rng.next_f64(),
            LambdaSource::Fixed(l) => l,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HfmConfig {
    /// A token is pure when its patch purity is at least this value.
    pub tau_p: f64,
    pub upsample_factor: usize,
    /// Fraction of each class pool, closest to the class mean, eligible as exemplars.
    pub pool_fraction: f64,
    pub epsilon: f64,
    pub lambda: LambdaSource,
}

impl Default for HfmConfig {
    fn default() -> Self {
        Self {
            tau_p: 1.0,
            upsample_factor: 2,
            pool_fraction: 0.1,
            epsilon: 1e-5,
            lambda: LambdaSource::Uniform,
        }
    }
}

impl HfmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_p >= 0.0 && self.tau_p <= 1.0) {
            return Err(Error::Config(format!("tau_p must lie in [0,1], got {}", self.tau_p)));
        }
        if self.upsample_factor == 0 {
            return Err(Error::Config("upsample_factor must be >= 1".into()));
        }
        if !(self.pool_fraction > 0.0 && self.pool_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "pool_fraction must lie in (0,1], got {}",
                self.pool_fraction
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if let LambdaSource::Fixed(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("fixed lambda must lie in [0,1], got {l}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            offset: vec![0.0; channels],
            eps: 1e-6,
        }
    }
}

/// Per-channel mean and population standard deviation over all positions.
pub fn channel_stats(f: &FeatureMap) -> ChannelStats {
    let n = f.plane_len() as f64;
    let (mean, std) = (0..f.channels())
        .map(|c| {
            let plane = f.channel(c);
            let m = plane.iter().sum::<f64>() / n;
            let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            (m, var.sqrt())
        })
        .unzip();
    ChannelStats { mean, std }
}

/// Restyles `source` with the channel statistics of `target`.
pub fn adain(source: &FeatureMap, target: &FeatureMap, eps: f64) -> Result<FeatureMap> {
    if source.channels() != target.channels() {
        return Err(Error::shape(format!(
            "adain channel mismatch: {} vs {}",
            source.channels(),
            target.channels()
        )));
    }
    let s = channel_stats(source);
    let t = channel_stats(target);
    let mut out = source.clone();
    for c in 0..source.channels() {
        let gain = t.std[c] / (s.std[c] + eps);
        let (ms, mt) = (s.mean[c], t.mean[c]);
        for v in out.channel_mut(c) {
            *v = gain * (*v - ms) + mt;
        }
    }
    Ok(out)
}

/// Source coordinate and neighbour weights for one output index
/// (half-pixel centres, clamped at the borders).
pub(crate) fn bilinear_tap(dst: usize, factor: usize, len: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear upsampling by an integer factor, align-corners-false.
pub fn upsample_bilinear(f: &FeatureMap, factor: usize) -> FeatureMap {
    assert!(factor >= 1, "upsample factor must be >= 1");
    if factor == 1 {
        return f.clone();
    }
    let (c, h, w) = f.shape();
    let (oh, ow) = (h * factor, w * factor);
    let rows: Vec<_> = (0..oh).map(|y| bilinear_tap(y, factor, h)).collect();
    let cols: Vec<_> = (0..ow).map(|x| bilinear_tap(x, factor, w)).collect();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut horiz = vec![0.0; h * ow];
    for ch in 0..c {
        let plane = f.channel(ch);
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            for (dst, &(x0, x1, fx)) in horiz[y * ow..(y + 1) * ow].iter_mut().zip(&cols) {
                *dst = src[x0] * (1.0 - fx) + src[x1] * fx;
            }
        }
        for &(y0, y1, fy) in &rows {
            let top = &horiz[y0 * ow..(y0 + 1) * ow];
            let bot = &horiz[y1 * ow..(y1 + 1) * ow];
            out.extend(top.iter().zip(bot).map(|(&a, &b)| a * (1.0 - fy) + b * fy));
        }
    }
    FeatureMap::from_raw(c, oh, ow, out)
}

/// Mean over non-overlapping `factor x factor` blocks.
pub fn avg_pool(f: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    let (c, h, w) = f.shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} map not divisible by pooling factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let scale = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = f.channel(ch);
        for y in 0..h {
            for x in 0..w {
                out[(ch * oh + y / factor) * ow + x / factor] += plane[y * w + x] * scale;
            }
        }
    }
    Ok(FeatureMap::from_raw(c, oh, ow, out))
}

/// Tokens of a feature map, one per spatial position, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    channels: usize,
    grid_h: usize,
    grid_w: usize,
    /// Edge length of the label block aligned with each token.
    patch_px: usize,
    tokens: Vec<f64>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn patch_px(&self) -> usize {
        self.patch_px
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.channels..(i + 1) * self.channels]
    }

    pub fn token_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tokens[i * self.channels..(i + 1) * self.channels]
    }

    /// The label block under token `i`.
    pub fn label_patch(&self, labels: &LabelMap, i: usize) -> Vec<u8> {
        let (r, c) = (i / self.grid_w, i % self.grid_w);
        labels.block(r * self.patch_px, c * self.patch_px, self.patch_px, self.patch_px)
    }
}

/// Splits `f` into per-position tokens aligned to a label map of
/// `label_h x label_w` pixels.
pub fn unfold(f: &FeatureMap, label_h: usize, label_w: usize) -> Result<TokenGrid> {
    let (c, h, w) = f.shape();
    if label_h % h != 0 || label_w % w != 0 || label_h / h != label_w / w {
        return Err(Error::shape(format!(
            "label {label_h}x{label_w} does not tile evenly onto a {h}x{w} token grid"
        )));
    }
    let n = h * w;
    let src = f.values();
    let mut tokens = Vec::with_capacity(n * c);
    for p in 0..n {
        tokens.extend((0..c).map(|ch| src[ch * n + p]));
    }
    Ok(TokenGrid {
        channels: c,
        grid_h: h,
        grid_w: w,
        patch_px: label_h / h,
        tokens,
    })
}

pub fn fold(t: &TokenGrid) -> FeatureMap {
    let (c, n) = (t.channels, t.len());
    let mut values = Vec::with_capacity(c * n);
    for ch in 0..c {
        values.extend((0..n).map(|p| t.tokens[p * c + ch]));
    }
    FeatureMap::from_raw(c, t.grid_h, t.grid_w, values)
}

/// Majority class of a patch (lowest index on ties) and its purity.
/// IGNORE pixels are not counted; an all-IGNORE patch has purity 0.
pub fn patch_purity(patch: &[u8], num_classes: usize) -> (u8, f64) {
    // patches are tiny; keep the common small-K case off the heap
    let mut small = [0usize; 16];
    let mut large = Vec::new();
    let counts: &mut [usize] = if num_classes <= small.len() {
        &mut small[..num_classes]
    } else {
        large.resize(num_classes, 0);
        &mut large
    };
    let mut valid = 0usize;
    for &v in patch {
        if v != IGNORE {
            counts[v as usize] += 1;
            valid += 1;
        }
    }
    if valid == 0 {
        return (IGNORE, 0.0);
    }
    let (best, &n) = counts
        .iter()
        .enumerate()
        .rev()
        .max_by_key(|&(_, n)| n)
        .expect("num_classes >= 1");
    (best as u8, n as f64 / valid as f64)
}

pub fn purity(patch: &[u8], num_classes: usize) -> f64 {
    patch_purity(patch, num_classes).1
}

/// Indices with purity at least `tau_p`, and the rest.
pub fn partition_tokens(purities: &[f64], tau_p: f64) -> (Vec<usize>, Vec<usize>) {
    (0..purities.len()).partition(|&i| purities[i] >= tau_p)
}

/// Per-class exemplar candidates, nearest-to-class-mean first.
#[derive(Debug, Clone, Default)]
pub struct ExemplarPools {
    per_class: Vec<Vec<Vec<f64>>>,
}

impl ExemplarPools {
    /// Groups `tokens[i]` for `i` in `pure` by `classes[i]` and keeps the
    /// `ceil(pool_fraction * n)` tokens nearest each class mean.
    pub fn build(
        tokens: &TokenGrid,
        pure: &[usize],
        classes: &[u8],
        num_classes: usize,
        pool_fraction: f64,
    ) -> Self {
        let c = tokens.channels();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for &i in pure {
            if classes[i] != IGNORE {
                members[classes[i] as usize].push(i);
            }
        }
        let per_class = members
            .into_iter()
            .map(|idx| {
                if idx.is_empty() {
                    return Vec::new();
                }
                let mut centre = vec![0.0; c];
                for &i in &idx {
                    for (m, v) in centre.iter_mut().zip(tokens.token(i)) {
                        *m += v;
                    }
                }
                centre.iter_mut().for_each(|m| *m /= idx.len() as f64);
                let mut ranked: Vec<(f64, usize)> = idx
                    .iter()
                    .map(|&i| {
                        let d2 = tokens
                            .token(i)
                            .iter()
                            .zip(&centre)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>();
                        (d2, i)
                    })
                    .collect();
                ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let keep = ((pool_fraction * idx.len() as f64).ceil() as usize).clamp(1, idx.len());
                ranked[..keep]
                    .iter()
                    .map(|&(_, i)| tokens.token(i).to_vec())
                    .collect()
            })
            .collect();
        Self { per_class }
    }

    pub fn from_pools(per_class: Vec<Vec<Vec<f64>>>) -> Self {
        Self { per_class }
    }

    pub fn pool(&self, class: u8) -> &[Vec<f64>] {
        self.per_class
            .get(class as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// Convex mix of a pure source token with a uniformly drawn exemplar of the
/// same class. No exemplar: the token passes through unchanged and no
/// randomness is consumed.
pub fn modulate_pure(
    source: &[f64],
    class: u8,
    pools: &ExemplarPools,
    lambda: f64,
    rng: &mut SeededRng,
) -> Vec<f64> {
    let pool = pools.pool(class);
    if pool.is_empty() {
        return source.to_vec();
    }
    let exemplar = &pool[rng.below(pool.len())];
    source
        .iter()
        .zip(exemplar)
        .map(|(s, t)| (1.0 - lambda) * s + lambda * t)
        .collect()
}

/// Per-channel mean and population std over a token set.
pub fn token_set_stats(tokens: &[Vec<f64>], channels: usize) -> ChannelStats {
    let n = tokens.len().max(1) as f64;
    let mut mean = vec![0.0; channels];
    for t in tokens {
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; channels];
    for t in tokens {
        for ((s, v), m) in var.iter_mut().zip(t).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    ChannelStats { mean, std }
}

/// Restyles boundary tokens with statistics interpolated between the source
/// and target boundary sets.
pub fn modulate_impure(
    source: &[Vec<f64>],
    target: &[Vec<f64>],
    lambda: f64,
    eps: f64,
) -> Vec<Vec<f64>> {
    if source.is_empty() {
        return Vec::new();
    }
    let c = source[0].len();
    let s = token_set_stats(source, c);
    let (mix_mean, mix_std) = if target.is_empty() {
        (s.mean.clone(), s.std.clone())
    } else {
        let t = token_set_stats(target, c);
        (
            (0..c).map(|i| (1.0 - lambda) * s.mean[i] + lambda * t.mean[i]).collect(),
            (0..c).map(|i| (1.0 - lambda) * s.std[i] + lambda * t.std[i]).collect::<Vec<_>>(),
        )
    };
    source
        .iter()
        .map(|tok| {
            (0..c)
                .map(|i| mix_std[i] * (tok[i] - s.mean[i]) / (s.std[i] + eps) + mix_mean[i])
                .collect()
        })
        .collect()
}

/// Normalizes each position's channel vector, then applies scale and offset.
pub fn layer_norm(f: &FeatureMap, p: &LayerNormParams) -> Result<FeatureMap> {
    let (c, h, w) = f.shape();
    if p.scale.len() != c || p.offset.len() != c {
        return Err(Error::shape(format!(
            "layer norm params have {} / {} entries for {c} channels",
            p.scale.len(),
            p.offset.len()
        )));
    }
    let n = h * w;
    let src = f.values();
    let mut out = vec![0.0; src.len()];
    for pos in 0..n {
        let mut mean = 0.0;
        for ch in 0..c {
            mean += src[ch * n + pos];
        }
        mean /= c as f64;
        let mut var = 0.0;
        for ch in 0..c {
            let d = src[ch * n + pos] - mean;
            var += d * d;
        }
        let inv = 1.0 / (var / c as f64 + p.eps).sqrt();
        for ch in 0..c {
            out[ch * n + pos] = (src[ch * n + pos] - mean) * inv * p.scale[ch] + p.offset[ch];
        }
    }
    Ok(FeatureMap::from_raw(c, h, w, out))
}

/// Token-level view of one domain used by the local branch.
struct TokenView {
    grid: TokenGrid,
    classes: Vec<u8>,
    pure: Vec<usize>,
    impure: Vec<usize>,
}

impl TokenView {
    fn new(f: &FeatureMap, labels: &LabelMap, cfg: &HfmConfig) -> Result<Self> {
        let up = upsample_bilinear(f, cfg.upsample_factor);
        let grid = unfold(&up, labels.height(), labels.width())?;
        let (classes, purities): (Vec<u8>, Vec<f64>) = (0..grid.len())
            .map(|i| patch_purity(&grid.label_patch(labels, i), labels.num_classes()))
            .unzip();
        let (pure, impure) = partition_tokens(&purities, cfg.tau_p);
        Ok(Self {
            grid,
            classes,
            pure,
            impure,
        })
    }

    fn impure_tokens(&self) -> Vec<Vec<f64>> {
        self.impure.iter().map(|&i| self.grid.token(i).to_vec()).collect()
    }
}

/// Local class-aware modulation of `src` towards `other`.
///
/// The displacement applied to the upsampled tokens is pooled back to the
/// input resolution and added to `f`, so unmodified tokens leave `f` intact.
fn cross_modulate(
    f: &FeatureMap,
    src: &TokenView,
    other: &TokenView,
    num_classes: usize,
    cfg: &HfmConfig,
    lambda: f64,
    rng: &mut SeededRng,
) -> Result<FeatureMap> {
    let pools = ExemplarPools::build(
        &other.grid,
        &other.pure,
        &other.classes,
        num_classes,
        cfg.pool_fraction,
    );
    let mut modulated = src.grid.clone();
    for &i in &src.pure {
        let mixed = modulate_pure(src.grid.token(i), src.classes[i], &pools, lambda, rng);
        modulated.token_mut(i).copy_from_slice(&mixed);
    }
    let restyled = modulate_impure(&src.impure_tokens(), &other.impure_tokens(), lambda, cfg.epsilon);
    for (&i, tok) in src.impure.iter().zip(restyled) {
        modulated.token_mut(i).copy_from_slice(&tok);
    }
    let mut delta = modulated;
    for (d, s) in delta.tokens.iter_mut().zip(&src.grid.tokens) {
        *d -= s;
    }
    let pooled = avg_pool(&fold(&delta), cfg.upsample_factor)?;
    let values = f
        .values()
        .iter()
        .zip(pooled.values())
        .map(|(a, b)| a + b)
        .collect();
    Ok(FeatureMap::from_raw(f.channels(), f.height(), f.width(), values))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HfmOutput {
    pub s_to_t: FeatureMap,
    pub s_cross: FeatureMap,
    pub t_to_s: FeatureMap,
    pub t_cross: FeatureMap,
    pub lambda: f64,
    pub source_pure: usize,
    pub target_pure: usize,
}

/// Builds the four modulated maps of a source/target pair.
///
/// `target_labels` are teacher pseudo-labels. Randomness is consumed in a
/// fixed order: lambda, source-side exemplar draws, target-side draws.
pub fn hfm_forward(
    source: &FeatureMap,
    source_labels: &LabelMap,
    target: &FeatureMap,
    target_labels: &LabelMap,
    cfg: &HfmConfig,
    norm: &LayerNormParams,
    rng: &mut SeededRng,
) -> Result<HfmOutput> {
    if source.channels() != target.channels() {
        return Err(Error::shape(format!(
            "source has {} channels, target {}",
            source.channels(),
            target.channels()
        )));
    }
    if source_labels.num_classes() != target_labels.num_classes() {
        return Err(Error::shape("source and target label maps disagree on K"));
    }
    let k = source_labels.num_classes();
    let lambda = cfg.lambda.draw(rng);

    let s_to_t = adain(source, target, cfg.epsilon)?;
    let t_to_s = adain(target, source, cfg.epsilon)?;

    let sv = TokenView::new(source, source_labels, cfg)?;
    let tv = TokenView::new(target, target_labels, cfg)?;
    let s_cross = cross_modulate(source, &sv, &tv, k, cfg, lambda, rng)?;
    let t_cross = cross_modulate(target, &tv, &sv, k, cfg, lambda, rng)?;

    Ok(HfmOutput {
        s_to_t: layer_norm(&s_to_t, norm)?,
        s_cross: layer_norm(&s_cross, norm)?,
        t_to_s: layer_norm(&t_to_s, norm)?,
        t_cross: layer_norm(&t_cross, norm)?,
        lambda,
        source_pure: sv.pure.len(),
        target_pure: tv.pure.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_map(rng: &mut SeededRng, c: usize, h: usize, w: usize, scale: f64, shift: f64) -> FeatureMap {
        let values = (0..c * h * w).map(|_| rng.normal() * scale + shift).collect();
        FeatureMap::new(c, h, w, values).unwrap()
    }

    /// Two-pass oracle written independently of `channel_stats`.
    fn two_pass(f: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for c in 0..f.channels() {
            let mut sum = 0.0;
            for y in 0..f.height() {
                for x in 0..f.width() {
                    sum += f.get(c, y, x);
                }
            }
            let m = sum / (f.height() * f.width()) as f64;
            let mut ss = 0.0;
            for y in 0..f.height() {
                for x in 0..f.width() {
                    ss += (f.get(c, y, x) - m).powi(2);
                }
            }
            means.push(m);
            stds.push((ss / (f.height() * f.width()) as f64).sqrt());
        }
        (means, stds)
    }

    #[test]
    fn stats_of_simple_channels() {
        let f = FeatureMap::new(2, 1, 4, vec![5.0, 5.0, 5.0, 5.0, -1.0, 1.0, -1.0, 1.0]).unwrap();
        let s = channel_stats(&f);
        assert_eq!(s.mean, vec![5.0, 0.0]);
        assert_eq!(s.std, vec![0.0, 1.0]);
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let mut rng = SeededRng::new(21);
        let f = random_map(&mut rng, 64, 32, 32, 2.0, 0.7);
        let s = channel_stats(&f);
        let (m, sd) = two_pass(&f);
        for c in 0..64 {
            assert!((s.mean[c] - m[c]).abs() < 1e-6);
            assert!((s.std[c] - sd[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn adain_self_identity_and_target_stats() {
        let mut rng = SeededRng::new(1);
        let src = random_map(&mut rng, 3, 8, 8, 4.0, 2.0);
        let same = adain(&src, &src, 1e-5).unwrap();
        assert!(same.max_abs_diff(&src) < 1e-4);

        let tgt = random_map(&mut rng, 3, 5, 6, 1.0, 0.0);
        let out = adain(&src, &tgt, 1e-5).unwrap();
        assert_eq!(out.shape(), src.shape());
        let (so, st) = (channel_stats(&out), channel_stats(&tgt));
        for c in 0..3 {
            assert!((so.mean[c] - st.mean[c]).abs() < 1e-4);
            assert!((so.std[c] - st.std[c]).abs() < 1e-4);
        }
    }

    #[test]
    fn adain_degenerate_channel() {
        let src = FeatureMap::filled(1, 4, 4, 3.0);
        let tgt = FeatureMap::new(1, 1, 2, vec![1.0, 3.0]).unwrap();
        let out = adain(&src, &tgt, 1e-5).unwrap();
        assert!(out.values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn adain_channel_mismatch() {
        let a = FeatureMap::zeros(2, 2, 2);
        let b = FeatureMap::zeros(3, 2, 2);
        assert!(matches!(adain(&a, &b, 1e-5), Err(Error::Shape(_))));
    }

    #[test]
    fn upsample_identity_and_constant() {
        let mut rng = SeededRng::new(2);
        let f = random_map(&mut rng, 2, 3, 5, 1.0, 0.0);
        assert_eq!(upsample_bilinear(&f, 1), f);
        let k = FeatureMap::filled(2, 3, 3, 1.25);
        let up = upsample_bilinear(&k, 3);
        assert_eq!(up.shape(), (2, 9, 9));
        assert!(up.values().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn upsample_ramp_matches_hand_oracle() {
        // v(r, c) = 2r + c on a 2x2 grid; with half-pixel centres the output
        // rows/cols sample the source at clamp((i + 0.5) / 2 - 0.5, 0, 1).
        let f = FeatureMap::new(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = upsample_bilinear(&f, 2);
        let coord = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let expect = 2.0 * coord[y] + coord[x];
                assert!((up.get(0, y, x) - expect).abs() < 1e-15, "({y},{x})");
            }
        }
    }

    #[test]
    fn unfold_fold_contracts() {
        let f = FeatureMap::new(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let t = unfold(&f, 2, 2).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.token(0), &[1.0, 5.0]);
        assert_eq!(t.token(1), &[2.0, 6.0]);
        assert_eq!(t.token(3), &[4.0, 8.0]);
        assert_eq!(fold(&t), f);

        let big = FeatureMap::zeros(1, 32, 32);
        assert_eq!(unfold(&big, 256, 256).unwrap().patch_px(), 8);
        assert!(matches!(unfold(&big, 100, 100), Err(Error::Shape(_))));
        assert!(unfold(&big, 64, 128).is_err());
    }

    #[test]
    fn purity_cases() {
        assert_eq!(purity(&[3; 16], 4), 1.0);
        let mut patch = vec![2u8; 12];
        patch.extend([0u8; 4]);
        assert_eq!(purity(&patch, 4), 0.75);
        assert_eq!(purity(&[IGNORE; 9], 4), 0.0);
        assert_eq!(patch_purity(&[1, 1, IGNORE, IGNORE], 3), (1, 1.0));
        assert_eq!(patch_purity(&[2, 1], 3), (1, 0.5));
    }

    #[test]
    fn partition_cases() {
        let (p, i) = partition_tokens(&[1.0, 0.75, 1.0], 1.0);
        assert_eq!(p, vec![0, 2]);
        assert_eq!(i, vec![1]);
        let (p, i) = partition_tokens(&[0.0, 0.3, 1.0], 0.0);
        assert_eq!(p.len(), 3);
        assert!(i.is_empty());
        let (p, i) = partition_tokens(&[], 0.5);
        assert!(p.is_empty() && i.is_empty());
    }

    #[test]
    fn pure_mixing_endpoints() {
        let pools = ExemplarPools::from_pools(vec![vec![], vec![vec![0.0, 2.0]]]);
        let mut rng = SeededRng::new(0);
        assert_eq!(modulate_pure(&[2.0, 0.0], 1, &pools, 0.0, &mut rng), vec![2.0, 0.0]);
        assert_eq!(modulate_pure(&[2.0, 0.0], 1, &pools, 1.0, &mut rng), vec![0.0, 2.0]);
        assert_eq!(modulate_pure(&[2.0, 0.0], 1, &pools, 0.5, &mut rng), vec![1.0, 1.0]);
        // empty pool passes through
        assert_eq!(modulate_pure(&[2.0, 0.0], 0, &pools, 0.5, &mut rng), vec![2.0, 0.0]);
    }

    #[test]
    fn exemplar_pool_keeps_nearest_fraction() {
        // class 1 tokens at 0, 1, 2, ..., 9 on a line; mean 4.5
        let values: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let f = FeatureMap::new(1, 1, 10, values).unwrap();
        let grid = unfold(&f, 1, 10).unwrap();
        let pure: Vec<usize> = (0..10).collect();
        let classes = vec![1u8; 10];
        let pools = ExemplarPools::build(&grid, &pure, &classes, 2, 0.2);
        assert_eq!(pools.pool(1), &[vec![4.0], vec![5.0]]);
        assert!(pools.pool(0).is_empty());
        let pools = ExemplarPools::build(&grid, &pure, &classes, 2, 0.05);
        assert_eq!(pools.pool(1).len(), 1);
    }

    #[test]
    fn impure_identity_and_target_stats() {
        let mut rng = SeededRng::new(8);
        let src: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.normal() * 2.0 + 1.0).collect()).collect();
        let tgt: Vec<Vec<f64>> = (0..25).map(|_| (0..3).map(|_| rng.normal() * 0.5 - 3.0).collect()).collect();
        let same = modulate_impure(&src, &tgt, 0.0, 1e-5);
        for (a, b) in same.iter().zip(&src) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-4);
            }
        }
        let out = modulate_impure(&src, &tgt, 1.0, 1e-5);
        let (so, st) = (token_set_stats(&out, 3), token_set_stats(&tgt, 3));
        for c in 0..3 {
            assert!((so.mean[c] - st.mean[c]).abs() < 1e-4);
            assert!((so.std[c] - st.std[c]).abs() < 1e-4);
        }
        // no target boundary: identity
        let alone = modulate_impure(&src, &[], 0.7, 1e-5);
        assert!((alone[3][1] - src[3][1]).abs() < 1e-4);
        // single token: zero spread stays finite
        let one = modulate_impure(&[vec![1.0, 2.0]], &tgt[..2], 0.5, 1e-5);
        assert!(one[0].iter().all(|v| v.is_finite()));
        assert!(modulate_impure(&[], &tgt, 0.5, 1e-5).is_empty());
    }

    #[test]
    fn layer_norm_cases() {
        let p = LayerNormParams::identity(2);
        let f = FeatureMap::new(2, 1, 1, vec![1.0, -1.0]).unwrap();
        assert!(layer_norm(&f, &p).unwrap().max_abs_diff(&f) < 1e-6);
        let konst = FeatureMap::filled(3, 2, 2, 4.0);
        let p3 = LayerNormParams {
            scale: vec![2.0, 2.0, 2.0],
            offset: vec![0.5, -0.5, 1.0],
            eps: 1e-6,
        };
        let out = layer_norm(&konst, &p3).unwrap();
        for pos in 0..4 {
            assert_eq!(out.pixel(pos / 2, pos % 2), vec![0.5, -0.5, 1.0]);
        }
        let mut rng = SeededRng::new(4);
        let r = random_map(&mut rng, 3, 2, 2, 1.0, 0.0);
        let zero = LayerNormParams {
            scale: vec![0.0; 3],
            offset: vec![0.1, 0.2, 0.3],
            eps: 1e-6,
        };
        let out = layer_norm(&r, &zero).unwrap();
        assert_eq!(out.pixel(1, 1), vec![0.1, 0.2, 0.3]);
        assert!(layer_norm(&r, &p).is_err());
    }

    fn blob_labels(k: usize, h: usize, w: usize) -> LabelMap {
        let mut values = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                if y >= h / 4 && y < h / 2 && x >= w / 4 && x < 3 * w / 4 {
                    values[y * w + x] = 1;
                }
                if y >= h / 2 + 1 && x < w / 3 {
                    values[y * w + x] = (k - 1) as u8;
                }
            }
        }
        LabelMap::new(k, h, w, values).unwrap()
    }

    #[test]
    fn forward_identity_with_zero_lambda() {
        let mut rng = SeededRng::new(12);
        let f = random_map(&mut rng, 8, 8, 8, 1.5, 0.3);
        let labels = blob_labels(3, 32, 32);
        let cfg = HfmConfig {
            lambda: LambdaSource::Fixed(0.0),
            ..HfmConfig::default()
        };
        let norm = LayerNormParams::identity(8);
        let out = hfm_forward(&f, &labels, &f, &labels, &cfg, &norm, &mut rng).unwrap();
        let reference = layer_norm(&f, &norm).unwrap();
        for m in [&out.s_to_t, &out.s_cross, &out.t_to_s, &out.t_cross] {
            assert!(m.max_abs_diff(&reference) < 1e-4);
        }
    }

    #[test]
    fn fully_pure_labels_leave_boundary_branch_idle() {
        let mut rng = SeededRng::new(13);
        let f = random_map(&mut rng, 4, 4, 4, 1.0, 0.0);
        let g = random_map(&mut rng, 4, 4, 4, 1.0, 2.0);
        let labels = LabelMap::filled(3, 16, 16, 2);
        let cfg = HfmConfig {
            lambda: LambdaSource::Fixed(0.5),
            ..HfmConfig::default()
        };
        let norm = LayerNormParams::identity(4);
        let out = hfm_forward(&f, &labels, &g, &labels, &cfg, &norm, &mut rng).unwrap();
        assert_eq!(out.source_pure, 64);
        assert_eq!(out.target_pure, 64);
        assert!(out.s_cross.max_abs_diff(&layer_norm(&f, &norm).unwrap()) > 1e-3);
    }

    #[test]
    fn forward_adain_outputs_carry_target_stats() {
        let mut rng = SeededRng::new(14);
        let f = random_map(&mut rng, 6, 8, 8, 2.0, 1.0);
        let g = random_map(&mut rng, 6, 8, 8, 0.5, -1.0);
        let labels = blob_labels(4, 32, 32);
        // unit-scale layer norm would erase channel stats, so compare pre-norm
        let cfg = HfmConfig::default();
        let direct = adain(&f, &g, cfg.epsilon).unwrap();
        let (a, b) = (channel_stats(&direct), channel_stats(&g));
        for c in 0..6 {
            assert!((a.mean[c] - b.mean[c]).abs() < 1e-4);
            assert!((a.std[c] - b.std[c]).abs() < 1e-4);
        }
        let norm = LayerNormParams::identity(6);
        let out = hfm_forward(&f, &labels, &g, &labels, &cfg, &norm, &mut rng).unwrap();
        assert!(out.s_to_t.max_abs_diff(&layer_norm(&direct, &norm).unwrap()) < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = SeededRng::new(15);
        let f = random_map(&mut rng, 4, 8, 8, 1.0, 0.0);
        let g = random_map(&mut rng, 4, 8, 8, 1.0, 1.0);
        let labels = blob_labels(3, 32, 32);
        let cfg = HfmConfig::default();
        let norm = LayerNormParams::identity(4);
        let a = hfm_forward(&f, &labels, &g, &labels, &cfg, &norm, &mut SeededRng::new(3)).unwrap();
        let b = hfm_forward(&f, &labels, &g, &labels, &cfg, &norm, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn pure_mix_is_convex(
            s in prop::collection::vec(-10.0f64..10.0, 5),
            t in prop::collection::vec(-10.0f64..10.0, 5),
            lambda in 0.0f64..=1.0,
        ) {
            let pools = ExemplarPools::from_pools(vec![vec![t.clone()]]);
            let out = modulate_pure(&s, 0, &pools, lambda, &mut SeededRng::new(1));
            for i in 0..5 {
                let (lo, hi) = (s[i].min(t[i]), s[i].max(t[i]));
                prop_assert!(out[i] >= lo - 1e-12 && out[i] <= hi + 1e-12);
            }
        }

        #[test]
        fn partition_is_disjoint_cover(
            purities in prop::collection::vec(0.0f64..=1.0, 0..60),
            tau in 0.0f64..=1.0,
        ) {
            let (p, i) = partition_tokens(&purities, tau);
            let mut all: Vec<usize> = p.iter().chain(&i).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..purities.len()).collect::<Vec<_>>());
        }

        #[test]
        fn fold_inverts_unfold(c in 1usize..5, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let f = random_map(&mut rng, c, h, w, 1.0, 0.0);
            prop_assert_eq!(fold(&unfold(&f, h * 2, w * 2).unwrap()), f);
        }
    }
}
