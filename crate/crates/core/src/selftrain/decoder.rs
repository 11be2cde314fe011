//! Per-pixel linear decoder with bilinear upsampling of its logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastmath::exp_neg;
use crate::hfm::bilinear_tap;
use crate::tensor::{FeatureMap, ProbMap};

/// `K x C` weight matrix (row-major) and `K` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    num_classes: usize,
    channels: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl DecoderParams {
    pub fn zeros(num_classes: usize, channels: usize) -> Self {
        Self {
            num_classes,
            channels,
            weight: vec![0.0; num_classes * channels],
            bias: vec![0.0; num_classes],
        }
    }

    pub fn new(num_classes: usize, channels: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if num_classes < 2 || channels == 0 {
            return Err(Error::shape(format!(
                "decoder needs K >= 2 and C >= 1, got K={num_classes}, C={channels}"
            )));
        }
        if weight.len() != num_classes * channels || bias.len() != num_classes {
            return Err(Error::shape(format!(
                "decoder {num_classes}x{channels} got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("decoder parameters must be finite"));
        }
        Ok(Self {
            num_classes,
            channels,
            weight,
            bias,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// `self -= lr * grad`.
    pub fn step(&mut self, grad: &DecoderGrad, lr: f64) {
        for (w, g) in self.weight.iter_mut().zip(&grad.weight) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }

    fn check(&self, f: &FeatureMap) -> Result<()> {
        if f.channels() != self.channels {
            return Err(Error::shape(format!(
                "decoder expects {} channels, features have {}",
                self.channels,
                f.channels()
            )));
        }
        Ok(())
    }
}

/// Gradient of a scalar loss with respect to [`DecoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DecoderGrad {
    pub fn zeros(num_classes: usize, channels: usize) -> Self {
        Self {
            weight: vec![0.0; num_classes * channels],
            bias: vec![0.0; num_classes],
        }
    }

    pub fn add_scaled(&mut self, other: &DecoderGrad, s: f64) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += s * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// `W f + b` at every position of `f`, as a `K`-channel map.
pub fn logits(f: &FeatureMap, theta: &DecoderParams) -> Result<FeatureMap> {
    theta.check(f)?;
    let (c, h, w) = f.shape();
    let n = h * w;
    let k = theta.num_classes;
    let mut out = vec![0.0; k * n];
    for (kk, dst) in out.chunks_mut(n).enumerate() {
        dst.fill(theta.bias[kk]);
        for ch in 0..c {
            let wk = theta.weight[kk * c + ch];
            for (d, &v) in dst.iter_mut().zip(f.channel(ch)) {
                *d += wk * v;
            }
        }
    }
    Ok(FeatureMap::from_raw(k, h, w, out))
}

/// Per-pixel softmax over channels.
pub fn softmax(z: &FeatureMap) -> ProbMap {
    softmax_owned(z.clone())
}

fn softmax_owned(z: FeatureMap) -> ProbMap {
    let (k, h, w) = z.shape();
    let n = h * w;
    let mut out = z.into_values();
    let mut max = out[..n].to_vec();
    for plane in out.chunks(n).skip(1) {
        for (m, &v) in max.iter_mut().zip(plane) {
            *m = m.max(v);
        }
    }
    for plane in out.chunks_mut(n) {
        for (e, &m) in plane.iter_mut().zip(&max) {
            *e = exp_neg(*e - m);
        }
    }
    let mut sum = out[..n].to_vec();
    for plane in out.chunks(n).skip(1) {
        for (s, &e) in sum.iter_mut().zip(plane) {
            *s += e;
        }
    }
    for plane in out.chunks_mut(n) {
        for (e, &s) in plane.iter_mut().zip(&sum) {
            *e /= s;
        }
    }
    ProbMap::from_raw(k, h, w, out)
}

/// Adjoint of [`crate::hfm::upsample_bilinear`]: scatters an upsampled
/// gradient back onto the coarse grid.
pub fn upsample_adjoint(g: &[f64], channels: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    debug_assert_eq!(g.len(), channels * oh * ow);
    if factor == 1 {
        return g.to_vec();
    }
    let rows: Vec<_> = (0..oh).map(|y| bilinear_tap(y, factor, h)).collect();
    let cols: Vec<_> = (0..ow).map(|x| bilinear_tap(x, factor, w)).collect();
    let mut out = vec![0.0; channels * h * w];
    let mut horiz = vec![0.0; h * ow];
    for ch in 0..channels {
        let src = &g[ch * oh * ow..(ch + 1) * oh * ow];
        horiz.fill(0.0);
        for (row, &(y0, y1, fy)) in src.chunks(ow).zip(&rows) {
            for (x, &v) in row.iter().enumerate() {
                horiz[y0 * ow + x] += v * (1.0 - fy);
                horiz[y1 * ow + x] += v * fy;
            }
        }
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let v = horiz[y * ow + x];
                dst[y * w + x0] += v * (1.0 - fx);
                dst[y * w + x1] += v * fx;
            }
        }
    }
    out
}

/// Class probabilities at `scale` times the feature resolution.
pub fn decode(f: &FeatureMap, theta: &DecoderParams, scale: usize) -> Result<ProbMap> {
    if scale == 0 {
        return Err(Error::shape("decode scale must be >= 1"));
    }
    let z = logits(f, theta)?;
    Ok(softmax_owned(crate::hfm::upsample_bilinear(&z, scale)))
}

/// Chains a gradient with respect to upsampled logits back to the parameters.
pub fn backward(f: &FeatureMap, theta: &DecoderParams, scale: usize, grad_logits: &[f64]) -> DecoderGrad {
    let (c, h, w) = f.shape();
    let n = h * w;
    let k = theta.num_classes;
    let g = upsample_adjoint(grad_logits, k, h, w, scale);
    let mut out = DecoderGrad::zeros(k, c);
    for kk in 0..k {
        let gk = &g[kk * n..(kk + 1) * n];
        out.bias[kk] = gk.iter().sum();
        for ch in 0..c {
            out.weight[kk * c + ch] = gk.iter().zip(f.channel(ch)).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// `teacher <- m teacher + (1 - m) student`.
pub fn ema_update(teacher: &mut DecoderParams, student: &DecoderParams, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Config(format!("ema momentum must lie in [0,1), got {m}")));
    }
    if teacher.num_classes != student.num_classes || teacher.channels != student.channels {
        return Err(Error::shape("teacher and student decoders differ in shape"));
    }
    for (t, s) in teacher.weight.iter_mut().zip(&student.weight) {
        *t = m * *t + (1.0 - m) * s;
    }
    for (t, s) in teacher.bias.iter_mut().zip(&student.bias) {
        *t = m * *t + (1.0 - m) * s;
    }
    Ok(())
}
