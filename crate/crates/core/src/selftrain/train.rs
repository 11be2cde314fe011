//! The adaptation loop.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decoder::{backward, decode, ema_update, DecoderGrad, DecoderParams};
use super::loss::seg_loss;
use crate::error::{Error, Result};
use crate::hfm::{hfm_forward, layer_norm, HfmConfig, LambdaSource, LayerNormParams};
use crate::hpe::{score_batch, select_samples, GateConfig, ScoreAccumulator};
use crate::metrics::{dice_score, evaluate_many, MetricReport};
use crate::rng::SeededRng;
use crate::sap::{prune_batch, SapConfig};
use crate::sht;
use crate::synth::{DomainSample, SynthDataset};
use crate::tensor::{argmax_map, FeatureMap, LabelMap, PredictionEnsemble};

/// Stream of the root seed that drives training.
const TRAIN_STREAM: u64 = 0x5452_4149_4e00;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub ema_momentum: f64,
    /// Plateau of the unsupervised loss weight.
    pub gamma_max: f64,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
    /// Epochs until the unsupervised weight and rho reach their plateaus.
    pub ramp_epochs: usize,
    pub batch_size: usize,
    pub use_hfm: bool,
    pub use_hpe: bool,
    pub use_sap: bool,
    pub use_unsup: bool,
    /// Evaluate the student on the target set every this many epochs (0: never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1.0,
            ema_momentum: 0.9,
            gamma_max: 1.0,
            focal_gamma: 2.0,
            dice_smooth: 1.0,
            ramp_epochs: 30,
            batch_size: 20,
            use_hfm: true,
            use_hpe: true,
            use_sap: true,
            use_unsup: true,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!("ema_momentum must lie in [0,1), got {}", self.ema_momentum)));
        }
        if !(self.gamma_max >= 0.0 && self.gamma_max.is_finite()) {
            return Err(Error::Config(format!("gamma_max must be non-negative, got {}", self.gamma_max)));
        }
        if !(self.focal_gamma >= 0.0) || !(self.dice_smooth >= 0.0) {
            return Err(Error::Config("focal_gamma and dice_smooth must be non-negative".into()));
        }
        if self.ramp_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("ramp_epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub seed: u64,
    pub hfm: HfmConfig,
    pub gate: GateConfig,
    pub sap: SapConfig,
    pub train: TrainConfig,
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.hfm.validate()?;
        self.gate.validate()?;
        self.sap.validate()?;
        self.train.validate()
    }
}

/// Original, AdaIN-restyled and locally modulated views of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub original: FeatureMap,
    pub adain: FeatureMap,
    pub cross: FeatureMap,
}

impl FeatureSet {
    pub fn new(original: FeatureMap, adain: FeatureMap, cross: FeatureMap) -> Result<Self> {
        if original.shape() != adain.shape() || original.shape() != cross.shape() {
            return Err(Error::shape("feature set members differ in shape"));
        }
        Ok(Self {
            original,
            adain,
            cross,
        })
    }

    /// Three copies of `f`, the feature set with modulation switched off.
    pub fn unmodulated(f: FeatureMap) -> Self {
        Self {
            adain: f.clone(),
            cross: f.clone(),
            original: f,
        }
    }

    pub fn members(&self) -> [&FeatureMap; 3] {
        [&self.original, &self.adain, &self.cross]
    }
}

/// Upsampling factor between a feature map and its label grid.
pub fn feature_scale(f: &FeatureMap, labels: &LabelMap) -> Result<usize> {
    let (h, w) = (f.height(), f.width());
    let s = labels.height() / h;
    if s == 0 || labels.height() != s * h || labels.width() != s * w {
        return Err(Error::shape(format!(
            "labels {}x{} are not an integer multiple of features {h}x{w}",
            labels.height(),
            labels.width()
        )));
    }
    Ok(s)
}

/// Segmentation loss of one feature map and its gradient on the decoder.
pub fn seg_loss_grad(
    f: &FeatureMap,
    y: &LabelMap,
    w: Option<&[f64]>,
    theta: &DecoderParams,
    cfg: &TrainConfig,
) -> Result<(f64, DecoderGrad)> {
    let scale = feature_scale(f, y)?;
    let p = decode(f, theta, scale)?;
    let lg = seg_loss(&p, y, w, cfg.dice_smooth, cfg.focal_gamma)?;
    Ok((lg.loss, backward(f, theta, scale, &lg.grad)))
}

/// Mean segmentation loss over the three views of a source sample.
pub fn sup_loss(
    fs: &FeatureSet,
    labels: &LabelMap,
    theta: &DecoderParams,
    cfg: &TrainConfig,
) -> Result<(f64, DecoderGrad)> {
    let mut loss = 0.0;
    let mut grad = DecoderGrad::zeros(theta.num_classes(), theta.channels());
    for f in fs.members() {
        let (l, g) = seg_loss_grad(f, labels, None, theta, cfg)?;
        loss += l / 3.0;
        grad.add_scaled(&g, 1.0 / 3.0);
    }
    Ok((loss, grad))
}

/// Teacher predictions on the three views of a target sample and their
/// consensus.
pub fn teacher_ensemble(
    ft: &FeatureSet,
    teacher: &DecoderParams,
    scale: usize,
) -> Result<(PredictionEnsemble, LabelMap)> {
    let members = ft
        .members()
        .iter()
        .map(|f| decode(f, teacher, scale))
        .collect::<Result<Vec<_>>>()?;
    let ens = PredictionEnsemble::new(members)?;
    let consensus = ens.consensus();
    Ok((ens, consensus))
}

/// Pixel-weighted segmentation loss of the student on a pruned pseudo-label.
/// Unselected samples contribute nothing.
pub fn unsup_loss(
    f_t: &FeatureMap,
    pruned: &LabelMap,
    weights: Option<&[f64]>,
    theta: &DecoderParams,
    selected: bool,
    cfg: &TrainConfig,
) -> Result<(f64, DecoderGrad)> {
    if !selected {
        return Ok((0.0, DecoderGrad::zeros(theta.num_classes(), theta.channels())));
    }
    seg_loss_grad(f_t, pruned, weights, theta, cfg)
}

/// `w_max exp(-5 (1 - min(t, T) / T)^2)`.
pub fn ramp_weight(t: f64, t_ramp: f64, w_max: f64) -> f64 {
    let r = 1.0 - t.min(t_ramp) / t_ramp;
    w_max * (-5.0 * r * r).exp()
}

/// Hard prediction at label resolution.
pub fn predict(f: &FeatureMap, theta: &DecoderParams, scale: usize) -> Result<LabelMap> {
    Ok(argmax_map(&decode(f, theta, scale)?))
}

/// Student metrics on labelled samples (features are layer-normed first).
pub fn evaluate_decoder(theta: &DecoderParams, samples: &[DomainSample], spacing: f64) -> Result<MetricReport> {
    let norm = LayerNormParams::identity(theta.channels());
    let pairs = samples
        .par_iter()
        .map(|s| {
            let f = layer_norm(&s.features, &norm)?;
            let scale = feature_scale(&f, &s.labels)?;
            Ok((predict(&f, theta, scale)?, s.labels.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_many(&pairs, spacing)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainState {
    pub student: DecoderParams,
    pub teacher: DecoderParams,
    /// Index of the next epoch to run.
    pub epoch: usize,
    pub rng: SeededRng,
    #[serde(skip)]
    pub accumulator: ScoreAccumulator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub gamma_unsup: f64,
    pub rho: f64,
    pub lambda_mean: f64,
    pub scored: usize,
    pub selected: usize,
    pub selection_rate: f64,
    pub pruned_pixels: usize,
    pub anomalous_classes: usize,
    /// Student mean foreground Dice on the target set, for monitoring only.
    pub target_dsc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub state: TrainState,
    pub reports: Vec<EpochReport>,
    pub target_metrics: MetricReport,
}

struct PairWork {
    sup_loss: f64,
    sup_grad: DecoderGrad,
    ensemble: Option<PredictionEnsemble>,
}

struct StepTotals {
    sup_loss: f64,
    unsup_loss: f64,
    selected: usize,
    scored: usize,
    pruned_pixels: usize,
    anomalous: usize,
    lambda: f64,
}

/// Runs adaptation over an in-memory dataset. Target labels are read only
/// for evaluation.
pub struct Adapter<'a> {
    cfg: &'a AdaptConfig,
    data: &'a SynthDataset,
    norm: LayerNormParams,
    source_ln: Vec<FeatureMap>,
    target_ln: Vec<FeatureMap>,
    scale: usize,
}

impl<'a> Adapter<'a> {
    pub fn new(cfg: &'a AdaptConfig, data: &'a SynthDataset) -> Result<Self> {
        cfg.validate()?;
        let (Some(first), false) = (data.source.first(), data.target.is_empty()) else {
            return Err(Error::invalid("adaptation needs source and target samples"));
        };
        let shape = first.features.shape();
        let k = first.labels.num_classes();
        for s in data.source.iter().chain(&data.target) {
            if s.features.shape() != shape || s.labels.num_classes() != k {
                return Err(Error::shape(format!("sample {} differs in shape or class count", s.id)));
            }
        }
        let scale = feature_scale(&first.features, &first.labels)?;
        let norm = LayerNormParams::identity(shape.0);
        let ln = |list: &[DomainSample]| {
            list.par_iter()
                .map(|s| layer_norm(&s.features, &norm))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            cfg,
            data,
            source_ln: ln(&data.source)?,
            target_ln: ln(&data.target)?,
            norm,
            scale,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.data.source[0].labels.num_classes()
    }

    pub fn init_state(&self) -> TrainState {
        let (k, c) = (self.num_classes(), self.norm.scale.len());
        TrainState {
            student: DecoderParams::zeros(k, c),
            teacher: DecoderParams::zeros(k, c),
            epoch: 0,
            rng: SeededRng::derive(self.cfg.seed, TRAIN_STREAM),
            accumulator: ScoreAccumulator::new(),
        }
    }

    /// Mean foreground Dice of `theta` on the target set.
    pub fn target_dsc(&self, theta: &DecoderParams) -> Result<f64> {
        let k = self.num_classes();
        let per_sample = self
            .target_ln
            .par_iter()
            .zip(&self.data.target)
            .map(|(f, s)| {
                let pred = predict(f, theta, self.scale)?;
                let mut sum = 0.0;
                for c in 1..k as u8 {
                    sum += dice_score(&pred, &s.labels, c)?;
                }
                Ok(sum / (k - 1) as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
    }

    fn pair_work(
        &self,
        state: &TrainState,
        si: usize,
        ti: usize,
        hfm: &HfmConfig,
        rng: &mut SeededRng,
    ) -> Result<PairWork> {
        let t = &self.cfg.train;
        let src = &self.data.source[si];
        let tgt = &self.target_ln[ti];
        let teacher_view = if t.use_hfm || t.use_unsup {
            Some(decode(tgt, &state.teacher, self.scale)?)
        } else {
            None
        };
        let (sup_loss, sup_grad, ensemble) = if t.use_hfm {
            let original = teacher_view.expect("teacher view computed when modulating");
            let pseudo = argmax_map(&original);
            let out = hfm_forward(
                &src.features,
                &src.labels,
                &self.data.target[ti].features,
                &pseudo,
                hfm,
                &self.norm,
                rng,
            )?;
            let fs = FeatureSet::new(self.source_ln[si].clone(), out.s_to_t, out.s_cross)?;
            let (l, g) = sup_loss(&fs, &src.labels, &state.student, t)?;
            let ensemble = if t.use_unsup {
                let members = vec![
                    original,
                    decode(&out.t_to_s, &state.teacher, self.scale)?,
                    decode(&out.t_cross, &state.teacher, self.scale)?,
                ];
                Some(PredictionEnsemble::new(members)?)
            } else {
                None
            };
            (l, g, ensemble)
        } else {
            // three identical views: the mean loss is the single-view loss
            let (l, g) = seg_loss_grad(&self.source_ln[si], &src.labels, None, &state.student, t)?;
            let ensemble = teacher_view
                .map(|p| PredictionEnsemble::new(vec![p.clone(), p.clone(), p]))
                .transpose()?;
            (l, g, ensemble)
        };
        Ok(PairWork {
            sup_loss,
            sup_grad,
            ensemble,
        })
    }

    fn step(
        &self,
        state: &mut TrainState,
        pairs: &[(usize, usize)],
        gamma: f64,
        rho: f64,
        step: usize,
    ) -> Result<StepTotals> {
        let t = &self.cfg.train;
        let (k, c) = (state.student.num_classes(), state.student.channels());
        let lambda = self.cfg.hfm.lambda.draw(&mut state.rng);
        let step_seed = state.rng.next_u64();
        let hfm = HfmConfig {
            lambda: LambdaSource::Fixed(lambda),
            ..self.cfg.hfm.clone()
        };
        let work = pairs
            .par_iter()
            .enumerate()
            .map(|(i, &(si, ti))| {
                let mut rng = SeededRng::derive(step_seed, i as u64);
                self.pair_work(state, si, ti, &hfm, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;

        let b = work.len() as f64;
        let mut grad = DecoderGrad::zeros(k, c);
        let mut totals = StepTotals {
            sup_loss: 0.0,
            unsup_loss: 0.0,
            selected: 0,
            scored: 0,
            pruned_pixels: 0,
            anomalous: 0,
            lambda: if t.use_hfm { lambda } else { 0.0 },
        };
        for w in &work {
            totals.sup_loss += w.sup_loss / b;
            grad.add_scaled(&w.sup_grad, 1.0 / b);
        }
        if !totals.sup_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: state.epoch,
                step,
                detail: format!("supervised loss {}", totals.sup_loss),
            });
        }

        if t.use_unsup {
            let ensembles: Vec<PredictionEnsemble> = work.into_iter().filter_map(|w| w.ensemble).collect();
            totals.scored = ensembles.len();
            let (consensus, selected, weights) = if t.use_hpe {
                let (consensus, reports) = score_batch(&ensembles, &self.cfg.gate)?;
                let scores: Vec<f64> = reports.iter().map(|r| r.s_final).collect();
                let selected = select_samples(&mut state.accumulator, &scores, rho);
                let weights: Vec<Vec<f64>> = reports.into_iter().map(|r| r.pixel_weights).collect();
                (consensus, selected, Some(weights))
            } else {
                let consensus = ensembles.iter().map(PredictionEnsemble::consensus).collect();
                (consensus, (0..ensembles.len()).collect::<Vec<_>>(), None)
            };
            let masks = if t.use_sap {
                let hard: Vec<Vec<LabelMap>> = ensembles.iter().map(PredictionEnsemble::hard_members).collect();
                let reports = prune_batch(&hard, &consensus, &self.cfg.sap)?;
                for (r, m) in reports.iter().zip(&consensus) {
                    totals.pruned_pixels += r.pruned_pixels(m);
                    totals.anomalous += r.anomalous.len();
                }
                reports.into_iter().map(|r| r.pruned).collect()
            } else {
                consensus
            };
            totals.selected = selected.len();
            let unsup = selected
                .par_iter()
                .map(|&i| {
                    let ti = pairs[i].1;
                    let w = weights.as_ref().map(|w| w[i].as_slice());
                    unsup_loss(&self.target_ln[ti], &masks[i], w, &state.student, true, t)
                })
                .collect::<Result<Vec<_>>>()?;
            if !unsup.is_empty() {
                let n = unsup.len() as f64;
                let mut ugrad = DecoderGrad::zeros(k, c);
                for (l, g) in &unsup {
                    totals.unsup_loss += l / n;
                    ugrad.add_scaled(g, 1.0 / n);
                }
                if !totals.unsup_loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: state.epoch,
                        step,
                        detail: format!("unsupervised loss {}", totals.unsup_loss),
                    });
                }
                if gamma > 0.0 {
                    grad.add_scaled(&ugrad, gamma);
                }
            }
        }
        if !grad.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: state.epoch,
                step,
                detail: "non-finite gradient".into(),
            });
        }
        state.student.step(&grad, t.learning_rate);
        ema_update(&mut state.teacher, &state.student, t.ema_momentum)?;
        Ok(totals)
    }

    /// One pass over shuffled source/target pairs.
    pub fn epoch(&self, state: &mut TrainState) -> Result<EpochReport> {
        let t = &self.cfg.train;
        let epoch = state.epoch;
        state.accumulator.begin_epoch(epoch);
        let ramp = ramp_weight(epoch as f64, t.ramp_epochs as f64, 1.0);
        let gamma = if t.use_unsup { t.gamma_max * ramp } else { 0.0 };
        let rho = self.cfg.gate.rho_0 + (self.cfg.gate.rho_max - self.cfg.gate.rho_0) * ramp;

        let mut src: Vec<usize> = (0..self.data.source.len()).collect();
        let mut tgt: Vec<usize> = (0..self.data.target.len()).collect();
        state.rng.shuffle(&mut src);
        state.rng.shuffle(&mut tgt);
        let pairs: Vec<(usize, usize)> = src.into_iter().zip(tgt).collect();

        let mut report = EpochReport {
            epoch,
            steps: 0,
            sup_loss: 0.0,
            unsup_loss: 0.0,
            gamma_unsup: gamma,
            rho,
            lambda_mean: 0.0,
            scored: 0,
            selected: 0,
            selection_rate: 0.0,
            pruned_pixels: 0,
            anomalous_classes: 0,
            target_dsc: None,
        };
        for (step, batch) in pairs.chunks(t.batch_size).enumerate() {
            let s = self.step(state, batch, gamma, rho, step)?;
            report.steps += 1;
            report.sup_loss += s.sup_loss;
            report.unsup_loss += s.unsup_loss;
            report.lambda_mean += s.lambda;
            report.scored += s.scored;
            report.selected += s.selected;
            report.pruned_pixels += s.pruned_pixels;
            report.anomalous_classes += s.anomalous;
        }
        let steps = report.steps.max(1) as f64;
        report.sup_loss /= steps;
        report.unsup_loss /= steps;
        report.lambda_mean /= steps;
        report.selection_rate = if report.scored > 0 {
            report.selected as f64 / report.scored as f64
        } else {
            0.0
        };
        state.epoch += 1;
        if t.eval_every > 0 && (state.epoch % t.eval_every == 0 || state.epoch == t.epochs) {
            report.target_dsc = Some(self.target_dsc(&state.student)?);
        }
        Ok(report)
    }

    /// Runs the configured number of epochs, calling `on_epoch` after each.
    pub fn run(
        &self,
        mut on_epoch: impl FnMut(&EpochReport, &TrainState) -> Result<()>,
    ) -> Result<AdaptOutcome> {
        let mut state = self.init_state();
        let mut reports = Vec::with_capacity(self.cfg.train.epochs);
        for _ in 0..self.cfg.train.epochs {
            let r = self.epoch(&mut state)?;
            log::info!(
                "epoch {:>3}  sup {:.4}  unsup {:.4}  sel {:.2}  pruned {}",
                r.epoch,
                r.sup_loss,
                r.unsup_loss,
                r.selection_rate,
                r.pruned_pixels
            );
            on_epoch(&r, &state)?;
            reports.push(r);
        }
        let target_metrics = evaluate_decoder(&state.student, &self.data.target, 1.0)?;
        Ok(AdaptOutcome {
            state,
            reports,
            target_metrics,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub epoch: usize,
    pub config_hash: String,
    pub rng: SeededRng,
    pub files: Vec<String>,
}

/// Writes student and teacher parameters plus a JSON manifest into `dir`.
pub fn save_checkpoint(dir: &Path, state: &TrainState, config_hash: &str) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (name, p) in [("student", &state.student), ("teacher", &state.teacher)] {
        let (k, c) = (p.num_classes(), p.channels());
        let w = format!("{name}_weight.sht");
        let b = format!("{name}_bias.sht");
        sht::write_matrix(&dir.join(&w), k, c, p.weight())?;
        sht::write_matrix(&dir.join(&b), 1, k, p.bias())?;
        files.push(w);
        files.push(b);
    }
    let manifest = CheckpointManifest {
        epoch: state.epoch,
        config_hash: config_hash.to_string(),
        rng: state.rng.clone(),
        files,
    };
    let path = dir.join("checkpoint.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

/// Reads one decoder (`student` or `teacher`) back from a checkpoint directory.
pub fn load_decoder(dir: &Path, name: &str) -> Result<DecoderParams> {
    let (k, c, w) = sht::read_matrix(&dir.join(format!("{name}_weight.sht")))?;
    let (one, kb, b) = sht::read_matrix(&dir.join(format!("{name}_bias.sht")))?;
    if one != 1 || kb != k {
        return Err(Error::shape(format!("bias is {one}x{kb}, expected 1x{k}")));
    }
    DecoderParams::new(k, c, w, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn ramp_cases() {
        assert_eq!(ramp_weight(30.0, 30.0, 2.0), 2.0);
        assert_eq!(ramp_weight(45.0, 30.0, 1.0), 1.0);
        assert!((ramp_weight(0.0, 30.0, 1.0) - (-5.0f64).exp()).abs() < 1e-15);
        assert!((ramp_weight(15.0, 30.0, 1.0) - (-1.25f64).exp()).abs() < 1e-15);
        let mut prev = 0.0;
        for t in 0..40 {
            let w = ramp_weight(t as f64, 30.0, 1.0);
            assert!(w >= prev);
            prev = w;
        }
    }

    fn tiny() -> (AdaptConfig, SynthDataset) {
        let data = generate(
            &SynthConfig {
                n_source: 12,
                n_target: 12,
                ..SynthConfig::default()
            },
            7,
        )
        .unwrap();
        let cfg = AdaptConfig {
            seed: 3,
            train: TrainConfig {
                epochs: 2,
                batch_size: 6,
                learning_rate: 1.0,
                ramp_epochs: 2,
                ..TrainConfig::default()
            },
            ..AdaptConfig::default()
        };
        (cfg, data)
    }

    #[test]
    fn runs_are_deterministic() {
        let (cfg, data) = tiny();
        let a = Adapter::new(&cfg, &data).unwrap().run(|_, _| Ok(())).unwrap();
        let b = Adapter::new(&cfg, &data).unwrap().run(|_, _| Ok(())).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.state, b.state);
        assert!(a.reports.iter().all(|r| r.steps == 2 && r.scored == 12));
    }

    #[test]
    fn unsup_weight_zero_follows_supervised_trajectory() {
        let (mut cfg, data) = tiny();
        cfg.train.gamma_max = 0.0;
        let a = Adapter::new(&cfg, &data).unwrap().run(|_, _| Ok(())).unwrap();
        cfg.train.use_unsup = false;
        let b = Adapter::new(&cfg, &data).unwrap().run(|_, _| Ok(())).unwrap();
        assert_eq!(a.state.student, b.state.student);
        assert_eq!(a.state.teacher, b.state.teacher);
    }

    #[test]
    fn keep_everything_sap_equals_sap_off() {
        let (mut cfg, data) = tiny();
        cfg.sap.q = 100.0;
        let a = Adapter::new(&cfg, &data).unwrap().run(|_, _| Ok(())).unwrap();
        cfg.train.use_sap = false;
        let b = Adapter::new(&cfg, &data).unwrap().run(|_, _| Ok(())).unwrap();
        assert_eq!(a.state.student, b.state.student);
        assert!(a.reports.iter().all(|r| r.pruned_pixels == 0));
    }

    #[test]
    fn unselected_sample_contributes_nothing() {
        let (cfg, data) = tiny();
        let theta = DecoderParams::zeros(5, 16);
        let s = &data.target[0];
        let (l, g) = unsup_loss(&s.features, &s.labels, None, &theta, false, &cfg.train).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.weight.iter().chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (cfg, data) = tiny();
        let out = Adapter::new(&cfg, &data).unwrap().run(|_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save_checkpoint(dir.path(), &out.state, "abc").unwrap();
        assert_eq!(m.epoch, 2);
        let s = load_decoder(dir.path(), "student").unwrap();
        for (a, b) in s.weight().iter().zip(out.state.student.weight()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
