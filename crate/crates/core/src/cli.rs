//! The `shape` command line.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::hfm::{hfm_forward, LambdaSource, LayerNormParams};
use crate::hpe::{score_batch, select_samples, PlausibilityReport, ScoreAccumulator};
use crate::metrics::{evaluate, MetricReport};
use crate::rng::SeededRng;
use crate::sap::{prune_batch, InstabilityJson};
use crate::selftrain::{save_checkpoint, Adapter};
use crate::sht::{self, Payload};
use crate::synth::{gen_dataset, load_dataset};
use crate::tensor::{LabelMap, PredictionEnsemble};

#[derive(Debug, Parser)]
#[command(name = "shape", version, about = "Structure-aware self-training for segmentation")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target dataset.
    Synth,
    /// Run feature modulation on one source/target pair.
    Modulate {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        source_labels: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Pseudo-labels for the target features.
        #[arg(long)]
        target_labels: PathBuf,
        /// Fixed mixing factor; drawn from U[0,1] when absent.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Plausibility scores for a directory of prediction ensembles.
    Score {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Instability pruning for a directory of prediction ensembles.
    Prune {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Score, select and prune in one pass.
    Gate {
        #[arg(long = "in")]
        input: PathBuf,
        /// Selection fraction; defaults to rho_0.
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Self-train a decoder on a synthetic dataset.
    Adapt {
        /// Dataset directory or manifest; defaults to paths.data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Dice and ASD between two label maps.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Pixel spacing multiplied into ASD.
        #[arg(long, default_value_t = 1.0)]
        spacing: f64,
        /// Number of classes; inferred from the labels when absent.
        #[arg(long)]
        classes: Option<usize>,
    },
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}

pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = Some(o.clone());
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let out = cfg.paths.out.clone();
    let out = out.as_deref();
    match &cli.command {
        Command::Synth => synth(&cfg, require_out(out)?, cli.json),
        Command::Modulate {
            source,
            source_labels,
            target,
            target_labels,
            lambda,
        } => {
            let mut cfg = cfg.clone();
            if let Some(l) = lambda {
                cfg.hfm.lambda = LambdaSource::Fixed(*l);
                cfg.hfm.validate()?;
            }
            modulate(&cfg, [source, source_labels, target, target_labels], out, cli.json)
        }
        Command::Score { input } => {
            let ens = read_ensembles(input)?;
            let samples = score(&ens, &cfg)?;
            emit(cfg.seed, "samples", &samples, out, "scores.json", cli.json, |s| {
                format!(
                    "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                    s.id, s.report.s_vertex, s.report.s_intra, s.report.s_inter, s.report.s_final
                )
            })
        }
        Command::Prune { input } => {
            let ens = read_ensembles(input)?;
            let samples = prune(&ens, &cfg, out)?;
            emit(cfg.seed, "samples", &samples, out, "instability.json", cli.json, |s| {
                format!("{:<24} theta {:>10} anomalous {:?}", s.id, fmt_opt(s.report.theta), s.report.anomalous)
            })
        }
        Command::Gate { input, rho } => {
            let ens = read_ensembles(input)?;
            let rho = rho.unwrap_or(cfg.gate.rho_0);
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::Config(format!("rho must lie in (0,1], got {rho}")));
            }
            let samples = gate(&ens, &cfg, rho, out)?;
            emit(cfg.seed, "samples", &samples, out, "gate.json", cli.json, |s| {
                format!(
                    "{:<24} {:>8.4} {} anomalous {:?}",
                    s.id,
                    s.plausibility.s_final,
                    if s.selected { "selected" } else { "rejected" },
                    s.instability.anomalous
                )
            })
        }
        Command::Adapt { data } => {
            let data = data
                .clone()
                .or_else(|| cfg.paths.data.clone())
                .ok_or_else(|| Error::Config("adapt needs --data or paths.data".into()))?;
            adapt(&cfg, &data, require_out(out)?, cli.json)
        }
        Command::Eval {
            pred,
            gt,
            spacing,
            classes,
        } => {
            let report = eval(pred, gt, *spacing, *classes)?;
            if let Some(dir) = out {
                write_json(dir, "metrics.json", &report)?;
            }
            if cli.json {
                println!("{}", json!({ "seed": cfg.seed, "report": report }));
            } else {
                println!("seed {}", cfg.seed);
                print_metrics(&report);
            }
            Ok(())
        }
    }
}

fn require_out(out: Option<&Path>) -> Result<&Path> {
    out.ok_or_else(|| Error::Config("this subcommand needs --out or paths.out".into()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    create_dir(dir)?;
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn emit<T: Serialize>(
    seed: u64,
    key: &str,
    items: &[T],
    out: Option<&Path>,
    file: &str,
    as_json: bool,
    line: impl Fn(&T) -> String,
) -> Result<()> {
    let doc = json!({ "seed": seed, key: items });
    if let Some(dir) = out {
        write_json(dir, file, &doc)?;
    }
    if as_json {
        println!("{doc}");
    } else {
        println!("seed {seed}");
        for it in items {
            println!("{}", line(it));
        }
    }
    Ok(())
}

fn print_metrics(r: &MetricReport) {
    println!("{:>6} {:>8} {:>8}", "class", "dsc", "asd");
    for c in &r.per_class {
        println!("{:>6} {:>8.2} {:>8}", c.class, c.dsc, fmt_opt(c.asd));
    }
    println!("{:>6} {:>8.2} {:>8}", "mean", r.mean_dsc, fmt_opt(r.mean_asd));
}

fn synth(cfg: &RunConfig, out: &Path, as_json: bool) -> Result<()> {
    let manifest = gen_dataset(&cfg.synth, cfg.seed, out)?;
    if as_json {
        println!(
            "{}",
            json!({ "seed": cfg.seed, "out": out, "samples": manifest.samples.len() })
        );
    } else {
        println!("seed {}", cfg.seed);
        println!("wrote {} samples to {}", manifest.samples.len(), out.display());
    }
    Ok(())
}

fn modulate(cfg: &RunConfig, paths: [&PathBuf; 4], out: Option<&Path>, as_json: bool) -> Result<()> {
    let [source, source_labels, target, target_labels] = paths;
    let fs_ = sht::read_features(source)?;
    let ft = sht::read_features(target)?;
    let ys = sht::read_labels(source_labels, None)?;
    let yt = sht::read_labels(target_labels, Some(ys.num_classes()))?;
    let ys = if yt.num_classes() > ys.num_classes() {
        sht::read_labels(source_labels, Some(yt.num_classes()))?
    } else {
        ys
    };
    let mut rng = SeededRng::new(cfg.seed);
    let norm = LayerNormParams::identity(fs_.channels());
    let o = hfm_forward(&fs_, &ys, &ft, &yt, &cfg.hfm, &norm, &mut rng)?;
    let mut files = Vec::new();
    if let Some(dir) = out {
        create_dir(dir)?;
        for (name, f) in [
            ("s_to_t", &o.s_to_t),
            ("s_cross", &o.s_cross),
            ("t_to_s", &o.t_to_s),
            ("t_cross", &o.t_cross),
        ] {
            let p = dir.join(format!("{name}.sht"));
            sht::write_tensor(&p, Payload::Features(f))?;
            files.push(p);
        }
    }
    let doc = json!({
        "seed": cfg.seed,
        "lambda": o.lambda,
        "source_pure": o.source_pure,
        "target_pure": o.target_pure,
        "files": files,
    });
    if let Some(dir) = out {
        write_json(dir, "modulate.json", &doc)?;
    }
    if as_json {
        println!("{doc}");
    } else {
        println!("seed {}", cfg.seed);
        println!("lambda {:.4}  pure tokens source {} target {}", o.lambda, o.source_pure, o.target_pure);
        for f in &files {
            println!("wrote {}", f.display());
        }
    }
    Ok(())
}

/// One sample of an ensemble directory.
#[derive(Debug, Clone)]
pub struct NamedEnsemble {
    pub id: String,
    pub ensemble: PredictionEnsemble,
}

/// Reads `dir/<id>/member_<n>.sht` probability maps, samples sorted by id and
/// members by `n`.
pub fn read_ensembles(dir: &Path) -> Result<Vec<NamedEnsemble>> {
    let mut ids: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::invalid(format!("{}: no sample directories", dir.display())));
    }
    ids.into_iter()
        .map(|(id, path)| {
            let mut members: Vec<(u64, PathBuf)> = fs::read_dir(&path)
                .map_err(|e| Error::io(&path, e))?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let name = e.file_name().to_string_lossy().into_owned();
                    let n = name.strip_prefix("member_")?.strip_suffix(".sht")?.parse().ok()?;
                    Some((n, e.path()))
                })
                .collect();
            members.sort();
            let maps = members
                .iter()
                .map(|(_, p)| sht::read_probs(p))
                .collect::<Result<Vec<_>>>()?;
            if maps.is_empty() {
                return Err(Error::invalid(format!("{}: no member_<n>.sht files", path.display())));
            }
            Ok(NamedEnsemble {
                id,
                ensemble: PredictionEnsemble::new(maps)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoredSample {
    pub id: String,
    pub report: PlausibilityReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrunedSample {
    pub id: String,
    pub report: InstabilityJson,
}

#[derive(Debug, Clone, Serialize)]
pub struct GatedSample {
    pub id: String,
    pub selected: bool,
    pub plausibility: PlausibilityReport,
    pub instability: InstabilityJson,
}

fn ensembles_of(samples: &[NamedEnsemble]) -> Vec<PredictionEnsemble> {
    samples.iter().map(|s| s.ensemble.clone()).collect()
}

pub fn score(samples: &[NamedEnsemble], cfg: &RunConfig) -> Result<Vec<ScoredSample>> {
    let (_, reports) = score_batch(&ensembles_of(samples), &cfg.gate)?;
    Ok(samples
        .iter()
        .zip(reports)
        .map(|(s, report)| ScoredSample { id: s.id.clone(), report })
        .collect())
}

fn prune_reports(
    samples: &[NamedEnsemble],
    consensus: &[LabelMap],
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<Vec<InstabilityJson>> {
    let hard: Vec<Vec<LabelMap>> = samples.iter().map(|s| s.ensemble.hard_members()).collect();
    let reports = prune_batch(&hard, consensus, &cfg.sap)?;
    if let Some(dir) = out {
        create_dir(dir)?;
    }
    samples
        .iter()
        .zip(&reports)
        .map(|(s, r)| {
            let path = match out {
                Some(dir) => {
                    let p = dir.join(format!("{}_pruned.sht", s.id));
                    sht::write_tensor(&p, Payload::Labels(&r.pruned))?;
                    Some(p.to_string_lossy().into_owned())
                }
                None => None,
            };
            Ok(r.to_json(path))
        })
        .collect()
}

pub fn prune(samples: &[NamedEnsemble], cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<PrunedSample>> {
    let consensus: Vec<LabelMap> = samples.iter().map(|s| s.ensemble.consensus()).collect();
    Ok(samples
        .iter()
        .zip(prune_reports(samples, &consensus, cfg, out)?)
        .map(|(s, report)| PrunedSample { id: s.id.clone(), report })
        .collect())
}

pub fn gate(samples: &[NamedEnsemble], cfg: &RunConfig, rho: f64, out: Option<&Path>) -> Result<Vec<GatedSample>> {
    let (consensus, reports) = score_batch(&ensembles_of(samples), &cfg.gate)?;
    let finals: Vec<f64> = reports.iter().map(|r| r.s_final).collect();
    let mut acc = ScoreAccumulator::new();
    let selected = select_samples(&mut acc, &finals, rho);
    let instability = prune_reports(samples, &consensus, cfg, out)?;
    Ok(samples
        .iter()
        .zip(reports)
        .zip(instability)
        .enumerate()
        .map(|(i, ((s, plausibility), instability))| GatedSample {
            id: s.id.clone(),
            selected: selected.contains(&i),
            plausibility,
            instability,
        })
        .collect())
}

fn adapt(cfg: &RunConfig, data: &Path, out: &Path, as_json: bool) -> Result<()> {
    let dataset = load_dataset(data)?;
    let adapt_cfg = cfg.adapt_config();
    let hash = cfg.hash();
    create_dir(out)?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = out.join("epochs.jsonl");
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let ckpt_root = out.join("checkpoints");
    let every = cfg.train.eval_every;
    let last = cfg.train.epochs;
    if !as_json {
        println!("seed {}", cfg.seed);
        println!("{:>5} {:>9} {:>9} {:>6} {:>8} {:>8}", "epoch", "sup", "unsup", "sel", "pruned", "dsc");
    }
    let adapter = Adapter::new(&adapt_cfg, &dataset)?;
    let outcome = adapter.run(|r, state| {
        writeln!(log, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&log_path, e))?;
        if state.epoch == last || (every > 0 && state.epoch % every == 0) {
            save_checkpoint(&ckpt_root.join(format!("epoch_{:04}", state.epoch)), state, &hash)?;
        }
        if !as_json {
            println!(
                "{:>5} {:>9.4} {:>9.4} {:>6.2} {:>8} {:>8}",
                r.epoch,
                r.sup_loss,
                r.unsup_loss,
                r.selection_rate,
                r.pruned_pixels,
                r.target_dsc.map_or("-".into(), |d| format!("{d:.2}"))
            );
        }
        Ok(())
    })?;
    save_checkpoint(&ckpt_root.join("final"), &outcome.state, &hash)?;
    write_json(out, "metrics.json", &outcome.target_metrics)?;
    if as_json {
        println!(
            "{}",
            json!({
                "seed": cfg.seed,
                "config_hash": hash,
                "epochs": outcome.reports.len(),
                "target_metrics": outcome.target_metrics,
            })
        );
    } else {
        print_metrics(&outcome.target_metrics);
    }
    Ok(())
}

pub fn eval(pred: &Path, gt: &Path, spacing: f64, classes: Option<usize>) -> Result<MetricReport> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::Config(format!("spacing must be positive, got {spacing}")));
    }
    let k = match classes {
        Some(k) => k,
        None => {
            let a = sht::read_labels(pred, None)?.num_classes();
            let b = sht::read_labels(gt, None)?.num_classes();
            a.max(b)
        }
    };
    let p = sht::read_labels(pred, Some(k))?;
    let g = sht::read_labels(gt, Some(k))?;
    evaluate(&p, &g, spacing)
}
