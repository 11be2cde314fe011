//! Trains every module configuration on the default synthetic dataset and
//! prints final target Dice per configuration.
//!
//! `cargo run --release --example ablation -- [epochs] [learning_rate]`

use std::time::Instant;

use shape_core::selftrain::{AdaptConfig, Adapter, TrainConfig};
use shape_core::synth::{generate, SynthConfig};

fn main() -> shape_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(100);
    let lr = args.get(2).and_then(|a| a.parse().ok());
    let data = generate(&SynthConfig::default(), 7)?;
    let configs = [
        ("no adaptation", false, false, false, false),
        ("(a) mean teacher", false, false, false, true),
        ("(b) + HFM", true, false, false, true),
        ("(c) + HPE", false, true, false, true),
        ("(d) + HFM + HPE", true, true, false, true),
        ("(e) + HFM + SAP", true, false, true, true),
        ("(f) full", true, true, true, true),
    ];
    for (name, hfm, hpe, sap, unsup) in configs {
        let mut train = TrainConfig {
            epochs,
            use_hfm: hfm,
            use_hpe: hpe,
            use_sap: sap,
            use_unsup: unsup,
            ..TrainConfig::default()
        };
        if let Some(lr) = lr {
            train.learning_rate = lr;
        }
        let cfg = AdaptConfig {
            seed: 7,
            train,
            ..AdaptConfig::default()
        };
        let start = Instant::now();
        let out = Adapter::new(&cfg, &data)?.run(|_, _| Ok(()))?;
        let curve: Vec<String> = out
            .reports
            .iter()
            .filter_map(|r| r.target_dsc)
            .map(|d| format!("{d:.1}"))
            .collect();
        println!(
            "{name:<20} dsc {:>6.2}  asd {:>6.2}  ({:.1}s)  curve {}",
            out.target_metrics.mean_dsc,
            out.target_metrics.mean_asd.unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64(),
            curve.join(" ")
        );
    }
    Ok(())
}
