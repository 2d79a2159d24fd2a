//! Few-shot comparison of the three classifiers on the planted-prototype
//! benchmark: 5 folds per seed, mean test accuracy per model.
//!
//! cargo run --release --example compare_baselines -- [seeds] [k_shot]

use std::time::Instant;

use libra_mil::data::{synth_generate, SynthSpec};
use libra_mil::model::ModelKind;
use libra_mil::training::{cross_validate, TrainConfig};

fn main() -> libra_mil::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let k_shot: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let spec = SynthSpec::default();

    for kind in [ModelKind::Libra, ModelKind::Maxpool, ModelKind::Abmil] {
        let start = Instant::now();
        let mut accs = Vec::new();
        for seed in 0..seeds {
            let ds = synth_generate(&spec, seed)?;
            let cfg = TrainConfig {
                seed,
                k_shot,
                model_kind: kind,
                ..TrainConfig::default()
            };
            for fold in cross_validate(&ds, &cfg, false)? {
                accs.push(fold.metrics.accuracy);
            }
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!(
            "{:<8} ACC {:6.2}  ({} runs, {:.1}s)",
            kind.as_str(),
            100.0 * mean,
            accs.len(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
