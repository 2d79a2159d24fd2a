//! Every intermediate of one forward pass: similarities, marginals, the
//! transport plan, fused instance scores, attention and prototype attribution.

use libra_mil::data::{synth_generate, SynthSpec};
use libra_mil::fusion::{AttributionRecorder, BagPriors};
use libra_mil::model::{libra_trace, prototype_gradients, Model};
use libra_mil::training::{train, TrainConfig};

fn main() -> libra_mil::Result<()> {
    let spec = SynthSpec {
        bags_per_class: 6,
        min_instances: 8,
        max_instances: 8,
        ..SynthSpec::default()
    };
    let ds = synth_generate(&spec, 3)?;
    let cfg = TrainConfig {
        k_v: 4,
        hidden: 32,
        heads: 4,
        learning_rate: 1e-2,
        max_epochs: 15,
        patience: 5,
        ..TrainConfig::default()
    };
    let priors = BagPriors::new(ds.bag_priors.clone(), ds.num_classes())?;
    let (tr, va) = ds.bags.split_at(12);
    let model = train(tr, va, &priors, &ds.instance_priors, &cfg)?.0.model;
    let Model::Libra(params) = &model else {
        unreachable!()
    };
    let bag = &ds.bags[15];
    let trace = libra_trace(&bag.features, &priors, params, &cfg.forward_config())?;

    println!(
        "bag {} (label {}), {} instances",
        bag.id,
        bag.label,
        bag.len()
    );
    println!("mu  {:.3?}", trace.marginals.mu().as_slice());
    println!("nu  {:.3?}", trace.marginals.nu().as_slice());
    println!(
        "plan after {} iterations, violation {:.1e}",
        trace.plan.iterations_run, trace.plan.marginal_violation
    );
    for (j, (s, w)) in trace
        .fused
        .as_slice()
        .iter()
        .zip(trace.reweighted.weights.as_slice())
        .enumerate()
    {
        println!("  instance {j}: fused {s:+.4}  weight {w:.4}");
    }
    println!("head 0 attention (class x instance):");
    for row in trace.attention.maps[0].iter_rows() {
        println!("  {:.3?}", row);
    }
    println!("probabilities {:.4?}", trace.probabilities.as_slice());

    let (gv, gt) = prototype_gradients(&bag.features, &priors, &model, &cfg.forward_config())?;
    let mut recorder = AttributionRecorder::new();
    recorder.record(gv, gt);
    let a = recorder.summary()?;
    let sci = |xs: &[f64]| {
        xs.iter()
            .map(|x| format!("{x:.2e}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("visual attribution  {}", sci(&a.visual));
    println!("textual attribution {}", sci(&a.textual));
    Ok(())
}
