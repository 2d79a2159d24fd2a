//! Train the prototype model on one 4-shot fold and watch early stopping.
//!
//! cargo run --release --example fewshot_training

use libra_mil::data::{kshot_split, synth_generate, SynthSpec};
use libra_mil::fusion::BagPriors;
use libra_mil::training::{evaluate, train, TrainConfig};

fn main() -> libra_mil::Result<()> {
    env_logger::init();
    let ds = synth_generate(&SynthSpec::default(), 0)?;
    let cfg = TrainConfig {
        hidden: 128,
        ..TrainConfig::default()
    };
    let plan = kshot_split(&ds, cfg.k_shot, cfg.seed)?;
    let fold = &plan.folds[0];
    let pick = |idx: &[usize]| idx.iter().map(|&i| ds.bags[i].clone()).collect::<Vec<_>>();
    let (tr, va, te) = (pick(&fold.train), pick(&fold.val), pick(&fold.test));
    println!(
        "train {} / val {} / test {} bags",
        tr.len(),
        va.len(),
        te.len()
    );

    let priors = BagPriors::new(ds.bag_priors.clone(), ds.num_classes())?;
    let (params, history) = train(&tr, &va, &priors, &ds.instance_priors, &cfg)?;
    for rec in history.iter().step_by(10).chain(history.last()) {
        println!(
            "epoch {:3}  train {:.4}  val {:.4}  counter {}",
            rec.epoch, rec.train_loss, rec.val_loss, rec.early_stop_counter
        );
    }
    let m = evaluate(&te, &priors, &params.model, &cfg.forward_config())?;
    println!(
        "test ACC {:.2}  F1 {:.2}  AUC {:.2}",
        100.0 * m.accuracy,
        100.0 * m.macro_f1,
        100.0 * m.macro_auc
    );
    Ok(())
}
