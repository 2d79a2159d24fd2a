//! Compare reverse-mode gradients of the full pipeline, unrolled Sinkhorn
//! included, against central differences.

use libra_mil::data::Bag;
use libra_mil::fusion::{AttentionParams, BagPriors};
use libra_mil::model::{backward, ce_loss, forward, ForwardConfig, LibraParams, Model};
use libra_mil::numkernel::Matrix;
use libra_mil::prototype::PrototypeBank;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> libra_mil::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut m = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let bank = PrototypeBank::new(m(3, 8), m(3, 8))?;
    let mut attention = AttentionParams::new(8, 8, 1, 3, 1)?;
    attention.classifier = m(8, 3);
    let model = Model::Libra(LibraParams { bank, attention });
    let bag = Bag {
        id: "toy".into(),
        label: 2,
        features: m(4, 8),
    };
    let priors = BagPriors::new(m(3, 8), 3)?;
    let cfg = ForwardConfig::default();

    let analytic = backward(&bag, &priors, &model, &cfg)?;
    let loss = |m: &Model| -> libra_mil::Result<f64> {
        ce_loss(&forward(&bag, &priors, m, &cfg)?, bag.label)
    };
    let h = 1e-5;
    for (t, (name, tensor)) in model.tensors().into_iter().enumerate() {
        let (mut gap, mut scale) = (0.0f64, 0.0f64);
        for k in 0..tensor.as_slice().len() {
            let mut plus = model.clone();
            plus.tensors_mut()[t].as_mut_slice()[k] += h;
            let mut minus = model.clone();
            minus.tensors_mut()[t].as_mut_slice()[k] -= h;
            let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
            let exact = analytic.grads[t].as_slice()[k];
            gap = gap.max((numeric - exact).abs());
            scale = scale.max(exact.abs());
        }
        println!("{name:<20} max |grad| {scale:.3e}   max |analytic - numeric| {gap:.1e}");
    }
    Ok(())
}
