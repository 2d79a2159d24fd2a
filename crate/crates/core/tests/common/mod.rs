#![allow(dead_code)]

use libra_mil::baselines::{AbmilParams, HeadParams};
use libra_mil::data::Bag;
use libra_mil::fusion::{AttentionParams, BagPriors};
use libra_mil::model::{backward, ce_loss, forward, ForwardConfig, LibraParams, Model};
use libra_mil::numkernel::Matrix;
use libra_mil::prototype::PrototypeBank;
use libra_mil::sinkhorn::SinkhornOptions;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

/// Libra model with every tensor random, including the classifier.
pub fn random_libra(
    seed: u64,
    d: usize,
    kv: usize,
    kt: usize,
    h: usize,
    heads: usize,
    c: usize,
) -> Model {
    let mut r = rng(seed);
    let bank = PrototypeBank::new(
        uniform(&mut r, kv, d, -1.0, 1.0),
        uniform(&mut r, kt, d, -1.0, 1.0),
    )
    .unwrap();
    let mut attention = AttentionParams::new(d, h, heads, c, seed ^ 0x5eed).unwrap();
    attention.classifier = uniform(&mut r, h, c, -1.0, 1.0);
    attention.bias = uniform(&mut r, 1, c, -0.5, 0.5);
    Model::Libra(LibraParams { bank, attention })
}

pub fn random_maxpool(seed: u64, d: usize, c: usize) -> Model {
    let mut r = rng(seed);
    let mut head = HeadParams::zeros(d, c);
    head.weights = uniform(&mut r, d, c, -1.0, 1.0);
    head.bias = uniform(&mut r, 1, c, -0.5, 0.5);
    Model::Maxpool(head)
}

pub fn random_abmil(seed: u64, d: usize, h: usize, c: usize) -> Model {
    let mut r = rng(seed);
    let mut p = AbmilParams::new(d, h, c, seed).unwrap();
    p.head.weights = uniform(&mut r, d, c, -1.0, 1.0);
    p.head.bias = uniform(&mut r, 1, c, -0.5, 0.5);
    Model::Abmil(p)
}

pub fn random_bag(seed: u64, n: usize, d: usize, label: usize) -> Bag {
    let mut r = rng(seed);
    Bag {
        id: format!("bag{seed}"),
        label,
        features: uniform(&mut r, n, d, -1.0, 1.0),
    }
}

pub fn random_priors(seed: u64, c: usize, d: usize) -> BagPriors {
    let mut r = rng(seed);
    BagPriors::new(uniform(&mut r, c, d, -1.0, 1.0), c).unwrap()
}

/// Exactly `iters` Sinkhorn iterations, no early exit.
pub fn fixed_iters(iters: usize) -> ForwardConfig {
    ForwardConfig {
        sinkhorn: SinkhornOptions::new(0.05, iters).with_tol(0.0),
        detach_marginals: false,
    }
}

/// Worst mismatch between the analytic gradient and central differences over
/// every scalar parameter. An entry counts as exact when the absolute gap is
/// at most `abs_floor`; otherwise the gap is taken relative to the larger magnitude.
/// Reverse-mode against central differences over every parameter entry.
pub struct GradientGaps {
    /// Worst relative error among entries whose absolute gap exceeds the floor.
    pub worst_relative: f64,
    /// Worst relative error among entries with |grad| above 1e-4.
    pub worst_relative_large: f64,
    pub max_abs_gap: f64,
    pub max_abs_grad: f64,
}

pub fn gradient_gaps(
    model: &Model,
    bag: &Bag,
    priors: &BagPriors,
    cfg: &ForwardConfig,
    step: f64,
    abs_floor: f64,
) -> GradientGaps {
    let analytic = backward(bag, priors, model, cfg).unwrap();
    let loss = |m: &Model| ce_loss(&forward(bag, priors, m, cfg).unwrap(), bag.label).unwrap();
    let mut out = GradientGaps {
        worst_relative: 0.0,
        worst_relative_large: 0.0,
        max_abs_gap: 0.0,
        max_abs_grad: 0.0,
    };
    let count = model.tensors().len();
    for t in 0..count {
        let len = model.tensors()[t].1.as_slice().len();
        for k in 0..len {
            let mut plus = model.clone();
            plus.tensors_mut()[t].as_mut_slice()[k] += step;
            let mut minus = model.clone();
            minus.tensors_mut()[t].as_mut_slice()[k] -= step;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let exact = analytic.grads[t].as_slice()[k];
            let gap = (numeric - exact).abs();
            let scale = numeric.abs().max(exact.abs());
            out.max_abs_gap = out.max_abs_gap.max(gap);
            out.max_abs_grad = out.max_abs_grad.max(exact.abs());
            if gap > abs_floor {
                out.worst_relative = out.worst_relative.max(gap / scale);
            }
            if exact.abs() > 1e-4 {
                out.worst_relative_large = out.worst_relative_large.max(gap / scale);
            }
        }
    }
    out
}

pub fn worst_gradient_error(
    model: &Model,
    bag: &Bag,
    priors: &BagPriors,
    cfg: &ForwardConfig,
    step: f64,
    abs_floor: f64,
) -> f64 {
    gradient_gaps(model, bag, priors, cfg, step, abs_floor).worst_relative
}
