//! Few-shot training: Adam, the epoch loop with early stopping, evaluation
//! and the five-fold driver.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{AbmilParams, HeadParams};
use crate::data::{kshot_split, Bag, Dataset};
use crate::error::{Error, Result};
use crate::fusion::{AttentionParams, BagPriors};
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{
    backward, ce_loss, forward, ForwardConfig, GradientSet, LibraParams, Model, ModelKind,
};
use crate::numkernel::{Matrix, Vector};
use crate::prototype::{init_visual_prototypes, InitStrategy, PrototypeBank};
use crate::sinkhorn::SinkhornOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Bags per gradient-accumulation group.
    pub batch_size: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub ot_iters: usize,
    pub sinkhorn_tol: f64,
    pub log_domain: bool,
    pub k_shot: usize,
    pub model_kind: ModelKind,
    pub k_v: usize,
    pub hidden: usize,
    pub heads: usize,
    pub init_strategy: InitStrategy,
    pub freeze_textual: bool,
    pub detach_marginals: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            max_epochs: 80,
            patience: 15,
            batch_size: 1,
            seed: 0,
            epsilon: 0.05,
            ot_iters: 20,
            sinkhorn_tol: 1e-9,
            log_domain: false,
            k_shot: 4,
            model_kind: ModelKind::Libra,
            k_v: 10,
            hidden: 512,
            heads: 8,
            init_strategy: InitStrategy::Kmeans,
            freeze_textual: false,
            detach_marginals: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::invalid(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.ot_iters == 0 {
            return Err(Error::invalid("ot_iters must be at least 1"));
        }
        if self.k_shot == 0 {
            return Err(Error::invalid("k_shot must be at least 1"));
        }
        if self.k_v == 0 {
            return Err(Error::invalid("k_v must be at least 1"));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::invalid(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn forward_config(&self) -> ForwardConfig {
        ForwardConfig {
            sinkhorn: SinkhornOptions::new(self.epsilon, self.ot_iters)
                .with_tol(self.sinkhorn_tol)
                .with_log_domain(self.log_domain),
            detach_marginals: self.detach_marginals,
        }
    }
}

/// Adam with bias correction. Frozen tensors keep zero moments and never move.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(model: &Model, learning_rate: f64) -> Self {
        let zeros: Vec<Matrix> = model
            .tensors()
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, model: &mut Model, grads: &GradientSet) -> Result<()> {
        let frozen = model.frozen_mask();
        let names: Vec<&'static str> = model.tensors().iter().map(|(n, _)| *n).collect();
        if grads.grads.len() != names.len() || self.m.len() != names.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, model has {}, gradient set has {}",
                self.m.len(),
                names.len(),
                grads.grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for (i, p) in model.tensors_mut().into_iter().enumerate() {
            if frozen[i] {
                continue;
            }
            let g = &grads.grads[i];
            if g.shape() != p.shape() {
                return Err(Error::State(format!(
                    "gradient for {} has shape {:?}, tensor has {:?}",
                    names[i],
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = (self.m[i].as_mut_slice(), self.v[i].as_mut_slice());
            for (((pk, &gk), mk), vk) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v)
            {
                *mk = b1 * *mk + (1.0 - b1) * gk;
                *vk = b2 * *vk + (1.0 - b2) * gk * gk;
                *pk -= lr * (*mk / c1) / ((*vk / c2).sqrt() + eps);
            }
            if !p.is_finite() {
                return Err(Error::Numeric(format!(
                    "{} became non-finite at optimizer step {}",
                    names[i], self.step
                )));
            }
        }
        Ok(())
    }
}

/// Trainable model plus its optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub model: Model,
    pub optimizer: Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub early_stop_counter: usize,
}

/// Independent seeds for initialization and shuffling, all drawn from `seed`.
struct SeedPlan {
    prototypes: u64,
    weights: u64,
    shuffle: u64,
}

impl SeedPlan {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            prototypes: rng.random(),
            weights: rng.random(),
            shuffle: rng.random(),
        }
    }
}

/// Fresh model for `cfg.model_kind`. Libra's visual bank comes from the
/// support bags, its textual bank from the instance priors.
pub fn init_model(
    support: &[Bag],
    dim: usize,
    classes: usize,
    instance_priors: &Matrix,
    cfg: &TrainConfig,
) -> Result<Model> {
    cfg.validate()?;
    let seeds = SeedPlan::new(cfg.seed);
    match cfg.model_kind {
        ModelKind::Libra => {
            let init = init_visual_prototypes(
                Some(support),
                cfg.k_v,
                dim,
                cfg.init_strategy,
                seeds.prototypes,
            )?;
            let mut bank = PrototypeBank::new(init.prototypes, instance_priors.clone())?;
            bank.freeze_textual = cfg.freeze_textual;
            let attention =
                AttentionParams::new(dim, cfg.hidden, cfg.heads, classes, seeds.weights)?;
            Ok(Model::Libra(LibraParams { bank, attention }))
        }
        ModelKind::Maxpool => Ok(Model::Maxpool(HeadParams::zeros(dim, classes))),
        ModelKind::Abmil => Ok(Model::Abmil(AbmilParams::new(
            dim,
            cfg.hidden,
            classes,
            seeds.weights,
        )?)),
    }
}

/// Probabilities for every bag, evaluated in parallel and returned in input order.
pub fn predict(
    bags: &[Bag],
    priors: &BagPriors,
    model: &Model,
    fcfg: &ForwardConfig,
) -> Result<Vec<Vector>> {
    bags.par_iter()
        .map(|b| forward(b, priors, model, fcfg))
        .collect()
}

/// Mean cross-entropy over `bags`.
pub fn mean_loss(
    bags: &[Bag],
    priors: &BagPriors,
    model: &Model,
    fcfg: &ForwardConfig,
) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::invalid("cannot average a loss over no bags"));
    }
    let probs = predict(bags, priors, model, fcfg)?;
    let mut total = 0.0;
    for (p, b) in probs.iter().zip(bags) {
        total += ce_loss(p, b.label)?;
    }
    Ok(total / bags.len() as f64)
}

pub fn evaluate(
    test: &[Bag],
    priors: &BagPriors,
    model: &Model,
    fcfg: &ForwardConfig,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let probs = predict(test, priors, model, fcfg)?;
    let labels: Vec<usize> = test.iter().map(|b| b.label).collect();
    compute_metrics(&probs, &labels, priors.num_classes())
}

/// Loss-averaged gradient of one accumulation group. Backward passes run in
/// parallel; the reduction is in group order so the result is deterministic.
fn group_gradient(
    group: &[&Bag],
    priors: &BagPriors,
    model: &Model,
    fcfg: &ForwardConfig,
) -> Result<GradientSet> {
    let parts: Vec<GradientSet> = group
        .par_iter()
        .map(|b| backward(b, priors, model, fcfg))
        .collect::<Result<_>>()?;
    let mut total = GradientSet::zeros_like(model);
    for p in &parts {
        total.accumulate(p)?;
    }
    total.scale(1.0 / group.len() as f64);
    Ok(total)
}

/// Trains `model` in place of a fresh one and returns the checkpoint with the
/// lowest validation loss together with the per-epoch history.
pub fn train_model(
    model: Model,
    train: &[Bag],
    val: &[Bag],
    priors: &BagPriors,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    if val.is_empty() {
        return Err(Error::invalid("empty validation split"));
    }
    let fcfg = cfg.forward_config();
    let mut rng = ChaCha8Rng::seed_from_u64(SeedPlan::new(cfg.seed).shuffle);
    let mut current = ModelParams {
        optimizer: Adam::new(&model, cfg.learning_rate),
        model,
    };
    let mut best = current.clone();
    let mut best_val = f64::INFINITY;
    let mut counter = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let group: Vec<&Bag> = chunk.iter().map(|&i| &train[i]).collect();
            let g = group_gradient(&group, priors, &current.model, &fcfg)?;
            loss_sum += g.loss * group.len() as f64;
            current.optimizer.apply(&mut current.model, &g)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = mean_loss(val, priors, &current.model, &fcfg)?;
        if val_loss < best_val {
            best_val = val_loss;
            best = current.clone();
            counter = 0;
        } else {
            counter += 1;
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: cfg.learning_rate,
            early_stop_counter: counter,
        });
        info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} counter {counter}");
        if counter >= cfg.patience.max(1) {
            break;
        }
    }
    Ok((best, history))
}

/// Builds the initial model from the training split and trains it.
pub fn train(
    train_set: &[Bag],
    val_set: &[Bag],
    priors: &BagPriors,
    instance_priors: &Matrix,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    let first = train_set
        .first()
        .ok_or_else(|| Error::invalid("empty training split"))?;
    let model = init_model(
        train_set,
        first.features.cols(),
        priors.num_classes(),
        instance_priors,
        cfg,
    )?;
    train_model(model, train_set, val_set, priors, cfg)
}

/// Everything one cross-validation fold produces.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub metrics: Metrics,
}

fn pick(ds: &Dataset, idx: &[usize]) -> Vec<Bag> {
    idx.iter().map(|&i| ds.bags[i].clone()).collect()
}

/// k-shot split, then train and test each fold. Folds run sequentially
/// unless `parallel_folds` is set; results are identical either way.
pub fn cross_validate(
    ds: &Dataset,
    cfg: &TrainConfig,
    parallel_folds: bool,
) -> Result<Vec<FoldOutcome>> {
    cfg.validate()?;
    ds.validate()?;
    let plan = kshot_split(ds, cfg.k_shot, cfg.seed)?;
    for w in &plan.warnings {
        warn!("{w}");
    }
    let priors = BagPriors::new(ds.bag_priors.clone(), ds.num_classes())?;
    let run = |(i, fold): (usize, &crate::data::Fold)| -> Result<FoldOutcome> {
        let train_set = pick(ds, &fold.train);
        let val_set = pick(ds, &fold.val);
        let test_set = pick(ds, &fold.test);
        let (params, history) = train(&train_set, &val_set, &priors, &ds.instance_priors, cfg)?;
        let metrics = evaluate(&test_set, &priors, &params.model, &cfg.forward_config())?;
        info!(
            "fold {i}: acc {:.4} f1 {:.4} auc {:.4}",
            metrics.accuracy, metrics.macro_f1, metrics.macro_auc
        );
        Ok(FoldOutcome {
            fold: i,
            params,
            history,
            metrics,
        })
    };
    if parallel_folds {
        plan.folds.par_iter().enumerate().map(run).collect()
    } else {
        plan.folds.iter().enumerate().map(run).collect()
    }
}
