//! The three bag classifiers and their differentiable forward pass.
//!
//! Every model has two forward routes. [`forward`] composes the plain module
//! functions (`similarity_pair`, `sinkhorn`, `fuse_scores`, ...) and is what
//! inference and inspection use. [`backward`] rebuilds the same computation on
//! an autodiff [`Tape`] to get gradients. Tests pin the two routes together.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, PROB_FLOOR};
use crate::baselines::{abmil_aggregate, max_pool, AbmilParams, HeadParams};
use crate::data::Bag;
use crate::error::{Error, Result};
use crate::fusion::{
    classify, cross_attention, fuse_scores, reweight_instances, AttentionParams, BagPriors,
    CrossAttention, FusedScores, Reweighted,
};
use crate::numkernel::{Matrix, Vector};
use crate::prototype::{
    cost_matrix, estimate_marginals, similarity_pair, PrototypeBank, SimilarityPair,
};
use crate::sinkhorn::{sinkhorn, Marginals, SinkhornOptions, TransportPlan};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Libra,
    Maxpool,
    Abmil,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Libra => "libra",
            ModelKind::Maxpool => "maxpool",
            ModelKind::Abmil => "abmil",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "libra" => Ok(Self::Libra),
            "maxpool" => Ok(Self::Maxpool),
            "abmil" => Ok(Self::Abmil),
            other => Err(Error::invalid(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraParams {
    pub bank: PrototypeBank,
    pub attention: AttentionParams,
}

/// Trainable state of one classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Libra(LibraParams),
    Maxpool(HeadParams),
    Abmil(AbmilParams),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Libra(_) => ModelKind::Libra,
            Model::Maxpool(_) => ModelKind::Maxpool,
            Model::Abmil(_) => ModelKind::Abmil,
        }
    }

    /// Trainable tensors in a fixed order, with names.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            Model::Libra(p) => vec![
                ("visual_prototypes", &p.bank.visual),
                ("textual_prototypes", &p.bank.textual),
                ("w_query", &p.attention.w_query),
                ("w_key", &p.attention.w_key),
                ("w_value", &p.attention.w_value),
                ("w_out", &p.attention.w_out),
                ("classifier", &p.attention.classifier),
                ("bias", &p.attention.bias),
            ],
            Model::Maxpool(h) => vec![("classifier", &h.weights), ("bias", &h.bias)],
            Model::Abmil(p) => vec![
                ("attention_v", &p.v),
                ("attention_w", &p.w),
                ("classifier", &p.head.weights),
                ("bias", &p.head.bias),
            ],
        }
    }

    /// Same order as [`Model::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Model::Libra(p) => vec![
                &mut p.bank.visual,
                &mut p.bank.textual,
                &mut p.attention.w_query,
                &mut p.attention.w_key,
                &mut p.attention.w_value,
                &mut p.attention.w_out,
                &mut p.attention.classifier,
                &mut p.attention.bias,
            ],
            Model::Maxpool(h) => vec![&mut h.weights, &mut h.bias],
            Model::Abmil(p) => vec![&mut p.v, &mut p.w, &mut p.head.weights, &mut p.head.bias],
        }
    }

    /// Tensors that must not move during training.
    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.tensors().len()];
        if let Model::Libra(p) = self {
            mask[1] = p.bank.freeze_textual;
        }
        mask
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::Libra(p) => p.attention.num_classes(),
            Model::Maxpool(h) => h.weights.cols(),
            Model::Abmil(p) => p.head.weights.cols(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Libra(p) => p.bank.dim(),
            Model::Maxpool(h) => h.weights.rows(),
            Model::Abmil(p) => p.v.cols(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }
}

/// Knobs that change what the forward pass computes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardConfig {
    pub sinkhorn: SinkhornOptions,
    /// Treat the marginals as constants in the backward pass.
    pub detach_marginals: bool,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            sinkhorn: SinkhornOptions::default(),
            detach_marginals: false,
        }
    }
}

/// Every intermediate of one Libra forward pass.
#[derive(Clone, Debug)]
pub struct LibraTrace {
    pub similarity: SimilarityPair,
    pub cost: Matrix,
    pub marginals: Marginals,
    pub plan: TransportPlan,
    pub fused: FusedScores,
    pub reweighted: Reweighted,
    pub attention: CrossAttention,
    pub probabilities: Vector,
}

fn check_bag(x: &Matrix, model: &Model) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::invalid("bag has no instances"));
    }
    if x.cols() != model.dim() {
        return Err(Error::invalid(format!(
            "bag width {} does not match model width {}",
            x.cols(),
            model.dim()
        )));
    }
    Ok(())
}

pub fn libra_trace(
    x: &Matrix,
    priors: &BagPriors,
    params: &LibraParams,
    cfg: &ForwardConfig,
) -> Result<LibraTrace> {
    let similarity = similarity_pair(x, &params.bank)?;
    let cost = cost_matrix(&params.bank)?;
    let marginals = estimate_marginals(&similarity)?;
    let (plan, _) = sinkhorn(&cost, &marginals, &cfg.sinkhorn)?;
    let fused = fuse_scores(&similarity, &plan)?;
    let reweighted = reweight_instances(x, &fused)?;
    let attention = cross_attention(priors, &reweighted.tokens, &params.attention)?;
    let probabilities = classify(&attention.output, &params.attention)?;
    Ok(LibraTrace {
        similarity,
        cost,
        marginals,
        plan,
        fused,
        reweighted,
        attention,
        probabilities,
    })
}

/// Class probabilities for one bag.
pub fn forward(
    bag: &Bag,
    priors: &BagPriors,
    model: &Model,
    cfg: &ForwardConfig,
) -> Result<Vector> {
    forward_features(&bag.features, priors, model, cfg)
}

pub fn forward_features(
    x: &Matrix,
    priors: &BagPriors,
    model: &Model,
    cfg: &ForwardConfig,
) -> Result<Vector> {
    check_bag(x, model)?;
    match model {
        Model::Libra(p) => Ok(libra_trace(x, priors, p, cfg)?.probabilities),
        Model::Maxpool(h) => h.probabilities(max_pool(x)?.as_slice()),
        Model::Abmil(p) => p.head.probabilities(abmil_aggregate(x, p)?.z.as_slice()),
    }
}

/// `-ln(max(p[y], 1e-12))`.
pub fn ce_loss(probs: &Vector, y: usize) -> Result<f64> {
    if y >= probs.len() {
        return Err(Error::invalid(format!(
            "label {y} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(-probs[y].max(PROB_FLOOR).ln())
}

struct Graph {
    tape: Tape,
    params: Vec<Var>,
    probs: Var,
}

fn build_graph(
    x: &Matrix,
    priors: &BagPriors,
    model: &Model,
    cfg: &ForwardConfig,
) -> Result<Graph> {
    check_bag(x, model)?;
    let mut t = Tape::new();
    let params: Vec<Var> = model
        .tensors()
        .into_iter()
        .map(|(_, m)| t.leaf(m.clone()))
        .collect();
    let xv = t.leaf(x.clone());

    let logits = match model {
        Model::Libra(p) => {
            let [pv, pt, wq, wk, wv, wo, wc, bc] = params[..] else {
                unreachable!("libra has eight tensors")
            };
            // Similarities and cost.
            let xn = t.normalize_rows(xv);
            let pvn = t.normalize_rows(pv);
            let ptn = t.normalize_rows(pt);
            let sv = t.matmul_nt(xn, pvn)?;
            let st = t.matmul_nt(xn, ptn)?;
            let cos = t.matmul_nt(pvn, ptn)?;
            let cost = t.affine(cos, -1.0, 1.0);
            // Marginals.
            let sv_mean = t.mean_rows(sv)?;
            let st_mean = t.mean_rows(st)?;
            let mut mu = t.softmax_rows(sv_mean)?;
            let mut nu = t.softmax_rows(st_mean)?;
            if cfg.detach_marginals {
                mu = t.detach(mu);
                nu = t.detach(nu);
            }
            let (plan, _) = t.sinkhorn(cost, mu, nu, &cfg.sinkhorn)?;
            // Fusion and reweighting.
            let scores = t.fuse_scores(sv, plan, st)?;
            let alpha = t.softmax_rows(scores)?;
            let tokens = t.scale_rows(xv, alpha)?;
            // Cross-attention.
            let z = t.leaf(priors.matrix().clone());
            let q = t.matmul(z, wq)?;
            let k = t.matmul(tokens, wk)?;
            let v = t.matmul(tokens, wv)?;
            let heads = p.attention.heads;
            let dh = p.attention.head_dim();
            let scale = 1.0 / (dh as f64).sqrt();
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        t.slice_cols(q, h * dh, dh)?,
                        t.slice_cols(k, h * dh, dh)?,
                        t.slice_cols(v, h * dh, dh)?,
                    )
                };
                let s = t.matmul_nt(qh, kh)?;
                let s = t.affine(s, scale, 0.0);
                let a = t.softmax_rows(s)?;
                outs.push(t.matmul(a, vh)?);
            }
            let cat = if heads == 1 {
                outs[0]
            } else {
                t.concat_cols(&outs)?
            };
            let hout = t.matmul(cat, wo)?;
            let pooled = t.mean_rows(hout)?;
            let l = t.matmul(pooled, wc)?;
            t.add_row(l, bc)?
        }
        Model::Maxpool(_) => {
            let [wc, bc] = params[..] else {
                unreachable!("maxpool has two tensors")
            };
            let z = t.max_rows(xv)?;
            let l = t.matmul(z, wc)?;
            t.add_row(l, bc)?
        }
        Model::Abmil(_) => {
            let [v, w, wc, bc] = params[..] else {
                unreachable!("abmil has four tensors")
            };
            let pre = t.matmul_nt(xv, v)?;
            let hid = t.tanh(pre);
            let s = t.matmul_nt(w, hid)?;
            let a = t.softmax_rows(s)?;
            let z = t.matmul(a, xv)?;
            let l = t.matmul(z, wc)?;
            t.add_row(l, bc)?
        }
    };
    let probs = t.softmax_rows(logits)?;
    Ok(Graph {
        tape: t,
        params,
        probs,
    })
}

/// Probabilities computed on the autodiff route.
pub fn forward_tape(
    x: &Matrix,
    priors: &BagPriors,
    model: &Model,
    cfg: &ForwardConfig,
) -> Result<Vector> {
    let g = build_graph(x, priors, model, cfg)?;
    Ok(Vector::new(g.tape.value(g.probs).as_slice().to_vec()))
}

/// Loss and per-tensor gradients for one bag, aligned with [`Model::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub loss: f64,
    pub grads: Vec<Matrix>,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            loss: 0.0,
            grads: model
                .tensors()
                .iter()
                .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &GradientSet) -> Result<()> {
        self.loss += other.loss;
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.loss *= s;
        for g in &mut self.grads {
            *g = g.scale(s);
        }
    }
}

fn collect_grads(model: &Model, graph: &Graph, output: Var) -> Result<Vec<Matrix>> {
    let grads = graph.tape.backward(output)?;
    let frozen = model.frozen_mask();
    let mut out = Vec::with_capacity(graph.params.len());
    for (i, ((name, m), var)) in model.tensors().into_iter().zip(&graph.params).enumerate() {
        let g = if frozen[i] {
            Matrix::zeros(m.rows(), m.cols())
        } else {
            grads.get_or_zeros(*var, m.shape())
        };
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
        out.push(g);
    }
    Ok(out)
}

/// Cross-entropy loss of one bag and its gradient for every trainable tensor.
pub fn backward(
    bag: &Bag,
    priors: &BagPriors,
    model: &Model,
    cfg: &ForwardConfig,
) -> Result<GradientSet> {
    let mut graph = build_graph(&bag.features, priors, model, cfg)?;
    let loss = graph.tape.neg_log_pick(graph.probs, bag.label)?;
    let value = graph.tape.value(loss)[(0, 0)];
    let grads = collect_grads(model, &graph, loss)?;
    Ok(GradientSet { loss: value, grads })
}

/// Gradient of the predicted class probability with respect to both prototype banks.
pub fn prototype_gradients(
    x: &Matrix,
    priors: &BagPriors,
    model: &Model,
    cfg: &ForwardConfig,
) -> Result<(Matrix, Matrix)> {
    if !matches!(model, Model::Libra(_)) {
        return Err(Error::invalid("prototype gradients need a libra model"));
    }
    let mut graph = build_graph(x, priors, model, cfg)?;
    let probs = Vector::new(graph.tape.value(graph.probs).as_slice().to_vec());
    let pred = probs.argmax().expect("non-empty probabilities");
    let out = graph.tape.pick(graph.probs, pred)?;
    // Attribution reads the raw gradient even for a frozen textual bank.
    let grads = graph.tape.backward(out)?;
    let (_, pv) = model.tensors()[0];
    let (_, pt) = model.tensors()[1];
    Ok((
        grads.get_or_zeros(graph.params[0], pv.shape()),
        grads.get_or_zeros(graph.params[1], pt.shape()),
    ))
}
