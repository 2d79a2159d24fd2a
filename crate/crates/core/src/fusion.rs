//! Instance scoring through the transport plan, bag-prior cross-attention and
//! the classification head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{dot, matmul, matmul_nt, softmax_slice, Matrix, Vector};
use crate::prototype::SimilarityPair;
use crate::sinkhorn::TransportPlan;

/// One relevance score per instance, each in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedScores(pub Vector);

impl FusedScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Class-level prior embeddings used as attention queries, `c x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct BagPriors(pub Matrix);

impl BagPriors {
    pub fn new(z_bag: Matrix, classes: usize) -> Result<Self> {
        if z_bag.rows() != classes {
            return Err(Error::invalid(format!(
                "bag priors have {} rows for {classes} classes",
                z_bag.rows()
            )));
        }
        Ok(Self(z_bag))
    }

    pub fn num_classes(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Cross-attention projections and the classifier head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub hidden: usize,
    pub heads: usize,
    /// `d x h`
    pub w_query: Matrix,
    /// `d x h`
    pub w_key: Matrix,
    /// `d x h`
    pub w_value: Matrix,
    /// `h x h`
    pub w_out: Matrix,
    /// `h x c`
    pub classifier: Matrix,
    /// `1 x c`
    pub bias: Matrix,
}

/// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound))
}

impl AttentionParams {
    /// Seeded projections; the classifier starts at zero so an untrained model is uniform.
    pub fn new(dim: usize, hidden: usize, heads: usize, classes: usize, seed: u64) -> Result<Self> {
        if heads == 0 || hidden == 0 || hidden % heads != 0 {
            return Err(Error::invalid(format!(
                "hidden width {hidden} is not divisible by {heads} heads"
            )));
        }
        if dim == 0 || classes == 0 {
            return Err(Error::invalid(
                "attention needs positive width and class count",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            hidden,
            heads,
            w_query: xavier_uniform(dim, hidden, &mut rng),
            w_key: xavier_uniform(dim, hidden, &mut rng),
            w_value: xavier_uniform(dim, hidden, &mut rng),
            w_out: xavier_uniform(hidden, hidden, &mut rng),
            classifier: Matrix::zeros(hidden, classes),
            bias: Matrix::zeros(1, classes),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.cols()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let h = self.hidden;
        let c = self.classifier.cols();
        let ok = self.heads > 0
            && h % self.heads == 0
            && self.w_query.shape() == (dim, h)
            && self.w_key.shape() == (dim, h)
            && self.w_value.shape() == (dim, h)
            && self.w_out.shape() == (h, h)
            && self.classifier.rows() == h
            && self.bias.shape() == (1, c);
        if !ok {
            return Err(Error::invalid(format!(
                "attention parameters inconsistent with width {dim}, hidden {h}, {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// `scores[j] = S_v(j,:) T S_t(j,:)^T`.
pub fn fuse_scores(sp: &SimilarityPair, plan: &TransportPlan) -> Result<FusedScores> {
    let (sv, st, t) = (&sp.s_visual, &sp.s_textual, &plan.plan);
    if sv.rows() != st.rows() || sv.cols() != t.rows() || st.cols() != t.cols() {
        return Err(Error::invalid(format!(
            "fuse_scores: S_v {:?}, T {:?}, S_t {:?}",
            sv.shape(),
            t.shape(),
            st.shape()
        )));
    }
    let svt = matmul(sv, t)?;
    let scores = (0..sv.rows()).map(|j| dot(svt.row(j), st.row(j))).collect();
    Ok(FusedScores(Vector::new(scores)))
}

/// Softmax instance weights and the reweighted token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Reweighted {
    pub weights: Vector,
    pub tokens: Matrix,
}

/// `alpha = softmax(scores)`, `tokens[j] = alpha_j * x_j`.
pub fn reweight_instances(x: &Matrix, fs: &FusedScores) -> Result<Reweighted> {
    if x.rows() != fs.len() {
        return Err(Error::invalid(format!(
            "{} instances but {} fused scores",
            x.rows(),
            fs.len()
        )));
    }
    let alpha = softmax_slice(fs.as_slice())?;
    let tokens = Matrix::from_fn(x.rows(), x.cols(), |r, c| alpha[r] * x[(r, c)]);
    Ok(Reweighted {
        weights: Vector::new(alpha),
        tokens,
    })
}

/// Output of the bag-prior cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    /// `c x h`, after the output projection.
    pub output: Matrix,
    /// One `c x n` attention map per head.
    pub maps: Vec<Matrix>,
}

/// Multi-head scaled dot-product attention: queries from the bag priors,
/// keys and values from the reweighted tokens.
pub fn cross_attention(
    priors: &BagPriors,
    tokens: &Matrix,
    params: &AttentionParams,
) -> Result<CrossAttention> {
    params.validate(tokens.cols())?;
    if priors.0.cols() != tokens.cols() {
        return Err(Error::invalid(format!(
            "bag priors have width {}, tokens {}",
            priors.0.cols(),
            tokens.cols()
        )));
    }
    if tokens.rows() == 0 {
        return Err(Error::invalid("cross-attention over an empty bag"));
    }
    let q = matmul(&priors.0, &params.w_query)?;
    let k = matmul(tokens, &params.w_key)?;
    let v = matmul(tokens, &params.w_value)?;
    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut maps = Vec::with_capacity(params.heads);
    let mut outs = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let logits = matmul_nt(&qh, &kh)?.scale(scale);
        let mut attn = Matrix::zeros(logits.rows(), logits.cols());
        for r in 0..logits.rows() {
            attn.row_mut(r)
                .copy_from_slice(&softmax_slice(logits.row(r))?);
        }
        outs.push(matmul(&attn, &vh)?);
        maps.push(attn);
    }
    let output = matmul(&Matrix::concat_cols(&outs)?, &params.w_out)?;
    output.ensure_finite("cross-attention output")?;
    Ok(CrossAttention { output, maps })
}

/// Affine head on the mean of the attention rows.
pub fn class_logits(h: &Matrix, params: &AttentionParams) -> Result<Vector> {
    if h.cols() != params.classifier.rows() {
        return Err(Error::invalid(format!(
            "pooled width {} does not match classifier input {}",
            h.cols(),
            params.classifier.rows()
        )));
    }
    let pooled = Matrix::row_vector(&h.col_means()?);
    let logits = matmul(&pooled, &params.classifier)?.add(&params.bias)?;
    Ok(Vector::new(logits.into_vec()))
}

/// Class probabilities for the attention output `h`.
pub fn classify(h: &Matrix, params: &AttentionParams) -> Result<Vector> {
    let logits = class_logits(h, params)?;
    softmax_slice(logits.as_slice()).map(Vector::new)
}

/// Mean absolute gradient per prototype row.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeAttribution {
    pub visual: Vec<f64>,
    pub textual: Vec<f64>,
}

impl PrototypeAttribution {
    pub fn visual_mean(&self) -> f64 {
        mean(&self.visual)
    }

    pub fn textual_mean(&self) -> f64 {
        mean(&self.textual)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn row_mean_abs(m: &Matrix) -> Vec<f64> {
    m.iter_rows()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>() / r.len().max(1) as f64)
        .collect()
}

/// Holds prototype gradients from the most recent backward pass.
#[derive(Clone, Debug, Default)]
pub struct AttributionRecorder {
    grads: Option<(Matrix, Matrix)>,
}

impl AttributionRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, visual: Matrix, textual: Matrix) {
        self.grads = Some((visual, textual));
    }

    pub fn gradients(&self) -> Option<(&Matrix, &Matrix)> {
        self.grads.as_ref().map(|(v, t)| (v, t))
    }

    pub fn summary(&self) -> Result<PrototypeAttribution> {
        let (v, t) = self
            .gradients()
            .ok_or_else(|| Error::State("no backward pass has been recorded".into()))?;
        Ok(prototype_attribution(v, t))
    }
}

pub fn prototype_attribution(grad_visual: &Matrix, grad_textual: &Matrix) -> PrototypeAttribution {
    PrototypeAttribution {
        visual: row_mean_abs(grad_visual),
        textual: row_mean_abs(grad_textual),
    }
}
