//! Reference aggregators: element-wise max pooling and attention-based MIL.
//! Both feed an affine + softmax head of the same shape as the main model's.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::xavier_uniform;
use crate::numkernel::{dot, matmul, matvec, softmax_slice, Matrix, Vector};

/// Classifier head `d -> c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `d x c`
    pub weights: Matrix,
    /// `1 x c`
    pub bias: Matrix,
}

impl HeadParams {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            weights: Matrix::zeros(dim, classes),
            bias: Matrix::zeros(1, classes),
        }
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vector> {
        let l = matmul(&Matrix::row_vector(z), &self.weights)?.add(&self.bias)?;
        Ok(Vector::new(l.into_vec()))
    }

    pub fn probabilities(&self, z: &[f64]) -> Result<Vector> {
        softmax_slice(self.logits(z)?.as_slice()).map(Vector::new)
    }
}

/// `out[t] = max_j X(j, t)`.
pub fn max_pool(x: &Matrix) -> Result<Vector> {
    if x.rows() == 0 {
        return Err(Error::invalid("max pooling over an empty bag"));
    }
    let mut out = x.row(0).to_vec();
    for row in x.iter_rows().skip(1) {
        for (o, &v) in out.iter_mut().zip(row) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(Vector::new(out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbmilParams {
    /// `h x d`
    pub v: Matrix,
    /// `1 x h`
    pub w: Matrix,
    pub head: HeadParams,
}

impl AbmilParams {
    pub fn new(dim: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        if dim == 0 || hidden == 0 || classes == 0 {
            return Err(Error::invalid(
                "abmil needs positive width, hidden size and class count",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            v: xavier_uniform(hidden, dim, &mut rng),
            w: xavier_uniform(1, hidden, &mut rng),
            head: HeadParams::zeros(dim, classes),
        })
    }
}

/// Attention weights over instances and the weighted bag embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct AbmilOutput {
    pub weights: Vector,
    pub z: Vector,
}

/// `a_j = softmax_j(w^T tanh(V x_j))`, `z = sum_j a_j x_j`.
pub fn abmil_aggregate(x: &Matrix, params: &AbmilParams) -> Result<AbmilOutput> {
    if x.rows() == 0 {
        return Err(Error::invalid("abmil over an empty bag"));
    }
    if params.v.cols() != x.cols() || params.w.shape() != (1, params.v.rows()) {
        return Err(Error::invalid(format!(
            "abmil: V {:?}, w {:?}, instances {:?}",
            params.v.shape(),
            params.w.shape(),
            x.shape()
        )));
    }
    let scores: Vec<f64> = x
        .iter_rows()
        .map(|row| {
            let hidden: Vec<f64> =
                matvec(&params.v, row).map(|h| h.into_iter().map(f64::tanh).collect())?;
            Ok(dot(params.w.row(0), &hidden))
        })
        .collect::<Result<_>>()?;
    let a = softmax_slice(&scores)?;
    let mut z = vec![0.0; x.cols()];
    for (row, &aj) in x.iter_rows().zip(&a) {
        for (o, &v) in z.iter_mut().zip(row) {
            *o += aj * v;
        }
    }
    Ok(AbmilOutput {
        weights: Vector::new(a),
        z: Vector::new(z),
    })
}
