//! Reverse-mode differentiation over dense matrices.
//!
//! Values are recorded on a [`Tape`] in evaluation order; [`Tape::backward`]
//! walks it once in reverse. The op set is exactly what the models in this
//! crate need. Sinkhorn is a single node whose reverse pass is
//! [`sinkhorn_vjp`], so the unrolled scaling loop is differentiated as run.

use crate::error::{Error, Result};
use crate::numkernel::{
    dot, l2_norm, matmul, matmul_nt, matmul_tn, softmax_slice, Matrix, Vector, NORM_FLOOR,
};
use crate::sinkhorn::{
    sinkhorn, sinkhorn_vjp, Marginals, SinkhornOptions, SinkhornTape, TransportPlan,
};

/// Probability floor inside the negative log-likelihood.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var, Vec<f64>),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    ScaleRows(Var, Var),
    FuseScores(Var, Var, Var),
    Sinkhorn {
        cost: Var,
        mu: Var,
        nu: Var,
        tape: Box<SinkhornTape>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Pick(Var, usize),
    NegLogPick(Var, usize),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input node. Gradients are reported for every leaf.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf holding `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds the `1 x m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::invalid(format!(
                "add_row: {:?} plus row {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let value = Matrix::from_fn(av.rows(), av.cols(), |r, c| av[(r, c)] + bv[(0, c)]);
        Ok(self.push(value, Op::AddRow(a, b)))
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        self.push(value, Op::Affine(a, scale))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut value = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            value.row_mut(r).copy_from_slice(&softmax_slice(av.row(r))?);
        }
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    /// Unit-norm rows; rows with norm below the degenerate floor map to zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let norms: Vec<f64> = av.iter_rows().map(l2_norm).collect();
        let value = av.normalize_rows();
        self.push(value, Op::NormalizeRows(a, norms))
    }

    /// Column means as a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::row_vector(&self.value(a).col_means()?);
        Ok(self.push(value, Op::MeanRows(a)))
    }

    /// Column maxima as a `1 x cols` row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rows() == 0 {
            return Err(Error::invalid("max over an empty set of rows"));
        }
        let mut arg = vec![0usize; av.cols()];
        let mut best = av.row(0).to_vec();
        for r in 1..av.rows() {
            for (c, &x) in av.row(r).iter().enumerate() {
                if x > best[c] {
                    best[c] = x;
                    arg[c] = r;
                }
            }
        }
        Ok(self.push(Matrix::row_vector(&best), Op::MaxRows(a, arg)))
    }

    /// Row `j` of `x` multiplied by entry `j` of the `1 x n` row `w`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rows() != 1 || wv.cols() != xv.rows() {
            return Err(Error::invalid(format!(
                "scale_rows: weights {:?} for {} rows",
                wv.shape(),
                xv.rows()
            )));
        }
        let value = Matrix::from_fn(xv.rows(), xv.cols(), |r, c| wv[(0, r)] * xv[(r, c)]);
        Ok(self.push(value, Op::ScaleRows(x, w)))
    }

    /// `s_j = Sv(j,:) T St(j,:)^T` as a `1 x n` row.
    pub fn fuse_scores(&mut self, sv: Var, t: Var, st: Var) -> Result<Var> {
        let (svv, tv, stv) = (self.value(sv), self.value(t), self.value(st));
        if svv.rows() != stv.rows() || svv.cols() != tv.rows() || stv.cols() != tv.cols() {
            return Err(Error::invalid(format!(
                "fuse_scores: {:?} . {:?} . {:?}^T",
                svv.shape(),
                tv.shape(),
                stv.shape()
            )));
        }
        let svt = matmul(svv, tv)?;
        let scores: Vec<f64> = (0..svv.rows())
            .map(|j| dot(svt.row(j), stv.row(j)))
            .collect();
        Ok(self.push(Matrix::row_vector(&scores), Op::FuseScores(sv, t, st)))
    }

    /// Transport plan for cost `cost` between the `1 x K` rows `mu` and `nu`.
    pub fn sinkhorn(
        &mut self,
        cost: Var,
        mu: Var,
        nu: Var,
        opts: &SinkhornOptions,
    ) -> Result<(Var, TransportPlan)> {
        let marg = Marginals::new(
            Vector::new(self.value(mu).as_slice().to_vec()),
            Vector::new(self.value(nu).as_slice().to_vec()),
        )?;
        let (plan, tape) = sinkhorn(self.value(cost), &marg, opts)?;
        let var = self.push(
            plan.plan.clone(),
            Op::Sinkhorn {
                cost,
                mu,
                nu,
                tape: Box::new(tape),
            },
        );
        Ok((var, plan))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let blocks: Vec<Matrix> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Matrix::concat_cols(&blocks)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Entry `idx` of a `1 x m` row, as `1 x 1`.
    pub fn pick(&mut self, a: Var, idx: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != 1 || idx >= av.cols() {
            return Err(Error::invalid(format!("pick {idx} from {:?}", av.shape())));
        }
        let value = Matrix::filled(1, 1, av[(0, idx)]);
        Ok(self.push(value, Op::Pick(a, idx)))
    }

    /// `-ln(max(p[idx], 1e-12))` for a `1 x c` probability row.
    pub fn neg_log_pick(&mut self, probs: Var, idx: usize) -> Result<Var> {
        let pv = self.value(probs);
        if pv.rows() != 1 || idx >= pv.cols() {
            return Err(Error::invalid(format!(
                "class index {idx} out of range for {} classes",
                pv.cols()
            )));
        }
        let value = Matrix::filled(1, 1, -pv[(0, idx)].max(PROB_FLOOR).ln());
        Ok(self.push(value, Op::NegLogPick(probs, idx)))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let mut acc = |v: Var, delta: Matrix| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, matmul_nt(g, self.value(*b))?)?;
                acc(*b, matmul_tn(self.value(*a), g)?)?;
            }
            Op::MatMulNt(a, b) => {
                acc(*a, matmul(g, self.value(*b))?)?;
                acc(*b, matmul_tn(g, self.value(*a))?)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, Matrix::row_vector(&g.col_sums()))?;
            }
            Op::Affine(a, scale) => acc(*a, g.scale(*scale))?,
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))?)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gy = dot(g.row(r), y.row(r));
                    for (o, (&gi, &yi)) in
                        d.row_mut(r).iter_mut().zip(g.row(r).iter().zip(y.row(r)))
                    {
                        *o = yi * (gi - gy);
                    }
                }
                acc(*a, d)?;
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    if norms[r] < NORM_FLOOR {
                        continue;
                    }
                    let gy = dot(g.row(r), y.row(r));
                    for (o, (&gi, &yi)) in
                        d.row_mut(r).iter_mut().zip(g.row(r).iter().zip(y.row(r)))
                    {
                        *o = (gi - yi * gy) / norms[r];
                    }
                }
                acc(*a, d)?;
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let n = rows as f64;
                acc(*a, Matrix::from_fn(rows, g.cols(), |_, c| g[(0, c)] / n))?;
            }
            Op::MaxRows(a, arg) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for (c, &r) in arg.iter().enumerate() {
                    d[(r, c)] = g[(0, c)];
                }
                acc(*a, d)?;
            }
            Op::ScaleRows(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let gx = Matrix::from_fn(xv.rows(), xv.cols(), |r, c| wv[(0, r)] * g[(r, c)]);
                let gw: Vec<f64> = (0..xv.rows()).map(|r| dot(g.row(r), xv.row(r))).collect();
                acc(*x, gx)?;
                acc(*w, Matrix::row_vector(&gw))?;
            }
            Op::FuseScores(sv, t, st) => {
                let (svv, tv, stv) = (self.value(*sv), self.value(*t), self.value(*st));
                let n = svv.rows();
                // dS_v = diag(g) S_t T^T, dS_t = diag(g) S_v T, dT = S_v^T diag(g) S_t
                let st_tt = matmul_nt(stv, tv)?;
                let sv_t = matmul(svv, tv)?;
                let gsv = Matrix::from_fn(n, svv.cols(), |j, a| g[(0, j)] * st_tt[(j, a)]);
                let gst = Matrix::from_fn(n, stv.cols(), |j, b| g[(0, j)] * sv_t[(j, b)]);
                let weighted = Matrix::from_fn(n, stv.cols(), |j, b| g[(0, j)] * stv[(j, b)]);
                acc(*sv, gsv)?;
                acc(*st, gst)?;
                acc(*t, matmul_tn(svv, &weighted)?)?;
            }
            Op::Sinkhorn { cost, mu, nu, tape } => {
                let sg = sinkhorn_vjp(tape, g)?;
                acc(*cost, sg.cost)?;
                acc(*mu, Matrix::row_vector(sg.mu.as_slice()))?;
                acc(*nu, Matrix::row_vector(sg.nu.as_slice()))?;
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, d)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, g.slice_cols(start, w)?)?;
                    start += w;
                }
            }
            Op::Pick(a, idx) => {
                let mut d = Matrix::zeros(1, self.value(*a).cols());
                d[(0, *idx)] = g[(0, 0)];
                acc(*a, d)?;
            }
            Op::NegLogPick(a, idx) => {
                let pv = self.value(*a);
                let mut d = Matrix::zeros(1, pv.cols());
                let p = pv[(0, *idx)];
                if p > PROB_FLOOR {
                    d[(0, *idx)] = -g[(0, 0)] / p;
                }
                acc(*a, d)?;
            }
        }
        Ok(())
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled to `shape` when `v` did not reach the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}
