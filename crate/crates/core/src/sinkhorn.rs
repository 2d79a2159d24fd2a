//! Entropy-regularized optimal transport between two discrete marginals.
//!
//! The solver runs the classic alternating scaling recurrence
//!
//! ```text
//! K = exp(-C / eps)
//! u <- mu ./ (K v)
//! v <- nu ./ (K^T u)
//! T = diag(u) K diag(v)
//! ```
//!
//! starting from `u = v = 1`, and records every intermediate scaling vector
//! on a [`SinkhornTape`] so that [`sinkhorn_vjp`] can replay the unrolled
//! loop backwards. The gradient is exact for the iterations actually run.
//!
//! A log-domain variant (potentials `f = eps log u`, `g = eps log v`) is
//! available for very small `eps`, where even the clamped kernel loses all
//! resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{matvec, matvec_t, Matrix, Vector};

/// Lower bound for kernel entries and scaling denominators.
pub const KERNEL_FLOOR: f64 = 1e-300;

/// Tolerance on `|sum - 1|` when validating a marginal.
pub const SIMPLEX_TOL: f64 = 1e-10;

/// Solver knobs. Defaults follow the training setup: `eps = 0.05`, 20 iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Early exit once the marginal violation drops to this level.
    pub tol: f64,
    pub log_domain: bool,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 20,
            tol: 1e-9,
            log_domain: false,
        }
    }
}

impl SinkhornOptions {
    pub fn new(epsilon: f64, max_iters: usize) -> Self {
        Self {
            epsilon,
            max_iters,
            ..Self::default()
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_log_domain(mut self, log_domain: bool) -> Self {
        self.log_domain = log_domain;
        self
    }
}

/// Source and target distributions, each on its probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    mu: Vector,
    nu: Vector,
}

fn check_simplex(v: &Vector, name: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid(format!("marginal {name} is empty")));
    }
    if let Some(i) = v
        .as_slice()
        .iter()
        .position(|&x| !(x > 0.0) || !x.is_finite())
    {
        return Err(Error::invalid(format!(
            "marginal {name} entry {i} = {} is not strictly positive",
            v[i]
        )));
    }
    let s = v.sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!(
            "marginal {name} sums to {s}, not 1"
        )));
    }
    Ok(())
}

impl Marginals {
    pub fn new(mu: Vector, nu: Vector) -> Result<Self> {
        check_simplex(&mu, "mu")?;
        check_simplex(&nu, "nu")?;
        Ok(Self { mu, nu })
    }

    pub fn uniform(kv: usize, kt: usize) -> Result<Self> {
        if kv == 0 || kt == 0 {
            return Err(Error::invalid("uniform marginals need at least one atom"));
        }
        Self::new(
            Vector::filled(kv, 1.0 / kv as f64),
            Vector::filled(kt, 1.0 / kt as f64),
        )
    }

    pub fn mu(&self) -> &Vector {
        &self.mu
    }

    pub fn nu(&self) -> &Vector {
        &self.nu
    }
}

/// Coupling returned by the solver, with its marginal certificate.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub iterations_run: usize,
    /// Largest absolute row- or column-sum error against `(mu, nu)`.
    pub marginal_violation: f64,
}

impl TransportPlan {
    pub fn total_mass(&self) -> f64 {
        self.plan.sum()
    }
}

/// Everything needed to replay a solve in reverse.
#[derive(Clone, Debug)]
pub struct SinkhornTape {
    epsilon: f64,
    kv: usize,
    kt: usize,
    mu: Vec<f64>,
    nu: Vec<f64>,
    record: TapeRecord,
}

#[derive(Clone, Debug)]
enum TapeRecord {
    Standard {
        kernel: Matrix,
        /// Entries where the kernel floor was engaged; their `dK/dC` is zero.
        clamped: Vec<bool>,
        /// `(K v_{l-1}, u_l, K^T u_l, v_l)` per iteration, denominators after flooring.
        steps: Vec<ScaleStep>,
    },
    Log {
        cost: Matrix,
        /// `(f_l, g_l)` per iteration.
        steps: Vec<(Vec<f64>, Vec<f64>)>,
    },
}

#[derive(Clone, Debug)]
struct ScaleStep {
    kv_prod: Vec<f64>,
    u: Vec<f64>,
    ktu_prod: Vec<f64>,
    v: Vec<f64>,
}

impl SinkhornTape {
    /// Number of recorded iterations; equals `iterations_run` of the plan.
    pub fn len(&self) -> usize {
        match &self.record {
            TapeRecord::Standard { steps, .. } => steps.len(),
            TapeRecord::Log { steps, .. } => steps.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.kv, self.kt)
    }

    pub fn is_log_domain(&self) -> bool {
        matches!(self.record, TapeRecord::Log { .. })
    }
}

/// `K(i,j) = max(exp(-C(i,j)/eps), 1e-300)`.
pub fn gibbs_kernel(cost: &Matrix, epsilon: f64) -> Result<Matrix> {
    Ok(gibbs_kernel_masked(cost, epsilon)?.0)
}

fn gibbs_kernel_masked(cost: &Matrix, epsilon: f64) -> Result<(Matrix, Vec<bool>)> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    cost.ensure_finite("cost matrix")
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut clamped = vec![false; cost.len()];
    let k = Matrix::from_fn(cost.rows(), cost.cols(), |r, c| {
        let v = (-cost[(r, c)] / epsilon).exp();
        if v < KERNEL_FLOOR {
            clamped[r * cost.cols() + c] = true;
            KERNEL_FLOOR
        } else {
            v
        }
    });
    Ok((k, clamped))
}

fn marginal_violation(plan: &Matrix, mu: &[f64], nu: &[f64]) -> f64 {
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    let r = rows
        .iter()
        .zip(mu)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let c = cols
        .iter()
        .zip(nu)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    r.max(c)
}

fn check_inputs(cost: &Matrix, m: &Marginals, opts: &SinkhornOptions) -> Result<()> {
    if cost.rows() != m.mu.len() || cost.cols() != m.nu.len() {
        return Err(Error::invalid(format!(
            "cost is {}x{} but marginals have lengths {} and {}",
            cost.rows(),
            cost.cols(),
            m.mu.len(),
            m.nu.len()
        )));
    }
    if opts.max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    check_simplex(&m.mu, "mu")?;
    check_simplex(&m.nu, "nu")
}

/// Solves the entropic OT problem and returns the plan together with its tape.
pub fn sinkhorn(
    cost: &Matrix,
    marginals: &Marginals,
    opts: &SinkhornOptions,
) -> Result<(TransportPlan, SinkhornTape)> {
    check_inputs(cost, marginals, opts)?;
    if opts.log_domain {
        sinkhorn_log(cost, marginals, opts)
    } else {
        sinkhorn_standard(cost, marginals, opts)
    }
}

fn nan_check(xs: &[f64], iter: usize, what: &str) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite {what} at sinkhorn iteration {iter}"
        )));
    }
    Ok(())
}

fn sinkhorn_standard(
    cost: &Matrix,
    m: &Marginals,
    opts: &SinkhornOptions,
) -> Result<(TransportPlan, SinkhornTape)> {
    let (kernel, clamped) = gibbs_kernel_masked(cost, opts.epsilon)?;
    let mu = m.mu.as_slice();
    let nu = m.nu.as_slice();
    let mut v = vec![1.0; nu.len()];
    let mut steps = Vec::with_capacity(opts.max_iters);

    for iter in 1..=opts.max_iters {
        let mut kv_prod = matvec(&kernel, &v)?;
        kv_prod.iter_mut().for_each(|x| *x = x.max(KERNEL_FLOOR));
        let u: Vec<f64> = mu.iter().zip(&kv_prod).map(|(a, b)| a / b).collect();
        nan_check(&u, iter, "u")?;

        let mut ktu_prod = matvec_t(&kernel, &u)?;
        ktu_prod.iter_mut().for_each(|x| *x = x.max(KERNEL_FLOOR));
        v = nu.iter().zip(&ktu_prod).map(|(a, b)| a / b).collect();
        nan_check(&v, iter, "v")?;

        // Column sums match nu by construction after the v update; row sums are u .* (K v).
        let kv_new = matvec(&kernel, &v)?;
        let row_err = u
            .iter()
            .zip(&kv_new)
            .zip(mu)
            .map(|((ui, kvi), mi)| (ui * kvi - mi).abs())
            .fold(0.0, f64::max);

        steps.push(ScaleStep {
            kv_prod,
            u,
            ktu_prod,
            v: v.clone(),
        });
        if row_err <= opts.tol {
            break;
        }
    }

    let last = steps.last().expect("at least one iteration");
    let plan = Matrix::from_fn(kernel.rows(), kernel.cols(), |a, b| {
        last.u[a] * kernel[(a, b)] * last.v[b]
    });
    plan.ensure_finite("transport plan")?;
    let violation = marginal_violation(&plan, mu, nu);
    let iterations_run = steps.len();
    let tape = SinkhornTape {
        epsilon: opts.epsilon,
        kv: cost.rows(),
        kt: cost.cols(),
        mu: mu.to_vec(),
        nu: nu.to_vec(),
        record: TapeRecord::Standard {
            kernel,
            clamped,
            steps,
        },
    };
    Ok((
        TransportPlan {
            plan,
            iterations_run,
            marginal_violation: violation,
        },
        tape,
    ))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `f_a = eps log mu_a - eps LSE_b((g_b - C_ab)/eps)`.
fn log_update_f(cost: &Matrix, g: &[f64], mu: &[f64], eps: f64) -> Vec<f64> {
    (0..cost.rows())
        .map(|a| {
            let row = cost.row(a);
            let lse = log_sum_exp(row.iter().zip(g).map(|(c, gb)| (gb - c) / eps));
            eps * mu[a].ln() - eps * lse
        })
        .collect()
}

/// `g_b = eps log nu_b - eps LSE_a((f_a - C_ab)/eps)`.
fn log_update_g(cost: &Matrix, f: &[f64], nu: &[f64], eps: f64) -> Vec<f64> {
    (0..cost.cols())
        .map(|b| {
            let lse = log_sum_exp((0..cost.rows()).map(|a| (f[a] - cost[(a, b)]) / eps));
            eps * nu[b].ln() - eps * lse
        })
        .collect()
}

fn log_plan(cost: &Matrix, f: &[f64], g: &[f64], eps: f64) -> Matrix {
    Matrix::from_fn(cost.rows(), cost.cols(), |a, b| {
        ((f[a] + g[b] - cost[(a, b)]) / eps).exp()
    })
}

fn sinkhorn_log(
    cost: &Matrix,
    m: &Marginals,
    opts: &SinkhornOptions,
) -> Result<(TransportPlan, SinkhornTape)> {
    if !(opts.epsilon > 0.0) || !opts.epsilon.is_finite() {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {}",
            opts.epsilon
        )));
    }
    cost.ensure_finite("cost matrix")
        .map_err(|e| Error::invalid(e.to_string()))?;
    let eps = opts.epsilon;
    let mu = m.mu.as_slice();
    let nu = m.nu.as_slice();
    let mut g = vec![0.0; nu.len()];
    let mut steps = Vec::with_capacity(opts.max_iters);

    for iter in 1..=opts.max_iters {
        let f = log_update_f(cost, &g, mu, eps);
        nan_check(&f, iter, "f")?;
        g = log_update_g(cost, &f, nu, eps);
        nan_check(&g, iter, "g")?;
        let plan = log_plan(cost, &f, &g, eps);
        let err = marginal_violation(&plan, mu, nu);
        steps.push((f, g.clone()));
        if err <= opts.tol {
            break;
        }
    }

    let (f, g) = steps.last().expect("at least one iteration");
    let plan = log_plan(cost, f, g, eps);
    plan.ensure_finite("transport plan")?;
    let violation = marginal_violation(&plan, mu, nu);
    let iterations_run = steps.len();
    let tape = SinkhornTape {
        epsilon: eps,
        kv: cost.rows(),
        kt: cost.cols(),
        mu: mu.to_vec(),
        nu: nu.to_vec(),
        record: TapeRecord::Log {
            cost: cost.clone(),
            steps,
        },
    };
    Ok((
        TransportPlan {
            plan,
            iterations_run,
            marginal_violation: violation,
        },
        tape,
    ))
}

/// Linear cost `<T, C>` and entropy `H(T) = -sum T log T` of a plan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransportCost {
    pub linear: f64,
    pub entropy: f64,
}

impl TransportCost {
    /// `<T, C> - eps H(T)`.
    pub fn regularized(&self, epsilon: f64) -> f64 {
        self.linear - epsilon * self.entropy
    }
}

pub fn transport_cost(plan: &TransportPlan, cost: &Matrix) -> Result<TransportCost> {
    let linear = plan.plan.frobenius_dot(cost)?;
    let entropy = -plan
        .plan
        .as_slice()
        .iter()
        .filter(|&&t| t > 0.0)
        .map(|&t| t * t.ln())
        .sum::<f64>();
    Ok(TransportCost { linear, entropy })
}

/// Gradients of `sum(upstream .* T)` with respect to the solver inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornGrads {
    pub cost: Matrix,
    pub mu: Vector,
    pub nu: Vector,
}

/// Reverse pass through the recorded iterations.
pub fn sinkhorn_vjp(tape: &SinkhornTape, upstream: &Matrix) -> Result<SinkhornGrads> {
    if upstream.shape() != tape.shape() {
        return Err(Error::invalid(format!(
            "upstream is {:?}, plan is {:?}",
            upstream.shape(),
            tape.shape()
        )));
    }
    if tape.is_empty() {
        return Err(Error::invalid("sinkhorn tape is empty"));
    }
    match &tape.record {
        TapeRecord::Standard {
            kernel,
            clamped,
            steps,
        } => Ok(vjp_standard(tape, kernel, clamped, steps, upstream)),
        TapeRecord::Log { cost, steps } => Ok(vjp_log(tape, cost, steps, upstream)),
    }
}

fn vjp_standard(
    tape: &SinkhornTape,
    kernel: &Matrix,
    clamped: &[bool],
    steps: &[ScaleStep],
    upstream: &Matrix,
) -> SinkhornGrads {
    let (kv, kt) = (tape.kv, tape.kt);
    let mut g_kernel = Matrix::zeros(kv, kt);
    let mut g_mu = vec![0.0; kv];
    let mut g_nu = vec![0.0; kt];

    // T = diag(u_L) K diag(v_L)
    let last = steps.last().expect("non-empty tape");
    let mut g_u = vec![0.0; kv];
    let mut g_v = vec![0.0; kt];
    for a in 0..kv {
        for b in 0..kt {
            let g = upstream[(a, b)];
            g_kernel[(a, b)] += g * last.u[a] * last.v[b];
            g_u[a] += g * kernel[(a, b)] * last.v[b];
            g_v[b] += g * kernel[(a, b)] * last.u[a];
        }
    }

    for l in (0..steps.len()).rev() {
        let step = &steps[l];
        // v_l = nu ./ max(K^T u_l, floor)
        let mut g_ktu = vec![0.0; kt];
        for b in 0..kt {
            let denom = step.ktu_prod[b];
            g_nu[b] += g_v[b] / denom;
            if denom > KERNEL_FLOOR {
                g_ktu[b] = -g_v[b] * tape.nu[b] / (denom * denom);
            }
        }
        // K^T u_l
        for a in 0..kv {
            let mut acc = 0.0;
            for b in 0..kt {
                g_kernel[(a, b)] += step.u[a] * g_ktu[b];
                acc += kernel[(a, b)] * g_ktu[b];
            }
            g_u[a] += acc;
        }
        // u_l = mu ./ max(K v_{l-1}, floor)
        let mut g_kvp = vec![0.0; kv];
        for a in 0..kv {
            let denom = step.kv_prod[a];
            g_mu[a] += g_u[a] / denom;
            if denom > KERNEL_FLOOR {
                g_kvp[a] = -g_u[a] * tape.mu[a] / (denom * denom);
            }
        }
        // K v_{l-1}; v_0 = 1 is a constant.
        let prev_v: Option<&[f64]> = if l == 0 { None } else { Some(&steps[l - 1].v) };
        let mut next_g_v = vec![0.0; kt];
        for a in 0..kv {
            for b in 0..kt {
                let vb = prev_v.map_or(1.0, |pv| pv[b]);
                g_kernel[(a, b)] += g_kvp[a] * vb;
                next_g_v[b] += kernel[(a, b)] * g_kvp[a];
            }
        }
        g_v = next_g_v;
        g_u = vec![0.0; kv];
    }

    let eps = tape.epsilon;
    let g_cost = Matrix::from_fn(kv, kt, |a, b| {
        if clamped[a * kt + b] {
            0.0
        } else {
            -g_kernel[(a, b)] * kernel[(a, b)] / eps
        }
    });
    SinkhornGrads {
        cost: g_cost,
        mu: Vector::new(g_mu),
        nu: Vector::new(g_nu),
    }
}

fn vjp_log(
    tape: &SinkhornTape,
    cost: &Matrix,
    steps: &[(Vec<f64>, Vec<f64>)],
    upstream: &Matrix,
) -> SinkhornGrads {
    let (kv, kt) = (tape.kv, tape.kt);
    let eps = tape.epsilon;
    let mut g_cost = Matrix::zeros(kv, kt);
    let mut g_mu = vec![0.0; kv];
    let mut g_nu = vec![0.0; kt];

    // T_ab = exp((f_a + g_b - C_ab)/eps)
    let (f_last, g_last) = steps.last().expect("non-empty tape");
    let plan = log_plan(cost, f_last, g_last, eps);
    let mut g_f = vec![0.0; kv];
    let mut g_g = vec![0.0; kt];
    for a in 0..kv {
        for b in 0..kt {
            let w = upstream[(a, b)] * plan[(a, b)] / eps;
            g_f[a] += w;
            g_g[b] += w;
            g_cost[(a, b)] -= w;
        }
    }

    for l in (0..steps.len()).rev() {
        let (f, _) = &steps[l];
        // g_l = eps log nu - eps LSE_a((f_l - C_{:,b})/eps)
        for b in 0..kt {
            g_nu[b] += eps * g_g[b] / tape.nu[b];
            let col: Vec<f64> = (0..kv).map(|a| (f[a] - cost[(a, b)]) / eps).collect();
            let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = col.iter().map(|x| (x - m).exp()).sum();
            for a in 0..kv {
                let p = (col[a] - m).exp() / z;
                g_f[a] -= g_g[b] * p;
                g_cost[(a, b)] += g_g[b] * p;
            }
        }
        // f_l = eps log mu - eps LSE_b((g_{l-1} - C_{a,:})/eps), g_0 = 0 constant.
        let prev_g: Option<&[f64]> = if l == 0 { None } else { Some(&steps[l - 1].1) };
        let mut next_g_g = vec![0.0; kt];
        for a in 0..kv {
            g_mu[a] += eps * g_f[a] / tape.mu[a];
            let row: Vec<f64> = (0..kt)
                .map(|b| (prev_g.map_or(0.0, |pg| pg[b]) - cost[(a, b)]) / eps)
                .collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for b in 0..kt {
                let q = (row[b] - m).exp() / z;
                next_g_g[b] -= g_f[a] * q;
                g_cost[(a, b)] += g_f[a] * q;
            }
        }
        g_g = next_g_g;
        g_f = vec![0.0; kv];
    }

    SinkhornGrads {
        cost: g_cost,
        mu: Vector::new(g_mu),
        nu: Vector::new(g_nu),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec())
    }

    #[test]
    fn gibbs_kernel_examples() {
        let k = gibbs_kernel(&Matrix::zeros(2, 3), 0.05).unwrap();
        assert_eq!(k, Matrix::filled(2, 3, 1.0));

        let eps = 0.05;
        let k = gibbs_kernel(&Matrix::filled(2, 2, eps), eps).unwrap();
        for &x in k.as_slice() {
            assert!((x - 0.3678794).abs() < 1e-6);
        }

        let mut c = Matrix::zeros(2, 2);
        c[(0, 0)] = 10000.0;
        let k = gibbs_kernel(&c, 0.05).unwrap();
        assert_eq!(k[(0, 0)], 1e-300);
        assert_eq!(k[(1, 1)], 1.0);
    }

    #[test]
    fn gibbs_kernel_rejects_bad_epsilon() {
        assert!(matches!(
            gibbs_kernel(&Matrix::zeros(1, 1), 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(gibbs_kernel(&Matrix::zeros(1, 1), -1.0).is_err());
    }

    #[test]
    fn zero_cost_uniform_marginals_give_product_measure() {
        let marg = Marginals::uniform(2, 3).unwrap();
        let (plan, tape) =
            sinkhorn(&Matrix::zeros(2, 3), &marg, &SinkhornOptions::default()).unwrap();
        for &t in plan.plan.as_slice() {
            assert!((t - 1.0 / 6.0).abs() < 1e-15);
        }
        assert_eq!(tape.len(), plan.iterations_run);
        assert_eq!(plan.iterations_run, 1);
    }

    #[test]
    fn swap_cost_approaches_identity_coupling() {
        // The two extreme points of the 2x2 uniform transport polytope are the identity
        // (cost 0) and the swap (cost 2 * 0.5 = 1); the entropic plan must sit next to the first.
        let c = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let marg = Marginals::uniform(2, 2).unwrap();
        let opts = SinkhornOptions::new(0.05, 200).with_tol(0.0);
        let (plan, _) = sinkhorn(&c, &marg, &opts).unwrap();
        assert!((plan.plan[(0, 0)] - 0.5).abs() < 1e-8);
        assert!((plan.plan[(1, 1)] - 0.5).abs() < 1e-8);
        assert!(plan.plan[(0, 1)] < 1e-8);
        assert!(plan.plan[(1, 0)] < 1e-8);
        let tc = transport_cost(&plan, &c).unwrap();
        assert!(tc.linear <= 1e-7);
    }

    /// Plain fixed-point iteration on arrays, written independently of the solver.
    fn fixed_point_oracle(
        c: [[f64; 2]; 2],
        mu: [f64; 2],
        nu: [f64; 2],
        eps: f64,
        iters: usize,
    ) -> [[f64; 2]; 2] {
        let k = c.map(|row| row.map(|x| (-x / eps).exp()));
        let (mut u, mut v) = ([1.0f64; 2], [1.0f64; 2]);
        for _ in 0..iters {
            for i in 0..2 {
                u[i] = mu[i] / (k[i][0] * v[0] + k[i][1] * v[1]);
            }
            for j in 0..2 {
                v[j] = nu[j] / (k[0][j] * u[0] + k[1][j] * u[1]);
            }
        }
        let mut t = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                t[i][j] = u[i] * k[i][j] * v[j];
            }
        }
        t
    }

    #[test]
    fn unbalanced_marginals_match_fixed_point_oracle() {
        let oracle = fixed_point_oracle(
            [[0.0, 1.0], [1.0, 0.0]],
            [0.7, 0.3],
            [0.5, 0.5],
            0.05,
            10_000,
        );
        let c = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let marg = Marginals::new(v(&[0.7, 0.3]), v(&[0.5, 0.5])).unwrap();
        let opts = SinkhornOptions::new(0.05, 10_000).with_tol(0.0);
        let (plan, _) = sinkhorn(&c, &marg, &opts).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (plan.plan[(i, j)] - oracle[i][j]).abs() <= 1e-9,
                    "({i},{j}): {} vs {}",
                    plan.plan[(i, j)],
                    oracle[i][j]
                );
            }
        }
        // Feasibility forces 0.2 of mass across the expensive diagonal.
        assert!((plan.plan[(0, 1)] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_simplex_and_bad_shapes() {
        assert!(Marginals::new(v(&[0.5, 0.6]), v(&[1.0])).is_err());
        assert!(Marginals::new(v(&[1.0, 0.0]), v(&[1.0])).is_err());
        assert!(Marginals::new(v(&[]), v(&[1.0])).is_err());
        let marg = Marginals::uniform(2, 2).unwrap();
        assert!(sinkhorn(&Matrix::zeros(3, 2), &marg, &SinkhornOptions::default()).is_err());
        let opts = SinkhornOptions::new(0.05, 0);
        assert!(sinkhorn(&Matrix::zeros(2, 2), &marg, &opts).is_err());
    }

    #[test]
    fn transport_cost_examples() {
        let plan = TransportPlan {
            plan: Matrix::filled(2, 2, 0.25),
            iterations_run: 1,
            marginal_violation: 0.0,
        };
        let tc = transport_cost(&plan, &Matrix::filled(2, 2, 1.0)).unwrap();
        assert!((tc.linear - 1.0).abs() < 1e-15);
        assert!((tc.entropy - 4f64.ln()).abs() < 1e-12);
        assert!((tc.entropy - 1.386294).abs() < 1e-6);
        assert!(transport_cost(&plan, &Matrix::zeros(2, 3)).is_err());
    }

    fn random_instance(rng: &mut ChaCha8Rng, kv: usize, kt: usize) -> (Matrix, Marginals) {
        let c = Matrix::from_fn(kv, kt, |_, _| rng.random_range(0.0..2.0));
        let mut simplex = |n: usize| {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
            let s: f64 = raw.iter().sum();
            Vector::new(raw.into_iter().map(|x| x / s).collect())
        };
        let mu = simplex(kv);
        let nu = simplex(kt);
        (c, Marginals::new(mu, nu).unwrap())
    }

    #[test]
    fn vjp_of_zero_upstream_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, marg) = random_instance(&mut rng, 3, 4);
        let (_, tape) = sinkhorn(&c, &marg, &SinkhornOptions::default()).unwrap();
        let g = sinkhorn_vjp(&tape, &Matrix::zeros(3, 4)).unwrap();
        assert_eq!(g.cost, Matrix::zeros(3, 4));
        assert!(g.mu.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.nu.as_slice().iter().all(|&x| x == 0.0));
        assert!(sinkhorn_vjp(&tape, &Matrix::zeros(4, 3)).is_err());
    }

    fn objective(c: &Matrix, mu: &[f64], nu: &[f64], up: &Matrix, opts: &SinkhornOptions) -> f64 {
        // Finite-difference perturbations of mu/nu leave the simplex, so bypass validation.
        let marg = Marginals {
            mu: Vector::new(mu.to_vec()),
            nu: Vector::new(nu.to_vec()),
        };
        let (plan, _) = if opts.log_domain {
            sinkhorn_log(c, &marg, opts).unwrap()
        } else {
            sinkhorn_standard(c, &marg, opts).unwrap()
        };
        plan.plan.frobenius_dot(up).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        if d <= 1e-7 {
            0.0
        } else {
            d / a.abs().max(b.abs())
        }
    }

    fn check_fd(log_domain: bool, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, marg) = random_instance(&mut rng, 3, 3);
        let up = Matrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let opts = SinkhornOptions::new(0.05, 20)
            .with_tol(0.0)
            .with_log_domain(log_domain);
        let (_, tape) = sinkhorn(&c, &marg, &opts).unwrap();
        let g = sinkhorn_vjp(&tape, &up).unwrap();
        let h = 1e-5;
        let mu = marg.mu.as_slice().to_vec();
        let nu = marg.nu.as_slice().to_vec();
        for i in 0..3 {
            for j in 0..3 {
                let mut cp = c.clone();
                cp[(i, j)] += h;
                let mut cm = c.clone();
                cm[(i, j)] -= h;
                let fd = (objective(&cp, &mu, &nu, &up, &opts)
                    - objective(&cm, &mu, &nu, &up, &opts))
                    / (2.0 * h);
                assert!(
                    rel_err(g.cost[(i, j)], fd) <= 1e-4,
                    "dC({i},{j}) {} vs {fd}",
                    g.cost[(i, j)]
                );
            }
            let mut mp = mu.clone();
            mp[i] += h;
            let mut mm = mu.clone();
            mm[i] -= h;
            let fd = (objective(&c, &mp, &nu, &up, &opts) - objective(&c, &mm, &nu, &up, &opts))
                / (2.0 * h);
            assert!(rel_err(g.mu[i], fd) <= 1e-4, "dmu({i}) {} vs {fd}", g.mu[i]);
            let mut np = nu.clone();
            np[i] += h;
            let mut nm = nu.clone();
            nm[i] -= h;
            let fd = (objective(&c, &mu, &np, &up, &opts) - objective(&c, &mu, &nm, &up, &opts))
                / (2.0 * h);
            assert!(rel_err(g.nu[i], fd) <= 1e-4, "dnu({i}) {} vs {fd}", g.nu[i]);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for seed in 0..5 {
            check_fd(false, seed);
        }
    }

    #[test]
    fn log_domain_vjp_matches_finite_differences() {
        for seed in 0..5 {
            check_fd(true, seed);
        }
    }

    #[test]
    fn log_domain_agrees_with_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, marg) = random_instance(&mut rng, 4, 5);
        let opts = SinkhornOptions::new(0.05, 50).with_tol(0.0);
        let (a, _) = sinkhorn(&c, &marg, &opts).unwrap();
        let (b, _) = sinkhorn(&c, &marg, &opts.with_log_domain(true)).unwrap();
        assert!(a.plan.max_abs_diff(&b.plan).unwrap() < 1e-12);
    }

    #[test]
    fn log_domain_survives_tiny_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, marg) = random_instance(&mut rng, 4, 4);
        let opts = SinkhornOptions::new(0.001, 2000)
            .with_tol(1e-9)
            .with_log_domain(true);
        let (plan, _) = sinkhorn(&c, &marg, &opts).unwrap();
        assert!(plan.plan.is_finite());
        assert!((plan.total_mass() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn symmetric_upstream_gives_symmetric_cost_gradient() {
        // Swap rows 0<->1 and columns 0<->1 together; the problem is invariant under it.
        let marg = Marginals::uniform(3, 3).unwrap();
        let up = m(&[&[0.3, -0.2, 0.5], &[-0.2, 0.3, 0.5], &[0.1, 0.1, -0.7]]);
        let (_, tape) = sinkhorn(
            &Matrix::zeros(3, 3),
            &marg,
            &SinkhornOptions::new(0.05, 20).with_tol(0.0),
        )
        .unwrap();
        let g = sinkhorn_vjp(&tape, &up).unwrap();
        let p = [1usize, 0, 2];
        for a in 0..3 {
            for b in 0..3 {
                assert!((g.cost[(a, b)] - g.cost[(p[a], p[b])]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn vjp_is_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (c, marg) = random_instance(&mut rng, 3, 4);
        let (_, tape) = sinkhorn(&c, &marg, &SinkhornOptions::default()).unwrap();
        let u1 = Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let u2 = Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let (a, b) = (0.7, -1.3);
        let combo = u1.scale(a).add(&u2.scale(b)).unwrap();
        let g = sinkhorn_vjp(&tape, &combo).unwrap();
        let g1 = sinkhorn_vjp(&tape, &u1).unwrap();
        let g2 = sinkhorn_vjp(&tape, &u2).unwrap();
        let expect = g1.cost.scale(a).add(&g2.cost.scale(b)).unwrap();
        let scale = expect.max_abs().max(1.0);
        assert!(g.cost.max_abs_diff(&expect).unwrap() <= 1e-10 * scale);
        for i in 0..3 {
            assert!((g.mu[i] - (a * g1.mu[i] + b * g2.mu[i])).abs() <= 1e-10 * scale);
        }
        for j in 0..4 {
            assert!((g.nu[j] - (a * g1.nu[j] + b * g2.nu[j])).abs() <= 1e-10 * scale);
        }
    }
}
