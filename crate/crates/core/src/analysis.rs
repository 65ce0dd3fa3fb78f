//! Deterministic and statistical evaluation of fused estimators: the error
//! covariance recursion, the stability margin, the Riccati operator `φ`, a
//! reference Riccati solver and the LMI change of variables relating
//! `X ⪰ φ(K, X)` to a linear matrix inequality.

use std::io::Write;

use thiserror::Error;

use rayon::prelude::*;

use crate::matrix::{self, Matrix, MatrixError, Vector};
use crate::protocol::{self, MessageLog, Mode, ProtocolError, Session};
use crate::sim::{PartyModel, SimConfig, Simulation, SystemModel};

pub const DARE_MAX_ITERS: usize = 100_000;
pub const DARE_DEFAULT_TOL: f64 = 1e-12;
/// Successive traces closer than this count as converged.
pub const TRACE_CONVERGENCE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("Riccati iteration did not converge in {iterations} steps (last change {change:.3e})")]
    DareNoConvergence { iterations: usize, change: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Stacked `C = [C_1; …; C_N]` and block-diagonal `R = diag(R_1, …, R_N)`.
pub fn stack_observations(parties: &[PartyModel]) -> Result<(Matrix, Matrix)> {
    let cs: Vec<Matrix> = parties.iter().map(|p| p.c().clone()).collect();
    let rs: Vec<Matrix> = parties.iter().map(|p| p.r().clone()).collect();
    Ok((matrix::vstack(&cs)?, matrix::block_diag(&rs)))
}

/// `K = (1/N)·[K_1 … K_N]`.
pub fn aggregate_gain(gains: &[Matrix]) -> Result<Matrix> {
    let n = gains.len().max(1) as f64;
    Ok(matrix::hstack(gains)? / n)
}

fn check_gains(parties: &[PartyModel], gains: &[Matrix]) -> Result<()> {
    if parties.is_empty() || parties.len() != gains.len() {
        return Err(AnalysisError::Invalid(format!("{} parties but {} gains", parties.len(), gains.len())));
    }
    for (p, k) in parties.iter().zip(gains) {
        matrix::ensure_shape(k, p.state_dim(), p.outputs(), "estimator gain")?;
    }
    Ok(())
}

/// `(Σ M_i, Σ S_i)` with `M_i = I − K_iC_i` and `S_i = K_iR_iK_iᵀ`.
fn gain_sums(parties: &[PartyModel], gains: &[Matrix]) -> (Matrix, Matrix) {
    let n = parties[0].state_dim();
    let mut m_sum = Matrix::zeros(n, n);
    let mut s_sum = Matrix::zeros(n, n);
    for (p, k) in parties.iter().zip(gains) {
        m_sum += Matrix::identity(n, n) - k * p.c();
        s_sum += k * p.r() * k.transpose();
    }
    (m_sum, s_sum)
}

/// `(1/N)·Σ (I − K_iC_i)·A`.
pub fn closed_loop_matrix(parties: &[PartyModel], gains: &[Matrix], a: &Matrix) -> Result<Matrix> {
    check_gains(parties, gains)?;
    let (m_sum, _) = gain_sums(parties, gains);
    Ok(m_sum * a / parties.len() as f64)
}

/// `ρ((1/N)·Σ (I − K_iC_i)·A)`; the fused estimator is stable iff this is below one.
pub fn stability_margin(parties: &[PartyModel], gains: &[Matrix], a: &Matrix) -> Result<f64> {
    Ok(matrix::spectral_radius(&closed_loop_matrix(parties, gains, a)?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSeries {
    /// `Tr P̄(k)` for `k = 0..=T`.
    pub traces: Vec<f64>,
    pub last: Matrix,
    /// First `k` at which successive traces differ by less than
    /// [`TRACE_CONVERGENCE_TOL`].
    pub settled_at: Option<usize>,
}

/// Error covariance of the fused estimate:
/// `P̄(k) = (1/N²)(ΣM_i)(A P̄(k−1) Aᵀ + Q)(ΣM_i)ᵀ + (1/N²)ΣS_i`.
pub fn covariance_recursion(
    p0: &Matrix,
    parties: &[PartyModel],
    gains: &[Matrix],
    system: &SystemModel,
    horizon: usize,
) -> Result<CovarianceSeries> {
    check_gains(parties, gains)?;
    let n = system.dim();
    matrix::ensure_shape(p0, n, n, "initial covariance")?;
    let (m_sum, s_sum) = gain_sums(parties, gains);
    let inv_n2 = 1.0 / (parties.len() as f64).powi(2);
    let a = system.a();
    let mut p = matrix::symmetrize(p0)?;
    let mut traces = Vec::with_capacity(horizon + 1);
    traces.push(p.trace());
    let mut settled_at = None;
    for k in 1..=horizon {
        let prior = a * &p * a.transpose() + system.q();
        let next = (&m_sum * prior * m_sum.transpose() + &s_sum) * inv_n2;
        p = (&next + next.transpose()) * 0.5;
        if !p.iter().all(|v| v.is_finite()) {
            // Diverged past f64 range; keep reporting infinity.
            traces.extend(std::iter::repeat_n(f64::INFINITY, horizon + 1 - k));
            return Ok(CovarianceSeries { traces, last: p, settled_at: None });
        }
        let scale = p.amax().max(1.0);
        let min = matrix::min_eigenvalue(&p)?;
        if min < -1e-9 * scale {
            return Err(MatrixError::NotPsd { min_eigenvalue: min }.into());
        }
        let tr = p.trace();
        if settled_at.is_none() && (tr - traces[k - 1]).abs() < TRACE_CONVERGENCE_TOL {
            settled_at = Some(k);
        }
        traces.push(tr);
    }
    Ok(CovarianceSeries { traces, last: p, settled_at })
}

/// `φ(Y, X) = (A − AYC)·X·(A − AYC)ᵀ + Q + A·Y·R·Yᵀ·Aᵀ`.
pub fn phi(y: &Matrix, x: &Matrix, a: &Matrix, q: &Matrix, c: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    matrix::ensure_shape(y, n, c.nrows(), "phi gain")?;
    matrix::ensure_shape(x, n, n, "phi covariance")?;
    let ay = a * y;
    let closed = a - &ay * c;
    let out = &closed * x * closed.transpose() + q + &ay * r * ay.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// Kalman gain for prior covariance `X`: `X·Cᵀ·(C·X·Cᵀ + R)⁻¹`.
pub fn kalman_gain(x: &Matrix, c: &Matrix, r: &Matrix) -> Result<Matrix> {
    let innovation = c * x * c.transpose() + r;
    Ok(x * c.transpose() * matrix::inverse_spd(&innovation)?)
}

/// Riccati map `g̃(X) = AXAᵀ + Q − AXCᵀ(CXCᵀ + R)⁻¹CXAᵀ`, i.e. `φ(K_X, X)`.
pub fn riccati_map(x: &Matrix, a: &Matrix, q: &Matrix, c: &Matrix, r: &Matrix) -> Result<Matrix> {
    phi(&kalman_gain(x, c, r)?, x, a, q, c, r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DareSolution {
    /// Steady-state prior covariance.
    pub p_pri: Matrix,
    /// `P_pri·Cᵀ·(C·P_pri·Cᵀ + R)⁻¹`.
    pub k_star: Matrix,
    /// `‖g̃(P_pri) − P_pri‖_F`.
    pub residual: f64,
    pub iterations: usize,
}

/// Fixed-point iteration `X ← g̃(X)` from `X₀ = Q`.
pub fn dare_solve(a: &Matrix, c: &Matrix, q: &Matrix, r: &Matrix, tol: f64) -> Result<DareSolution> {
    matrix::ensure_square(a)?;
    let n = a.nrows();
    matrix::ensure_shape(q, n, n, "dare Q")?;
    matrix::ensure_shape(c, c.nrows(), n, "dare C")?;
    matrix::ensure_shape(r, c.nrows(), c.nrows(), "dare R")?;
    let mut x = matrix::symmetrize(q)?;
    let mut change = f64::INFINITY;
    for it in 1..=DARE_MAX_ITERS {
        let next = riccati_map(&x, a, q, c, r)?;
        change = (&next - &x).norm();
        x = next;
        if !change.is_finite() {
            break;
        }
        if change < tol {
            let k_star = kalman_gain(&x, c, r)?;
            let residual = (riccati_map(&x, a, q, c, r)? - &x).norm();
            return Ok(DareSolution { p_pri: x, k_star, residual, iterations: it });
        }
    }
    Err(AnalysisError::DareNoConvergence { iterations: DARE_MAX_ITERS, change })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformImage {
    /// `Υ = X⁻¹·A·K`.
    pub upsilon: Matrix,
    /// `Δ = X⁻¹`.
    pub delta: Matrix,
    pub lmi: Matrix,
    pub lmi_min_eigenvalue: f64,
}

/// The LMI
/// `[Δ, ΔA − ΥC, Υ√R, Δ√Q; ∗, Δ, 0, 0; ∗, 0, I_m, 0; ∗, 0, 0, I_n] ⪰ 0`,
/// which holds iff `Δ⁻¹ ⪰ φ(A⁻¹Δ⁻¹Υ, Δ⁻¹)`.
pub fn transformed_lmi(upsilon: &Matrix, delta: &Matrix, a: &Matrix, q: &Matrix, c: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    let m = c.nrows();
    let sqrt_r = matrix::sqrt_psd(r)?;
    let sqrt_q = matrix::sqrt_psd(q)?;
    let b12 = delta * a - upsilon * c;
    let b13 = upsilon * sqrt_r;
    let b14 = delta * sqrt_q;
    let dim = 3 * n + m;
    let mut lmi = Matrix::zeros(dim, dim);
    lmi.view_mut((0, 0), (n, n)).copy_from(delta);
    lmi.view_mut((0, n), (n, n)).copy_from(&b12);
    lmi.view_mut((n, 0), (n, n)).copy_from(&b12.transpose());
    lmi.view_mut((0, 2 * n), (n, m)).copy_from(&b13);
    lmi.view_mut((2 * n, 0), (m, n)).copy_from(&b13.transpose());
    lmi.view_mut((0, 2 * n + m), (n, n)).copy_from(&b14);
    lmi.view_mut((2 * n + m, 0), (n, n)).copy_from(&b14.transpose());
    lmi.view_mut((n, n), (n, n)).copy_from(delta);
    lmi.view_mut((2 * n, 2 * n), (m, m)).fill_with_identity();
    lmi.view_mut((2 * n + m, 2 * n + m), (n, n)).fill_with_identity();
    Ok(lmi)
}

/// Maps `(K, X)` to `(Υ, Δ)` and reports the LMI's smallest eigenvalue.
pub fn lemma1_transform(k: &Matrix, x: &Matrix, a: &Matrix, q: &Matrix, c: &Matrix, r: &Matrix) -> Result<TransformImage> {
    let delta = matrix::inverse_spd(x)?;
    matrix::inverse(a)?;
    let upsilon = &delta * a * k;
    let lmi = transformed_lmi(&upsilon, &delta, a, q, c, r)?;
    let lmi_min_eigenvalue = matrix::min_eigenvalue(&lmi)?;
    Ok(TransformImage { upsilon, delta, lmi, lmi_min_eigenvalue })
}

/// Inverse change of variables: `K = A⁻¹Δ⁻¹Υ`, `X = Δ⁻¹`.
pub fn inverse_transform(upsilon: &Matrix, delta: &Matrix, a: &Matrix) -> Result<(Matrix, Matrix)> {
    let x = matrix::inverse_spd(delta)?;
    let k = matrix::inverse(a)? * &x * upsilon;
    Ok((k, x))
}

/// Deterministic and (optionally) empirical trace sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    pub deterministic: Vec<f64>,
    pub empirical: Option<Vec<f64>>,
    pub runs: usize,
    pub seed: u64,
}

impl CovarianceReport {
    /// CSV with columns `k,tr_deterministic,tr_empirical,runs`. Floats use
    /// the shortest representation that round-trips.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,tr_deterministic,tr_empirical,runs")?;
        for (k, det) in self.deterministic.iter().enumerate() {
            let emp = self.empirical.as_ref().and_then(|e| e.get(k)).map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{k},{det},{emp},{}", self.runs)?;
        }
        Ok(())
    }
}

/// Runs per parallel work unit; fixed so results do not depend on the
/// thread count.
const MONTE_CARLO_CHUNK: usize = 50;

/// Sample moments of `e(k) = x(k) − x̄(k)` over independent runs, `k = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloResult {
    /// `(1/runs)Σ‖e(k)‖²`.
    pub traces: Vec<f64>,
    /// `(1/runs)Σe(k)`.
    pub mean_error: Vec<Vector>,
    /// `(1/runs)Σe(k)∘e(k)`.
    pub second_moment: Vec<Vector>,
    pub runs: usize,
}

#[derive(Clone)]
struct Moments {
    sum: Vec<Vector>,
    sum_sq: Vec<Vector>,
}

impl Moments {
    fn new(n: usize, len: usize) -> Self {
        Self { sum: vec![Vector::zeros(n); len], sum_sq: vec![Vector::zeros(n); len] }
    }

    fn add(&mut self, k: usize, e: &Vector) {
        self.sum[k] += e;
        self.sum_sq[k] += e.component_mul(e);
    }

    fn merge(&mut self, other: &Moments) {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
    }
}

/// Empirical error statistics of the plaintext protocol over runs
/// `0..runs`, each seeded from `config.seed` and its run index.
pub fn monte_carlo_eval(config: &SimConfig, gains: &[Matrix], runs: usize) -> Result<MonteCarloResult> {
    if runs == 0 {
        return Err(AnalysisError::Invalid("at least one run is required".into()));
    }
    config.validate().map_err(|e| AnalysisError::Invalid(e.to_string()))?;
    let margin = stability_margin(&config.parties, gains, config.system.a())?;
    if margin >= 1.0 {
        log::warn!("gains are not stabilizing (spectral radius {margin:.4}); the empirical error will grow");
    }
    let n = config.system.dim();
    let len = config.horizon + 1;
    let ids: Vec<usize> = config.parties.iter().map(|p| p.id()).collect();
    let chunks: Vec<(usize, usize)> =
        (0..runs).step_by(MONTE_CARLO_CHUNK).map(|start| (start, (start + MONTE_CARLO_CHUNK).min(runs))).collect();
    let partials = chunks
        .par_iter()
        .map(|&(start, end)| -> Result<Moments> {
            let mut moments = Moments::new(n, len);
            let mut session = Session::new(&Mode::Plaintext, &ids, MessageLog::disabled())?;
            for run in start..end {
                let run = run as u64;
                let sim = Simulation::new(config, run).map_err(|e| AnalysisError::Invalid(e.to_string()))?;
                moments.add(0, &(sim.state() - sim.initial_estimate()));
                protocol::run_protocol_with(config, &mut session, gains, run, |view| {
                    moments.add(view.k, &(view.state - view.fused));
                })?;
            }
            Ok(moments)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Moments::new(n, len);
    for p in &partials {
        total.merge(p);
    }
    let scale = 1.0 / runs as f64;
    let mean_error: Vec<Vector> = total.sum.iter().map(|s| s * scale).collect();
    let second_moment: Vec<Vector> = total.sum_sq.iter().map(|s| s * scale).collect();
    Ok(MonteCarloResult { traces: second_moment.iter().map(|m| m.sum()).collect(), mean_error, second_moment, runs })
}
