//! Collaborative estimator-gain design.
//!
//! * [`norm_relax_gain`] / [`stabilization_method_1`]: each party minimizes
//!   `‖(I − K_iC_i)A‖` locally and the parties check, through a secure
//!   average, that the mean of these norms is below one.
//! * [`stabilization_method_2`]: two-block ADMM between a cloud holding the
//!   Lyapunov LMI and parties holding `Z_i = H·K_i`.
//! * [`mmse_method`]: the same split applied to the LMI whose optimum is the
//!   steady-state Kalman gain.

mod admm;
mod mmse;
mod stabilize;

pub use mmse::{mmse_method, omega_bar_problem, selector, MmseOptions, MmseState};
pub use stabilize::{omega_problem, stabilization_method_2, StabilizeOptions, StabilizeState};

use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::matrix::{self, Matrix, MatrixError};
use crate::protocol::ProtocolError;
use crate::sdp::{self, AffinePsdProblem, KernelSettings, KernelSolver, PsdConstraint, SdpError};
use crate::sim::PartyModel;

/// Gains are reported unreliable when `cond(H)` exceeds this.
pub const CONDITION_WARNING: f64 = 1e10;
/// ADMM stops early once primal and dual residuals fall below this.
pub const EARLY_STOP_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("invalid design input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DesignError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Frobenius,
    #[default]
    Spectral,
}

impl NormKind {
    pub fn eval(self, m: &Matrix) -> f64 {
        match self {
            NormKind::Frobenius => matrix::frobenius_norm(m),
            NormKind::Spectral => matrix::spectral_norm(m),
        }
    }
}

/// What a history entry measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryKind {
    /// `ρ((1/N)ΣM_iA)` per iteration.
    SpectralRadius,
    /// `‖K^t − K*‖_F` per iteration.
    GainError,
    None,
}

/// How a gain set was obtained; decides the new-party admission test.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    NormRelaxation { average_norm: f64, norm: NormKind },
    /// ADMM design; carries `Σ M_iA`, which the cloud can form from the
    /// uploaded products without learning any `C_i`.
    Admm { closed_loop_sum: Matrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignResult {
    pub gains: Vec<Matrix>,
    /// `K = (1/N)[K_1 … K_N]`.
    pub aggregate: Matrix,
    /// `ρ((1/N)ΣM_iA)`, recomputed from the final gains.
    pub spectral_radius: f64,
    pub history: Vec<f64>,
    pub history_kind: HistoryKind,
    /// True only if `spectral_radius < 1`.
    pub accepted: bool,
    pub provenance: Provenance,
    pub iterations: usize,
    /// ADMM residuals fell below [`EARLY_STOP_TOL`].
    pub converged: bool,
}

impl DesignResult {
    pub(crate) fn finish(
        parties: &[PartyModel],
        a: &Matrix,
        gains: Vec<Matrix>,
        claimed: bool,
        history: Vec<f64>,
        history_kind: HistoryKind,
        provenance: Provenance,
        iterations: usize,
        converged: bool,
    ) -> Result<Self> {
        let spectral_radius = analysis::stability_margin(parties, &gains, a)?;
        let aggregate = analysis::aggregate_gain(&gains)?;
        Ok(Self {
            accepted: claimed && spectral_radius < 1.0,
            gains,
            aggregate,
            spectral_radius,
            history,
            history_kind,
            provenance,
            iterations,
            converged,
        })
    }

    /// Writes the gains into the party models.
    pub fn assign(&self, parties: &mut [PartyModel]) -> Result<()> {
        if parties.len() != self.gains.len() {
            return Err(DesignError::Invalid("party count does not match the design".into()));
        }
        for (p, k) in parties.iter_mut().zip(&self.gains) {
            p.set_gain(k.clone()).map_err(|e| DesignError::Invalid(e.to_string()))?;
        }
        Ok(())
    }
}

pub(crate) fn validate_parties(parties: &[PartyModel], a: &Matrix) -> Result<()> {
    matrix::ensure_square(a)?;
    if parties.is_empty() {
        return Err(DesignError::Invalid("at least one party is required".into()));
    }
    for p in parties {
        if p.state_dim() != a.nrows() {
            return Err(DesignError::Invalid(format!("party {} has {} state columns", p.id(), p.state_dim())));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormRelaxGain {
    pub gain: Matrix,
    /// `‖(I − K_iC_i)A‖` in the requested norm.
    pub norm_value: f64,
    /// `C_iA` was rank deficient; the minimum-norm minimizer was returned.
    pub degenerate: bool,
}

/// `K_i = argmin_X ‖(I − X C_i) A‖`.
///
/// With `G = C_iA`, `A·G⁺` minimizes the Frobenius norm. It also minimizes
/// the spectral norm: for every `X`, `(A − XG)·P = A·P` where `P = I − G⁺G`
/// is an orthogonal projector, so `‖A − XG‖₂ ≥ ‖A·P‖₂ = ‖A − A·G⁺G‖₂`.
pub fn norm_relax_gain(party: &PartyModel, a: &Matrix, norm: NormKind) -> Result<NormRelaxGain> {
    validate_parties(std::slice::from_ref(party), a)?;
    let g = party.c() * a;
    let sol = matrix::solve_min_frobenius(a, &g)?;
    if sol.degenerate {
        log::warn!("party {}: C_iA is rank deficient (rank {})", party.id(), sol.rank);
    }
    let residual = a - &sol.value * &g;
    Ok(NormRelaxGain { norm_value: norm.eval(&residual), gain: sol.value, degenerate: sol.degenerate })
}

/// Spectral-norm minimizer through the LMI
/// `min t  s.t.  [tI, (I − XC_i)A; ∗, tI] ⪰ 0`, solved by the cone kernel.
/// Cross-check for the closed form in [`norm_relax_gain`].
pub fn norm_relax_gain_lmi(party: &PartyModel, a: &Matrix, settings: &KernelSettings) -> Result<NormRelaxGain> {
    validate_parties(std::slice::from_ref(party), a)?;
    let n = a.nrows();
    let m = party.outputs();
    let g = party.c() * a;
    let mut problem = AffinePsdProblem::new();
    let x = problem.add_block("X", n, m, false);
    let t = problem.add_block("t", 1, 1, true);
    problem.add_linear(t, Matrix::from_element(1, 1, 1.0));
    let mut constant = Matrix::zeros(2 * n, 2 * n);
    constant.view_mut((0, n), (n, n)).copy_from(a);
    constant.view_mut((n, 0), (n, n)).copy_from(&a.transpose());
    let mut lmi = PsdConstraint::new("norm bound", 2 * n, 0.0).with_constant(constant);
    for k in 0..2 * n {
        lmi = lmi.term(t, sdp::embed(2 * n, k, 1) * 0.5, sdp::embed(2 * n, k, 1).transpose());
    }
    lmi = lmi.term(x, sdp::embed(2 * n, 0, n) * -1.0, &g * sdp::embed(2 * n, n, n).transpose());
    problem.add_constraint(lmi);
    let mut solver = KernelSolver::new(problem)?;
    let sol = solver.solve(settings)?;
    let gain = sol.values[x].clone();
    let norm_value = matrix::spectral_norm(&(a - &gain * &g));
    Ok(NormRelaxGain { gain, norm_value, degenerate: false })
}

/// Computes `(1/N)Σ v_i` without revealing the individual `v_i`.
pub trait ScalarAverager {
    fn average(&mut self, values: &[f64]) -> std::result::Result<f64, ProtocolError>;
}

/// Stabilization design method I: local norm relaxation plus a secure check
/// that `(1/N)Σ‖M_iA‖ < 1`, which bounds `ρ((1/N)ΣM_iA)` below one.
pub fn stabilization_method_1(
    parties: &[PartyModel],
    a: &Matrix,
    norm: NormKind,
    averager: &mut dyn ScalarAverager,
) -> Result<DesignResult> {
    validate_parties(parties, a)?;
    let local: Vec<NormRelaxGain> = parties.iter().map(|p| norm_relax_gain(p, a, norm)).collect::<Result<_>>()?;
    let norms: Vec<f64> = local.iter().map(|g| g.norm_value).collect();
    let average_norm = averager.average(&norms)?;
    let gains = local.into_iter().map(|g| g.gain).collect();
    DesignResult::finish(
        parties,
        a,
        gains,
        average_norm < 1.0,
        vec![average_norm],
        HistoryKind::None,
        Provenance::NormRelaxation { average_norm, norm },
        1,
        true,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub enum Admission {
    Admit { test_value: f64, gain: Matrix },
    Redesign { test_value: f64 },
}

impl Admission {
    pub fn test_value(&self) -> f64 {
        match self {
            Admission::Admit { test_value, .. } | Admission::Redesign { test_value } => *test_value,
        }
    }
}

/// The admission test value for a new party whose own term is
/// `new_party_norm = ‖M_{N+1}A‖`.
pub fn admission_value(provenance: &Provenance, existing_parties: usize, new_party_norm: f64, norm: NormKind) -> f64 {
    let n = existing_parties as f64;
    let existing = match provenance {
        Provenance::NormRelaxation { average_norm, .. } => n * average_norm,
        Provenance::Admm { closed_loop_sum } => norm.eval(closed_loop_sum),
    };
    (existing + new_party_norm) / (n + 1.0)
}

/// Decides whether a party can join with its locally relaxed gain, or all
/// `N + 1` parties must rerun [`stabilization_method_2`].
pub fn check_new_party(
    existing: &DesignResult,
    new_party: &PartyModel,
    a: &Matrix,
    norm: NormKind,
) -> Result<Admission> {
    let local = norm_relax_gain(new_party, a, norm)?;
    if let Provenance::NormRelaxation { norm: used, .. } = &existing.provenance {
        if *used != norm {
            return Err(DesignError::Invalid("admission norm differs from the design norm".into()));
        }
    }
    let test_value = admission_value(&existing.provenance, existing.gains.len(), local.norm_value, norm);
    Ok(if test_value < 1.0 {
        Admission::Admit { test_value, gain: local.gain }
    } else {
        Admission::Redesign { test_value }
    })
}

/// `ρ(A − H⁻¹·(1/N)·Σ P_i)` from the uploaded products `P_i = Z_iC_iA`.
pub(crate) fn product_closed_loop(a: &Matrix, h: &Matrix, products: &[Matrix]) -> Result<(Matrix, f64)> {
    let n = products.len() as f64;
    let sum = products.iter().fold(Matrix::zeros(a.nrows(), a.ncols()), |acc, p| acc + p);
    let h_inv = matrix::inverse_spd(h)?;
    let closed_loop = a - &h_inv * &sum / n;
    let rho = matrix::spectral_radius(&closed_loop)?;
    Ok((closed_loop, rho))
}

pub(crate) fn warn_conditioning(h: &Matrix) {
    match matrix::condition_spd(h) {
        Ok(c) if c > CONDITION_WARNING => log::warn!("H is ill-conditioned (cond {c:.3e}); gains may be inaccurate"),
        Ok(_) => {}
        Err(e) => log::warn!("could not assess conditioning of H: {e}"),
    }
}
