use crate::matrix::{self, Matrix};
use crate::protocol::MessageLog;
use crate::sdp::{self, AffinePsdProblem, KernelSettings, PsdConstraint};
use crate::sim::PartyModel;

use super::admm::{self, AdmmSetup, ProductPiece, TargetSlot};
use super::{
    product_closed_loop, validate_parties, warn_conditioning, DesignError, DesignResult, HistoryKind, Provenance,
    Result, EARLY_STOP_TOL,
};

#[derive(Debug, Clone)]
pub struct StabilizeOptions {
    pub gamma: f64,
    pub iterations: usize,
    /// Prescribed convergence rate `ε ∈ (0, 1]`; runs the design on `A/ε`.
    pub rate: Option<f64>,
    pub margin: f64,
    pub kernel: KernelSettings,
    pub early_stop_tol: f64,
    pub log: MessageLog,
}

impl Default for StabilizeOptions {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            iterations: 200,
            rate: None,
            margin: sdp::DEFAULT_MARGIN,
            kernel: KernelSettings::default(),
            early_stop_tol: EARLY_STOP_TOL,
            log: MessageLog::disabled(),
        }
    }
}

/// Final iterates of the stabilization ADMM.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilizeState {
    pub z: Vec<Matrix>,
    pub lambda: Vec<Matrix>,
    pub u: Vec<Matrix>,
    pub u0: Matrix,
    pub h: Matrix,
    pub gamma: f64,
    pub t: usize,
}

/// The cloud's feasible set `Ω`:
/// `U₀ = N[H, HA; (HA)ᵀ, H] − Σ[0, U_i; U_iᵀ, 0] ⪰ margin·I`, `H ⪰ margin·I`.
/// Returns the problem with blocks `U_1 … U_N, H` in that order.
pub fn omega_problem(a: &Matrix, parties: usize, gamma: f64, margin: f64) -> AffinePsdProblem {
    let n = a.nrows();
    let big_n = parties as f64;
    let mut problem = AffinePsdProblem::new();
    let u: Vec<_> = (0..parties).map(|i| problem.add_block(format!("U_{}", i + 1), n, n, false)).collect();
    let h = problem.add_block("H", n, n, true);
    for &ui in &u {
        problem.add_quadratic(ui, Matrix::zeros(n, n), gamma);
    }
    let mut u0 = PsdConstraint::new("U0", 2 * n, margin)
        .diagonal(h, 0, n, big_n)
        .diagonal(h, n, n, big_n)
        .term(h, sdp::embed(2 * n, 0, n) * big_n, a * sdp::embed(2 * n, n, n).transpose());
    for &ui in &u {
        u0 = u0.off_diagonal(ui, 0, n, n, n, -1.0);
    }
    problem.add_constraint(u0);
    problem.add_constraint(PsdConstraint::new("H", n, margin).diagonal(h, 0, n, 1.0));
    problem
}

/// Stabilization design method II.
///
/// Party `i` uploads only `Z_iC_iA`; the cloud returns `U_i` and `Λ_i`, and
/// finally `H`, from which the party forms `K_i = H⁻¹Z_i`.
pub fn stabilization_method_2(
    parties: &[PartyModel],
    a: &Matrix,
    options: &StabilizeOptions,
) -> Result<(DesignResult, StabilizeState)> {
    validate_parties(parties, a)?;
    if !(options.gamma > 0.0) {
        return Err(DesignError::Invalid("gamma must be positive".into()));
    }
    let epsilon = options.rate.unwrap_or(1.0);
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(DesignError::Invalid(format!("rate must lie in (0, 1], got {epsilon}")));
    }
    let design_a = a / epsilon;
    let n = a.nrows();
    let count = parties.len();
    let problem = omega_problem(&design_a, count, options.gamma, options.margin);
    let h_block = count;
    let slots = (0..count).map(|i| vec![TargetSlot { quad: i, block: i, col: 0, cols: n, label: "U_i" }]).collect();
    let mut initial_values = vec![Matrix::zeros(n, n); count];
    initial_values.push(Matrix::identity(n, n));
    let setup = AdmmSetup {
        problem: problem.clone(),
        slots,
        h_block,
        initial_values,
        party_ids: parties.iter().map(|p| p.id()).collect(),
        factors: parties.iter().map(|p| p.c() * &design_a).collect(),
        pieces: vec![ProductPiece { label: "Z_i C_i A", col: 0, cols: n }],
        gamma: options.gamma,
        iterations: options.iterations,
        kernel: options.kernel,
        early_stop_tol: options.early_stop_tol,
        log: options.log.clone(),
    };
    let outcome = admm::run(setup, |h, _z, products| Ok(product_closed_loop(&design_a, h, products)?.1 * epsilon))?;

    warn_conditioning(&outcome.h);
    let h_inv = matrix::inverse_spd(&outcome.h)?;
    let gains: Vec<Matrix> = outcome.z.iter().map(|z| &h_inv * z).collect();
    let (closed_loop, _) = product_closed_loop(&design_a, &outcome.h, &outcome.products)?;
    let closed_loop_sum = closed_loop * (epsilon * count as f64);
    let u0 = problem.evaluate_constraint(0, &outcome.values)?;
    let state = StabilizeState {
        z: outcome.z,
        lambda: outcome.lambda,
        u: outcome.w,
        u0,
        h: outcome.h,
        gamma: options.gamma,
        t: outcome.iterations,
    };
    let result = DesignResult::finish(
        parties,
        a,
        gains,
        true,
        outcome.history,
        HistoryKind::SpectralRadius,
        Provenance::Admm { closed_loop_sum },
        outcome.iterations,
        outcome.converged,
    )?;
    Ok((result, state))
}
