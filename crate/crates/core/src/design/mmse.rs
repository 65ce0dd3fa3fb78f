use crate::analysis;
use crate::matrix::{self, Matrix};
use crate::protocol::MessageLog;
use crate::sdp::{self, AffinePsdProblem, KernelSettings, PsdConstraint};
use crate::sim::{PartyModel, SystemModel};

use super::admm::{self, AdmmSetup, ProductPiece, TargetSlot};
use super::{validate_parties, warn_conditioning, DesignError, DesignResult, HistoryKind, Provenance, Result, EARLY_STOP_TOL};

#[derive(Debug, Clone)]
pub struct MmseOptions {
    pub gamma: f64,
    pub iterations: usize,
    pub margin: f64,
    pub kernel: KernelSettings,
    pub early_stop_tol: f64,
    /// Record `‖K^t − K*‖_F` against the centralized Riccati solution. The
    /// reference is a diagnostic observer; no party needs it.
    pub track_reference: bool,
    pub log: MessageLog,
}

impl Default for MmseOptions {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            iterations: 1000,
            margin: sdp::DEFAULT_MARGIN,
            kernel: KernelSettings { tol: 1e-9, ..KernelSettings::default() },
            early_stop_tol: EARLY_STOP_TOL,
            track_reference: true,
            log: MessageLog::disabled(),
        }
    }
}

/// Final iterates of the MMSE ADMM.
#[derive(Debug, Clone, PartialEq)]
pub struct MmseState {
    pub z: Vec<Matrix>,
    pub lambda: Vec<Matrix>,
    pub u: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub w: Matrix,
    pub h: Matrix,
    /// Row selectors `B_i` with `B_iB_iᵀ = I_{m_i}`.
    pub selectors: Vec<Matrix>,
    pub gamma: f64,
    pub t: usize,
}

/// Row selector picking rows `offset..offset+rows` of `I_m`.
pub fn selector(m: usize, offset: usize, rows: usize) -> Matrix {
    sdp::embed(m, offset, rows).transpose()
}

/// The cloud's feasible set `Ω̄` in the `(n, n, m, n)` block layout:
/// `W̄ = N[H̄, ∗, 0, ∗; AᵀH̄, H̄, 0, 0; 0, 0, I_m, 0; √Q·H̄, 0, 0, I_n]
///      + Σ[0, ∗, ∗, 0; −Ū_iᵀ, 0, 0, 0; V̄_iᵀ, 0, 0, 0; 0, 0, 0, 0] ⪰ 0`
/// and `H̄ ⪰ margin·I`. Blocks: `Ū_1, V̄_1, …, Ū_N, V̄_N, H̄`.
pub fn omega_bar_problem(a: &Matrix, sqrt_q: &Matrix, m: usize, parties: usize, gamma: f64, margin: f64) -> AffinePsdProblem {
    let n = a.nrows();
    let big_n = parties as f64;
    let dim = 3 * n + m;
    let mut problem = AffinePsdProblem::new();
    let mut uv = Vec::with_capacity(parties);
    for i in 0..parties {
        let u = problem.add_block(format!("U_{}", i + 1), n, n, false);
        let v = problem.add_block(format!("V_{}", i + 1), n, m, false);
        uv.push((u, v));
    }
    let h = problem.add_block("H", n, n, true);
    for &(u, v) in &uv {
        problem.add_quadratic(u, Matrix::zeros(n, n), gamma);
        problem.add_quadratic(v, Matrix::zeros(n, m), gamma);
    }
    problem.add_linear(h, -Matrix::identity(n, n));
    let mut constant = Matrix::zeros(dim, dim);
    constant.view_mut((2 * n, 2 * n), (m + n, m + n)).fill_with_identity();
    constant *= big_n;
    let mut w = PsdConstraint::new("W", dim, 0.0)
        .with_constant(constant)
        .diagonal(h, 0, n, big_n)
        .diagonal(h, n, n, big_n)
        .term(h, sdp::embed(dim, 0, n) * big_n, a * sdp::embed(dim, n, n).transpose())
        .term(h, sdp::embed(dim, 0, n) * big_n, sqrt_q * sdp::embed(dim, 2 * n + m, n).transpose());
    for &(u, v) in &uv {
        w = w.off_diagonal(u, 0, n, n, n, -1.0).off_diagonal(v, 0, n, 2 * n, m, 1.0);
    }
    problem.add_constraint(w);
    problem.add_constraint(PsdConstraint::new("H", n, margin).diagonal(h, 0, n, 1.0));
    problem
}

/// Asymptotic-MMSE gain design.
///
/// Party `i` holds `G_i = [C_i, √R_i·B_i]` and uploads `Z̄_iC_i` and
/// `Z̄_i√R_iB_i`; at the end it forms `K_i = A⁻¹H̄⁻¹Z̄_i`.
pub fn mmse_method(
    parties: &[PartyModel],
    system: &SystemModel,
    options: &MmseOptions,
) -> Result<(DesignResult, MmseState)> {
    let a = system.a();
    validate_parties(parties, a)?;
    if !(options.gamma > 0.0) {
        return Err(DesignError::Invalid("gamma must be positive".into()));
    }
    let a_inv = matrix::inverse(a).map_err(|_| DesignError::Invalid("A must be nonsingular".into()))?;
    if !matrix::is_positive_definite(system.q(), 0.0) {
        return Err(DesignError::Invalid("Q must be positive definite".into()));
    }
    for p in parties {
        if !matrix::is_positive_definite(p.r(), 0.0) {
            return Err(DesignError::Invalid(format!("R_{} must be positive definite", p.id())));
        }
    }
    let n = a.nrows();
    let count = parties.len();
    let m: usize = parties.iter().map(|p| p.outputs()).sum();
    let mut selectors = Vec::with_capacity(count);
    let mut factors = Vec::with_capacity(count);
    let mut offset = 0;
    for p in parties {
        let b = selector(m, offset, p.outputs());
        offset += p.outputs();
        factors.push(matrix::hstack(&[p.c().clone(), p.r_root() * &b])?);
        selectors.push(b);
    }
    let problem = omega_bar_problem(a, system.q_root(), m, count, options.gamma, options.margin);
    let h_block = 2 * count;
    let slots = (0..count)
        .map(|i| {
            vec![
                TargetSlot { quad: 2 * i, block: 2 * i, col: 0, cols: n, label: "U_i" },
                TargetSlot { quad: 2 * i + 1, block: 2 * i + 1, col: n, cols: m, label: "V_i" },
            ]
        })
        .collect();
    let mut initial_values = Vec::with_capacity(2 * count + 1);
    for _ in 0..count {
        initial_values.push(Matrix::zeros(n, n));
        initial_values.push(Matrix::zeros(n, m));
    }
    initial_values.push(Matrix::identity(n, n));

    let reference = if options.track_reference {
        let (c, r) = analysis::stack_observations(parties)?;
        Some(analysis::dare_solve(a, &c, system.q(), &r, analysis::DARE_DEFAULT_TOL)?.k_star)
    } else {
        None
    };
    let gains_of = |h: &Matrix, z: &[Matrix]| -> Result<Vec<Matrix>> {
        let left = &a_inv * matrix::inverse_spd(h)?;
        Ok(z.iter().map(|zi| &left * zi).collect())
    };
    let setup = AdmmSetup {
        problem: problem.clone(),
        slots,
        h_block,
        initial_values,
        party_ids: parties.iter().map(|p| p.id()).collect(),
        factors,
        pieces: vec![
            ProductPiece { label: "Z_i C_i", col: 0, cols: n },
            ProductPiece { label: "Z_i sqrt(R_i) B_i", col: n, cols: m },
        ],
        gamma: options.gamma,
        iterations: options.iterations,
        kernel: options.kernel,
        early_stop_tol: options.early_stop_tol,
        log: options.log.clone(),
    };
    let outcome = admm::run(setup, |h, z, _| match &reference {
        Some(k_star) => {
            let k = analysis::aggregate_gain(&gains_of(h, z)?)?;
            Ok((k - k_star).norm())
        }
        None => Ok(f64::NAN),
    })?;

    warn_conditioning(&outcome.h);
    let gains = gains_of(&outcome.h, &outcome.z)?;
    // Σ(I − K_iC_i)A = N·A − A⁻¹H̄⁻¹·Σ(Z̄_iC_i)·A, formed from uploaded products.
    let zc_sum = outcome.products.iter().fold(Matrix::zeros(n, n), |acc, p| acc + p.columns(0, n));
    let closed_loop_sum = a * count as f64 - &a_inv * matrix::inverse_spd(&outcome.h)? * zc_sum * a;
    let w = problem.evaluate_constraint(0, &outcome.values)?;
    let state = MmseState {
        z: outcome.z,
        lambda: outcome.lambda,
        u: outcome.w.iter().map(|x| x.columns(0, n).into_owned()).collect(),
        v: outcome.w.iter().map(|x| x.columns(n, m).into_owned()).collect(),
        w,
        h: outcome.h,
        selectors,
        gamma: options.gamma,
        t: outcome.iterations,
    };
    let (history, history_kind) =
        if options.track_reference { (outcome.history, HistoryKind::GainError) } else { (Vec::new(), HistoryKind::None) };
    let result = DesignResult::finish(
        parties,
        a,
        gains,
        true,
        history,
        history_kind,
        Provenance::Admm { closed_loop_sum },
        outcome.iterations,
        outcome.converged,
    )?;
    Ok((result, state))
}
