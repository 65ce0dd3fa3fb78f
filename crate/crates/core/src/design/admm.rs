//! Two-block ADMM between a cloud that owns a cone-constrained problem and
//! parties that own factorizations `Z_i·G_i`.
//!
//! Per iteration `t`:
//! 1. cloud: minimize its objective plus `(γ/2)Σ‖W_i − (P_i − Λ_i/γ)‖²` over
//!    its feasible set, where `W_i` are the cloud copies and `P_i` the last
//!    uploaded products;
//! 2. party `i`: `Z_i = argmin ‖Z·G_i − (W_i + Λ_i/γ)‖_F` and upload
//!    `P_i = Z_i·G_i`;
//! 3. cloud: `Λ_i ← Λ_i − γ(P_i − W_i)`.
//!
//! `G_i` never leaves the party; only `P_i` (split into the named pieces the
//! algorithm publishes) and the cloud feedback are exchanged and logged.

use crate::matrix::{self, Matrix};
use crate::protocol::{MessageKind, MessageLog, NamedMatrix, Payload, Role, RoundMessage};
use crate::sdp::{AffinePsdProblem, BlockId, KernelSettings, KernelSolver, SdpError};

use super::Result;

/// Columns `col..col+cols` of a party's cloud copy `W_i` live in `block`,
/// driven by quadratic term `quad`.
#[derive(Debug, Clone)]
pub(crate) struct TargetSlot {
    pub quad: usize,
    pub block: BlockId,
    pub col: usize,
    pub cols: usize,
    pub label: &'static str,
}

/// A named column range of the uploaded product.
#[derive(Debug, Clone)]
pub(crate) struct ProductPiece {
    pub label: &'static str,
    pub col: usize,
    pub cols: usize,
}

pub(crate) struct AdmmSetup {
    pub problem: AffinePsdProblem,
    pub slots: Vec<Vec<TargetSlot>>,
    pub h_block: BlockId,
    pub initial_values: Vec<Matrix>,
    pub party_ids: Vec<usize>,
    /// `G_i`, held by party `i` only.
    pub factors: Vec<Matrix>,
    pub pieces: Vec<ProductPiece>,
    pub gamma: f64,
    pub iterations: usize,
    pub kernel: KernelSettings,
    pub early_stop_tol: f64,
    pub log: MessageLog,
}

pub(crate) struct AdmmOutcome {
    pub z: Vec<Matrix>,
    pub lambda: Vec<Matrix>,
    pub w: Vec<Matrix>,
    pub products: Vec<Matrix>,
    pub values: Vec<Matrix>,
    pub h: Matrix,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
}

struct Party {
    id: usize,
    factor: Matrix,
    z: Matrix,
}

impl Party {
    fn step(&mut self, w: &Matrix, lambda: &Matrix, gamma: f64) -> Result<Matrix> {
        let target = w + lambda / gamma;
        let sol = matrix::solve_min_frobenius(&target, &self.factor)?;
        if sol.degenerate {
            log::debug!("party {}: rank-deficient factor, using minimum-norm update", self.id);
        }
        self.z = sol.value;
        Ok(&self.z * &self.factor)
    }
}

struct Cloud {
    solver: KernelSolver,
    slots: Vec<Vec<TargetSlot>>,
    h_block: BlockId,
    gamma: f64,
    lambda: Vec<Matrix>,
    w: Vec<Matrix>,
    values: Vec<Matrix>,
    inner_failures: usize,
}

impl Cloud {
    fn step(&mut self, products: &[Matrix], settings: &KernelSettings) -> Result<()> {
        for (i, slots) in self.slots.iter().enumerate() {
            let target = &products[i] - &self.lambda[i] / self.gamma;
            for s in slots {
                let piece = target.columns(s.col, s.cols).into_owned();
                self.solver.set_target(s.quad, piece)?;
            }
        }
        let sol = match self.solver.solve(settings) {
            Ok(sol) => sol,
            Err(SdpError::NotConverged { best }) => {
                self.inner_failures += 1;
                *best
            }
            Err(e) => return Err(e.into()),
        };
        for (i, slots) in self.slots.iter().enumerate() {
            for s in slots {
                self.w[i].columns_mut(s.col, s.cols).copy_from(&sol.values[s.block]);
            }
        }
        self.values = sol.values;
        Ok(())
    }

    fn h(&self) -> &Matrix {
        &self.values[self.h_block]
    }

    fn feedback(&self, i: usize) -> Vec<NamedMatrix> {
        let mut out: Vec<NamedMatrix> = self.slots[i]
            .iter()
            .map(|s| NamedMatrix::new(s.label, &self.w[i].columns(s.col, s.cols).into_owned()))
            .collect();
        out.push(NamedMatrix::new("Lambda_i", &self.lambda[i]));
        out
    }

    /// Returns `Σ‖P_i − W_i‖_F`.
    fn multiplier_step(&mut self, products: &[Matrix]) -> f64 {
        let mut primal = 0.0;
        for (i, p) in products.iter().enumerate() {
            let gap = p - &self.w[i];
            primal += gap.norm();
            self.lambda[i] -= gap * self.gamma;
        }
        primal
    }
}

/// Runs the iteration; `observe(h, z, products)` is evaluated after every
/// multiplier step and its value appended to the history.
pub(crate) fn run(
    setup: AdmmSetup,
    mut observe: impl FnMut(&Matrix, &[Matrix], &[Matrix]) -> Result<f64>,
) -> Result<AdmmOutcome> {
    let AdmmSetup {
        problem,
        slots,
        h_block,
        initial_values,
        party_ids,
        factors,
        pieces,
        gamma,
        iterations,
        kernel,
        early_stop_tol,
        log,
    } = setup;
    let n = initial_values[h_block].nrows();
    let widths: Vec<usize> = factors.iter().map(|g| g.ncols()).collect();
    let mut parties: Vec<Party> = party_ids
        .iter()
        .zip(factors)
        .map(|(&id, factor)| Party { id, z: Matrix::zeros(n, factor.nrows()), factor })
        .collect();
    let mut solver = KernelSolver::new(problem)?;
    solver.set_values(&initial_values)?;
    let mut cloud = Cloud {
        solver,
        slots,
        h_block,
        gamma,
        lambda: widths.iter().map(|&w| Matrix::zeros(n, w)).collect(),
        w: widths.iter().map(|&w| Matrix::zeros(n, w)).collect(),
        values: initial_values,
        inner_failures: 0,
    };
    let mut products: Vec<Matrix> = widths.iter().map(|&w| Matrix::zeros(n, w)).collect();
    let mut history = Vec::with_capacity(iterations);
    let mut converged = false;
    let mut done = 0;
    for t in 1..=iterations {
        let previous_w = cloud.w.clone();
        cloud.step(&products, &kernel)?;
        for (i, party) in parties.iter_mut().enumerate() {
            let feedback = cloud.feedback(i);
            log.record(&RoundMessage::new(MessageKind::CloudFeedback, t as u64, Role::Cloud, Payload::Matrices(feedback)));
            products[i] = party.step(&cloud.w[i], &cloud.lambda[i], gamma)?;
            let uploaded = pieces
                .iter()
                .map(|p| NamedMatrix::new(p.label, &products[i].columns(p.col, p.cols).into_owned()))
                .collect();
            log.record(&RoundMessage::new(
                MessageKind::PartyProduct,
                t as u64,
                Role::Party(party.id),
                Payload::Matrices(uploaded),
            ));
        }
        let primal = cloud.multiplier_step(&products);
        let dual = gamma * cloud.w.iter().zip(&previous_w).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt();
        let z: Vec<Matrix> = parties.iter().map(|p| p.z.clone()).collect();
        history.push(observe(cloud.h(), &z, &products)?);
        done = t;
        if primal < early_stop_tol && dual < early_stop_tol {
            converged = true;
            break;
        }
    }
    // Final broadcast of H so parties can form their gains.
    log.record(&RoundMessage::new(
        MessageKind::CloudFeedback,
        done as u64 + 1,
        Role::Cloud,
        Payload::Matrices(vec![NamedMatrix::new("H", cloud.h())]),
    ));
    if cloud.inner_failures > 0 {
        log::warn!("{} of {done} cloud steps hit the inner iteration cap", cloud.inner_failures);
    }
    Ok(AdmmOutcome {
        z: parties.into_iter().map(|p| p.z).collect(),
        h: cloud.h().clone(),
        lambda: cloud.lambda,
        w: cloud.w,
        products,
        values: cloud.values,
        iterations: done,
        converged,
        history,
    })
}
