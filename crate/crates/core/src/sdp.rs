//! Operator-splitting solver for small convex problems of the form
//!
//! ```text
//! minimize   Σ (w/2)·‖X_b − T_b‖²_F + Σ Tr(C_bᵀ X_b)
//! subject to S_c(X) = K_c + Σ (L·X_b·R + (L·X_b·R)ᵀ) ⪰ margin_c·I
//! ```
//!
//! The blocks `X_b` are stacked into one parameter vector `x` (symmetric
//! blocks contribute their upper triangle). Each constraint is an affine map
//! `x ↦ svec(S_c(x))` with the isometric `svec` (off-diagonals scaled by √2),
//! so the problem becomes `min ½xᵀPx + qᵀx` s.t. `Ax + b ∈ 𝒦`, with `𝒦` a
//! product of shifted PSD cones. ADMM alternates a cached Cholesky solve for
//! `x` with an eigendecomposition projection onto `𝒦`.

use nalgebra::Cholesky;
use thiserror::Error;

use crate::matrix::{self, Matrix, MatrixError, Vector};

pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITERS: usize = 20_000;
pub const DEFAULT_MARGIN: f64 = 1e-6;

const OVER_RELAXATION: f64 = 1.6;
const PROXIMAL_REG: f64 = 1e-8;
const SIGMA_INIT: f64 = 1.0;
const SIGMA_MIN: f64 = 1e-6;
const SIGMA_MAX: f64 = 1e6;
/// `σ` is refactored only when the suggested value differs by this factor.
const SIGMA_REFACTOR_RATIO: f64 = 5.0;
const SIGMA_CHECK_INTERVAL: usize = 25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("no convergence after {} iterations (primal {:.3e}, dual {:.3e})", .best.iterations, .best.primal_residual, .best.dual_residual)]
    NotConverged { best: Box<KernelSolution> },
}

pub type Result<T> = std::result::Result<T, SdpError>;

pub type BlockId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub symmetric: bool,
}

impl BlockSpec {
    fn params(&self) -> usize {
        if self.symmetric {
            self.rows * (self.rows + 1) / 2
        } else {
            self.rows * self.cols
        }
    }

    /// `(row, col)` of the unit entry of each basis element.
    fn basis(&self) -> Vec<(usize, usize)> {
        if self.symmetric {
            (0..self.rows).flat_map(|i| (i..self.rows).map(move |j| (i, j))).collect()
        } else {
            (0..self.cols).flat_map(|j| (0..self.rows).map(move |i| (i, j))).collect()
        }
    }
}

/// `L·X·R + (L·X·R)ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub block: BlockId,
    pub left: Matrix,
    pub right: Matrix,
}

impl Term {
    pub fn new(block: BlockId, left: Matrix, right: Matrix) -> Self {
        Self { block, left, right }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsdConstraint {
    pub name: String,
    pub constant: Matrix,
    pub terms: Vec<Term>,
    pub margin: f64,
}

impl PsdConstraint {
    /// Constraint with a zero constant term of size `dim`.
    pub fn new(name: impl Into<String>, dim: usize, margin: f64) -> Self {
        Self { name: name.into(), constant: Matrix::zeros(dim, dim), terms: Vec::new(), margin }
    }

    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    pub fn with_constant(mut self, constant: Matrix) -> Self {
        self.constant = constant;
        self
    }

    pub fn term(mut self, block: BlockId, left: Matrix, right: Matrix) -> Self {
        self.terms.push(Term::new(block, left, right));
        self
    }

    /// Adds `scale·X` on the diagonal block starting at `offset`. `X` must be
    /// a square block.
    pub fn diagonal(self, block: BlockId, offset: usize, size: usize, scale: f64) -> Self {
        let dim = self.dim();
        let left = embed(dim, offset, size) * (0.5 * scale);
        let right = embed(dim, offset, size).transpose();
        self.term(block, left, right)
    }

    /// Adds `scale·X` at rows `row..row+rows`, columns `col..col+cols`, and
    /// its transpose at the mirrored position. `row` and `col` ranges must not
    /// overlap.
    pub fn off_diagonal(self, block: BlockId, row: usize, rows: usize, col: usize, cols: usize, scale: f64) -> Self {
        let dim = self.dim();
        let left = embed(dim, row, rows) * scale;
        let right = embed(dim, col, cols).transpose();
        self.term(block, left, right)
    }
}

/// `dim × size` matrix whose rows `offset..offset+size` hold `I_size`.
pub fn embed(dim: usize, offset: usize, size: usize) -> Matrix {
    let mut e = Matrix::zeros(dim, size);
    for i in 0..size {
        e[(offset + i, i)] = 1.0;
    }
    e
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTarget {
    pub block: BlockId,
    pub target: Matrix,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearCost {
    pub block: BlockId,
    pub coeff: Matrix,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffinePsdProblem {
    blocks: Vec<BlockSpec>,
    quadratic: Vec<QuadraticTarget>,
    linear: Vec<LinearCost>,
    constraints: Vec<PsdConstraint>,
}

impl AffinePsdProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, name: impl Into<String>, rows: usize, cols: usize, symmetric: bool) -> BlockId {
        assert!(!symmetric || rows == cols, "symmetric blocks are square");
        self.blocks.push(BlockSpec { name: name.into(), rows, cols, symmetric });
        self.blocks.len() - 1
    }

    /// Adds `(weight/2)·‖X_b − target‖²_F`. Returns the index used by
    /// [`KernelSolver::set_target`].
    pub fn add_quadratic(&mut self, block: BlockId, target: Matrix, weight: f64) -> usize {
        self.quadratic.push(QuadraticTarget { block, target, weight });
        self.quadratic.len() - 1
    }

    /// Adds `Tr(coeffᵀ·X_b)`.
    pub fn add_linear(&mut self, block: BlockId, coeff: Matrix) {
        self.linear.push(LinearCost { block, coeff });
    }

    pub fn add_constraint(&mut self, constraint: PsdConstraint) -> usize {
        self.constraints.push(constraint);
        self.constraints.len() - 1
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn constraints(&self) -> &[PsdConstraint] {
        &self.constraints
    }

    pub fn quadratic(&self) -> &[QuadraticTarget] {
        &self.quadratic
    }

    pub fn validate(&self) -> Result<()> {
        let block = |id: BlockId| {
            self.blocks.get(id).ok_or_else(|| SdpError::Malformed(format!("unknown block {id}")))
        };
        for q in &self.quadratic {
            let b = block(q.block)?;
            if q.target.shape() != (b.rows, b.cols) {
                return Err(SdpError::Malformed(format!("target for {} has the wrong shape", b.name)));
            }
            if !(q.weight > 0.0 && q.weight.is_finite()) {
                return Err(SdpError::Malformed(format!("weight for {} must be positive", b.name)));
            }
            matrix::ensure_finite(&q.target)?;
        }
        for l in &self.linear {
            let b = block(l.block)?;
            if l.coeff.shape() != (b.rows, b.cols) {
                return Err(SdpError::Malformed(format!("linear cost for {} has the wrong shape", b.name)));
            }
        }
        for c in &self.constraints {
            matrix::ensure_square(&c.constant)?;
            matrix::symmetrize(&c.constant)?;
            if !(c.margin >= 0.0) {
                return Err(SdpError::Malformed(format!("constraint {} has a negative margin", c.name)));
            }
            for t in &c.terms {
                let b = block(t.block)?;
                if t.left.shape() != (c.dim(), b.rows) || t.right.shape() != (b.cols, c.dim()) {
                    return Err(SdpError::Malformed(format!(
                        "term on {} in constraint {} has incompatible factors",
                        b.name, c.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Value of constraint `idx` at `values`.
    pub fn evaluate_constraint(&self, idx: usize, values: &[Matrix]) -> Result<Matrix> {
        self.check_values(values)?;
        let c = &self.constraints[idx];
        let mut s = c.constant.clone();
        for t in &c.terms {
            let lxr = &t.left * &values[t.block] * &t.right;
            s += &lxr + lxr.transpose();
        }
        Ok(s)
    }

    pub fn objective(&self, values: &[Matrix]) -> Result<f64> {
        self.check_values(values)?;
        let quad: f64 =
            self.quadratic.iter().map(|q| 0.5 * q.weight * (&values[q.block] - &q.target).norm_squared()).sum();
        let lin: f64 = self.linear.iter().map(|l| l.coeff.dot(&values[l.block])).sum();
        Ok(quad + lin)
    }

    fn check_values(&self, values: &[Matrix]) -> Result<()> {
        if values.len() != self.blocks.len() {
            return Err(SdpError::Malformed(format!("expected {} blocks, got {}", self.blocks.len(), values.len())));
        }
        for (b, v) in self.blocks.iter().zip(values) {
            if v.shape() != (b.rows, b.cols) {
                return Err(MatrixError::Dimension {
                    context: "block value",
                    detail: format!("{} expects {}x{}, got {}x{}", b.name, b.rows, b.cols, v.nrows(), v.ncols()),
                }
                .into());
            }
        }
        Ok(())
    }
}

/// Per-constraint membership report.
#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    pub min_eigenvalues: Vec<f64>,
    /// `min_eigenvalue − margin` per constraint.
    pub slack: Vec<f64>,
    pub member: bool,
}

/// Minimum eigenvalue of each constraint expression at `values`.
pub fn check_membership(problem: &AffinePsdProblem, values: &[Matrix]) -> Result<Membership> {
    let mut min_eigenvalues = Vec::with_capacity(problem.constraints.len());
    let mut slack = Vec::with_capacity(problem.constraints.len());
    for (idx, c) in problem.constraints.iter().enumerate() {
        let s = problem.evaluate_constraint(idx, values)?;
        let min = matrix::min_eigenvalue(&s)?;
        min_eigenvalues.push(min);
        slack.push(min - c.margin);
    }
    let member = slack.iter().all(|&s| s >= 0.0);
    Ok(Membership { min_eigenvalues, slack, member })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSolution {
    pub values: Vec<Matrix>,
    pub objective: f64,
    /// `Σ_c ‖S_c − Π(S_c)‖_F` at `values`, with `Π` the projection onto
    /// `{S ⪰ margin_c·I}`.
    pub primal_residual: f64,
    /// ADMM dual residual at termination.
    pub dual_residual: f64,
    pub iterations: usize,
    /// ADMM primal residual `‖Ax + b − z‖` per iteration.
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSettings {
    pub tol: f64,
    pub max_iters: usize,
    /// Rebalance the penalty `σ` during the run.
    pub adaptive_sigma: bool,
}

impl Default for KernelSettings {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_iters: DEFAULT_MAX_ITERS, adaptive_sigma: true }
    }
}

/// Solves once from a cold start.
pub fn solve(problem: &AffinePsdProblem, tol: f64, max_iters: usize) -> Result<KernelSolution> {
    let mut solver = KernelSolver::new(problem.clone())?;
    solver.solve(&KernelSettings { tol, max_iters, ..KernelSettings::default() })
}

struct Layout {
    offsets: Vec<usize>,
    params: usize,
    cone_offsets: Vec<usize>,
    cone_len: usize,
}

/// Compiled problem with warm-start state. Targets may be changed between
/// solves without recompiling; the ADMM iterates carry over.
pub struct KernelSolver {
    problem: AffinePsdProblem,
    layout: Layout,
    p_diag: Vector,
    q: Vector,
    a: Matrix,
    at: Matrix,
    b: Vector,
    sigma: f64,
    factor: Option<Cholesky<f64, nalgebra::Dyn>>,
    x: Vector,
    z: Vector,
    u: Vector,
}

impl KernelSolver {
    pub fn new(problem: AffinePsdProblem) -> Result<Self> {
        problem.validate()?;
        let mut offsets = Vec::with_capacity(problem.blocks.len());
        let mut params = 0;
        for b in &problem.blocks {
            offsets.push(params);
            params += b.params();
        }
        let mut cone_offsets = Vec::with_capacity(problem.constraints.len());
        let mut cone_len = 0;
        for c in &problem.constraints {
            cone_offsets.push(cone_len);
            cone_len += svec_len(c.dim());
        }
        let layout = Layout { offsets, params, cone_offsets, cone_len };

        let mut a = Matrix::zeros(cone_len, params);
        let mut b = Vector::zeros(cone_len);
        for (ci, c) in problem.constraints.iter().enumerate() {
            let row0 = layout.cone_offsets[ci];
            b.rows_mut(row0, svec_len(c.dim())).copy_from(&svec(&c.constant));
            for t in &c.terms {
                let spec = &problem.blocks[t.block];
                for (j, (r, s)) in spec.basis().into_iter().enumerate() {
                    let mut img = t.left.column(r) * t.right.row(s);
                    if spec.symmetric && r != s {
                        img += t.left.column(s) * t.right.row(r);
                    }
                    let sym = &img + img.transpose();
                    let col = layout.offsets[t.block] + j;
                    let mut dst = a.view_mut((row0, col), (svec_len(c.dim()), 1));
                    dst += svec(&sym);
                }
            }
        }
        let at = a.transpose();
        let mut solver = Self {
            p_diag: Vector::zeros(params),
            q: Vector::zeros(params),
            a,
            at,
            b,
            sigma: SIGMA_INIT,
            factor: None,
            x: Vector::zeros(params),
            z: Vector::zeros(cone_len),
            u: Vector::zeros(cone_len),
            layout,
            problem,
        };
        solver.compile_objective();
        // Start from the cone point nearest the constant terms.
        let z0 = solver.project(&solver.b.clone())?;
        solver.z = z0;
        Ok(solver)
    }

    pub fn problem(&self) -> &AffinePsdProblem {
        &self.problem
    }

    /// Replaces the target of quadratic term `idx`.
    pub fn set_target(&mut self, idx: usize, target: Matrix) -> Result<()> {
        let q = self.problem.quadratic.get(idx).ok_or_else(|| SdpError::Malformed(format!("no target {idx}")))?;
        let b = &self.problem.blocks[q.block];
        if target.shape() != (b.rows, b.cols) {
            return Err(SdpError::Malformed(format!("target for {} has the wrong shape", b.name)));
        }
        matrix::ensure_finite(&target)?;
        self.problem.quadratic[idx].target = target;
        self.compile_objective();
        Ok(())
    }

    /// Overrides the primal warm start.
    pub fn set_values(&mut self, values: &[Matrix]) -> Result<()> {
        self.problem.check_values(values)?;
        self.x = self.pack(values);
        Ok(())
    }

    fn compile_objective(&mut self) {
        let mut p = Vector::zeros(self.layout.params);
        let mut q = Vector::zeros(self.layout.params);
        for term in &self.problem.quadratic {
            let spec = &self.problem.blocks[term.block];
            let off = self.layout.offsets[term.block];
            for (j, (r, s)) in spec.basis().into_iter().enumerate() {
                let (norm2, inner) = if spec.symmetric && r != s {
                    (2.0, term.target[(r, s)] + term.target[(s, r)])
                } else {
                    (1.0, term.target[(r, s)])
                };
                p[off + j] += term.weight * norm2;
                q[off + j] -= term.weight * inner;
            }
        }
        for term in &self.problem.linear {
            let spec = &self.problem.blocks[term.block];
            let off = self.layout.offsets[term.block];
            for (j, (r, s)) in spec.basis().into_iter().enumerate() {
                q[off + j] +=
                    if spec.symmetric && r != s { term.coeff[(r, s)] + term.coeff[(s, r)] } else { term.coeff[(r, s)] };
            }
        }
        if p != self.p_diag {
            self.factor = None;
        }
        self.p_diag = p;
        self.q = q;
    }

    fn factorize(&mut self) -> Result<()> {
        let mut k = &self.at * &self.a * self.sigma;
        for i in 0..self.layout.params {
            k[(i, i)] += self.p_diag[i] + PROXIMAL_REG;
        }
        self.factor = Some(Cholesky::new(k).ok_or(MatrixError::Singular)?);
        Ok(())
    }

    fn pack(&self, values: &[Matrix]) -> Vector {
        let mut x = Vector::zeros(self.layout.params);
        for (bi, spec) in self.problem.blocks.iter().enumerate() {
            let off = self.layout.offsets[bi];
            for (j, (r, s)) in spec.basis().into_iter().enumerate() {
                x[off + j] = if spec.symmetric && r != s {
                    0.5 * (values[bi][(r, s)] + values[bi][(s, r)])
                } else {
                    values[bi][(r, s)]
                };
            }
        }
        x
    }

    fn unpack(&self, x: &Vector) -> Vec<Matrix> {
        self.problem
            .blocks
            .iter()
            .enumerate()
            .map(|(bi, spec)| {
                let off = self.layout.offsets[bi];
                let mut m = Matrix::zeros(spec.rows, spec.cols);
                for (j, (r, s)) in spec.basis().into_iter().enumerate() {
                    m[(r, s)] = x[off + j];
                    if spec.symmetric {
                        m[(s, r)] = x[off + j];
                    }
                }
                m
            })
            .collect()
    }

    fn project(&self, v: &Vector) -> Result<Vector> {
        let mut out = Vector::zeros(v.len());
        for (ci, c) in self.problem.constraints.iter().enumerate() {
            let off = self.layout.cone_offsets[ci];
            let len = svec_len(c.dim());
            let s = smat(&v.rows(off, len).into_owned(), c.dim());
            let p = matrix::psd_project_with_margin(&s, c.margin)?;
            out.rows_mut(off, len).copy_from(&svec(&p));
        }
        Ok(out)
    }

    fn cone_violation(&self, x: &Vector) -> Result<f64> {
        let s = &self.a * x + &self.b;
        let p = self.project(&s)?;
        let mut total = 0.0;
        for (ci, c) in self.problem.constraints.iter().enumerate() {
            let off = self.layout.cone_offsets[ci];
            let len = svec_len(c.dim());
            total += (s.rows(off, len) - p.rows(off, len)).norm();
        }
        Ok(total)
    }

    fn solution(&self, x: &Vector, dual: f64, iterations: usize, history: Vec<f64>) -> Result<KernelSolution> {
        let values = self.unpack(x);
        Ok(KernelSolution {
            objective: self.problem.objective(&values)?,
            primal_residual: self.cone_violation(x)?,
            dual_residual: dual,
            iterations,
            residual_history: history,
            values,
        })
    }

    /// Runs ADMM from the current warm start.
    pub fn solve(&mut self, settings: &KernelSettings) -> Result<KernelSolution> {
        if self.layout.cone_len == 0 {
            // Unconstrained: the minimizer is explicit where P is nonzero.
            let x = Vector::from_fn(self.layout.params, |i, _| {
                if self.p_diag[i] > 0.0 {
                    -self.q[i] / self.p_diag[i]
                } else {
                    0.0
                }
            });
            self.x = x.clone();
            return self.solution(&x, 0.0, 0, Vec::new());
        }
        if self.factor.is_none() {
            self.factorize()?;
        }
        let tol = settings.tol;
        let mut history = Vec::new();
        let mut best: Option<(f64, Vector, f64)> = None;
        let mut dual = f64::INFINITY;
        for it in 1..=settings.max_iters {
            let rhs = &self.x * PROXIMAL_REG
                - &self.q
                - &self.at * (&self.b - &self.z + &self.u) * self.sigma;
            let x_new = self.factor.as_ref().expect("factorized").solve(&rhs);
            let ax = &self.a * &x_new;
            let axb = &ax + &self.b;
            let relaxed = &axb * OVER_RELAXATION + &self.z * (1.0 - OVER_RELAXATION);
            let z_new = self.project(&(&relaxed + &self.u))?;
            self.u += &relaxed - &z_new;
            let primal = (&axb - &z_new).norm();
            dual = self.sigma * (&self.at * (&z_new - &self.z)).norm();
            self.x = x_new;
            self.z = z_new;
            history.push(primal);

            // Purely relative: the cone constraints are homogeneous, so the
            // solution scale carries no information. `‖q‖` scales with the
            // targets and keeps the test meaningful when the cone point is 0.
            let scale_p = ax.norm().max(self.z.norm()).max(self.b.norm()).max(self.q.norm()).max(f64::MIN_POSITIVE);
            let scale_d = (&self.at * &self.u * self.sigma)
                .norm()
                .max(self.q.norm())
                .max(self.p_diag.component_mul(&self.x).norm())
                .max(f64::MIN_POSITIVE);
            let score = (primal / scale_p).max(dual / scale_d);
            if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
                best = Some((score, self.x.clone(), dual));
            }
            if primal <= tol * scale_p && dual <= tol * scale_d {
                return self.solution(&self.x.clone(), dual, it, history);
            }
            if settings.adaptive_sigma && it % SIGMA_CHECK_INTERVAL == 0 && primal > 0.0 && dual > 0.0 {
                let ratio = ((primal / scale_p) / (dual / scale_d)).sqrt();
                let proposed = (self.sigma * ratio).clamp(SIGMA_MIN, SIGMA_MAX);
                if proposed > self.sigma * SIGMA_REFACTOR_RATIO || proposed < self.sigma / SIGMA_REFACTOR_RATIO {
                    self.u *= self.sigma / proposed;
                    self.sigma = proposed;
                    self.factorize()?;
                }
            }
        }
        let (_, x, d) = best.unwrap_or((f64::INFINITY, self.x.clone(), dual));
        let sol = self.solution(&x, d, settings.max_iters, history)?;
        log::warn!(
            "cone solver stopped after {} iterations (primal {:.3e}, dual {:.3e})",
            sol.iterations,
            sol.primal_residual,
            sol.dual_residual
        );
        Err(SdpError::NotConverged { best: Box::new(sol) })
    }
}

fn svec_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Upper triangle, column by column, off-diagonals scaled by √2.
fn svec(s: &Matrix) -> Vector {
    let n = s.nrows();
    let mut v = Vector::zeros(svec_len(n));
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            v[k] = if i == j { s[(i, i)] } else { std::f64::consts::SQRT_2 * 0.5 * (s[(i, j)] + s[(j, i)]) };
            k += 1;
        }
    }
    v
}

fn smat(v: &Vector, n: usize) -> Matrix {
    let mut s = Matrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            if i == j {
                s[(i, i)] = v[k];
            } else {
                let e = v[k] / std::f64::consts::SQRT_2;
                s[(i, j)] = e;
                s[(j, i)] = e;
            }
            k += 1;
        }
    }
    s
}
