//! Property checks shared by the proptest suites and the acceptance harness.
//! `Ok(false)` means the sampled instance was degenerate and was skipped.

use rand_chacha::ChaCha8Rng;

use secfuse::analysis;
use secfuse::design::{self, MmseOptions, StabilizeOptions};
use secfuse::matrix::{self, Matrix};
use secfuse::protocol::{self, EncryptedMode, MessageKind, MessageLog, Mode, Payload, Role};
use secfuse::sim::{PartyModel, SimConfig, SystemModel};

use super::{example_system, gaussian, rng, spd, symmetric, with_norm};

pub type Outcome = Result<bool, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn random_parties(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<PartyModel> {
    (1..=count)
        .map(|id| {
            let m = 1 + id % 2;
            PartyModel::new(id, gaussian(rng, m, n), spd(rng, m, 0.1)).unwrap()
        })
        .collect()
}

/// With every `K_i = 0` the fused covariance follows `P ← APAᵀ + Q`.
pub fn zero_gain_collapse(seed: u64, n: usize, count: usize) -> Outcome {
    let mut rng = rng(seed);
    let system = SystemModel::new(with_norm(&mut rng, n, n, 1.05), spd(&mut rng, n, 0.1)).unwrap();
    let parties = random_parties(&mut rng, n, count);
    let gains: Vec<Matrix> = parties.iter().map(|p| Matrix::zeros(n, p.outputs())).collect();
    let p0 = spd(&mut rng, n, 0.1);
    let series = analysis::covariance_recursion(&p0, &parties, &gains, &system, 20).map_err(|e| e.to_string())?;
    let mut p = p0;
    ensure((series.traces[0] - p.trace()).abs() <= 1e-12 * p.trace(), || "initial trace".into())?;
    for k in 1..=20 {
        p = system.a() * &p * system.a().transpose() + system.q();
        ensure((series.traces[k] - p.trace()).abs() <= 1e-10 * p.trace(), || format!("trace differs at k = {k}"))?;
    }
    Ok(true)
}

/// `psd_project` is idempotent and no farther from `S` than any PSD `X`.
pub fn psd_projection(seed: u64, n: usize) -> Outcome {
    let mut rng = rng(seed);
    let s = symmetric(&mut rng, n);
    let p = matrix::psd_project(&s).map_err(|e| e.to_string())?;
    ensure(matrix::min_eigenvalue(&p).unwrap() >= -1e-12, || "projection is not PSD".into())?;
    let pp = matrix::psd_project(&p).unwrap();
    ensure((&pp - &p).norm() <= 1e-12 * (1.0 + p.norm()), || "projection is not idempotent".into())?;
    let x = spd(&mut rng, n, 0.0);
    ensure((&p - &s).norm() <= (&x - &s).norm() + 1e-12, || "a PSD matrix is closer than the projection".into())?;
    Ok(true)
}

struct Instance {
    a: Matrix,
    q: Matrix,
    c: Matrix,
    r: Matrix,
}

/// Least `X` with `X = φ(K, X) + extra`, by fixed-point iteration.
fn phi_fixed_point(k: &Matrix, inst: &Instance, extra: &Matrix) -> Matrix {
    let mut x = Matrix::zeros(inst.a.nrows(), inst.a.nrows());
    for _ in 0..5000 {
        let next = analysis::phi(k, &x, &inst.a, &inst.q, &inst.c, &inst.r).unwrap() + extra;
        let done = (&next - &x).norm() <= 1e-15 * next.norm();
        x = next;
        if done {
            break;
        }
    }
    x
}

/// `X ⪰ φ(K, X)` holds exactly when the transformed LMI does, and the change
/// of variables inverts.
pub fn transform_round_trip(seed: u64, n: usize, m: usize) -> Outcome {
    let mut rng = rng(seed);
    let inst =
        Instance { a: with_norm(&mut rng, n, n, 0.9), q: spd(&mut rng, n, 0.1), c: gaussian(&mut rng, m, n), r: spd(&mut rng, m, 0.1) };
    if matrix::inverse(&inst.a).is_err() {
        return Ok(false);
    }
    // ‖A − AKC‖ ≤ 0.95, so the fixed points below exist.
    let k = gaussian(&mut rng, n, m);
    let k = &k * (0.05 / matrix::spectral_norm(&(&inst.a * &k * &inst.c)).max(1e-9));

    let feasible = phi_fixed_point(&k, &inst, &(Matrix::identity(n, n) * 0.1));
    let image = analysis::lemma1_transform(&k, &feasible, &inst.a, &inst.q, &inst.c, &inst.r).map_err(|e| e.to_string())?;
    ensure(image.lmi_min_eigenvalue > 0.0, || format!("feasible pair maps outside the LMI ({})", image.lmi_min_eigenvalue))?;
    let (k_back, x_back) = analysis::inverse_transform(&image.upsilon, &image.delta, &inst.a).map_err(|e| e.to_string())?;
    ensure((&k_back - &k).norm() <= 1e-7 * (1.0 + k.norm()), || format!("gain round trip off by {}", (&k_back - &k).norm()))?;
    ensure((&x_back - &feasible).norm() <= 1e-9 * feasible.norm(), || "covariance round trip".into())?;

    // 0.9·X* falls short of φ(K, 0.9·X*) by 0.1·(Q + AKRKᵀAᵀ) ≻ 0.
    let infeasible = phi_fixed_point(&k, &inst, &Matrix::zeros(n, n)) * 0.9;
    let image = analysis::lemma1_transform(&k, &infeasible, &inst.a, &inst.q, &inst.c, &inst.r).map_err(|e| e.to_string())?;
    ensure(image.lmi_min_eigenvalue < 0.0, || format!("infeasible pair satisfies the LMI ({})", image.lmi_min_eigenvalue))?;
    Ok(true)
}

/// Members of `Ω` certify `ρ(A − KCA) < 1`, and `Ω` contains exactly the
/// `(H, Z)` whose closed loop contracts in the `H`-norm.
pub fn lmi_membership(seed: u64, n: usize, count: usize, contraction: f64) -> Outcome {
    let mut rng = rng(seed);
    let a = gaussian(&mut rng, n, n) * 1.5;
    if matrix::inverse(&a).is_err() {
        return Ok(false);
    }
    let h = spd(&mut rng, n, 0.2);
    let root = matrix::sqrt_psd(&h).unwrap();
    let root_inv = matrix::inverse(&root).unwrap();
    // F = H^{-1/2}·W·H^{1/2} gives H − FᵀHF = H^{1/2}(I − WᵀW)H^{1/2}.
    let w = with_norm(&mut rng, n, n, contraction);
    let f = &root_inv * &w * &root;

    let target = (&a - &f) * count as f64;
    let mut assigned = Matrix::zeros(n, n);
    let mut parties = Vec::new();
    let mut gains = Vec::new();
    for id in 1..=count {
        let last = id == count;
        let m = if last { n } else { 1 + id % 2 };
        let c = gaussian(&mut rng, m, n);
        let k = if last {
            let Ok(ca_inv) = matrix::inverse(&(&c * &a)) else { return Ok(false) };
            (&target - &assigned) * ca_inv
        } else {
            gaussian(&mut rng, n, m) * 0.3
        };
        assigned += &k * &c * &a;
        parties.push(PartyModel::new(id, c, Matrix::identity(m, m)).unwrap());
        gains.push(k);
    }
    let mut values: Vec<Matrix> = parties.iter().zip(&gains).map(|(p, k)| &h * k * p.c() * &a).collect();
    values.push(h);

    let omega = design::omega_problem(&a, count, 1.0, 0.0);
    let membership = secfuse::sdp::check_membership(&omega, &values).map_err(|e| e.to_string())?;
    let rho = analysis::stability_margin(&parties, &gains, &a).map_err(|e| e.to_string())?;
    if membership.member {
        ensure(rho < 1.0, || format!("member with spectral radius {rho}"))?;
    }
    ensure(membership.member == (contraction < 1.0), || format!("membership {} for contraction {contraction}", membership.member))?;
    Ok(true)
}

/// Designing with rate `ε` on `A` is the same program as designing on `A/ε`.
pub fn rate_prescription(seed: u64, epsilon: f64) -> Outcome {
    let mut rng = rng(seed);
    let a = with_norm(&mut rng, 2, 2, 1.2);
    let parties = random_parties(&mut rng, 2, 2);
    let base = StabilizeOptions { iterations: 12, early_stop_tol: 0.0, ..StabilizeOptions::default() };
    let with_rate = StabilizeOptions { rate: Some(epsilon), ..base.clone() };
    let (with_rate, _) = design::stabilization_method_2(&parties, &a, &with_rate).map_err(|e| e.to_string())?;
    let (rescaled, _) = design::stabilization_method_2(&parties, &(&a / epsilon), &base).map_err(|e| e.to_string())?;
    ensure(with_rate.gains == rescaled.gains, || "gains differ".into())?;
    ensure(with_rate.history.len() == rescaled.history.len(), || "iteration counts differ".into())?;
    for (x, y) in with_rate.history.iter().zip(&rescaled.history) {
        ensure((x - y * epsilon).abs() <= 1e-12 * x.abs().max(1.0), || format!("history {x} vs {}", y * epsilon))?;
    }
    ensure((with_rate.spectral_radius - epsilon * rescaled.spectral_radius).abs() <= 1e-9, || "radii differ".into())?;
    Ok(true)
}

fn only_products(log: &MessageLog, allowed: &[&str], parties: &[PartyModel]) -> Result<(), String> {
    let messages = log.snapshot();
    ensure(!messages.is_empty(), || "no design messages recorded".into())?;
    for msg in &messages {
        let Payload::Matrices(ms) = &msg.payload else { return Err("design message without matrices".into()) };
        match msg.kind {
            MessageKind::PartyProduct => {
                for m in ms {
                    ensure(allowed.contains(&m.name.as_str()), || format!("unexpected upload {}", m.name))?;
                    let value = m.to_matrix().ok_or("malformed matrix")?;
                    for p in parties {
                        for secret in [p.c(), p.r()] {
                            ensure(value.shape() != secret.shape() || value != *secret, || "raw model data uploaded".into())?;
                        }
                    }
                }
            }
            MessageKind::CloudFeedback => {}
            other => return Err(format!("unexpected message kind {other:?}")),
        }
    }
    Ok(())
}

/// Design uploads are the named products only; the cloud never sees `C_i` or `R_i`.
pub fn design_privacy() -> Outcome {
    let (system, parties) = example_system();
    let log = MessageLog::enabled();
    let options = StabilizeOptions { iterations: 3, log: log.clone(), ..StabilizeOptions::default() };
    design::stabilization_method_2(&parties, system.a(), &options).map_err(|e| e.to_string())?;
    only_products(&log, &["Z_i C_i A"], &parties)?;

    let log = MessageLog::enabled();
    let options = MmseOptions { iterations: 3, track_reference: false, log: log.clone(), ..MmseOptions::default() };
    design::mmse_method(&parties, &system, &options).map_err(|e| e.to_string())?;
    only_products(&log, &["Z_i C_i", "Z_i sqrt(R_i) B_i"], &parties)?;
    Ok(true)
}

/// Parties upload ciphertexts only and the security module receives only
/// the cloud's aggregate.
pub fn protocol_privacy(mode: EncryptedMode) -> Outcome {
    let mut rng = rng(5);
    let system = SystemModel::new(with_norm(&mut rng, 3, 3, 1.05), spd(&mut rng, 3, 0.1)).unwrap();
    let parties = random_parties(&mut rng, 3, 3);
    let gains: Vec<Matrix> = parties.iter().map(|p| gaussian(&mut rng, 3, p.outputs()) * 0.1).collect();
    let cfg = SimConfig::new(system, parties, 10, 5).unwrap();
    let log = MessageLog::enabled();
    let trace = protocol::run_protocol_logged(&cfg, &Mode::Encrypted(mode), &gains, 0, log.clone()).map_err(|e| e.to_string())?;
    ensure(trace.failure.is_none(), || format!("round failed: {:?}", trace.failure))?;
    let to_security = log.of_kind(MessageKind::AggregateToSecurity);
    ensure(to_security.len() == cfg.horizon, || "one aggregate per round expected".into())?;
    ensure(
        to_security.iter().all(|m| m.sender == Role::Cloud && matches!(m.payload, Payload::Ciphertexts(_))),
        || "security module received something other than the aggregate".into(),
    )?;
    for m in log.snapshot() {
        if let Role::Party(_) = m.sender {
            ensure(m.kind == MessageKind::PartyUpload && matches!(m.payload, Payload::Ciphertexts(_)), || {
                "a party sent plaintext".into()
            })?;
        }
        if m.sender == Role::Security {
            ensure(m.kind == MessageKind::Broadcast, || "security module sent an unexpected message".into())?;
        }
    }
    Ok(true)
}
