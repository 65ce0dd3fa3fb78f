//! Secure multi-party filtering.
//!
//! Each round every party computes its local update, the cloud sums the
//! encrypted updates, the security module decrypts the sum and divides by N,
//! and every party adopts the broadcast mean as its new estimate.

mod message;
mod roles;
mod session;
pub mod wire;

pub use message::{MessageKind, MessageLog, NamedMatrix, Payload, Role, RoundMessage};
pub use roles::{local_predict_update, CloudServer, PartyState, SecurityModule};
pub use session::{EncryptedMode, Mode, ModeTag, Session, Transport, DEFAULT_ROUND_TIMEOUT};

use thiserror::Error;

use crate::matrix::{Matrix, Vector};
use crate::paillier::{FixedPointCodec, PaillierError, PrivateKey};
use crate::sim::{SimConfig, Simulation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error("value {value} would overflow the encrypted sum (per-party bound ±{bound:e})")]
    Range { value: f64, bound: f64 },
    #[error("configuration: {0}")]
    Config(String),
    #[error("round {k}: no upload from parties {missing:?} before the deadline")]
    Timeout { k: u64, missing: Vec<usize> },
    #[error("link timed out")]
    LinkTimeout,
    #[error("peer disconnected")]
    Disconnected,
    #[error("wire: {0}")]
    Wire(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("session already failed: {0}")]
    Aborted(Box<ProtocolError>),
    #[error("round {k}: {source}")]
    Round { k: u64, source: Box<ProtocolError> },
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// One round: local updates, secure average, fusion. Returns `x̄(k)`.
pub fn run_round(
    parties: &mut [PartyState],
    session: &mut Session,
    a: &Matrix,
    k: u64,
    measurements: &[Vector],
) -> Result<Vector> {
    if measurements.len() != parties.len() || parties.len() != session.parties() {
        return Err(ProtocolError::Config(format!(
            "{} parties, {} measurements, session expects {}",
            parties.len(),
            measurements.len(),
            session.parties()
        )));
    }
    let locals = parties
        .iter_mut()
        .zip(measurements)
        .map(|(p, y)| p.update(y, a).map(|v| v.as_slice().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let fused = session.average(k, &locals)?;
    for p in parties.iter_mut() {
        p.fuse(&fused)?;
    }
    Ok(Vector::from_vec(fused))
}

/// What an observer sees after round `k`.
#[derive(Debug)]
pub struct RoundView<'a> {
    pub k: usize,
    pub state: &'a Vector,
    pub fused: &'a Vector,
    pub parties: &'a [PartyState],
}

/// Runs `config.horizon` rounds of run `run`, calling `observe` after each.
/// `gains` are in the order of `config.parties`.
pub fn run_protocol_with(
    config: &SimConfig,
    session: &mut Session,
    gains: &[Matrix],
    run: u64,
    mut observe: impl FnMut(&RoundView<'_>),
) -> Result<()> {
    let mut sim = Simulation::new(config, run).map_err(|e| ProtocolError::Config(e.to_string()))?;
    let mut parties = initial_parties(config, gains, sim.initial_estimate())?;
    let a = config.system.a();
    for _ in 0..config.horizon {
        let step = sim.advance();
        let k = step.k as u64;
        let fused = run_round(&mut parties, session, a, k, &step.measurements)
            .map_err(|e| ProtocolError::Round { k, source: Box::new(e) })?;
        observe(&RoundView { k: step.k, state: &step.state, fused: &fused, parties: &parties });
    }
    Ok(())
}

fn initial_parties(config: &SimConfig, gains: &[Matrix], estimate: &Vector) -> Result<Vec<PartyState>> {
    if gains.len() != config.parties.len() {
        return Err(ProtocolError::Config(format!("{} gains for {} parties", gains.len(), config.parties.len())));
    }
    config
        .parties
        .iter()
        .zip(gains)
        .map(|(p, k)| {
            let party = p.clone().with_gain(k.clone()).map_err(|e| ProtocolError::Config(e.to_string()))?;
            PartyState::new(party, estimate.clone())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub k: usize,
    /// True state `x(k)`.
    pub state: Vector,
    /// Broadcast `x̄(k)`.
    pub fused: Vector,
    /// Per-party local updates `x̂_i⁻(k)`.
    pub locals: Vec<Vector>,
}

#[derive(Debug, Clone)]
pub struct ProtocolTrace {
    pub mode: ModeTag,
    pub initial_state: Vector,
    pub initial_estimate: Vector,
    pub rounds: Vec<RoundRecord>,
    /// Set when a round failed; `rounds` then holds the completed prefix.
    pub failure: Option<ProtocolError>,
    /// `max_k max_i ‖x̂_i(k) − x̄(k)‖∞` over the post-fusion party states.
    pub consensus_error: f64,
    /// `max_k ‖x̄(k) − (1/N)Σx̂_i⁻(k)‖∞`, the quantization the pipeline adds.
    pub aggregation_error: f64,
}

impl ProtocolTrace {
    /// `‖x(k) − x̄(k)‖²` per round.
    pub fn squared_errors(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| (&r.state - &r.fused).norm_squared()).collect()
    }
}

/// Runs one trajectory with a fresh session and records every round.
pub fn run_protocol(config: &SimConfig, mode: &Mode, gains: &[Matrix], run: u64) -> Result<ProtocolTrace> {
    run_protocol_logged(config, mode, gains, run, MessageLog::disabled())
}

pub fn run_protocol_logged(
    config: &SimConfig,
    mode: &Mode,
    gains: &[Matrix],
    run: u64,
    log: MessageLog,
) -> Result<ProtocolTrace> {
    if config.horizon == 0 {
        return Err(ProtocolError::Config("horizon must be at least 1".into()));
    }
    config.validate().map_err(|e| ProtocolError::Config(e.to_string()))?;
    let ids: Vec<usize> = config.parties.iter().map(|p| p.id()).collect();
    let mut session = Session::new(mode, &ids, log)?;
    let sim = Simulation::new(config, run).map_err(|e| ProtocolError::Config(e.to_string()))?;
    let mut trace = ProtocolTrace {
        mode: mode.tag(),
        initial_state: sim.state().clone(),
        initial_estimate: sim.initial_estimate().clone(),
        rounds: Vec::with_capacity(config.horizon),
        failure: None,
        consensus_error: 0.0,
        aggregation_error: 0.0,
    };
    let outcome = run_protocol_with(config, &mut session, gains, run, |view| {
        let locals: Vec<Vector> = view.parties.iter().map(|p| p.local().clone()).collect();
        let mean = locals.iter().fold(Vector::zeros(view.fused.len()), |acc, v| acc + v) / locals.len() as f64;
        trace.aggregation_error = trace.aggregation_error.max((&mean - view.fused).amax());
        for p in view.parties {
            trace.consensus_error = trace.consensus_error.max((p.estimate() - view.fused).amax());
        }
        trace.rounds.push(RoundRecord { k: view.k, state: view.state.clone(), fused: view.fused.clone(), locals });
    });
    match outcome {
        Ok(()) => {}
        Err(e @ ProtocolError::Round { .. }) => trace.failure = Some(e),
        Err(e) => return Err(e),
    }
    Ok(trace)
}

/// `(1/N)Σ values_i` through a one-off direct encrypted pipeline.
pub fn secure_scalar_average(values: &[f64], private: &PrivateKey, codec: &FixedPointCodec) -> Result<f64> {
    let mode = Mode::Encrypted(EncryptedMode {
        codec: codec.clone(),
        ..EncryptedMode::new(private.clone(), codec.scale_bits(), Transport::Direct)
    });
    let ids: Vec<usize> = (1..=values.len()).collect();
    Session::new(&mode, &ids, MessageLog::disabled())?.average_scalar(1, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::from_rows;
    use crate::paillier::{keygen, PrivateKey};
    use crate::sim::{PartyModel, SystemModel};
    use num_bigint::BigUint;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;
    use std::time::Duration;

    fn key() -> &'static PrivateKey {
        static KEY: OnceLock<PrivateKey> = OnceLock::new();
        KEY.get_or_init(|| keygen(512, false, &mut ChaCha8Rng::seed_from_u64(11)).unwrap().1)
    }

    fn encrypted(transport: Transport) -> Mode {
        let mut m = EncryptedMode::new(key().clone(), 40, transport);
        m.rng_seed = Some(3);
        m.timeout = Duration::from_millis(300);
        Mode::Encrypted(m)
    }

    fn all_modes() -> Vec<Mode> {
        vec![Mode::Plaintext, encrypted(Transport::Direct), encrypted(Transport::Channel), encrypted(Transport::Socket)]
    }

    #[test]
    fn single_party_aggregation_is_identity() {
        for mode in all_modes() {
            let mut s = Session::new(&mode, &[7], MessageLog::disabled()).unwrap();
            let out = s.average(1, &[vec![0.25, -3.5]]).unwrap();
            assert_eq!(out, vec![0.25, -3.5], "{}", mode.tag());
        }
    }

    #[test]
    fn identical_uploads_average_to_themselves() {
        let v = vec![1.0 / 3.0, -2.0, 1e-3];
        for mode in all_modes() {
            let mut s = Session::new(&mode, &[1, 2, 3, 4], MessageLog::disabled()).unwrap();
            let out = s.average(1, &vec![v.clone(); 4]).unwrap();
            for (o, x) in out.iter().zip(&v) {
                assert!((o - x).abs() <= 0.5 / 2f64.powi(40), "{}", mode.tag());
            }
        }
    }

    #[test]
    fn scalar_average_examples() {
        let codec = FixedPointCodec::new(key().public_key(), 40);
        assert_eq!(secure_scalar_average(&[0.0; 4], key(), &codec).unwrap(), 0.0);
        let avg = secure_scalar_average(&[0.4, 0.6, 0.8, 1.0], key(), &codec).unwrap();
        assert!((avg - 0.7).abs() <= 0.5 / codec.scale());
    }

    #[test]
    fn sessions_run_several_rounds_and_shut_down() {
        for mode in all_modes() {
            let mut s = Session::new(&mode, &[1, 2], MessageLog::disabled()).unwrap();
            for k in 1..=3 {
                let out = s.average(k, &[vec![k as f64], vec![-1.0]]).unwrap();
                assert!((out[0] - (k as f64 - 1.0) / 2.0).abs() < 1e-12);
                let scalar = s.average_scalar(k, &[2.0, 4.0]).unwrap();
                assert!((scalar - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overflow_aborts_the_round() {
        // A 64-bit modulus leaves about ±2^23 of headroom at 40 fractional bits.
        let p = BigUint::from(4294967291u64);
        let q = BigUint::from(4294967279u64);
        let small = PrivateKey::from_primes(&p, &q).unwrap();
        let mode = Mode::Encrypted(EncryptedMode::new(small, 40, Transport::Direct));
        let mut s = Session::new(&mode, &[1, 2], MessageLog::disabled()).unwrap();
        let bound = s.codec().unwrap().max_magnitude() / 2.0;
        assert!(s.average(1, &[vec![bound * 0.9], vec![bound * 0.9]]).is_ok());
        let err = s.average(2, &[vec![bound * 1.1], vec![0.0]]).unwrap_err();
        assert!(matches!(err, ProtocolError::Range { .. }), "{err}");
    }

    #[test]
    fn missing_upload_times_out() {
        for transport in [Transport::Channel, Transport::Socket] {
            let mut s = Session::new(&encrypted(transport), &[1, 2, 3], MessageLog::disabled()).unwrap();
            let err = s.average_partial(4, &[Some(vec![1.0]), None, Some(vec![2.0])]).unwrap_err();
            assert_eq!(err, ProtocolError::Timeout { k: 4, missing: vec![2] }, "{transport:?}");
            assert!(matches!(s.average(5, &[vec![1.0], vec![1.0], vec![1.0]]), Err(ProtocolError::Aborted(_))));
        }
    }

    #[test]
    fn message_log_respects_privacy_boundary() {
        for transport in [Transport::Direct, Transport::Channel, Transport::Socket] {
            let log = MessageLog::enabled();
            let mut s = Session::new(&encrypted(transport), &[1, 2, 3, 4], log.clone()).unwrap();
            for k in 1..=2 {
                s.average(k, &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
            }
            drop(s);
            let msgs = log.snapshot();
            assert_eq!(msgs.len(), 12);
            for k in 1..=2u64 {
                let round: Vec<_> = msgs.iter().filter(|m| m.k == k).collect();
                let kinds: Vec<_> = round.iter().map(|m| m.kind).collect();
                assert_eq!(&kinds[..4], &[MessageKind::PartyUpload; 4]);
                assert_eq!(&kinds[4..], &[MessageKind::AggregateToSecurity, MessageKind::Broadcast]);
                for m in &round[..5] {
                    assert!(matches!(m.payload, Payload::Ciphertexts(_)), "only ciphertexts reach the cloud");
                }
                assert_eq!(round[4].sender, Role::Cloud);
                assert_eq!(round[5].payload, Payload::Vector(vec![4.0, 5.0]));
            }
        }
    }

    fn scalar_config(q: f64, r: f64) -> SimConfig {
        let system = SystemModel::new(from_rows(&[&[1.2, 0.3], &[0.0, 0.8]]), Matrix::identity(2, 2) * q).unwrap();
        let parties = (1..=2)
            .map(|id| PartyModel::new_relaxed(id, Matrix::identity(2, 2), Matrix::identity(2, 2) * r).unwrap())
            .collect();
        SimConfig::new(system, parties, 12, 5).unwrap()
    }

    #[test]
    fn noiseless_exact_start_tracks_exactly() {
        let mut cfg = scalar_config(0.0, 0.0);
        cfg.initial_estimate_cov = Matrix::zeros(2, 2);
        cfg.initial_state_cov = Matrix::zeros(2, 2);
        let gains = vec![Matrix::identity(2, 2) * 0.5; 2];
        let trace = run_protocol(&cfg, &Mode::Plaintext, &gains, 0).unwrap();
        assert!(trace.failure.is_none());
        assert_eq!(trace.rounds.len(), 12);
        assert!(trace.squared_errors().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn plaintext_trace_satisfies_fusion_recursion() {
        let cfg = scalar_config(0.1, 0.2);
        let gains = vec![from_rows(&[&[0.5, 0.1], &[0.0, 0.4]]), from_rows(&[&[0.3, 0.0], &[0.2, 0.6]])];
        let trace = run_protocol(&cfg, &Mode::Plaintext, &gains, 2).unwrap();
        assert_eq!(trace.consensus_error, 0.0);
        let a = cfg.system.a();
        let mut sim = Simulation::new(&cfg, 2).unwrap();
        let mut prev = trace.initial_estimate.clone();
        for r in &trace.rounds {
            let step = sim.advance();
            assert_eq!(step.state, r.state);
            let mean = r.locals.iter().fold(Vector::zeros(2), |acc, v| acc + v) / 2.0;
            assert!((&mean - &r.fused).amax() < 1e-15);
            for ((p, k), (local, y)) in cfg.parties.iter().zip(&gains).zip(r.locals.iter().zip(&step.measurements)) {
                let predicted = a * &prev;
                let expected = &predicted + k * (y - p.c() * &predicted);
                assert!((local - expected).amax() < 1e-12);
            }
            prev = r.fused.clone();
        }
    }

    #[test]
    fn encrypted_matches_plaintext_within_resolution() {
        let cfg = scalar_config(0.1, 0.2);
        let gains = vec![Matrix::identity(2, 2) * 0.4; 2];
        let plain = run_protocol(&cfg, &Mode::Plaintext, &gains, 1).unwrap();
        let enc = run_protocol(&cfg, &encrypted(Transport::Direct), &gains, 1).unwrap();
        assert!(enc.aggregation_error <= 0.5 / 2f64.powi(40));
        assert_eq!(enc.consensus_error, 0.0);
        let first = (&plain.rounds[0].fused - &enc.rounds[0].fused).amax();
        assert!(first <= 0.5 / 2f64.powi(40));
    }

    #[test]
    fn round_errors_leave_a_partial_trace() {
        let cfg = scalar_config(0.1, 0.2);
        let err = run_protocol(&cfg, &Mode::Plaintext, &[Matrix::zeros(2, 2)], 0).unwrap_err();
        assert!(matches!(err, ProtocolError::Config(_)));
        // Large negative gains make the estimate grow until it leaves the small codec range.
        let p = BigUint::from(4294967291u64);
        let q = BigUint::from(4294967279u64);
        let small = PrivateKey::from_primes(&p, &q).unwrap();
        let mode = Mode::Encrypted(EncryptedMode::new(small, 40, Transport::Direct));
        let gains = vec![Matrix::identity(2, 2) * -40.0; 2];
        let trace = run_protocol(&cfg, &mode, &gains, 0).unwrap();
        match trace.failure {
            Some(ProtocolError::Round { k, ref source }) => {
                assert_eq!(k as usize, trace.rounds.len() + 1);
                assert!(matches!(**source, ProtocolError::Range { .. }));
            }
            ref other => panic!("expected a range failure, got {other:?}"),
        }
    }
}
