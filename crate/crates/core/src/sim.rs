//! Linear time-invariant process `x(k+1) = A x(k) + w(k)` observed by N
//! parties through `y_i(k) = C_i x(k) + v_i(k)`, with seeded Gaussian noise.
//!
//! Every noise source draws from its own ChaCha stream, keyed by the
//! experiment seed and selected by `(run, role)`. Reordering parties
//! therefore leaves each party's noise untouched, and Monte-Carlo runs are
//! reproducible one by one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::matrix::{self, Matrix, MatrixError, Vector};

/// Minimum eigenvalue required of each `R_i` by [`PartyModel::new`].
pub const NOISE_PD_MARGIN: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("invalid model: {0}")]
    Model(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Process dynamics `A` and process-noise covariance `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    a: Matrix,
    q: Matrix,
    q_root: Matrix,
}

impl SystemModel {
    pub fn new(a: Matrix, q: Matrix) -> Result<Self> {
        matrix::ensure_square(&a)?;
        matrix::ensure_finite(&a)?;
        matrix::ensure_shape(&q, a.nrows(), a.nrows(), "process noise covariance")?;
        let q = matrix::symmetrize(&q)?;
        let q_root = matrix::sqrt_psd(&q)?;
        Ok(Self { a, q, q_root })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn q_root(&self) -> &Matrix {
        &self.q_root
    }

    /// Same `Q`, dynamics replaced by `A/ε`.
    pub fn scaled_dynamics(&self, epsilon: f64) -> Self {
        Self { a: &self.a / epsilon, q: self.q.clone(), q_root: self.q_root.clone() }
    }
}

/// One party's private observation model and (once designed) its gain.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyModel {
    id: usize,
    c: Matrix,
    r: Matrix,
    r_root: Matrix,
    gain: Option<Matrix>,
}

impl PartyModel {
    /// Requires `R_i ≻ 0` (minimum eigenvalue above [`NOISE_PD_MARGIN`]).
    pub fn new(id: usize, c: Matrix, r: Matrix) -> Result<Self> {
        let party = Self::new_relaxed(id, c, r)?;
        let min = matrix::min_eigenvalue(&party.r)?;
        if min <= NOISE_PD_MARGIN {
            return Err(SimError::Model(format!("R_{id} is not positive definite (min eigenvalue {min:.3e})")));
        }
        Ok(party)
    }

    /// Accepts any PSD `R_i`, including zero. Meant for noiseless limit cases
    /// in tests; the gain-design procedures still need `R_i ≻ 0`.
    pub fn new_relaxed(id: usize, c: Matrix, r: Matrix) -> Result<Self> {
        matrix::ensure_finite(&c)?;
        matrix::ensure_shape(&r, c.nrows(), c.nrows(), "measurement noise covariance")?;
        let r = matrix::symmetrize(&r)?;
        let r_root = matrix::sqrt_psd(&r)?;
        Ok(Self { id, c, r, r_root, gain: None })
    }

    pub fn with_gain(mut self, gain: Matrix) -> Result<Self> {
        self.set_gain(gain)?;
        Ok(self)
    }

    pub fn set_gain(&mut self, gain: Matrix) -> Result<()> {
        matrix::ensure_shape(&gain, self.c.ncols(), self.c.nrows(), "estimator gain")?;
        matrix::ensure_finite(&gain)?;
        self.gain = Some(gain);
        Ok(())
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn c(&self) -> &Matrix {
        &self.c
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    pub fn r_root(&self) -> &Matrix {
        &self.r_root
    }

    pub fn gain(&self) -> Option<&Matrix> {
        self.gain.as_ref()
    }

    /// Number of measurements `m_i`.
    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.c.ncols()
    }
}

/// Everything needed to generate one or more reproducible trajectories.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub system: SystemModel,
    pub parties: Vec<PartyModel>,
    /// Covariance of the initial state `x(0)`.
    pub initial_state_cov: Matrix,
    /// Covariance of the common initial estimate `x̂(0)`.
    pub initial_estimate_cov: Matrix,
    pub horizon: usize,
    pub seed: u64,
}

impl SimConfig {
    /// Uses `Π₀ = Π̂₀ = I_n`.
    pub fn new(system: SystemModel, parties: Vec<PartyModel>, horizon: usize, seed: u64) -> Result<Self> {
        let n = system.dim();
        let cfg = Self {
            system,
            parties,
            initial_state_cov: Matrix::identity(n, n),
            initial_estimate_cov: Matrix::identity(n, n),
            horizon,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.system.dim();
        if self.parties.is_empty() {
            return Err(SimError::Model("at least one party is required".into()));
        }
        for p in &self.parties {
            if p.state_dim() != n {
                return Err(SimError::Model(format!(
                    "party {} observes {} states, process has {n}",
                    p.id(),
                    p.state_dim()
                )));
            }
        }
        let mut ids: Vec<_> = self.parties.iter().map(|p| p.id()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.parties.len() {
            return Err(SimError::Model("party ids must be unique".into()));
        }
        for (name, cov) in [("Pi0", &self.initial_state_cov), ("Pi0_hat", &self.initial_estimate_cov)] {
            matrix::ensure_shape(cov, n, n, name)?;
            let min = matrix::min_eigenvalue(cov)?;
            if min < -1e-9 {
                return Err(SimError::Model(format!("{name} is not PSD")));
            }
        }
        Ok(())
    }
}

/// Which noise source a stream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    Initial,
    Process,
    Party(usize),
}

impl StreamRole {
    fn code(self) -> u64 {
        match self {
            StreamRole::Initial => 0,
            StreamRole::Process => 1,
            StreamRole::Party(id) => 16 + id as u64,
        }
    }
}

/// Counter-based generator for one `(seed, run, role)` triple.
pub fn noise_stream(seed: u64, run: u64, role: StreamRole) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((run << 24) | role.code());
    rng
}

/// Draws `sqrt_psd(cov)·z` with `z` standard normal.
pub fn sample_gaussian_vector<R: rand::Rng + ?Sized>(cov: &Matrix, rng: &mut R) -> Result<Vector> {
    let root = matrix::sqrt_psd(cov)?;
    Ok(sample_with_root(&root, rng))
}

/// Same as [`sample_gaussian_vector`] with a precomputed square root.
pub fn sample_with_root<R: rand::Rng + ?Sized>(root: &Matrix, rng: &mut R) -> Vector {
    let z = Vector::from_fn(root.ncols(), |_, _| StandardNormal.sample(rng));
    root * z
}

/// `A·x + w`, `w ~ N(0, Q)`.
pub fn step_process<R: rand::Rng + ?Sized>(x: &Vector, model: &SystemModel, rng: &mut R) -> Result<Vector> {
    if x.len() != model.dim() {
        return Err(MatrixError::Dimension {
            context: "step_process",
            detail: format!("state has length {}, model dimension is {}", x.len(), model.dim()),
        }
        .into());
    }
    Ok(model.a() * x + sample_with_root(model.q_root(), rng))
}

/// `C_i·x + v_i`, `v_i ~ N(0, R_i)`.
pub fn measure<R: rand::Rng + ?Sized>(party: &PartyModel, x: &Vector, rng: &mut R) -> Result<Vector> {
    if x.len() != party.state_dim() {
        return Err(MatrixError::Dimension {
            context: "measure",
            detail: format!("state has length {}, party {} expects {}", x.len(), party.id(), party.state_dim()),
        }
        .into());
    }
    Ok(party.c() * x + sample_with_root(party.r_root(), rng))
}

/// One time step of a trajectory.
#[derive(Debug, Clone)]
pub struct Step {
    pub k: usize,
    pub state: Vector,
    /// Measurements in the order of `SimConfig::parties`.
    pub measurements: Vec<Vector>,
}

/// Generator for a single run's truth and measurements.
pub struct Simulation<'a> {
    config: &'a SimConfig,
    state: Vector,
    initial_estimate: Vector,
    process_rng: ChaCha8Rng,
    party_rngs: Vec<ChaCha8Rng>,
    k: usize,
}

impl<'a> Simulation<'a> {
    pub fn new(config: &'a SimConfig, run: u64) -> Result<Self> {
        let mut init = noise_stream(config.seed, run, StreamRole::Initial);
        let state = sample_gaussian_vector(&config.initial_state_cov, &mut init)?;
        let initial_estimate = sample_gaussian_vector(&config.initial_estimate_cov, &mut init)?;
        let party_rngs =
            config.parties.iter().map(|p| noise_stream(config.seed, run, StreamRole::Party(p.id()))).collect();
        Ok(Self {
            config,
            state,
            initial_estimate,
            process_rng: noise_stream(config.seed, run, StreamRole::Process),
            party_rngs,
            k: 0,
        })
    }

    /// Overrides the drawn `x(0)` and `x̂(0)`.
    pub fn with_initial(mut self, state: Vector, estimate: Vector) -> Self {
        self.state = state;
        self.initial_estimate = estimate;
        self
    }

    pub fn state(&self) -> &Vector {
        &self.state
    }

    pub fn initial_estimate(&self) -> &Vector {
        &self.initial_estimate
    }

    /// Advances to `k+1`: propagates the state and measures it.
    pub fn advance(&mut self) -> Step {
        let cfg = self.config;
        self.state = cfg.system.a() * &self.state + sample_with_root(cfg.system.q_root(), &mut self.process_rng);
        self.k += 1;
        let measurements = cfg
            .parties
            .iter()
            .zip(self.party_rngs.iter_mut())
            .map(|(p, rng)| p.c() * &self.state + sample_with_root(p.r_root(), rng))
            .collect();
        Step { k: self.k, state: self.state.clone(), measurements }
    }
}
