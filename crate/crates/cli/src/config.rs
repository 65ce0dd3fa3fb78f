//! Experiment configuration: one TOML file, matrices as row-major nested
//! arrays. Every semantic check reports the line of the offending value.

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::Spanned;

use secfuse::design::NormKind;
use secfuse::matrix::{self, Matrix};
use secfuse::paillier::{DEFAULT_KEY_BITS, DEFAULT_SCALE_BITS, MIN_INSECURE_KEY_BITS};
use secfuse::sim::{PartyModel, SimConfig, SystemModel};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{line}: {}", self.path.display(), self.message),
            None => write!(f, "{}: {}", self.path.display(), self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Norm,
    Stabilize,
    Mmse,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Norm => "norm",
            Method::Stabilize => "admm-stabilize",
            Method::Mmse => "admm-mmse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "norm" => Some(Method::Norm),
            "admm-stabilize" => Some(Method::Stabilize),
            "admm-mmse" => Some(Method::Mmse),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeChoice {
    Plaintext,
    EncInproc,
    EncSocket,
}

impl ModeChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "plaintext" => Some(ModeChoice::Plaintext),
            "enc-inproc" | "encrypted-inproc" => Some(ModeChoice::EncInproc),
            "enc-socket" | "encrypted-socket" => Some(ModeChoice::EncSocket),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StabilizeParams {
    pub gamma: f64,
    pub iterations: usize,
    pub rate: Option<f64>,
    pub inner_tol: Option<f64>,
    pub early_stop_tol: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MmseParams {
    pub gamma: f64,
    pub iterations: usize,
    pub inner_tol: Option<f64>,
    pub early_stop_tol: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub method: Method,
    pub norm: NormKind,
    pub stabilize: StabilizeParams,
    pub mmse: MmseParams,
    pub mode: ModeChoice,
    pub scale_bits: u32,
    pub key_bits: usize,
    pub runs: usize,
    pub output: Option<PathBuf>,
}

type RawMatrix = Spanned<Vec<Vec<f64>>>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    horizon: Option<Spanned<i64>>,
    runs: Option<Spanned<i64>>,
    output: Option<String>,
    system: RawSystem,
    #[serde(default)]
    party: Vec<Spanned<RawParty>>,
    design: Option<RawDesign>,
    protocol: Option<RawProtocol>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    #[serde(rename = "A")]
    a: RawMatrix,
    #[serde(rename = "Q")]
    q: RawMatrix,
    #[serde(rename = "Pi0")]
    pi0: Option<RawMatrix>,
    #[serde(rename = "Pi0_hat")]
    pi0_hat: Option<RawMatrix>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParty {
    id: Option<Spanned<i64>>,
    #[serde(rename = "C")]
    c: RawMatrix,
    #[serde(rename = "R")]
    r: RawMatrix,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawDesign {
    method: Option<Spanned<String>>,
    norm: Option<RawNorm>,
    stabilize: Option<RawStabilize>,
    mmse: Option<RawMmse>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNorm {
    kind: Option<Spanned<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStabilize {
    gamma: Option<Spanned<f64>>,
    iterations: Option<Spanned<i64>>,
    rate: Option<Spanned<f64>>,
    inner_tol: Option<Spanned<f64>>,
    early_stop_tol: Option<Spanned<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMmse {
    gamma: Option<Spanned<f64>>,
    iterations: Option<Spanned<i64>>,
    inner_tol: Option<Spanned<f64>>,
    early_stop_tol: Option<Spanned<f64>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawProtocol {
    mode: Option<Spanned<String>>,
    scale_bits: Option<Spanned<i64>>,
    key_bits: Option<Spanned<i64>>,
}

struct Checker<'a> {
    path: &'a Path,
    source: &'a str,
}

impl Checker<'_> {
    fn line(&self, span: Range<usize>) -> usize {
        let end = span.start.min(self.source.len());
        self.source[..end].bytes().filter(|&b| b == b'\n').count() + 1
    }

    fn err(&self, span: Option<Range<usize>>, message: impl Into<String>) -> ConfigError {
        ConfigError { path: self.path.to_path_buf(), line: span.map(|s| self.line(s)), message: message.into() }
    }

    fn matrix(&self, raw: &RawMatrix, name: &str) -> Result<Matrix, ConfigError> {
        let rows = raw.get_ref();
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 {
            return Err(self.err(Some(raw.span()), format!("{name} must be a non-empty matrix")));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
            return Err(self.err(
                Some(raw.span()),
                format!("{name} row {} has {} entries, row 1 has {cols}", i + 1, r.len()),
            ));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(self.err(Some(raw.span()), format!("{name} has non-finite entries")));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(Matrix::from_row_slice(rows.len(), cols, &flat))
    }

    fn square(&self, raw: &RawMatrix, name: &str, n: Option<usize>) -> Result<Matrix, ConfigError> {
        let m = self.matrix(raw, name)?;
        let want = n.unwrap_or(m.nrows());
        if m.nrows() != want || m.ncols() != want {
            return Err(self.err(
                Some(raw.span()),
                format!("{name} is {}x{}, expected {want}x{want}", m.nrows(), m.ncols()),
            ));
        }
        Ok(m)
    }

    fn covariance(&self, raw: &RawMatrix, name: &str, n: usize, strict: bool) -> Result<Matrix, ConfigError> {
        let m = self.square(raw, name, Some(n))?;
        if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
            return Err(self.err(Some(raw.span()), format!("{name} must be symmetric")));
        }
        let min = matrix::min_eigenvalue(&m).map_err(|e| self.err(Some(raw.span()), e.to_string()))?;
        if strict && min <= 0.0 {
            return Err(self.err(Some(raw.span()), format!("{name} must be positive definite (min eigenvalue {min:e})")));
        }
        if min < -1e-12 * m.amax().max(1.0) {
            return Err(self.err(Some(raw.span()), format!("{name} must be positive semidefinite (min eigenvalue {min:e})")));
        }
        Ok(m)
    }

    fn count(&self, raw: &Spanned<i64>, name: &str, min: i64) -> Result<usize, ConfigError> {
        let v = *raw.get_ref();
        if v < min {
            return Err(self.err(Some(raw.span()), format!("{name} must be at least {min}, got {v}")));
        }
        Ok(v as usize)
    }

    fn positive(&self, raw: &Spanned<f64>, name: &str) -> Result<f64, ConfigError> {
        let v = *raw.get_ref();
        if !(v > 0.0 && v.is_finite()) {
            return Err(self.err(Some(raw.span()), format!("{name} must be positive, got {v}")));
        }
        Ok(v)
    }

    fn opt_positive(&self, raw: &Option<Spanned<f64>>, name: &str) -> Result<Option<f64>, ConfigError> {
        raw.as_ref().map(|r| self.positive(r, name)).transpose()
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: None,
            message: format!("cannot read: {e}"),
        })?;
        Self::parse(path, &source)
    }

    pub fn parse(path: &Path, source: &str) -> Result<Self, ConfigError> {
        let ck = Checker { path, source };
        let raw: RawConfig = toml::from_str(source).map_err(|e| ck.err(e.span(), e.message().to_string()))?;

        let a = ck.square(&raw.system.a, "A", None)?;
        let n = a.nrows();
        let q = ck.covariance(&raw.system.q, "Q", n, false)?;
        let system = SystemModel::new(a, q).map_err(|e| ck.err(Some(raw.system.q.span()), e.to_string()))?;

        if raw.party.is_empty() {
            return Err(ck.err(None, "at least one [[party]] is required"));
        }
        let mut parties = Vec::with_capacity(raw.party.len());
        for (i, spanned) in raw.party.iter().enumerate() {
            let p = spanned.get_ref();
            let id = match &p.id {
                Some(id) => ck.count(id, "party id", 0)?,
                None => i + 1,
            };
            let c = ck.matrix(&p.c, &format!("C of party {id}"))?;
            if c.ncols() != n {
                return Err(ck.err(
                    Some(p.c.span()),
                    format!("C of party {id} has {} columns, the state has {n}", c.ncols()),
                ));
            }
            let r = ck.covariance(&p.r, &format!("R of party {id}"), c.nrows(), true)?;
            if parties.iter().any(|q: &PartyModel| q.id() == id) {
                return Err(ck.err(Some(spanned.span()), format!("duplicate party id {id}")));
            }
            parties.push(PartyModel::new(id, c, r).map_err(|e| ck.err(Some(p.r.span()), e.to_string()))?);
        }

        let horizon = match &raw.horizon {
            Some(h) => ck.count(h, "horizon", 0)?,
            None => 300,
        };
        let runs = match &raw.runs {
            Some(r) => ck.count(r, "runs", 1)?,
            None => 1,
        };
        let mut sim = SimConfig::new(system, parties, horizon, raw.seed.unwrap_or(0))
            .map_err(|e| ck.err(None, e.to_string()))?;
        if let Some(m) = &raw.system.pi0 {
            sim.initial_state_cov = ck.covariance(m, "Pi0", n, false)?;
        }
        if let Some(m) = &raw.system.pi0_hat {
            sim.initial_estimate_cov = ck.covariance(m, "Pi0_hat", n, false)?;
        }

        let design = raw.design.unwrap_or_default();
        let method = match &design.method {
            Some(m) => Method::parse(m.get_ref()).ok_or_else(|| {
                ck.err(Some(m.span()), format!("unknown design method {:?} (norm | admm-stabilize | admm-mmse)", m.get_ref()))
            })?,
            None => Method::Mmse,
        };
        let norm = match design.norm.as_ref().and_then(|n| n.kind.as_ref()) {
            Some(k) => match k.get_ref().as_str() {
                "spectral" => NormKind::Spectral,
                "frobenius" => NormKind::Frobenius,
                other => return Err(ck.err(Some(k.span()), format!("unknown norm {other:?} (spectral | frobenius)"))),
            },
            None => NormKind::Spectral,
        };
        let stabilize = match &design.stabilize {
            Some(s) => {
                let rate = ck.opt_positive(&s.rate, "rate")?;
                if let (Some(r), Some(raw)) = (rate, &s.rate) {
                    if r > 1.0 {
                        return Err(ck.err(Some(raw.span()), format!("rate must lie in (0, 1], got {r}")));
                    }
                }
                StabilizeParams {
                    gamma: s.gamma.as_ref().map(|g| ck.positive(g, "gamma")).transpose()?.unwrap_or(0.1),
                    iterations: s.iterations.as_ref().map(|i| ck.count(i, "iterations", 1)).transpose()?.unwrap_or(200),
                    rate,
                    inner_tol: ck.opt_positive(&s.inner_tol, "inner_tol")?,
                    early_stop_tol: ck.opt_positive(&s.early_stop_tol, "early_stop_tol")?,
                }
            }
            None => StabilizeParams { gamma: 0.1, iterations: 200, rate: None, inner_tol: None, early_stop_tol: None },
        };
        let mmse = match &design.mmse {
            Some(s) => MmseParams {
                gamma: s.gamma.as_ref().map(|g| ck.positive(g, "gamma")).transpose()?.unwrap_or(0.3),
                iterations: s.iterations.as_ref().map(|i| ck.count(i, "iterations", 1)).transpose()?.unwrap_or(1000),
                inner_tol: ck.opt_positive(&s.inner_tol, "inner_tol")?,
                early_stop_tol: ck.opt_positive(&s.early_stop_tol, "early_stop_tol")?,
            },
            None => MmseParams { gamma: 0.3, iterations: 1000, inner_tol: None, early_stop_tol: None },
        };

        let protocol = raw.protocol.unwrap_or_default();
        let mode = match &protocol.mode {
            Some(m) => ModeChoice::parse(m.get_ref()).ok_or_else(|| {
                ck.err(Some(m.span()), format!("unknown protocol mode {:?} (plaintext | enc-inproc | enc-socket)", m.get_ref()))
            })?,
            None => ModeChoice::Plaintext,
        };
        let scale_bits = match &protocol.scale_bits {
            Some(s) => {
                let v = ck.count(s, "scale_bits", 1)?;
                if v > 200 {
                    return Err(ck.err(Some(s.span()), "scale_bits must be at most 200"));
                }
                v as u32
            }
            None => DEFAULT_SCALE_BITS,
        };
        let key_bits = match &protocol.key_bits {
            Some(k) => ck.count(k, "key_bits", MIN_INSECURE_KEY_BITS as i64)?,
            None => DEFAULT_KEY_BITS,
        };

        Ok(Self {
            sim,
            method,
            norm,
            stabilize,
            mmse,
            mode,
            scale_bits,
            key_bits,
            runs,
            output: raw.output.map(PathBuf::from),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"seed = 3
horizon = 10

[system]
A = [[1.2, 0.0], [0.1, 0.5]]
Q = [[0.1, 0.0], [0.0, 0.1]]

[[party]]
C = [[1.0, 0.0], [0.0, 1.0]]
R = [[0.2, 0.0], [0.0, 0.2]]

[design]
method = "norm"
"#;

    fn parse(src: &str) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::parse(Path::new("exp.toml"), src)
    }

    #[test]
    fn toy_config_loads_with_defaults() {
        let cfg = parse(TOY).unwrap();
        assert_eq!(cfg.method, Method::Norm);
        assert_eq!(cfg.sim.parties[0].id(), 1);
        assert_eq!(cfg.sim.horizon, 10);
        assert_eq!(cfg.stabilize.gamma, 0.1);
        assert_eq!(cfg.mmse.gamma, 0.3);
        assert_eq!(cfg.mode, ModeChoice::Plaintext);
        assert_eq!(cfg.scale_bits, 40);
    }

    #[test]
    fn ragged_matrix_reports_its_line() {
        let src = TOY.replace("C = [[1.0, 0.0], [0.0, 1.0]]", "C = [[1.0, 0.0], [0.0]]");
        let err = parse(&src).unwrap_err();
        assert_eq!(err.line, Some(9), "{err}");
        assert!(err.message.contains("row 2"));
        assert!(err.to_string().starts_with("exp.toml:9:"));
    }

    #[test]
    fn indefinite_noise_reports_its_line() {
        let src = TOY.replace("R = [[0.2, 0.0], [0.0, 0.2]]", "R = [[0.2, 0.0], [0.0, -0.2]]");
        let err = parse(&src).unwrap_err();
        assert_eq!(err.line, Some(10));
        assert!(err.message.contains("positive definite"));
    }

    #[test]
    fn shape_mismatch_reports_its_line() {
        let src = TOY.replace("Q = [[0.1, 0.0], [0.0, 0.1]]", "Q = [[0.1]]");
        assert_eq!(parse(&src).unwrap_err().line, Some(6));
        let src = TOY.replace("C = [[1.0, 0.0], [0.0, 1.0]]", "C = [[1.0, 0.0, 3.0]]");
        assert_eq!(parse(&src).unwrap_err().line, Some(9));
    }

    #[test]
    fn syntax_and_unknown_keys_report_lines() {
        let src = TOY.replace("horizon = 10", "horizon = ");
        assert_eq!(parse(&src).unwrap_err().line, Some(2));
        let src = TOY.replace("method = \"norm\"", "methd = \"norm\"");
        assert_eq!(parse(&src).unwrap_err().line, Some(13));
        let src = TOY.replace("method = \"norm\"", "method = \"magic\"");
        assert_eq!(parse(&src).unwrap_err().line, Some(13));
    }
}
