use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};

use secfuse::analysis::{self, CovarianceReport};
use secfuse::design::{self, MmseOptions, StabilizeOptions};
use secfuse::paillier::{self, PrivateKey, PrivateKeyFile, PublicKeyFile, MIN_SECURE_KEY_BITS};
use secfuse::protocol::{self, EncryptedMode, MessageLog, Mode, Session, Transport};

use crate::config::{ExperimentConfig, Method, ModeChoice};
use crate::output::{self, GainFile, Golden, Summary};

pub const PUBLIC_KEY_FILE: &str = "public_key.json";
pub const PRIVATE_KEY_FILE: &str = "private_key.json";

/// Flags shared by the commands that build a protocol session.
pub struct KeyOptions<'a> {
    pub keys: Option<&'a Path>,
    pub insecure: bool,
}

fn load_private_key(path: &Path) -> Result<PrivateKey> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: PrivateKeyFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(PrivateKey::try_from(&file)?)
}

fn build_mode(cfg: &ExperimentConfig, choice: ModeChoice, keys: &KeyOptions<'_>) -> Result<Mode> {
    let transport = match choice {
        ModeChoice::Plaintext => return Ok(Mode::Plaintext),
        ModeChoice::EncInproc => Transport::Channel,
        ModeChoice::EncSocket => Transport::Socket,
    };
    let private = match keys.keys {
        Some(path) => load_private_key(path)?,
        None => {
            if cfg.key_bits < MIN_SECURE_KEY_BITS && !keys.insecure {
                bail!("key_bits = {} needs --insecure-small-keys", cfg.key_bits);
            }
            log::info!("generating a {}-bit key", cfg.key_bits);
            paillier::keygen(cfg.key_bits, keys.insecure, &mut rand::rng())?.1
        }
    };
    Ok(Mode::Encrypted(EncryptedMode::new(private, cfg.scale_bits, transport)))
}

fn party_ids(cfg: &ExperimentConfig) -> Vec<usize> {
    cfg.sim.parties.iter().map(|p| p.id()).collect()
}

pub fn gains_path(out: &Path, method: Method) -> PathBuf {
    out.join(format!("gains_{}.json", method.name()))
}

pub fn design(cfg: &ExperimentConfig, method: Method, mode: ModeChoice, out: &Path, keys: &KeyOptions<'_>) -> Result<ExitCode> {
    let parties = &cfg.sim.parties;
    let a = cfg.sim.system.a();
    let result = match method {
        Method::Norm => {
            let mode = build_mode(cfg, mode, keys)?;
            let mut session = Session::new(&mode, &party_ids(cfg), MessageLog::disabled())?;
            design::stabilization_method_1(parties, a, cfg.norm, &mut session)?
        }
        Method::Stabilize => {
            let p = &cfg.stabilize;
            let mut options = StabilizeOptions { gamma: p.gamma, iterations: p.iterations, rate: p.rate, ..Default::default() };
            if let Some(tol) = p.inner_tol {
                options.kernel.tol = tol;
            }
            if let Some(tol) = p.early_stop_tol {
                options.early_stop_tol = tol;
            }
            design::stabilization_method_2(parties, a, &options)?.0
        }
        Method::Mmse => {
            let p = &cfg.mmse;
            let mut options = MmseOptions { gamma: p.gamma, iterations: p.iterations, ..Default::default() };
            if let Some(tol) = p.inner_tol {
                options.kernel.tol = tol;
            }
            if let Some(tol) = p.early_stop_tol {
                options.early_stop_tol = tol;
            }
            design::mmse_method(parties, &cfg.sim.system, &options)?.0
        }
    };
    output::ensure_dir(out)?;
    GainFile::from_result(method.name(), &party_ids(cfg), &result).save(&gains_path(out, method))?;
    output::write(&out.join(format!("history_{}.csv", method.name())), &output::history_csv(&result))?;

    println!("method            {}", method.name());
    println!("spectral radius   {}", result.spectral_radius);
    if let secfuse::design::Provenance::NormRelaxation { average_norm, .. } = result.provenance {
        println!("average norm      {average_norm}");
    }
    if let Some(last) = result.history.last() {
        println!("history final     {last}");
    }
    println!("iterations        {}", result.iterations);
    println!("converged         {}", result.converged);
    println!("accepted          {}", result.accepted);
    Ok(if result.accepted { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

pub struct SimulateOptions<'a> {
    pub gains: Option<&'a Path>,
    pub mode: ModeChoice,
    pub compare_modes: bool,
    pub keys: KeyOptions<'a>,
}

pub fn simulate(cfg: &ExperimentConfig, out: &Path, opts: &SimulateOptions<'_>) -> Result<ExitCode> {
    let ids = party_ids(cfg);
    let gains_file = opts.gains.map(Path::to_path_buf).unwrap_or_else(|| gains_path(out, cfg.method));
    let gains = GainFile::load(&gains_file)?.matrices_for(&ids)?;
    let sim = &cfg.sim;
    let n = sim.system.dim();
    output::ensure_dir(out)?;

    let p0 = &sim.initial_state_cov + &sim.initial_estimate_cov;
    if sim.horizon == 0 {
        output::write(&out.join("trajectory.csv"), &output::trajectory_header(n))?;
        output::write(&out.join("covariance.csv"), "k,tr_deterministic,tr_empirical,runs\n")?;
        if opts.compare_modes {
            output::write(&out.join("mode_diff.csv"), "k,max_abs_diff\n")?;
        }
        return Ok(ExitCode::SUCCESS);
    }

    let mode = build_mode(cfg, opts.mode, &opts.keys)?;
    let trace = protocol::run_protocol(sim, &mode, &gains, 0)?;
    let mut csv = output::trajectory_header(n);
    csv += &output::csv_row(0, trace.initial_state.iter().chain(trace.initial_estimate.iter()).copied());
    for r in &trace.rounds {
        csv += &output::csv_row(r.k, r.state.iter().chain(r.fused.iter()).copied());
    }
    output::write(&out.join("trajectory.csv"), &csv)?;
    if let Some(failure) = &trace.failure {
        eprintln!("error: {failure}");
        return Ok(ExitCode::FAILURE);
    }

    let deterministic = analysis::covariance_recursion(&p0, &sim.parties, &gains, &sim.system, sim.horizon)?;
    let empirical = analysis::monte_carlo_eval(sim, &gains, cfg.runs)?;
    let report = CovarianceReport {
        deterministic: deterministic.traces.clone(),
        empirical: Some(empirical.traces.clone()),
        runs: cfg.runs,
        seed: sim.seed,
    };
    let mut bytes = Vec::new();
    report.write_csv(&mut bytes)?;
    output::write(&out.join("covariance.csv"), &String::from_utf8(bytes)?)?;
    println!("mode              {}", mode.tag());
    println!("runs              {}", cfg.runs);
    println!("tr deterministic  {}", deterministic.traces[sim.horizon]);
    println!("tr empirical      {}", empirical.traces[sim.horizon]);

    if opts.compare_modes {
        let encrypted = match &mode {
            Mode::Encrypted(_) => mode.clone(),
            Mode::Plaintext => build_mode(cfg, ModeChoice::EncInproc, &opts.keys)?,
        };
        let plain = protocol::run_protocol(sim, &Mode::Plaintext, &gains, 0)?;
        let enc = protocol::run_protocol(sim, &encrypted, &gains, 0)?;
        if let Some(failure) = plain.failure.as_ref().or(enc.failure.as_ref()) {
            eprintln!("error: {failure}");
            return Ok(ExitCode::FAILURE);
        }
        let mut csv = String::from("k,max_abs_diff\n");
        let mut worst = 0.0f64;
        for (p, e) in plain.rounds.iter().zip(&enc.rounds) {
            let d = (&p.fused - &e.fused).amax();
            worst = worst.max(d);
            csv += &output::csv_row(p.k, [d]);
        }
        output::write(&out.join("mode_diff.csv"), &csv)?;
        println!("max mode diff     {worst}");
    }
    Ok(ExitCode::SUCCESS)
}

fn last_data_row(path: &Path) -> Result<Option<csv::StringRecord>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut last = None;
    for rec in reader.records() {
        last = Some(rec.with_context(|| format!("parsing {}", path.display()))?);
    }
    Ok(last)
}

fn field(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<f64> {
    let s = rec.get(i).with_context(|| format!("{}: missing column {}", path.display(), i + 1))?;
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse().with_context(|| format!("{}: bad number {s:?}", path.display()))
}

/// Collects design and covariance outputs from files or directories.
pub fn analyze(inputs: &[PathBuf]) -> Result<Summary> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(input)
                .with_context(|| format!("listing {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            files.extend(entries);
        } else if input.exists() {
            files.push(input.clone());
        } else {
            bail!("{} does not exist", input.display());
        }
    }
    let mut summary = Summary::default();
    for path in &files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(method) = name.strip_prefix("gains_").and_then(|s| s.strip_suffix(".json")) {
            let g = GainFile::load(path)?;
            summary.push(format!("{method}.spectral_radius"), g.spectral_radius);
            summary.push(format!("{method}.accepted"), if g.accepted { 1.0 } else { 0.0 });
            if let Some(avg) = g.average_norm {
                summary.push(format!("{method}.average_norm"), avg);
            }
        } else if let Some(method) = name.strip_prefix("history_").and_then(|s| s.strip_suffix(".csv")) {
            let mut reader = csv::Reader::from_path(path)?;
            let column = reader.headers()?.get(1).unwrap_or("value").to_string();
            if let Some(rec) = last_data_row(path)? {
                summary.push(format!("{method}.iterations"), field(&rec, 0, path)?);
                summary.push(format!("{method}.{column}_final"), field(&rec, 1, path)?);
            }
        } else if name == "covariance.csv" {
            if let Some(rec) = last_data_row(path)? {
                summary.push("horizon", field(&rec, 0, path)?);
                summary.push("tr_deterministic_final", field(&rec, 1, path)?);
                summary.push("tr_empirical_final", field(&rec, 2, path)?);
                summary.push("runs", field(&rec, 3, path)?);
            }
        } else if name == "mode_diff.csv" {
            let mut reader = csv::Reader::from_path(path)?;
            let mut worst = 0.0f64;
            for rec in reader.records() {
                worst = worst.max(field(&rec?, 1, path)?);
            }
            summary.push("max_mode_diff", worst);
        }
    }
    Ok(summary)
}

pub fn analyze_command(inputs: &[PathBuf], out: Option<&Path>, golden: Option<&Path>) -> Result<ExitCode> {
    let summary = analyze(inputs)?;
    if summary.rows.is_empty() {
        eprintln!("error: no design, covariance or mode-diff outputs found in the inputs");
        return Ok(ExitCode::from(2));
    }
    print!("{}", summary.to_table());
    if let Some(out) = out {
        output::ensure_dir(out)?;
        output::write(&out.join("summary.csv"), &summary.to_csv())?;
    }
    if let Some(golden) = golden {
        let (ok, report) = Golden::load(golden)?.check(&summary);
        print!("{report}");
        if !ok {
            return Ok(ExitCode::FAILURE);
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn keygen(bits: usize, out: &Path, insecure: bool) -> Result<ExitCode> {
    let (public, private) = paillier::keygen(bits, insecure, &mut rand::rng())?;
    output::ensure_dir(out)?;
    let public_text = serde_json::to_string_pretty(&PublicKeyFile::from(&public))?;
    let private_text = serde_json::to_string_pretty(&PrivateKeyFile::from(&private))?;
    output::write(&out.join(PUBLIC_KEY_FILE), &(public_text + "\n"))?;
    output::write(&out.join(PRIVATE_KEY_FILE), &(private_text + "\n"))?;
    println!("modulus bits      {}", public.bits());
    Ok(ExitCode::SUCCESS)
}
