//! `run`, `quantize` and `bound`.

use std::fs;
use std::path::{Path, PathBuf};

use feddq_core::analysis::{generalized_rhs, optimal_level, stepsize_margin, theorem1_rhs, BoundInputs, BoundReport};
use feddq_core::federation::{run_experiment, FederationError};
use feddq_core::quantizer::{bits_for_levels, compute_range, dequantize, encode, quantize, MAX_BITS};
use feddq_core::rng::{Purpose, RandomStream};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    self, client_rows, read_clients, read_json, read_rounds, write_clients, write_json, write_rounds, PolicySummary, RoundRow,
    RunMeta, CLIENTS_FILE, ROUNDS_FILE, RUN_FILE, SUMMARY_FILE,
};
use crate::config::ExperimentConfig;
use crate::CliError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub output_dir: PathBuf,
    pub summaries: Vec<PolicySummary>,
}

/// Run every policy in `cfg`, writing artifacts under `output_dir` (or the
/// config's own `output_dir`).
///
/// A diverging policy still gets its partial artifacts written and the
/// remaining policies still run; the divergence is reported at the end.
pub fn cmd_run(cfg: &ExperimentConfig, output_dir: Option<&Path>) -> Result<SuiteOutcome, CliError> {
    cfg.validate()?;
    let out = output_dir.unwrap_or(&cfg.output_dir).to_path_buf();
    let (train, eval) = cfg.load_data()?;
    let fed = cfg.federation_config();
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;

    let mut summaries = Vec::new();
    let mut diverged = Vec::new();
    for policy in cfg.policy_list() {
        let label = policy.label();
        let (reports, error) = match run_experiment(&cfg.model, &train, &fed, &policy, &eval) {
            Ok(run) => (run.reports, None),
            Err(aborted) => match aborted.error {
                FederationError::Diverged { .. } | FederationError::GlobalDiverged { .. } => (aborted.partial, Some(aborted.error)),
                other => return Err(CliError::Config(format!("{label}: {other}"))),
            },
        };
        let dir = out.join(&label);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let rows: Vec<RoundRow> = reports.iter().map(|r| RoundRow::from_report(&label, r)).collect();
        write_rounds(&dir.join(ROUNDS_FILE), &rows)?;
        write_clients(&dir.join(CLIENTS_FILE), &client_rows(&reports))?;
        let meta = RunMeta {
            policy: label.clone(),
            model: cfg.model,
            d: cfg.model.param_count(),
            n_clients: fed.n_clients,
            r_selected: fed.r_selected,
            rounds_planned: fed.rounds,
            rounds_run: reports.len(),
            eta: fed.sgd.eta,
            tau: fed.sgd.tau,
            batch_size: fed.sgd.batch_size,
            seed: fed.seed,
            verification: fed.verification,
            complete: error.is_none(),
            f0: reports.first().and_then(|r| r.global_loss_before),
            fk: reports.last().and_then(|r| r.global_loss_after),
            error: error.as_ref().map(|e| e.to_string()),
        };
        write_json(&dir.join(RUN_FILE), &meta)?;
        summaries.push(PolicySummary::from_rows(&label, &rows, error.is_none(), cfg.target_loss));
        if let Some(e) = error {
            diverged.push(format!("{label}: {e}"));
        }
    }
    write_json(&out.join(SUMMARY_FILE), &summaries)?;
    if !diverged.is_empty() {
        return Err(CliError::Diverged(diverged.join("; ")));
    }
    Ok(SuiteOutcome { output_dir: out, summaries })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantizeStats {
    pub count: usize,
    pub vmin: f64,
    pub vmax: f64,
    pub range: f64,
    /// Width actually used; 0 for a constant vector.
    pub bit_width: u8,
    pub paper_bits: u64,
    pub wire_bits: u64,
    pub frame_bytes: usize,
    pub mse: f64,
}

/// Parse whitespace- or comma-separated floats.
pub fn parse_floats(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .enumerate()
        .map(|(k, t)| match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(CliError::Input(format!("value {k}: {t:?} is not a finite number"))),
        })
        .collect()
}

/// Quantize a vector of floats at `bits`, write the frame and report its cost.
pub fn cmd_quantize(input: &Path, bits: u8, seed: u64, out: &Path) -> Result<QuantizeStats, CliError> {
    if bits == 0 || bits > MAX_BITS {
        return Err(CliError::Config(format!("bits: must lie in 1..={MAX_BITS}, got {bits}")));
    }
    let text = fs::read_to_string(input).map_err(|e| io_err(input, e))?;
    let values = parse_floats(&text).map_err(|e| CliError::Input(format!("{}: {e}", input.display())))?;
    let stat = compute_range(&values).map_err(|e| CliError::Input(format!("{}: {e}", input.display())))?;
    let mut rng = RandomStream::keyed(seed, 0, 0, Purpose::Quantize);
    let payload = quantize(&values, bits, &mut rng).map_err(|e| CliError::Input(e.to_string()))?;
    let frame = encode(&payload).map_err(|e| CliError::Input(e.to_string()))?;
    fs::write(out, &frame).map_err(|e| io_err(out, e))?;
    let restored = dequantize(&payload).map_err(|e| CliError::Input(e.to_string()))?;
    let mse = values.iter().zip(restored.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / values.len() as f64;
    Ok(QuantizeStats {
        count: values.len(),
        vmin: stat.vmin,
        vmax: stat.vmax,
        range: stat.range,
        bit_width: payload.bit_width,
        paper_bits: payload.paper_bits(),
        wire_bits: payload.wire_bits(),
        frame_bytes: frame.len(),
        mse,
    })
}

/// Problem constants supplied alongside a run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConstants {
    #[serde(rename = "L")]
    pub l: f64,
    pub sigma2: f64,
    /// Quantization level to evaluate at; defaults to the run's bit-weighted mean level.
    #[serde(default)]
    pub s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepsizeCheck {
    pub q: f64,
    pub margin: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundSummary {
    pub policy: String,
    pub l: f64,
    pub sigma2: f64,
    pub eta: f64,
    pub tau: usize,
    pub n: usize,
    pub r: usize,
    pub d: usize,
    pub rounds: usize,
    pub budget_bits: u64,
    pub s: f64,
    pub f0: f64,
    pub fk: f64,
    /// Full-participation bound; absent when `r < n`.
    pub theorem1: Option<BoundReport>,
    pub generalized: BoundReport,
    pub optimal_level: Option<f64>,
    pub optimal_bits: Option<u32>,
    pub stepsize: StepsizeCheck,
    pub measured_lhs: f64,
    pub satisfied: bool,
}

/// Mean level over quantized uploads, weighted by their bit cost.
fn bit_weighted_level(clients: &[artifacts::ClientRow]) -> Option<f64> {
    let (num, den) = clients
        .iter()
        .filter_map(|c| c.levels.filter(|&s| s > 0).map(|s| (s as f64, c.paper_bits as f64)))
        .fold((0.0, 0.0), |(n, d), (s, w)| (n + s * w, d + w));
    (den > 0.0).then(|| num / den)
}

/// Evaluate the convergence bound against a verification-mode run log.
///
/// Reads `clients.csv` and `run.json` from the directory holding `rounds`.
pub fn cmd_bound(rounds: &Path, constants: &Path, out: Option<&Path>) -> Result<BoundSummary, CliError> {
    let constants: BoundConstants = read_json(constants)?;
    if !(constants.l > 0.0 && constants.l.is_finite()) {
        return Err(CliError::Input("L: must be positive".into()));
    }
    if !(constants.sigma2 >= 0.0 && constants.sigma2.is_finite()) {
        return Err(CliError::Input("sigma2: must be finite and >= 0".into()));
    }
    let dir = rounds.parent().unwrap_or(Path::new("."));
    let rows = read_rounds(rounds)?;
    let clients = read_clients(&dir.join(CLIENTS_FILE))?;
    let meta: RunMeta = read_json(&dir.join(RUN_FILE))?;
    if rows.is_empty() {
        return Err(CliError::Input(format!("{}: no rounds", rounds.display())));
    }
    let grad: Option<Vec<f64>> = rows.iter().map(|r| r.grad_norm_sq).collect();
    let (grad, f0, fk) = match (grad, meta.f0, meta.fk) {
        (Some(g), Some(f0), Some(fk)) => (g, f0, fk),
        _ => {
            return Err(CliError::Input(format!(
                "{}: grad_norm_sq and global losses are only recorded in verification mode",
                rounds.display()
            )))
        }
    };
    let mut ranges = vec![Vec::new(); rows.len()];
    for c in &clients {
        ranges
            .get_mut(c.round)
            .ok_or_else(|| CliError::Input(format!("{CLIENTS_FILE}: round {} not in {ROUNDS_FILE}", c.round)))?
            .push(c.range);
    }
    let s = match constants.s.or_else(|| bit_weighted_level(&clients)) {
        Some(s) => s,
        None => return Err(CliError::Input("s: run has no quantized uploads; give `s` in the constants file".into())),
    };
    let budget_bits = rows.last().map_or(0, |r| r.paper_bits_cum);
    let inputs = BoundInputs {
        l: constants.l,
        sigma2: constants.sigma2,
        eta: meta.eta,
        tau: meta.tau,
        n: meta.n_clients,
        r: meta.r_selected,
        d: meta.d,
        budget_bits: budget_bits as f64,
        s,
        ranges,
        f0,
        fk,
    };
    let measured_lhs = grad.iter().sum::<f64>() / grad.len() as f64;
    let theorem1 = theorem1_rhs(&inputs).ok().map(|b| b.with_measured(measured_lhs));
    let generalized = generalized_rhs(&inputs)
        .map_err(|e| CliError::Input(e.to_string()))?
        .with_measured(measured_lhs);
    let optimal = optimal_level(inputs.l, inputs.d, inputs.n, &inputs.ranges, f0, fk).ok();
    let q = inputs.d as f64 / (s * s);
    let margin = stepsize_margin(inputs.l, inputs.eta, inputs.tau, inputs.n, inputs.r, q);
    let summary = BoundSummary {
        policy: meta.policy,
        l: inputs.l,
        sigma2: inputs.sigma2,
        eta: inputs.eta,
        tau: inputs.tau,
        n: inputs.n,
        r: inputs.r,
        d: inputs.d,
        rounds: rows.len(),
        budget_bits,
        s,
        f0,
        fk,
        satisfied: measured_lhs <= generalized.total,
        theorem1,
        generalized,
        optimal_level: optimal,
        optimal_bits: optimal.map(|s| bits_for_levels(s.ceil().max(1.0) as u64)),
        stepsize: StepsizeCheck {
            q,
            margin,
            holds: margin >= 0.0,
        },
        measured_lhs,
    };
    let out = out.map_or_else(|| dir.join("bound_report.json"), Path::to_path_buf);
    write_json(&out, &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_parsing() {
        assert_eq!(parse_floats("1.5\n-2, 3e-1\t4\n").unwrap(), vec![1.5, -2.0, 0.3, 4.0]);
        assert!(parse_floats("").unwrap().is_empty());
        assert!(matches!(parse_floats("1 x"), Err(CliError::Input(_))));
        assert!(matches!(parse_floats("1 NaN"), Err(CliError::Input(_))));
        assert!(matches!(parse_floats("inf"), Err(CliError::Input(_))));
    }

    #[test]
    fn quantize_command_constant_and_bad_bits() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("v.txt");
        let frame = dir.path().join("f.bin");
        fs::write(&input, "0.5\n0.5\n0.5\n").unwrap();
        let stats = cmd_quantize(&input, 4, 0, &frame).unwrap();
        assert_eq!((stats.bit_width, stats.range, stats.mse), (0, 0.0, 0.0));
        assert_eq!(fs::read(&frame).unwrap().len(), stats.frame_bytes);
        assert_eq!(cmd_quantize(&input, 17, 0, &frame).unwrap_err().exit_code(), 2);
        assert_eq!(cmd_quantize(&dir.path().join("none"), 4, 0, &frame).unwrap_err().exit_code(), 4);
    }

    #[test]
    fn weighted_level() {
        let row = |levels, paper_bits| artifacts::ClientRow {
            round: 0,
            client_id: 0,
            weight: 0.5,
            range: 1.0,
            bits: 0,
            levels,
            paper_bits,
            wire_bits: 0,
            loss_before: 0.0,
            loss_after: 0.0,
        };
        assert_eq!(bit_weighted_level(&[row(Some(3), 100), row(Some(15), 300)]), Some(12.0));
        assert_eq!(bit_weighted_level(&[row(None, 6400), row(Some(0), 32)]), None);
    }
}
