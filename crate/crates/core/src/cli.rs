//! Batch command-line surface: identification from probability tables, model
//! estimation from microdata CSV, DGP simulation, and Monte Carlo studies.
//! All structured outputs are JSON with an embedded format version and the
//! fully resolved configuration; exit codes are 0 success, 1 input error,
//! 2 method error, 3 internal error.

use crate::bilogistic::Probability;
use crate::dgp::{self, DgpConfig};
use crate::estimate::{self, Dataset, EstimatorConfig};
use crate::identify;
use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Parser)]
#[command(name = "catsel", version, about = "Categorical outcomes under sample selection")]
pub struct Cli {
    /// Worker threads for replication studies (does not change results).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Recover the latent categorical distribution from a probability table.
    Identify {
        /// Input JSON: { "q", "p_sel": [p0, p1], "p_joint": [[pk0, pk1], ..] }
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the two-step selection model from a microdata CSV.
    Estimate {
        /// CSV with header s,y,z,x1..xd; y empty on unselected rows.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the augmented likelihood with the baseline-category term.
        #[arg(long)]
        include_baseline_term: bool,
        /// Prepend a constant column instead of requiring x1 = 1.
        #[arg(long)]
        add_intercept: bool,
    },
    /// Draw a dataset from a configured data-generating process.
    Simulate {
        /// DGP configuration JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path; a truth sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Feasibility probes before sampling.
        #[arg(long, default_value_t = 10_000)]
        probes: usize,
    },
    /// Monte Carlo replication study of the estimator.
    Mc {
        /// JSON: { "dgp": {..}, "replications": R, "estimator": {..} }
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Method(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Method(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Method(m) | CliError::Internal(m) => m,
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(workers) = cli.workers {
        // Ignore the error if a pool already exists (e.g. repeated calls in
        // one process); results do not depend on the pool size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    match cli.command {
        Command::Identify { input, out } => cmd_identify(&input, out.as_deref()),
        Command::Estimate {
            data,
            config,
            out,
            include_baseline_term,
            add_intercept,
        } => cmd_estimate(
            &data,
            config.as_deref(),
            out.as_deref(),
            include_baseline_term,
            add_intercept,
        ),
        Command::Simulate {
            config,
            seed,
            out,
            probes,
        } => cmd_simulate(&config, seed, &out, probes),
        Command::Mc { config, seed, out } => cmd_mc(&config, seed, out.as_deref()),
    }
}

/// Entry point for the binary: runs, reports errors as JSON on stderr, and
/// returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let kind = match &e {
                CliError::Input(_) => "input",
                CliError::Method(_) => "method",
                CliError::Internal(_) => "internal",
            };
            eprintln!(
                "{}",
                json!({ "error": e.message(), "kind": kind, "format_version": FORMAT_VERSION })
            );
            e.exit_code()
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("malformed JSON in {}: {e}", path.display())))
}

fn write_output(out: Option<&Path>, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Internal(format!("serialization failed: {e}")))?;
    match out {
        Some(path) => fs::write(path, text + "\n")
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TableFile {
    q: usize,
    p_sel: [f64; 2],
    p_joint: Vec<[f64; 2]>,
}

fn cmd_identify(input: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let file: TableFile = read_json(input)?;
    if file.q != file.p_joint.len() + 1 || file.q < 2 {
        return Err(CliError::Input(format!(
            "q = {} inconsistent with {} joint rows",
            file.q,
            file.p_joint.len()
        )));
    }
    let prob = |v: f64| Probability::new(v).map_err(|e| CliError::Method(e.to_string()));
    let p_sel = [prob(file.p_sel[0])?, prob(file.p_sel[1])?];
    let p_joint = file
        .p_joint
        .iter()
        .map(|row| Ok([prob(row[0])?, prob(row[1])?]))
        .collect::<Result<Vec<_>, CliError>>()?;
    let table = identify::ObservedSelectionTable::new(p_joint, p_sel)
        .map_err(|e| CliError::Method(e.to_string()))?;
    let model = identify::identify_all(&table).map_err(|e| CliError::Method(e.to_string()))?;
    let latent = &model.latent;
    let output = json!({
        "format_version": FORMAT_VERSION,
        "config": { "command": "identify", "input": input.display().to_string(), "q": file.q },
        "pi": latent.pi.iter().map(|p| p.value()).collect::<Vec<_>>(),
        "mu": latent.mu.iter().map(|m| m.value()).collect::<Vec<_>>(),
        "omega": latent.omega.iter().map(|w| w.value()).collect::<Vec<_>>(),
        "diagnostics": model.diagnostics,
    });
    write_output(out, &output)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct EstimateFileConfig {
    q: Option<usize>,
    estimator: Option<EstimatorConfig>,
}

fn parse_csv(
    path: &Path,
    add_intercept: bool,
    q_hint: Option<usize>,
) -> Result<Dataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Input(e.to_string()))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 4 || cols[0] != "s" || cols[1] != "y" || cols[2] != "z" {
        return Err(CliError::Input(
            "CSV header must start with s,y,z followed by covariate columns".into(),
        ));
    }
    let d_raw = cols.len() - 3;
    let mut s = Vec::new();
    let mut y = Vec::new();
    let mut z = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| CliError::Input(format!("row {row}: {e}")))?;
        let sv: u8 = record[0]
            .trim()
            .parse()
            .map_err(|_| CliError::Input(format!("row {row}: s must be 0 or 1")))?;
        if sv > 1 {
            return Err(CliError::Input(format!("row {row}: s must be 0 or 1")));
        }
        let yv = record[1].trim();
        let yk = if yv.is_empty() {
            None
        } else {
            let k: usize = yv
                .parse()
                .map_err(|_| CliError::Input(format!("row {row}: y must be a positive integer")))?;
            if k == 0 {
                return Err(CliError::Input(format!("row {row}: y is 1-based")));
            }
            Some(k - 1)
        };
        match (sv, yk) {
            (1, Some(_)) | (0, None) => {}
            (1, None) => {
                return Err(CliError::Input(format!("row {row}: selected but y missing")))
            }
            _ => {
                return Err(CliError::Input(format!(
                    "row {row}: y present although s = 0"
                )))
            }
        }
        let zv: f64 = record[2]
            .trim()
            .parse()
            .map_err(|_| CliError::Input(format!("row {row}: z must be numeric")))?;
        let mut xrow = Vec::with_capacity(d_raw);
        for j in 0..d_raw {
            let v: f64 = record[3 + j]
                .trim()
                .parse()
                .map_err(|_| CliError::Input(format!("row {row}: {} must be numeric", cols[3 + j])))?;
            xrow.push(v);
        }
        if !add_intercept && (xrow[0] - 1.0).abs() > 0.0 {
            return Err(CliError::Input(format!(
                "row {row}: first covariate column must be the constant 1 (or pass --add-intercept)"
            )));
        }
        s.push(sv == 1);
        y.push(yk);
        z.push(zv);
        if add_intercept {
            xs.push(1.0);
        }
        xs.extend_from_slice(&xrow);
    }
    let n = s.len();
    if n == 0 {
        return Err(CliError::Input("CSV contains no data rows".into()));
    }
    let d_x = d_raw + usize::from(add_intercept);
    let q = match q_hint {
        Some(q) => q,
        None => {
            y.iter()
                .flatten()
                .max()
                .map(|&m| m + 1)
                .ok_or_else(|| CliError::Input("no selected rows; cannot infer q".into()))?
                .max(2)
        }
    };
    let x = DMatrix::from_row_iterator(n, d_x, xs.into_iter());
    Dataset::new(q, x, z, s, y).map_err(|e| CliError::Input(e.to_string()))
}

fn cmd_estimate(
    data_path: &Path,
    config_path: Option<&Path>,
    out: Option<&Path>,
    include_baseline_term: bool,
    add_intercept: bool,
) -> Result<(), CliError> {
    let file_cfg: EstimateFileConfig = match config_path {
        Some(p) => read_json(p)?,
        None => EstimateFileConfig::default(),
    };
    let mut est_cfg = file_cfg.estimator.clone().unwrap_or_default();
    if include_baseline_term {
        est_cfg.include_baseline_term = true;
    }
    let data = parse_csv(data_path, add_intercept, file_cfg.q)?;
    let fit = estimate::estimate_two_step(&data, &est_cfg)
        .map_err(|e| CliError::Method(e.to_string()))?;

    let names = dgp::theta_names(data.q(), data.d_x());
    let theta: Vec<f64> = fit
        .params
        .beta
        .iter()
        .chain(fit.params.gamma.iter())
        .flatten()
        .cloned()
        .collect();
    let coordinates: Vec<serde_json::Value> = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let se = fit.std_errors[j];
            json!({
                "name": name,
                "estimate": theta[j],
                "se": se,
                "t": if se > 0.0 { theta[j] / se } else { f64::NAN },
                "se_influence": fit.std_errors_influence[j],
            })
        })
        .collect();
    let output = json!({
        "format_version": FORMAT_VERSION,
        "config": {
            "command": "estimate",
            "data": data_path.display().to_string(),
            "q": data.q(),
            "add_intercept": add_intercept,
            "estimator": est_cfg,
        },
        "fit": fit,
        "coordinates": coordinates,
    });
    write_output(out, &output)
}

fn float_cell(v: f64) -> String {
    // `{}` on f64 is the shortest decimal that parses back to the same bits.
    format!("{v}")
}

fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    let mut header = vec!["s".to_string(), "y".to_string(), "z".to_string()];
    for j in 0..data.d_x() {
        header.push(format!("x{}", j + 1));
    }
    w.write_record(&header).map_err(|e| CliError::Internal(e.to_string()))?;
    for i in 0..data.n() {
        let mut rec = vec![
            if data.s()[i] { "1".to_string() } else { "0".to_string() },
            data.y()[i].map(|k| (k + 1).to_string()).unwrap_or_default(),
            float_cell(data.z()[i]),
        ];
        for j in 0..data.d_x() {
            rec.push(float_cell(data.x()[(i, j)]));
        }
        w.write_record(&rec).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Internal(e.to_string()))
}

fn cmd_simulate(
    config_path: &Path,
    seed: Option<u64>,
    out: &Path,
    probes: usize,
) -> Result<(), CliError> {
    let mut cfg: DgpConfig = read_json(config_path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let report =
        dgp::validate_config(&cfg, probes).map_err(|e| CliError::Method(e.to_string()))?;
    if !report.accepted {
        return Err(CliError::Method(format!(
            "infeasible DGP: feasibility rate {:.6} over {} probes (worst margin {:.3e})",
            report.feasibility_rate, report.probes, report.worst_margin
        )));
    }
    let data = dgp::sample_dataset(&cfg).map_err(|e| CliError::Method(e.to_string()))?;
    write_dataset_csv(out, &data)?;

    // Population table over the drawn covariate design, conditional on each
    // instrument value.
    let mut p_sel = [0.0f64; 2];
    let mut p_joint = vec![[0.0f64; 2]; cfg.q];
    for zi in 0..2 {
        for i in 0..data.n() {
            let x = DVector::from_iterator(
                data.d_x(),
                (0..data.d_x()).map(|j| data.x()[(i, j)]),
            );
            let t = dgp::row_joint_table(&x, zi as f64, &cfg.true_params)
                .map_err(|e| CliError::Method(e.to_string()))?;
            p_sel[zi] += t.selected_mass();
            for k in 0..cfg.q {
                p_joint[k][zi] += t.cells[k][1];
            }
        }
        p_sel[zi] /= data.n() as f64;
        for row in p_joint.iter_mut() {
            row[zi] /= data.n() as f64;
        }
    }
    let truth_path = out.with_extension("truth.json");
    let truth = json!({
        "format_version": FORMAT_VERSION,
        "config": {
            "command": "simulate",
            "probes": probes,
            "dgp": cfg,
        },
        "feasibility": report,
        "population_table": { "p_sel": p_sel, "p_joint": p_joint },
    });
    write_output(Some(&truth_path), &truth)
}

#[derive(Debug, Serialize, Deserialize)]
struct McFileConfig {
    dgp: DgpConfig,
    replications: usize,
    #[serde(default)]
    estimator: EstimatorConfig,
    /// Acceptable 95% coverage band for the pass/fail summary.
    #[serde(default = "default_coverage_band")]
    coverage_band: [f64; 2],
}

fn default_coverage_band() -> [f64; 2] {
    [0.90, 0.98]
}

fn cmd_mc(config_path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    let mut cfg: McFileConfig = read_json(config_path)?;
    if let Some(seed) = seed {
        cfg.dgp.seed = seed;
    }
    let report = dgp::monte_carlo(&cfg.dgp, cfg.replications, &cfg.estimator)
        .map_err(|e| CliError::Method(e.to_string()))?;
    let [lo, hi] = cfg.coverage_band;
    let pass_outer = report
        .coordinates
        .iter()
        .all(|c| c.coverage95 >= lo && c.coverage95 <= hi);
    let pass_influence = report
        .coordinates
        .iter()
        .all(|c| c.coverage95_influence >= lo && c.coverage95_influence <= hi);
    let output = json!({
        "format_version": FORMAT_VERSION,
        "config": cfg,
        "report": report,
        "summary": {
            "coverage_band": cfg.coverage_band,
            "pass_score_outer_product_variance": pass_outer,
            "pass_influence_function_variance": pass_influence,
            "pass": pass_outer || pass_influence,
        },
    });
    write_output(out, &output)
}
