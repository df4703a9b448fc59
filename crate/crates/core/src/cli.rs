//! Command-line front end. `run` parses arguments, executes one command,
//! writes its output files, and returns the process exit code.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{load_counts, CountDataset, CovariateVector};
use crate::error::{Error, Result};
use crate::fdr::{bh_procedure_masked, lfdr_stepup, Decision, DecisionResult};
use crate::loglinear::{p_value, simulate_null, z_score, NullDistribution, TestStatistics};
use crate::mixture::{clfdr_stats, fit_em, EmInit, EmOptions};
use crate::normal_mixture::{fit_normal_mixture, lfdr_stats, NormalEmOptions};
use crate::sim::{run_simulation, SimConfig};
use crate::threshold::{frontier_table, power_table, rejection_boundary, SizePmf, TwoGroupModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Monte Carlo draws per distinct total when `--exact-null` is set.
pub const EXACT_NULL_REPS: usize = 100_000;

#[derive(Debug, Parser)]
#[command(
    name = "clfdr",
    version,
    about = "Conditional local FDR for multinomial count data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Clfdr,
    LfdrNormal,
    Bh,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Clfdr => "clfdr",
            Method::LfdrNormal => "lfdr-normal",
            Method::Bh => "bh",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test every row of a count table.
    Analyze(AnalyzeArgs),
    /// Rejection boundaries, power comparison, and the monotonicity frontier
    /// of the two-group model.
    Thresholds(ThresholdArgs),
    /// Run a Monte Carlo study described by a JSON config.
    Simulate(SimulateArgs),
}

#[derive(Debug, clap::Args)]
pub struct AnalyzeArgs {
    /// CSV with a header row of covariate values and one row of counts per
    /// test; an optional leading label column.
    pub counts: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Mixture components including the null.
    #[arg(long, default_value_t = 3)]
    pub components: usize,
    #[arg(long, value_enum, default_value_t = Method::Clfdr)]
    pub method: Method,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    /// Use a simulated null distribution of Z at each test's total instead
    /// of the standard normal for p-values.
    #[arg(long)]
    pub exact_null: bool,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct ThresholdArgs {
    #[arg(long, default_value_t = 0.5)]
    pub pi0: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma1: f64,
    #[arg(long, default_value_t = 0.2)]
    pub lambda: f64,
    /// Comma-separated, strictly increasing covariate values. Defaults to
    /// the wheat biomass vector.
    #[arg(long, value_delimiter = ',')]
    pub covariate: Option<Vec<f64>>,
    /// CSV of `n,prob` rows for the marginal model's size distribution.
    #[arg(long)]
    pub size_pmf: Option<PathBuf>,
    /// Largest total in the boundary and frontier tables.
    #[arg(long, default_value_t = 1000)]
    pub n_max: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    /// JSON simulation config.
    pub config: PathBuf,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<String>,
    pub parameters: BTreeMap<String, Value>,
    pub tool_version: String,
    /// Unix seconds; taken from `SOURCE_DATE_EPOCH` when set.
    pub timestamp: u64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, inputs: Vec<String>, parameters: BTreeMap<String, Value>) -> Self {
        let timestamp = std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .unwrap_or_else(|| {
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0)
            });
        Self {
            command: command.to_string(),
            inputs,
            parameters,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp,
            outputs: Vec::new(),
        }
    }
}

/// Result of a command that got as far as writing output.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Numerical problems; non-empty means exit code 3.
    pub warnings: Vec<String>,
}

/// Parses `args` (program name first) and runs the command. Messages go to
/// stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_INPUT,
            };
        }
    };
    match execute(&cli.command) {
        Ok(out) => {
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            if out.warnings.is_empty() {
                EXIT_OK
            } else {
                EXIT_NUMERICAL
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}

pub fn execute(cmd: &Command) -> Result<Outcome> {
    match cmd {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Thresholds(a) => cmd_thresholds(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = BufWriter::new(
        File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?,
    );
    f.write_all(text.as_bytes())?;
    f.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

fn finish(
    dir: &Path,
    mut manifest: RunManifest,
    mut files: Vec<PathBuf>,
    warnings: Vec<String>,
) -> Result<Outcome> {
    manifest.outputs = files
        .iter()
        .filter_map(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .collect();
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    files.push(path);
    Ok(Outcome { files, warnings })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| {
        Error::Io(format!("{}: {e}", path.display()))
    })?))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(crate::error::invalid(format!(
            "--alpha must lie in (0, 1], got {alpha}"
        )))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-row statistics, `None` for rows with zero total. With `exact_null`,
/// each distinct total gets its own simulated reference seeded from
/// `(seed, n)`.
fn row_statistics(
    ds: &CountDataset,
    exact_null: bool,
    seed: u64,
) -> Result<Vec<Option<TestStatistics>>> {
    let x = ds.covariate();
    let mut nulls: BTreeMap<u64, NullDistribution> = BTreeMap::new();
    let mut out = Vec::with_capacity(ds.n_tests());
    for m in 0..ds.n_tests() {
        let rec = ds.record(m);
        if rec.n_total() == 0 {
            out.push(None);
            continue;
        }
        let mut s = z_score(&rec, x)?;
        if exact_null {
            let n = rec.n_total();
            let f0 = match nulls.entry(n) {
                std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::btree_map::Entry::Vacant(e) => e.insert(simulate_null(
                    x,
                    n,
                    EXACT_NULL_REPS,
                    seed ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15),
                )?),
            };
            s.p = p_value(s.z, f0);
        }
        out.push(Some(s));
    }
    Ok(out)
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<Outcome> {
    check_alpha(a.alpha)?;
    if a.method != Method::Bh && a.components < 2 {
        return Err(crate::error::invalid(
            "--components must be >= 2 (the null plus at least one alternative)",
        ));
    }
    if !(a.tol > 0.0) || a.max_iter == 0 {
        return Err(crate::error::invalid(
            "--tol must be positive and --max-iter >= 1",
        ));
    }
    let ds = load_counts(open(&a.counts)?)?;
    let stats = row_statistics(&ds, a.exact_null, a.seed)?;
    if stats.iter().all(Option::is_none) {
        return Err(Error::NoUsableRows);
    }
    let mut warnings = Vec::new();
    let mut fit_json = Value::Null;
    let (statistic, decision): (Vec<Option<f64>>, DecisionResult) = match a.method {
        Method::Bh => {
            let p: Vec<Option<f64>> = stats.iter().map(|s| s.map(|s| s.p)).collect();
            let d = bh_procedure_masked(&p, a.alpha)?;
            (p, d)
        }
        Method::Clfdr => {
            let opts = EmOptions {
                tol: a.tol,
                max_iter: a.max_iter,
                restarts: a.restarts,
                seed: a.seed,
            };
            let fit = fit_em(&ds, a.components - 1, &EmInit::Default, &opts)?;
            if !fit.converged {
                warnings.push(format!(
                    "EM did not converge within {} iterations",
                    a.max_iter
                ));
            }
            if !fit.empty_components.is_empty() {
                warnings.push(format!(
                    "empty mixture components: {:?}",
                    fit.empty_components
                ));
            }
            let s = clfdr_stats(&ds, &fit.params)?;
            let d = lfdr_stepup(&s, a.alpha)?;
            let mut v =
                serde_json::to_value(fit.summary()).map_err(|e| Error::Io(e.to_string()))?;
            v["n_params"] = json!(fit.n_params);
            v["n_used"] = json!(fit.n_used);
            fit_json = v;
            (s, d)
        }
        Method::LfdrNormal => {
            let z: Vec<f64> = stats.iter().flatten().map(|s| s.z).collect();
            let opts = NormalEmOptions {
                tol: a.tol,
                max_iter: a.max_iter,
                restarts: a.restarts,
                seed: a.seed,
            };
            let fit = fit_normal_mixture(&z, a.components, &opts)?;
            if !fit.converged {
                warnings.push(format!(
                    "EM did not converge within {} iterations",
                    a.max_iter
                ));
            }
            if fit.collapsed {
                warnings.push("a normal component collapsed to the variance floor".to_string());
            }
            let l = lfdr_stats(&z, &fit.params);
            let mut it = l.into_iter();
            let s: Vec<Option<f64>> = stats.iter().map(|st| st.and_then(|_| it.next())).collect();
            let d = lfdr_stepup(&s, a.alpha)?;
            fit_json = serde_json::to_value(fit.summary()).map_err(|e| Error::Io(e.to_string()))?;
            (s, d)
        }
    };

    create_out_dir(&a.out_dir)?;
    let mut csv = String::from("id,n_m,T,Z,p,statistic,decision\n");
    for m in 0..ds.n_tests() {
        let s = stats[m];
        let id = ds.label(m);
        let id = if id.contains([',', '"', '\n']) {
            format!("\"{}\"", id.replace('"', "\"\""))
        } else {
            id
        };
        let n: u64 = ds.row(m).iter().map(|&c| c as u64).sum();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            id,
            n,
            fmt_opt(s.map(|s| s.t)),
            fmt_opt(s.map(|s| s.z)),
            fmt_opt(s.map(|s| s.p)),
            fmt_opt(statistic[m]),
            decision.delta[m].as_str()
        ));
    }
    let tests_path = a.out_dir.join("tests.csv");
    write_text(&tests_path, &csv)?;

    let skipped = decision
        .delta
        .iter()
        .filter(|d| **d == Decision::Skipped)
        .count();
    let summary = json!({
        "method": a.method.name(),
        "alpha": a.alpha,
        "components": a.components,
        "null": if a.exact_null { json!({"kind": "monte-carlo-empirical", "reps": EXACT_NULL_REPS}) } else { json!({"kind": "standard-normal"}) },
        "fit": fit_json,
        "k": decision.k,
        "lambda": decision.lambda,
        "n_tests": ds.n_tests(),
        "n_skipped": skipped,
        "warnings": warnings,
    });
    let summary_path = a.out_dir.join("summary.json");
    write_json(&summary_path, &summary)?;

    let mut params = BTreeMap::new();
    params.insert("alpha".into(), json!(a.alpha));
    params.insert("components".into(), json!(a.components));
    params.insert("method".into(), json!(a.method.name()));
    params.insert("tol".into(), json!(a.tol));
    params.insert("max_iter".into(), json!(a.max_iter));
    params.insert("seed".into(), json!(a.seed));
    params.insert("restarts".into(), json!(a.restarts));
    params.insert("exact_null".into(), json!(a.exact_null));
    let manifest = RunManifest::new("analyze", vec![a.counts.display().to_string()], params);
    finish(
        &a.out_dir,
        manifest,
        vec![tests_path, summary_path],
        warnings,
    )
}

const FRONTIER_LAMBDAS: [f64; 3] = [0.05, 0.1, 0.2];
const FRONTIER_PI0S: [f64; 3] = [0.1, 0.5, 0.9];
const FRONTIER_GAMMAS: [f64; 3] = [0.5, 1.0, 2.0];

pub fn cmd_thresholds(a: &ThresholdArgs) -> Result<Outcome> {
    if !(a.gamma1 > 0.0) {
        return Err(crate::error::invalid(format!(
            "the two-group model requires gamma1 > 0, got {}",
            a.gamma1
        )));
    }
    if a.n_max == 0 {
        return Err(crate::error::invalid("--n-max must be >= 1"));
    }
    let covariate = match &a.covariate {
        Some(v) => CovariateVector::new(v.clone())?,
        None => CovariateVector::wheat_biomass(),
    };
    let pmf = match &a.size_pmf {
        Some(p) => SizePmf::from_csv(open(p)?)?,
        None => SizePmf::synthetic_default(),
    };
    let model = TwoGroupModel::new(a.pi0, a.gamma1, covariate.clone(), pmf)?;
    let ns: Vec<u64> = (1..=a.n_max).collect();

    let mut bounds = String::from("n,mu,a,b,exists\n");
    for &n in &ns {
        let b = rejection_boundary(n, &model, a.lambda)?;
        bounds.push_str(&format!(
            "{},{},{},{},{}\n",
            n,
            model.mu(n),
            b.a,
            b.b,
            b.exists
        ));
    }
    let power = power_table(&model, a.lambda, &ns)?;
    let mut pcsv =
        String::from("n,mu,clfdr_threshold,lfdr_threshold,power_clfdr,power_lfdr,difference\n");
    for r in &power {
        pcsv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.n,
            r.mu,
            r.clfdr_threshold,
            r.lfdr_threshold,
            r.power_clfdr,
            r.power_lfdr,
            r.difference
        ));
    }

    let mut settings: Vec<(f64, f64)> = vec![(a.lambda, a.pi0)];
    for &l in &FRONTIER_LAMBDAS {
        for &p in &FRONTIER_PI0S {
            if !settings.contains(&(l, p)) {
                settings.push((l, p));
            }
        }
    }
    let mut gammas = vec![a.gamma1];
    for g in FRONTIER_GAMMAS {
        if !gammas.contains(&g) {
            gammas.push(g);
        }
    }
    let frontier = frontier_table(&covariate, &settings, &gammas, a.n_max)?;
    let mut fcsv = String::from("lambda,pi0,gamma1,min_n\n");
    for r in &frontier {
        let n = r.min_n.map(|n| n.to_string()).unwrap_or_default();
        fcsv.push_str(&format!("{},{},{},{}\n", r.lambda, r.pi0, r.gamma1, n));
    }

    create_out_dir(&a.out_dir)?;
    let files = vec![
        a.out_dir.join("boundaries.csv"),
        a.out_dir.join("power.csv"),
        a.out_dir.join("frontier.csv"),
    ];
    write_text(&files[0], &bounds)?;
    write_text(&files[1], &pcsv)?;
    write_text(&files[2], &fcsv)?;

    let mut params = BTreeMap::new();
    params.insert("pi0".into(), json!(a.pi0));
    params.insert("gamma1".into(), json!(a.gamma1));
    params.insert("lambda".into(), json!(a.lambda));
    params.insert("covariate".into(), json!(covariate.values()));
    params.insert("n_max".into(), json!(a.n_max));
    let inputs = a.size_pmf.iter().map(|p| p.display().to_string()).collect();
    let manifest = RunManifest::new("thresholds", inputs, params);
    finish(&a.out_dir, manifest, files, Vec::new())
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<Outcome> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| Error::Io(format!("{}: {e}", a.config.display())))?;
    let config: SimConfig = serde_json::from_str(&text)
        .map_err(|e| crate::error::invalid(format!("malformed config: {e}")))?;
    let report = run_simulation(&config)?;
    let mut warnings = Vec::new();
    for p in &report.procedures {
        if p.reps_failed > 0 {
            warnings.push(format!(
                "{}: {} of {} replicates dropped (fit did not converge)",
                p.procedure.name(),
                p.reps_failed,
                report.reps
            ));
        }
    }
    create_out_dir(&a.out_dir)?;
    let files = vec![
        a.out_dir.join("report.json"),
        a.out_dir.join("histograms.csv"),
    ];
    write_json(&files[0], &report)?;
    write_text(&files[1], &report.histogram_csv())?;

    let mut params = BTreeMap::new();
    params.insert("alpha".into(), json!(config.alpha));
    params.insert("m".into(), json!(config.m));
    params.insert("reps".into(), json!(config.reps));
    params.insert("seed".into(), json!(config.seed));
    params.insert("tol".into(), json!(config.tol));
    params.insert("max_iter".into(), json!(config.max_iter));
    params.insert("restarts".into(), json!(config.em_restarts));
    params.insert("components".into(), json!(config.params.n_components()));
    let manifest = RunManifest::new("simulate", vec![a.config.display().to_string()], params);
    finish(&a.out_dir, manifest, files, warnings)
}
