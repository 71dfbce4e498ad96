//! Experiment driver: run specs, repeated runs and on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::federation::{
    run_experiment, DataConfig, ExperimentConfig, ExperimentOutcome, Method, MetricsSeries,
    ModelConfig, RoundConfig, Scenario, METRICS_HEADER,
};

/// λ_L1 used when a labels-at-server spec leaves it unset.
pub const LABELS_AT_SERVER_L1: f64 = 1e-5;

const DEFAULT_OUT: &str = "fedmatch-runs";

/// Everything needed to launch a batch of repetitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub method: Method,
    pub repetitions: usize,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub round: RoundConfig,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            method: Method::Fedmatch,
            repetitions: 3,
            out_dir: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            round: RoundConfig::default(),
        }
    }
}

impl RunSpec {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            data: self.data.clone(),
            model: self.model.clone(),
            round: self.round.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be positive".into()));
        }
        let exp = self.experiment();
        exp.validate()?;
        exp.check_method(self.method)
    }

    /// Seed used by repetition `rep`.
    pub fn seed_for(&self, rep: usize) -> u64 {
        self.round.seed.wrapping_add(rep as u64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parses and validates a JSON spec. An empty document yields the defaults.
pub fn parse_spec(text: &str) -> Result<RunSpec> {
    let mut raw: Value = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(text)?
    };
    if !raw.is_object() {
        return Err(Error::Config("top level must be a JSON object".into()));
    }
    fill_scenario_defaults(&mut raw);
    let spec: RunSpec = serde_json::from_value(raw).map_err(|e| Error::Config(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

/// Reads a spec file.
pub fn parse_config(path: &Path) -> Result<RunSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_spec(&text).map_err(|e| match e {
        Error::Json(j) => Error::Config(format!("{}: malformed JSON: {j}", path.display())),
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn fill_scenario_defaults(raw: &mut Value) {
    let scenario = raw
        .pointer("/round/scenario")
        .and_then(|v| serde_json::from_value::<Scenario>(v.clone()).ok());
    if scenario != Some(Scenario::LabelsAtServer) || raw.pointer("/round/loss/lambda_l1").is_some() {
        return;
    }
    let Some(round) = raw.get_mut("round").and_then(Value::as_object_mut) else {
        return;
    };
    let loss = round
        .entry("loss")
        .or_insert_with(|| Value::Object(Default::default()));
    if let Some(loss) = loss.as_object_mut() {
        loss.insert("lambda_l1".into(), LABELS_AT_SERVER_L1.into());
    }
}

/// Writes `contents` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub scenario: Scenario,
    pub repetitions: usize,
    pub seeds: Vec<u64>,
    pub final_test_acc: Stat,
    pub final_labeled_acc: Stat,
    /// Per-run average over rounds.
    pub s2c_pct: Stat,
    pub c2s_pct: Stat,
    pub final_nnz_psi_frac: Option<Stat>,
}

impl RunSummary {
    pub fn from_series(method: Method, scenario: Scenario, series: &[MetricsSeries]) -> Self {
        let last = |f: fn(&crate::federation::RoundMetrics) -> f64| -> Vec<f64> {
            series.iter().filter_map(|s| s.last().map(f)).collect()
        };
        let avg = |f: fn(&crate::federation::RoundMetrics) -> f64| -> Vec<f64> {
            series
                .iter()
                .filter(|s| !s.rounds.is_empty())
                .map(|s| s.rounds.iter().map(f).sum::<f64>() / s.rounds.len() as f64)
                .collect()
        };
        let nnz: Vec<f64> = series
            .iter()
            .filter_map(|s| s.last().and_then(|r| r.nnz_psi_frac))
            .collect();
        Self {
            method,
            scenario,
            repetitions: series.len(),
            seeds: series.iter().map(|s| s.seed).collect(),
            final_test_acc: Stat::of(&last(|r| r.test_acc)),
            final_labeled_acc: Stat::of(&last(|r| r.labeled_acc)),
            s2c_pct: Stat::of(&avg(|r| r.s2c_pct)),
            c2s_pct: Stat::of(&avg(|r| r.c2s_pct)),
            final_nnz_psi_frac: (!nnz.is_empty()).then(|| Stat::of(&nnz)),
        }
    }
}

fn cost_csv(outcome: &ExperimentOutcome) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "s2c_entries", "s2c_dense", "helper_entries", "c2s_entries", "c2s_dense"])?;
    for r in outcome.ledger.rounds() {
        w.write_record([
            r.round.to_string(),
            r.s2c_entries.to_string(),
            r.s2c_dense.to_string(),
            r.helper_entries.to_string(),
            r.c2s_entries.to_string(),
            r.c2s_dense.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Runs every repetition of `spec` under `out` and writes the summary last.
///
/// Layout: `config.json`, `rep_<i>/metrics.csv`, `rep_<i>/cost.csv`, `summary.json`.
pub fn run(spec: &RunSpec, out: &Path) -> Result<(RunSummary, Vec<MetricsSeries>)> {
    spec.validate()?;
    fs::create_dir_all(out)?;
    let mut resolved = spec.clone();
    resolved.out_dir = Some(out.to_path_buf());
    write_atomic(&out.join("config.json"), resolved.to_json()?.as_bytes())?;

    let series = (0..spec.repetitions)
        .into_par_iter()
        .map(|rep| {
            let mut cfg = spec.experiment();
            cfg.round.seed = spec.seed_for(rep);
            log::info!("{} rep {rep} seed {}", spec.method, cfg.round.seed);
            let outcome = run_experiment(&cfg, spec.method)?;
            let dir = out.join(format!("rep_{rep}"));
            fs::create_dir_all(&dir)?;
            write_atomic(&dir.join("metrics.csv"), outcome.metrics.to_csv().as_bytes())?;
            write_atomic(&dir.join("cost.csv"), &cost_csv(&outcome)?)?;
            Ok(outcome.metrics)
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = RunSummary::from_series(spec.method, spec.round.scenario, &series);
    write_atomic(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok((summary, series))
}

/// Runs `spec` once per method under `out/<method>` and merges all rows into `out/compare.csv`.
pub fn compare(spec: &RunSpec, methods: &[Method], out: &Path) -> Result<Vec<RunSummary>> {
    if methods.is_empty() {
        return Err(Error::Config("no methods to compare".into()));
    }
    for &m in methods {
        spec.experiment().check_method(m)?;
    }
    fs::create_dir_all(out)?;
    let mut merged = format!("method,rep,seed,{METRICS_HEADER}\n");
    let mut summaries = Vec::with_capacity(methods.len());
    for &m in methods {
        let mut s = spec.clone();
        s.method = m;
        let (summary, series) = run(&s, &out.join(m.as_str()))?;
        for (rep, ser) in series.iter().enumerate() {
            for line in ser.to_csv().lines().skip(1) {
                merged.push_str(&format!("{m},{rep},{},{line}\n", ser.seed));
            }
        }
        summaries.push(summary);
    }
    write_atomic(&out.join("compare.csv"), merged.as_bytes())?;
    Ok(summaries)
}

#[derive(Debug, Parser)]
#[command(name = "fedmatch", version, about = "Federated semi-supervised learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one method for the configured number of repetitions.
    Run(RunArgs),
    /// Run several methods on the same spec and merge their metrics.
    Compare(CompareArgs),
    /// Check a config without running it.
    Validate(ConfigArg),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON run spec. Omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base seed; repetition i uses seed + i.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Methods to run, comma separated. Defaults to every method valid for the spec.
    #[arg(long, value_delimiter = ',')]
    pub method: Vec<Method>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn load(arg: &ConfigArg) -> Result<RunSpec> {
    match &arg.config {
        Some(p) => parse_config(p),
        None => parse_spec(""),
    }
}

fn out_dir(flag: &Option<PathBuf>, spec: &RunSpec) -> PathBuf {
    flag.clone()
        .or_else(|| spec.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Executes a parsed command line.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate(arg) => {
            let spec = load(&arg)?;
            println!(
                "ok: {} {} K={} R={} reps={}",
                spec.method, spec.round.scenario, spec.round.clients, spec.round.rounds, spec.repetitions
            );
        }
        Command::Run(a) => {
            let mut spec = load(&a.config)?;
            if let Some(m) = a.method {
                spec.method = m;
            }
            if let Some(s) = a.seed {
                spec.round.seed = s;
            }
            spec.validate()?;
            let out = out_dir(&a.out, &spec);
            let (summary, _) = run(&spec, &out)?;
            println!(
                "{} {}: test acc {:.4} ± {:.4} over {} runs -> {}",
                summary.method,
                summary.scenario,
                summary.final_test_acc.mean,
                summary.final_test_acc.std,
                summary.repetitions,
                out.display()
            );
        }
        Command::Compare(a) => {
            let mut spec = load(&a.config)?;
            if let Some(s) = a.seed {
                spec.round.seed = s;
            }
            let exp = spec.experiment();
            let methods: Vec<Method> = if a.method.is_empty() {
                Method::ALL.iter().copied().filter(|&m| exp.check_method(m).is_ok()).collect()
            } else {
                a.method
            };
            let out = out_dir(&a.out, &spec);
            for s in compare(&spec, &methods, &out)? {
                println!(
                    "{:17} test acc {:.4} ± {:.4}  s2c {:.1}%  c2s {:.1}%",
                    s.method.as_str(),
                    s.final_test_acc.mean,
                    s.final_test_acc.std,
                    s.s2c_pct.mean,
                    s.c2s_pct.mean
                );
            }
        }
    }
    Ok(())
}
