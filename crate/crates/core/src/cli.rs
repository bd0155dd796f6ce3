//! Configuration file and subcommand implementations behind the `seedtune`
//! binary. Each command returns its process exit code: 0 on success, 1 when
//! a run or worker check failed, 2 for configuration and input errors.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::{info, warn};
use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use crate::acquisition::MaximizeOptions;
use crate::gp::FitOptions;
use crate::harness::{
    aggregate, parse_log, rows_from_events, rows_from_reports, run_experiment, to_csv,
    to_markdown, EventLog, ExperimentSpec, HarnessError, ObjectiveSpec, WorkerClient,
    WorkerError, WorkerRequest,
};
use crate::optimizer::{Method, OptimizerSettings};
use crate::space::{ParamSpace, ParamSpec};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Json(String),
    #[error("unknown keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    #[serde(default = "default_capacity")]
    pub capacity: f64,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<f64>,
}

fn default_capacity() -> f64 {
    100.0
}

fn default_checkpoints() -> Vec<f64> {
    vec![25.0, 50.0, 100.0]
}

impl Default for BudgetSection {
    fn default() -> Self {
        Self {
            capacity: default_capacity(),
            checkpoints: default_checkpoints(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default = "default_final_eval_seeds")]
    pub final_eval_seeds: usize,
    #[serde(default = "default_hpo_runs")]
    pub hpo_runs: usize,
}

fn default_final_eval_seeds() -> usize {
    20
}

fn default_hpo_runs() -> usize {
    1
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            final_eval_seeds: default_final_eval_seeds(),
            hpo_runs: default_hpo_runs(),
        }
    }
}

/// One optimizer to benchmark. `method` is one of `random`, `asha`, `bo_ei`,
/// `bo_lcb`, `bo_qnei`, optionally suffixed with `_x<K>` for K repetitions
/// (`random_x3`, `bo_ei_x3`, ...).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodBlock {
    pub method: String,
    pub label: Option<String>,
    pub repetitions: Option<usize>,
    pub eta: Option<usize>,
    pub min_fraction: Option<f64>,
    pub beta: Option<f64>,
    pub mc_samples: Option<usize>,
    pub acq_candidates: Option<usize>,
    pub acq_refine: Option<usize>,
    pub gp_restarts: Option<usize>,
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub space: Vec<ParamSpec>,
    pub objective: ObjectiveSpec,
    pub methods: Vec<MethodBlock>,
    #[serde(default)]
    pub budget: BudgetSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub deterministic: bool,
}

const TOP_KEYS: &[&str] = &[
    "space",
    "objective",
    "methods",
    "budget",
    "evaluation",
    "master_seed",
    "workers",
    "deterministic",
];
const PARAM_KEYS: &[&str] = &["name", "transform", "low", "high"];
const OBJECTIVE_KEYS: &[&str] = &["kind", "noise_sd", "bias_scale", "command", "timeout_secs", "sense"];
const METHOD_KEYS: &[&str] = &[
    "method",
    "label",
    "repetitions",
    "eta",
    "min_fraction",
    "beta",
    "mc_samples",
    "acq_candidates",
    "acq_refine",
    "gp_restarts",
];
const BUDGET_KEYS: &[&str] = &["capacity", "checkpoints"];
const EVALUATION_KEYS: &[&str] = &["final_eval_seeds", "hpo_runs"];

fn collect_unknown(value: &Value, known: &[&str], prefix: &str, out: &mut Vec<String>) {
    if let Some(obj) = value.as_object() {
        for key in obj.keys().filter(|k| !known.contains(&k.as_str())) {
            out.push(format!("{prefix}{key}"));
        }
    }
}

/// Every key the schema does not know, with its path.
pub fn unknown_keys(value: &Value) -> Vec<String> {
    let mut out = Vec::new();
    collect_unknown(value, TOP_KEYS, "", &mut out);
    let list = |key: &str| value.get(key).and_then(Value::as_array).cloned().unwrap_or_default();
    for (i, p) in list("space").iter().enumerate() {
        collect_unknown(p, PARAM_KEYS, &format!("space[{i}]."), &mut out);
    }
    for (i, m) in list("methods").iter().enumerate() {
        collect_unknown(m, METHOD_KEYS, &format!("methods[{i}]."), &mut out);
    }
    for (key, known) in [
        ("objective", OBJECTIVE_KEYS),
        ("budget", BUDGET_KEYS),
        ("evaluation", EVALUATION_KEYS),
    ] {
        if let Some(v) = value.get(key) {
            collect_unknown(v, known, &format!("{key}."), &mut out);
        }
    }
    out
}

/// Splits `bo_ei_x3` into the base method and its repetition count.
pub fn parse_method(name: &str) -> Result<(Method, usize), ConfigError> {
    let (base, reps) = match name.rsplit_once("_x") {
        Some((base, k)) if !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()) => {
            let k: usize = k
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("bad repetition count in `{name}`")))?;
            (base, k)
        }
        _ => (name, 1),
    };
    let method = match base {
        "random" => Method::RandomSearch,
        "asha" => Method::Asha,
        "bo_ei" => Method::BoEi,
        "bo_lcb" => Method::BoLcb,
        "bo_qnei" => Method::BoQnei,
        _ => return Err(ConfigError::Invalid(format!("unknown method `{name}`"))),
    };
    Ok((method, reps))
}

impl RunConfigFile {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Json(e.to_string()))?;
        let unknown = unknown_keys(&value);
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        serde_json::from_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    fn settings(block: &MethodBlock) -> Result<OptimizerSettings, ConfigError> {
        let (method, reps) = parse_method(&block.method)?;
        let mut s = OptimizerSettings::new(method).with_repetitions(block.repetitions.unwrap_or(reps));
        if let Some(eta) = block.eta {
            s.eta = eta;
        }
        if let Some(f) = block.min_fraction {
            s.min_fraction = f;
        }
        if let Some(beta) = block.beta {
            s.beta = beta;
        }
        if let Some(mc) = block.mc_samples {
            s.mc_samples = mc;
        }
        s.maximize = MaximizeOptions {
            candidates: block.acq_candidates.unwrap_or(s.maximize.candidates),
            refine: block.acq_refine.unwrap_or(s.maximize.refine),
            ..s.maximize
        };
        s.fit = FitOptions {
            restarts: block.gp_restarts.unwrap_or(s.fit.restarts),
            ..s.fit
        };
        Ok(s)
    }

    /// One validated experiment per method block.
    pub fn experiments(&self, seed_override: Option<u64>) -> Result<Vec<ExperimentSpec>, ConfigError> {
        if self.methods.is_empty() {
            return Err(ConfigError::Invalid("methods must not be empty".into()));
        }
        let space = ParamSpace::new(self.space.clone()).map_err(HarnessError::from)?;
        let mut labels = Vec::new();
        let mut specs = Vec::new();
        for block in &self.methods {
            let label = block.label.clone().unwrap_or_else(|| block.method.clone());
            if label.is_empty() || label.contains([',', '"', '\n', '|']) {
                return Err(ConfigError::Invalid(format!("unusable method label `{label}`")));
            }
            if labels.contains(&label) {
                return Err(ConfigError::Invalid(format!("duplicate method label `{label}`")));
            }
            labels.push(label.clone());
            let mut spec = ExperimentSpec::new(label, space.clone(), self.objective.clone(), Self::settings(block)?);
            spec.capacity = self.budget.capacity;
            spec.checkpoints = self.budget.checkpoints.clone();
            spec.final_eval_seeds = self.evaluation.final_eval_seeds;
            spec.hpo_runs = self.evaluation.hpo_runs;
            spec.master_seed = seed_override.unwrap_or(self.master_seed);
            spec.workers = self.workers;
            spec.validate()?;
            specs.push(spec);
        }
        Ok(specs)
    }
}

/// `seedtune run`: executes every method block and writes the results log
/// and summary into `out`.
pub fn run_cmd(config: &Path, out: &Path, seed: Option<u64>, deterministic: bool, stderr: &mut dyn Write) -> u8 {
    let file = match RunConfigFile::load(config) {
        Ok(f) => f,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    let specs = match file.experiments(seed) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    match execute(&specs, out, deterministic || file.deterministic) {
        Ok(0) => EXIT_OK,
        Ok(failed) => {
            let _ = writeln!(stderr, "{failed} run(s) failed; see {RESULTS_FILE}");
            EXIT_FAILURE
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_FAILURE
        }
    }
}

fn execute(specs: &[ExperimentSpec], out: &Path, deterministic: bool) -> Result<usize, HarnessError> {
    fs::create_dir_all(out)?;
    let log_file = fs::File::create(out.join(RESULTS_FILE))?;
    let mut log = EventLog::new(BufWriter::new(log_file), deterministic);
    let mut reports = Vec::new();
    for spec in specs {
        info!("running {} ({} runs)", spec.label, spec.hpo_runs);
        reports.push(run_experiment(spec, &mut log)?);
    }
    log.flush()?;
    fs::write(out.join(SUMMARY_FILE), to_csv(&rows_from_reports(&reports)))?;
    Ok(reports.iter().map(|r| r.failed_runs()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// `seedtune report`: recomputes the summary from `dir/results.jsonl`.
pub fn report_cmd(dir: &Path, format: ReportFormat, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8 {
    let path = dir.join(RESULTS_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(stderr, "error: cannot read {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    let parsed = match parse_log(&text) {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    if parsed.truncated_tail {
        let _ = writeln!(stderr, "warning: ignored a truncated last line in {}", path.display());
    }
    let rows = rows_from_events(&parsed.events);
    if rows.is_empty() {
        let _ = writeln!(stderr, "error: {} holds no final evaluations", path.display());
        return EXIT_CONFIG;
    }
    let text = match format {
        ReportFormat::Csv => to_csv(&rows),
        ReportFormat::Markdown => to_markdown(&aggregate(&rows)),
    };
    match stdout.write_all(text.as_bytes()) {
        Ok(()) => EXIT_OK,
        Err(_) => EXIT_FAILURE,
    }
}

/// Probe points of the one-dimensional dummy space `x in [0, 1]`.
pub const PROBES: [f64; 3] = [0.25, 0.5, 0.75];

/// `seedtune validate-worker`: handshake plus three probe trials, one
/// PASS/FAIL line each.
pub fn validate_worker_cmd(cmd: &str, timeout: Duration, stdout: &mut dyn Write) -> u8 {
    let mut failures = 0;
    let mut report = |ok: bool, name: &str, detail: &str| {
        if !ok {
            failures += 1;
        }
        let _ = writeln!(stdout, "{} {name}{detail}", if ok { "PASS" } else { "FAIL" });
    };
    let mut client = match WorkerClient::spawn(cmd, timeout) {
        Ok(c) => {
            report(true, "handshake", "");
            Some(c)
        }
        Err(e) => {
            report(false, "handshake", &format!(": {e}"));
            None
        }
    };
    for (i, &x) in PROBES.iter().enumerate() {
        let name = format!("probe {} (x={x})", i + 1);
        let Some(worker) = client.as_mut() else {
            report(false, &name, ": skipped, no handshake");
            continue;
        };
        let config = [("x".to_string(), x)].into_iter().collect();
        let result = worker.request(&WorkerRequest {
            id: i as u64,
            config: &config,
            seed: i as u64,
            budget: 1.0,
        });
        match result {
            Ok(v) => report(true, &name, &format!(": value {v}")),
            Err(e) => {
                report(false, &name, &format!(": {e}"));
                if !matches!(e, WorkerError::TrialFailed { .. }) {
                    client = WorkerClient::spawn(cmd, timeout).ok();
                }
            }
        }
    }
    if failures == 0 {
        EXIT_OK
    } else {
        warn!("{failures} worker check(s) failed");
        EXIT_FAILURE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "space": [{"name": "x", "transform": "linear", "low": 0, "high": 1}],
        "objective": {"kind": "noisy_quadratic_1d", "noise_sd": 0.1},
        "methods": [{"method": "random"}, {"method": "bo_ei_x3", "gp_restarts": 2}]
    }"#;

    #[test]
    fn method_names() {
        assert_eq!(parse_method("random").unwrap(), (Method::RandomSearch, 1));
        assert_eq!(parse_method("random_x5").unwrap(), (Method::RandomSearch, 5));
        assert_eq!(parse_method("bo_ei_x3").unwrap(), (Method::BoEi, 3));
        assert_eq!(parse_method("bo_qnei").unwrap(), (Method::BoQnei, 1));
        assert_eq!(parse_method("asha").unwrap(), (Method::Asha, 1));
        assert!(parse_method("pbt").is_err());
        assert!(parse_method("random_x").is_err());
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfigFile::from_json(MINIMAL).unwrap();
        let specs = cfg.experiments(Some(9)).unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[1].settings.repetitions, 3);
        assert_eq!(specs[1].settings.fit.restarts, 2);
        assert_eq!(specs[0].checkpoints, vec![25.0, 50.0, 100.0]);
        assert_eq!(specs[0].final_eval_seeds, 20);
        assert_eq!(specs[0].master_seed, 9);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let text = MINIMAL
            .replace("\"noise_sd\"", "\"noise\": 1, \"noise_sd\"")
            .replace("{\"method\": \"random\"}", "{\"method\": \"random\", \"k\": 2}");
        let text = text.replacen('{', "{\"extra\": true,", 1);
        match RunConfigFile::from_json(&text) {
            Err(ConfigError::UnknownKeys(keys)) => {
                assert_eq!(keys, vec!["extra", "methods[0].k", "objective.noise"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semantic_errors() {
        let dup = MINIMAL.replace("bo_ei_x3", "random");
        assert!(RunConfigFile::from_json(&dup).unwrap().experiments(None).is_err());
        let wrong_dim = MINIMAL.replace("noisy_quadratic_1d", "noisy_branin_2d");
        assert!(RunConfigFile::from_json(&wrong_dim).unwrap().experiments(None).is_err());
        assert!(matches!(RunConfigFile::from_json("{"), Err(ConfigError::Json(_))));
    }
}
