//! Run configuration, the `run` loop with its on-disk artifacts, and
//! plot-data emission.
//!
//! A run directory holds:
//! - `iterations.jsonl`: one [`IterationLog`] per round, flushed as written;
//! - `timing.csv`: wall-clock milliseconds per round, kept apart so the
//!   JSONL stays byte-identical across reruns;
//! - `checkpoints/model_latest.json`: the risk model after the last
//!   completed round (model-based strategies only);
//! - `config.toml`: the resolved configuration.
//!
//! Sinusoid runs additionally write `validation.jsonl` and `test_table.csv`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acquisition::{AcquisitionConfig, Strategy};
use crate::bench_sinusoid::{self, MamlConfig, SinusoidConfig};
use crate::bench_synthetic::{self, ComparisonConfig, Landscape};
use crate::error::{RatsError, Result};
use crate::risk_model::{RiskModel, RiskModelConfig};
use crate::rounds::IterationLog;
use crate::task_space::{TaskId, TaskSpace};

/// Overrides the root that relative output directories resolve against.
pub const OUTPUT_ROOT_ENV: &str = "RATS_OUTPUT_ROOT";

pub const ITERATIONS_FILE: &str = "iterations.jsonl";
pub const PLOTDATA_FILE: &str = "plotdata.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    Synthetic,
    Sinusoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub dims: TaskSpace,
    pub landscape: Landscape,
    pub radius: f64,
    pub reduction: f64,
    #[serde(default = "default_probe_per_dim")]
    pub probe_per_dim: usize,
    #[serde(default = "default_eval_per_dim")]
    pub eval_per_dim: usize,
    #[serde(default = "default_probe_passes")]
    pub probe_passes: usize,
}

fn default_probe_per_dim() -> usize {
    8
}

fn default_eval_per_dim() -> usize {
    24
}

fn default_probe_passes() -> usize {
    200
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let c = ComparisonConfig::default_2d();
        Self {
            dims: c.dims,
            landscape: c.landscape,
            radius: c.radius,
            reduction: c.reduction,
            probe_per_dim: c.probe_per_dim,
            eval_per_dim: c.eval_per_dim,
            probe_passes: c.probe_passes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinusoidSection {
    pub hidden: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub k_support: usize,
    pub n_query: usize,
    pub validate_every: usize,
    pub validation_tasks: usize,
    pub test_tasks: usize,
}

impl Default for SinusoidSection {
    fn default() -> Self {
        let m = MamlConfig::default();
        Self {
            hidden: m.hidden,
            inner_lr: m.inner_lr,
            outer_lr: m.outer_lr,
            inner_steps: m.inner_steps,
            k_support: m.k_support,
            n_query: m.n_query,
            validate_every: 100,
            validation_tasks: 1000,
            test_tasks: 1000,
        }
    }
}

impl SinusoidSection {
    pub fn maml(&self) -> MamlConfig {
        MamlConfig {
            hidden: self.hidden,
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            inner_steps: self.inner_steps,
            k_support: self.k_support,
            n_query: self.n_query,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn default_eta() -> f64 {
    1e-3
}

fn default_rho() -> f64 {
    0.5
}

/// Everything a `run` needs. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub benchmark: BenchmarkKind,
    pub strategy: Strategy,
    pub batch_size: usize,
    /// `B_hat / B`; the strategy default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_batch_factor: Option<f64>,
    #[serde(default = "one")]
    pub gamma0: f64,
    #[serde(default = "one")]
    pub gamma1: f64,
    #[serde(default = "one")]
    pub gamma_div: f64,
    #[serde(default = "default_eta")]
    pub gdrm_eta: f64,
    #[serde(default = "default_rho")]
    pub mix_rho: f64,
    pub rounds: usize,
    pub seed: u64,
    #[serde(default)]
    pub validation_seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub risk_model: RiskModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sinusoid: Option<SinusoidSection>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            RatsError::config(
                "config",
                e.to_string().trim_end().to_string(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| RatsError::config("config", e.to_string()))
    }

    pub fn acquisition(&self) -> AcquisitionConfig {
        let base = AcquisitionConfig::new(self.strategy, self.batch_size);
        let mut a = match self.pseudo_batch_factor {
            Some(f) => base.with_pseudo_batch_factor(f),
            None => base,
        };
        a.gamma0 = self.gamma0;
        a.gamma1 = self.gamma1;
        a.gamma_div = self.gamma_div;
        a.gdrm_eta = self.gdrm_eta;
        a.mix_rho = self.mix_rho;
        a
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(RatsError::config("rounds", "must be at least 1"));
        }
        if let Some(f) = self.pseudo_batch_factor {
            if !(f >= 1.0 && f.is_finite()) {
                return Err(RatsError::config("pseudo_batch_factor", "must be at least 1"));
            }
        }
        self.acquisition().validate()?;
        self.risk_model.validate()?;
        match self.benchmark {
            BenchmarkKind::Synthetic => {
                if self.sinusoid.is_some() {
                    return Err(RatsError::config("sinusoid", "section given for a synthetic run"));
                }
                self.comparison()?.validate()
            }
            BenchmarkKind::Sinusoid => {
                if self.synthetic.is_some() {
                    return Err(RatsError::config("synthetic", "section given for a sinusoid run"));
                }
                self.sinusoid_config(self.seed).validate()
            }
        }
    }

    fn comparison(&self) -> Result<ComparisonConfig> {
        let s = self.synthetic.clone().unwrap_or_default();
        Ok(ComparisonConfig {
            dims: s.dims,
            landscape: s.landscape,
            radius: s.radius,
            reduction: s.reduction,
            rounds: self.rounds,
            seeds: vec![self.seed],
            samplers: vec![self.acquisition()],
            risk_model: self.risk_model,
            probe_per_dim: s.probe_per_dim,
            eval_per_dim: s.eval_per_dim,
            probe_passes: s.probe_passes,
        })
    }

    fn sinusoid_config(&self, seed: u64) -> SinusoidConfig {
        let s = self.sinusoid.unwrap_or_default();
        SinusoidConfig {
            acquisition: self.acquisition(),
            maml: s.maml(),
            risk_model: self.risk_model,
            iterations: self.rounds,
            validate_every: s.validate_every,
            validation_tasks: s.validation_tasks,
            test_tasks: s.test_tasks,
            seed,
            validation_seed: self.validation_seed,
        }
    }

    /// A small synthetic config, handy for smoke runs.
    pub fn synthetic_default(strategy: Strategy, rounds: usize, output_dir: PathBuf) -> Self {
        Self {
            benchmark: BenchmarkKind::Synthetic,
            strategy,
            batch_size: 8,
            pseudo_batch_factor: None,
            gamma0: 1.0,
            gamma1: 1.0,
            gamma_div: 1.0,
            gdrm_eta: default_eta(),
            mix_rho: default_rho(),
            rounds,
            seed: 0,
            validation_seed: 0,
            output_dir,
            risk_model: RiskModelConfig::default(),
            synthetic: Some(SyntheticSection::default()),
            sinusoid: None,
        }
    }
}

/// Resolves a relative output directory against the override root, if set.
pub fn resolve_output_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// What a completed run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub rounds: usize,
    pub last: Option<IterationLog>,
}

struct RunWriter {
    dir: PathBuf,
    jsonl: BufWriter<File>,
    timing: BufWriter<File>,
    clock: Instant,
}

impl RunWriter {
    fn create(dir: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::write(dir.join("config.toml"), config.to_toml()?)?;
        let jsonl = BufWriter::new(File::create(dir.join(ITERATIONS_FILE))?);
        let mut timing = BufWriter::new(File::create(dir.join("timing.csv"))?);
        writeln!(timing, "round,wall_ms")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            jsonl,
            timing,
            clock: Instant::now(),
        })
    }

    fn record(&mut self, log: &IterationLog, model: Option<&RiskModel>) -> Result<()> {
        serde_json::to_writer(&mut self.jsonl, log)?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;
        let ms = self.clock.elapsed().as_secs_f64() * 1e3;
        self.clock = Instant::now();
        writeln!(self.timing, "{},{ms:.3}", log.round)?;
        self.timing.flush()?;
        if let Some(m) = model {
            write_atomic(
                &self.dir.join("checkpoints").join("model_latest.json"),
                &serde_json::to_vec(&m.checkpoint())?,
            )?;
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Executes the configured rounds, writing artifacts as it goes. On a
/// mid-run failure the logs so far and the last good checkpoint remain.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let dir = resolve_output_dir(&config.output_dir);
    let mut writer = RunWriter::create(&dir, config)?;
    let mut last = None;
    match config.benchmark {
        BenchmarkKind::Synthetic => {
            let cmp = config.comparison()?;
            let (_, logs) = bench_synthetic::run_sampler_with(&cmp, &cmp.samplers[0], config.seed, |_, log, driver| {
                writer.record(log, driver.model.as_ref())
            })?;
            last = logs.last().cloned();
        }
        BenchmarkKind::Sinusoid => {
            let report = bench_sinusoid::run_sinusoid_with(&config.sinusoid_config(config.seed), |log, driver| {
                writer.record(log, driver.model.as_ref())
            })?;
            bench_sinusoid::write_validation_jsonl(&report.validation, &dir.join("validation.jsonl"))?;
            bench_sinusoid::write_test_table(&report.test, config.strategy, &dir.join("test_table.csv"))?;
            last = report.iterations.last().cloned().or(last);
        }
    }
    Ok(RunSummary {
        dir,
        rounds: config.rounds,
        last,
    })
}

/// Reads every row of an `iterations.jsonl`.
pub fn read_iterations(path: &Path) -> Result<Vec<IterationLog>> {
    let file = File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| {
            RatsError::MalformedLog(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn find_logs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_logs(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == ITERATIONS_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// One long-format row per (round, seed, strategy, metric).
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub round: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub metric: &'static str,
    pub value: f64,
}

pub fn plot_rows(log: &IterationLog) -> Vec<PlotRow> {
    let mut metrics = vec![
        ("mean_risk", log.mean_risk),
        ("cvar90", log.cvar90),
        ("cvar70", log.cvar70),
        ("cvar50", log.cvar50),
        ("entropy", log.entropy),
    ];
    if let Some(p) = log.pcc {
        metrics.push(("pcc", p));
    }
    metrics
        .into_iter()
        .map(|(metric, value)| PlotRow {
            round: log.round,
            seed: log.seed,
            strategy: log.strategy,
            metric,
            value,
        })
        .collect()
}

/// Collects every `iterations.jsonl` under `dir` into `dir/plotdata.csv`.
/// Rows stay per seed; nothing is averaged. Returns the output path.
pub fn emit_plotdata(dir: &Path) -> Result<PathBuf> {
    let mut logs = Vec::new();
    find_logs(dir, &mut logs)?;
    if logs.is_empty() {
        return Err(RatsError::MalformedLog(format!(
            "no {ITERATIONS_FILE} under {}",
            dir.display()
        )));
    }
    let out_path = dir.join(PLOTDATA_FILE);
    let mut out = BufWriter::new(File::create(&out_path)?);
    writeln!(out, "round,seed,strategy,metric,value")?;
    for path in logs {
        for log in read_iterations(&path)? {
            for r in plot_rows(&log) {
                writeln!(out, "{},{},{},{},{}", r.round, r.seed, r.strategy, r.metric, r.value)?;
            }
        }
    }
    out.flush()?;
    Ok(out_path)
}

/// Reads a CSV with a header whose last column is the score and whose other
/// columns are identifier coordinates.
pub fn read_scored_csv(path: &Path) -> Result<(Vec<TaskId>, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let width = reader.headers()?.len();
    if width < 2 {
        return Err(RatsError::InvalidArgument(
            "need at least one coordinate column and a score column".into(),
        ));
    }
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let values = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| RatsError::InvalidArgument(format!("row {}: {e}", i + 2)))?;
        let (score, coords) = values.split_last().expect("width checked");
        ids.push(TaskId(coords.to_vec()));
        scores.push(*score);
    }
    Ok((ids, scores))
}

/// Reads risks from the first column of a CSV. A non-numeric first row is
/// taken as a header.
pub fn read_risks_csv(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = rec.get(0).unwrap_or("").trim();
        match field.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => {}
            Err(e) => {
                return Err(RatsError::InvalidArgument(format!("row {}: {e}", i + 1)));
            }
        }
    }
    Ok(out)
}

/// Bounding box of the identifiers; a degenerate axis is widened to unit length.
pub fn bounding_space(ids: &[TaskId]) -> Result<TaskSpace> {
    let first = ids.first().ok_or(RatsError::EmptyBatch)?;
    let bounds = (0..first.dim())
        .map(|k| {
            let (lo, hi) = ids.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                (lo.min(t.0[k]), hi.max(t.0[k]))
            });
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        })
        .collect();
    TaskSpace::new(bounds)
}

/// Parses `lo:hi,lo:hi,...`.
pub fn parse_bounds(text: &str) -> Result<TaskSpace> {
    let bounds = text
        .split(',')
        .map(|pair| {
            let (lo, hi) = pair
                .split_once(':')
                .ok_or_else(|| RatsError::InvalidArgument(format!("bad bound `{pair}`, want lo:hi")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| RatsError::InvalidArgument(format!("bad bound `{pair}`: {e}")))
            };
            Ok((parse(lo)?, parse(hi)?))
        })
        .collect::<Result<Vec<_>>>()?;
    TaskSpace::new(bounds)
}
