//! Command-line driver.
//!
//! Configuration is one JSON document. A `preset` field selects a model from
//! the shipped table; any other field overrides the defaults, and `--set
//! a.b=value` overrides the file. Every artifact carries the tool version,
//! the seed and the SHA-256 of the resolved configuration.

pub mod commands;
pub mod verify;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::perf::{model_preset, presets, HwConfig, ModelConfig};
use crate::sfu::{FitOptions, FunctionId};
use crate::ssa::TraceLevel;
use crate::ssm::SynthSpec;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "mambax", version, about = "Functional model and cycle-level simulator of a Vision Mamba accelerator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Dotted-key override, e.g. `--set hw.n_ssa=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads; 0 uses every core. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Fit the SFU lookup tables.
    FitSfu,
    /// Calibrate quantization scales on synthetic data.
    Calibrate,
    /// Run the oracle and property suites.
    Verify,
    /// Simulate one model and image size.
    Simulate,
    /// Sweep models, image sizes and array counts.
    Sweep,
    /// Render `<out>/report.json` as Markdown.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::FitSfu => "fit-sfu",
            Command::Calibrate => "calibrate",
            Command::Verify => "verify",
            Command::Simulate => "simulate",
            Command::Sweep => "sweep",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LutSpec {
    pub function: FunctionId,
    #[serde(default)]
    pub range: Option<(f64, f64)>,
    #[serde(default)]
    pub entries: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfuSection {
    pub functions: Vec<LutSpec>,
    pub fit: FitOptions,
    pub eval_points: usize,
    /// Rows of each per-function error CSV.
    pub csv_points: usize,
    pub entries_sweep: Vec<usize>,
}

impl Default for SfuSection {
    fn default() -> Self {
        Self {
            functions: FunctionId::HARDWARE.iter().map(|&function| LutSpec { function, range: None, entries: None }).collect(),
            fit: FitOptions::default(),
            eval_points: 100_000,
            csv_points: 1001,
            entries_sweep: vec![4, 8, 16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub samples: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub state: usize,
    pub bit_width: u32,
    pub synth: SynthSpec,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self { samples: 32, seq_len: 196, hidden: 192, state: 16, bit_width: 8, synth: SynthSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub scan_instances: usize,
    pub scan_max_len: usize,
    pub chunk_sizes: Vec<usize>,
    pub max_len: usize,
    pub n_ssa: Vec<usize>,
    pub datasets_per_shape: usize,
    pub invariance_datasets: usize,
    pub invariance_lengths: Vec<usize>,
    /// Allowed distance, in raw state units, between chunked and sequential scans.
    pub chunk_tolerance_raw: i64,
    pub quant_cases: usize,
    pub fault_flip_lisu: bool,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            scan_instances: 1000,
            scan_max_len: 1024,
            chunk_sizes: vec![2, 4, 8, 16],
            max_len: 64,
            n_ssa: vec![1, 2, 3, 8],
            datasets_per_shape: 4,
            invariance_datasets: 8,
            invariance_lengths: vec![1, 7, 33, 64, 100],
            chunk_tolerance_raw: 32,
            quant_cases: 200,
            fault_flip_lisu: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub trace_level: TraceLevel,
    /// SSM width for the cycle simulation; the model's inner width if unset.
    pub sim_hidden: Option<u64>,
    pub calibration_samples: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { trace_level: TraceLevel::Summary, sim_hidden: None, calibration_samples: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub models: Vec<String>,
    pub image_px: Vec<u64>,
    pub n_ssa: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            models: vec!["tiny".into(), "small".into(), "base".into()],
            image_px: vec![224, 512, 1024],
            n_ssa: vec![1, 2, 4, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub hw: HwConfig,
    pub image_px: u64,
    #[serde(default)]
    pub sfu: SfuSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn with_preset(name: &str) -> Result<Self, CliError> {
        Ok(Self {
            preset: name.to_ascii_lowercase(),
            model: model_preset(name).map_err(|e| CliError::Config(e.to_string()))?,
            hw: presets().hw,
            image_px: 224,
            sfu: SfuSection::default(),
            calibration: CalibrationSection::default(),
            verify: VerifySection::default(),
            simulate: SimulateSection::default(),
            sweep: SweepSection::default(),
        })
    }

    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Config(String),
    VerifyFailed(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::VerifyFailed(_) => 1,
            CliError::Config(_) | CliError::Io(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::VerifyFailed(m) => write!(f, "verification failed: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Recursive object merge; anything else in `top` replaces `base`.
pub fn deep_merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, t) => *b = t.clone(),
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, else taken as a string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        cur = cur.as_object_mut().expect("object").entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    if !cur.is_object() {
        *cur = Value::Object(Map::new());
    }
    cur.as_object_mut().expect("object").insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// File contents and overrides merged over the selected preset.
pub fn resolve_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut overlay = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !overlay.is_object() {
        return Err(CliError::Config("configuration must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut overlay, o)?;
    }
    let preset = match overlay.get("preset") {
        None => "tiny".to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => return Err(CliError::Config(format!("preset must be a string, got {other}"))),
    };
    let mut doc = serde_json::to_value(RunConfig::with_preset(&preset)?).expect("config serializes");
    deep_merge(&mut doc, &overlay);
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.hw.validate()?;
    cfg.model.validate()?;
    Ok(cfg)
}

/// Provenance block embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
}

impl Meta {
    pub fn csv_comment(&self) -> String {
        format!(
            "# {} {} command={} seed={} config_sha256={}\n",
            self.tool, self.version, self.command, self.seed, self.config_sha256
        )
    }
}

#[derive(Serialize)]
struct WithMeta<'a, T: Serialize> {
    meta: &'a Meta,
    #[serde(flatten)]
    body: &'a T,
}

/// Resolved invocation.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub command: Command,
    pub config: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl RunSpec {
    pub fn meta(&self) -> Meta {
        Meta {
            tool: "mambax".into(),
            version: VERSION.into(),
            command: self.command.name().into(),
            seed: self.seed,
            config_sha256: self.config.sha256(),
        }
    }

    /// Writes via a temporary file and a rename.
    pub fn write(&self, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension(format!(
            "{}.tmp",
            path.extension().and_then(|e| e.to_str()).unwrap_or("")
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(contents)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, body: &T) -> Result<PathBuf, CliError> {
        let meta = self.meta();
        let mut text = serde_json::to_string_pretty(&WithMeta { meta: &meta, body }).expect("serializable");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Prefixes the provenance comment line.
    pub fn write_csv(&self, name: &str, csv: &str) -> Result<PathBuf, CliError> {
        let mut text = self.meta().csv_comment();
        text.push_str(csv);
        self.write(name, text.as_bytes())
    }
}

/// Runs one command; returns the lines to print.
pub fn execute(spec: &RunSpec) -> Result<Vec<String>, CliError> {
    match spec.command {
        Command::FitSfu => commands::fit_sfu(spec),
        Command::Calibrate => commands::calibrate(spec).map(|(_, lines)| lines),
        Command::Verify => verify::cmd_verify(spec),
        Command::Simulate => commands::simulate(spec),
        Command::Sweep => commands::sweep(spec),
        Command::Report => commands::report(spec),
    }
}

pub fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    let config = resolve_config(cli.config.as_deref(), &cli.overrides)?;
    let spec = RunSpec { command: cli.command, config, out: cli.out, seed: cli.seed };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    pool.install(|| execute(&spec))
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mambax: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
