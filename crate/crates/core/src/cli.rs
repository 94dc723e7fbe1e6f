//! Command-line front end: estimation on CSV files, the simulation study and the orthogonality probe.
//!
//! Every run is described by a [`RunConfig`], read from a TOML file and overridden by flags.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::crossfit::NuisanceSpecs;
use crate::dataset::{load_csv, write_csv, ColumnSchema};
use crate::error::{Error, Result};
use crate::estimator::{estimate, EstimateConfig, DEFAULT_FOLDS};
use crate::scores::{EstimatorKind, DEFAULT_TRIM};
use crate::simulation::{
    draw_dataset, draw_dynamic_dataset, orthogonality_probe, run_design, Design, DgpConfig,
    ProbeConfig, ProbeScore, SimStudyReport, StudyConfig, StudyRow, DEFAULT_T_GRID,
};

pub const DEFAULT_PROBE_N: usize = 8000;
pub const DEFAULT_REPS: usize = 250;
pub const DEFAULT_N: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Estimate,
    Simulate,
    Probe,
    Generate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::Simulate => "simulate",
            Command::Probe => "probe",
            Command::Generate => "generate",
        }
    }
}

/// Full description of one invocation. Absent fields take the defaults of their subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorKind>,
    /// Probe only; may also name the plain IPW functional.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<ProbeScore>,
    #[serde(default = "default_d")]
    pub d: usize,
    /// Comparison level of the ATE.
    #[serde(default)]
    pub d_prime: usize,
    /// Estimate the mean potential outcome of `d` instead of an ATE (estimate only).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub level_only: bool,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_trim")]
    pub trim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specs: Option<NuisanceSpecs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<Design>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub n: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub t: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub perturb_control: bool,
}

fn default_d() -> usize {
    1
}

fn default_k() -> usize {
    DEFAULT_FOLDS
}

fn default_trim() -> f64 {
    DEFAULT_TRIM
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        RunConfig {
            command,
            estimator: None,
            score: None,
            d: default_d(),
            d_prime: 0,
            level_only: false,
            k: DEFAULT_FOLDS,
            seed: None,
            trim: DEFAULT_TRIM,
            specs: None,
            input: None,
            schema: None,
            out: None,
            reps: None,
            design: None,
            n: Vec::new(),
            p: None,
            t: Vec::new(),
            perturb_control: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// `Some(d')` for an ATE, `None` for a mean potential outcome.
    pub fn comparison(&self) -> Option<usize> {
        (!self.level_only).then_some(self.d_prime)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.trim) {
            return Err(Error::Config(format!(
                "trim must lie in [0, 0.5), got {}",
                self.trim
            )));
        }
        if self.k < 2 {
            return Err(Error::Config(format!(
                "K must be at least 2, got {}",
                self.k
            )));
        }
        if self.comparison() == Some(self.d) {
            return Err(Error::Config(format!(
                "d and d' must differ, both are {}",
                self.d
            )));
        }
        if self.reps == Some(0) {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.t.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("probe steps t must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| {
            Error::Config(format!(
                "{} requires an explicit --seed",
                self.command.name()
            ))
        })
    }

    fn require_path<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Config(format!("{} requires {flag}", self.command.name())))
    }

    fn sizes(&self, default: usize) -> Vec<usize> {
        if self.n.is_empty() {
            vec![default]
        } else {
            self.n.clone()
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "selection-dml",
    version,
    about = "Treatment effects under sample selection by double machine learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Estimate an effect on a CSV file.
    Estimate(Flags),
    /// Run the Monte Carlo study on a simulation design.
    Simulate(Flags),
    /// Measure the sensitivity of a score to nuisance perturbations.
    Probe(Flags),
    /// Write one draw of a simulation design as CSV plus a schema file.
    Generate(Flags),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub estimator: Option<EstimatorKind>,
    /// Probe score (any estimator, or ipw).
    #[arg(long)]
    pub score: Option<ProbeScore>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long = "d-prime")]
    pub d_prime: Option<usize>,
    /// Estimate the mean potential outcome of d instead of an ATE.
    #[arg(long, conflicts_with = "d_prime")]
    pub level_only: bool,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trim: Option<f64>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub design: Option<Design>,
    /// Sample size; repeat for several.
    #[arg(long)]
    pub n: Vec<usize>,
    /// Covariate count of the simulation designs.
    #[arg(long)]
    pub p: Option<usize>,
    /// Probe step; repeat for a grid.
    #[arg(long)]
    pub t: Vec<f64>,
    #[arg(long)]
    pub perturb_control: bool,
}

impl CliCommand {
    fn parts(&self) -> (Command, &Flags) {
        match self {
            CliCommand::Estimate(f) => (Command::Estimate, f),
            CliCommand::Simulate(f) => (Command::Simulate, f),
            CliCommand::Probe(f) => (Command::Probe, f),
            CliCommand::Generate(f) => (Command::Generate, f),
        }
    }
}

/// Reads the config file if one is given, then applies the flags.
pub fn resolve(cli: &CliCommand) -> Result<RunConfig> {
    let (command, flags) = cli.parts();
    let mut cfg = match &flags.config {
        Some(path) => {
            let cfg = RunConfig::from_toml_file(path)?;
            if cfg.command != command {
                return Err(Error::Config(format!(
                    "config file is for `{}`, not `{}`",
                    cfg.command.name(),
                    command.name()
                )));
            }
            cfg
        }
        None => RunConfig::new(command),
    };
    let f = flags.clone();
    cfg.estimator = f.estimator.or(cfg.estimator);
    cfg.score = f.score.or(cfg.score);
    cfg.d = f.d.unwrap_or(cfg.d);
    if f.level_only {
        cfg.level_only = true;
    } else if let Some(dp) = f.d_prime {
        cfg.d_prime = dp;
        cfg.level_only = false;
    }
    cfg.k = f.k.unwrap_or(cfg.k);
    cfg.seed = f.seed.or(cfg.seed);
    cfg.trim = f.trim.unwrap_or(cfg.trim);
    cfg.input = f.input.or(cfg.input);
    cfg.schema = f.schema.or(cfg.schema);
    cfg.out = f.out.or(cfg.out);
    cfg.reps = f.reps.or(cfg.reps);
    cfg.design = f.design.or(cfg.design);
    if !f.n.is_empty() {
        cfg.n = f.n;
    }
    cfg.p = f.p.or(cfg.p);
    if !f.t.is_empty() {
        cfg.t = f.t;
    }
    cfg.perturb_control |= f.perturb_control;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `contents` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let io = |e| Error::io(path, e);
    {
        let mut file = std::fs::File::create(&tmp).map_err(io)?;
        file.write_all(contents.as_bytes()).map_err(io)?;
        file.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn is_tsv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("tsv"))
}

/// Result of a subcommand: the artifact written to `--out` and the text for stdout.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub artifact: String,
    pub summary: String,
}

pub fn run_estimate(cfg: &RunConfig) -> Result<Outcome> {
    let input = cfg.require_path(&cfg.input, "--input")?;
    let schema = ColumnSchema::from_toml_file(cfg.require_path(&cfg.schema, "--schema")?)?;
    let data = load_csv(input, &schema)?;
    let kind = cfg
        .estimator
        .ok_or_else(|| Error::Config("estimate requires --estimator".into()))?;
    let est_cfg = EstimateConfig {
        d_prime: cfg.comparison(),
        k: cfg.k,
        threshold: cfg.trim,
        specs: cfg.specs.clone().unwrap_or_default(),
        ..EstimateConfig::new(kind, cfg.d, cfg.seed.unwrap_or(0))
    };
    let est = estimate(&data, &est_cfg)?;
    let mut artifact = serde_json::to_string_pretty(&est)?;
    artifact.push('\n');
    Ok(Outcome {
        artifact,
        summary: est.one_line(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateOutput {
    pub reports: Vec<SimStudyReport>,
}

impl SimulateOutput {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(StudyRow::tsv_header());
        for r in self.reports.iter().flat_map(|r| &r.rows) {
            out.push_str(&r.tsv_line());
        }
        out
    }
}

pub fn run_simulate(cfg: &RunConfig) -> Result<(SimulateOutput, Outcome)> {
    let seed = cfg.require_seed()?;
    let design = cfg
        .design
        .ok_or_else(|| Error::Config("simulate requires --design".into()))?;
    let estimators = match cfg.estimator {
        Some(e) => vec![e],
        None => StudyConfig::default_estimators(design),
    };
    let reports = cfg
        .sizes(DEFAULT_N)
        .into_iter()
        .map(|n| {
            let mut study = StudyConfig::new(
                design,
                n,
                cfg.reps.unwrap_or(DEFAULT_REPS),
                estimators.clone(),
                seed,
            );
            study.k = cfg.k;
            study.threshold = cfg.trim;
            if let Some(p) = cfg.p {
                study.p = p;
            }
            if let Some(specs) = &cfg.specs {
                study.specs = specs.clone();
            }
            run_design(&study)
        })
        .collect::<Result<Vec<_>>>()?;
    let output = SimulateOutput { reports };
    let summary = output.to_tsv();
    let artifact = match &cfg.out {
        Some(path) if is_tsv(path) => summary.clone(),
        _ => {
            let mut s = serde_json::to_string_pretty(&output)?;
            s.push('\n');
            s
        }
    };
    Ok((output, Outcome { artifact, summary }))
}

pub fn run_probe(cfg: &RunConfig) -> Result<Outcome> {
    let score = cfg
        .score
        .or(cfg.estimator.map(ProbeScore::from))
        .ok_or_else(|| Error::Config("probe requires --score or --estimator".into()))?;
    let n = *cfg
        .sizes(DEFAULT_PROBE_N)
        .first()
        .expect("at least one size");
    let probe = ProbeConfig {
        design: cfg.design.unwrap_or(score.default_design()),
        ts: if cfg.t.is_empty() {
            DEFAULT_T_GRID.to_vec()
        } else {
            cfg.t.clone()
        },
        perturb_control: cfg.perturb_control,
        ..ProbeConfig::new(score, n, cfg.seed.unwrap_or(0))
    };
    let report = orthogonality_probe(&probe)?;
    let summary = report.to_tsv();
    let artifact = match &cfg.out {
        Some(path) if is_tsv(path) => summary.clone(),
        _ => {
            let mut s = serde_json::to_string_pretty(&report)?;
            s.push('\n');
            s
        }
    };
    Ok(Outcome { artifact, summary })
}

/// Column names used for generated designs.
pub fn design_schema(design: Design, p: usize) -> ColumnSchema {
    ColumnSchema {
        outcome: "y".into(),
        selection: "s".into(),
        treatment: "d".into(),
        treatment_levels: 2,
        covariates: (1..=p).map(|j| format!("x{j}")).collect(),
        post_covariates: match design {
            Design::Dynamic => vec!["m".into()],
            _ => Vec::new(),
        },
        instrument: match design {
            Design::Dynamic => None,
            _ => Some("z".into()),
        },
    }
}

/// Writes the CSV to `--out` and its schema to `--schema` (default: the CSV path with a `.toml` extension).
pub fn run_generate(cfg: &RunConfig) -> Result<Outcome> {
    let seed = cfg.require_seed()?;
    let design = cfg
        .design
        .ok_or_else(|| Error::Config("generate requires --design".into()))?;
    let out = cfg.require_path(&cfg.out, "--out")?;
    let mut dgp = DgpConfig::design(design, *cfg.sizes(DEFAULT_N).first().expect("size"), seed);
    if let Some(p) = cfg.p {
        dgp.p = p;
    }
    let data = match design {
        Design::Dynamic => draw_dynamic_dataset(&dgp)?.0,
        _ => draw_dataset(&dgp)?.0,
    };
    let mut schema = design_schema(design, dgp.p);
    if data.instrument().is_none() {
        schema.instrument = None;
    }
    let schema_path = cfg
        .schema
        .clone()
        .unwrap_or_else(|| out.with_extension("toml"));
    let tmp = out.with_extension("csv.partial");
    write_csv(&data, &schema, &tmp)?;
    std::fs::rename(&tmp, out).map_err(|e| Error::io(out, e))?;
    write_atomic(
        &schema_path,
        &toml::to_string(&schema).expect("schema serializes"),
    )?;
    Ok(Outcome {
        artifact: String::new(),
        summary: format!(
            "design {design}: n={} p={} written to {} (schema {})",
            data.n(),
            dgp.p,
            out.display(),
            schema_path.display()
        ),
    })
}

/// Runs a resolved configuration, writing the artifact (if any) once at the end.
pub fn execute(cfg: &RunConfig) -> Result<String> {
    let outcome = match cfg.command {
        Command::Estimate => run_estimate(cfg)?,
        Command::Simulate => run_simulate(cfg)?.1,
        Command::Probe => run_probe(cfg)?,
        Command::Generate => return run_generate(cfg).map(|o| o.summary),
    };
    if let Some(path) = &cfg.out {
        write_atomic(path, &outcome.artifact)?;
    }
    Ok(outcome.summary)
}
