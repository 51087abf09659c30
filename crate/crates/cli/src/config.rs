//! Run configuration: defaults, then a JSON config file, then flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use mdpde::asymptotics::DiagnosticsConfig;
use mdpde::{FitConfig, McConfig, QuadratureSpec};
use serde::{Deserialize, Serialize};

use crate::input::parse_list;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    Consistency,
    Normality,
}

/// Everything a command needs. Serialized verbatim into its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub family: Option<String>,
    pub alpha: f64,
    pub alpha_grid: Vec<f64>,
    pub data: Option<PathBuf>,
    pub generator: Option<String>,
    /// Parameter point for `diagnose` and efficiency sweeps.
    pub theta: Option<Vec<f64>>,
    pub seed: u64,
    pub study: Study,
    pub format: Format,
    pub out: Option<PathBuf>,
    pub fit: FitConfig,
    pub montecarlo: McConfig,
    pub quadrature: QuadratureSpec,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            family: None,
            alpha: 0.5,
            alpha_grid: (0..=10).map(|k| k as f64 / 10.0).collect(),
            data: None,
            generator: None,
            theta: None,
            seed: 0,
            study: Study::Consistency,
            format: Format::Json,
            out: None,
            fit: FitConfig::default(),
            montecarlo: McConfig::default(),
            quadrature: QuadratureSpec::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

/// Flags shared by every subcommand. Each one, when given, overrides the
/// config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model family: normal, exponential, poisson or gpd.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comma-separated ascending α values.
    #[arg(long)]
    pub alpha_grid: Option<String>,
    /// Single-column CSV of observations.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Data generator, e.g. "0.9*normal(0,1)+0.1*normal(10,1)".
    #[arg(long)]
    pub generator: Option<String>,
    /// Comma-separated sample sizes.
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated parameter values in natural coordinates.
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<String>,
    #[arg(long, value_enum)]
    pub study: Option<Study>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn resolve(command: &str, args: &CommonArgs) -> Result<Self, CliError> {
        let mut cfg = match &args.config {
            Some(path) => Self::load(path)?,
            None => RunConfig::default(),
        };
        cfg.command = command.to_string();
        if let Some(v) = &args.family {
            cfg.family = Some(v.clone());
        }
        if let Some(v) = args.alpha {
            cfg.alpha = v;
            cfg.montecarlo.alphas = vec![v];
        }
        if let Some(v) = &args.alpha_grid {
            cfg.alpha_grid = parse_list(v)?;
            cfg.montecarlo.alphas = cfg.alpha_grid.clone();
        }
        if let Some(v) = &args.data {
            cfg.data = Some(v.clone());
        }
        if let Some(v) = &args.generator {
            cfg.generator = Some(v.clone());
        }
        if let Some(v) = &args.n {
            cfg.montecarlo.n_grid = v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| CliError::Config(format!("--n: not a sample size: {s:?}")))
                })
                .collect::<Result<_, _>>()?;
        }
        if let Some(v) = args.reps {
            cfg.montecarlo.reps = v;
        }
        if let Some(v) = args.seed {
            cfg.seed = v;
        }
        if let Some(v) = &args.theta {
            cfg.theta = Some(parse_list(v)?);
        }
        if let Some(v) = args.study {
            cfg.study = v;
        }
        if let Some(v) = args.format {
            cfg.format = v;
        }
        if let Some(v) = &args.out {
            cfg.out = Some(v.clone());
        }
        // one seed drives everything random in a run
        cfg.fit.seed = cfg.seed;
        cfg.montecarlo.master_seed = cfg.seed;
        cfg.montecarlo.quad = cfg.quadrature;
        if cfg.alpha_grid.is_empty() {
            return Err(CliError::Config("alpha grid is empty".into()));
        }
        if cfg.alpha_grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CliError::Config("alpha grid must be strictly ascending".into()));
        }
        Ok(cfg)
    }

    pub fn family(&self) -> Result<mdpde::Family, CliError> {
        let name = self
            .family
            .as_deref()
            .ok_or_else(|| CliError::Config("no family given (use --family)".into()))?;
        Ok(name.parse()?)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
