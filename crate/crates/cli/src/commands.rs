use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mdpde::asymptotics::diagnose_regularity;
use mdpde::dpd::DpdConfig;
use mdpde::estimator::{fit as fit_sample, fit_path};
use mdpde::montecarlo::{efficiency_curve, run_consistency_study, run_normality_study};
use mdpde::{Family, FitResult, MdpdeError, Mixture, ParamPoint, Sample};
use serde_json::json;

use crate::config::{CommonArgs, Format, RunConfig, Study};
use crate::input::{parse_generator, read_observations};
use crate::CliError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Writes to the configured path, or stdout when there is none.
fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| io_err(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn document(cfg: &RunConfig, key: &str, value: serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(&json!({ "config": cfg.to_json(), key: value })).expect("document serializes");
    s.push('\n');
    s
}

fn load_sample(cfg: &RunConfig, family: Family) -> Result<Sample, CliError> {
    let path = cfg
        .data
        .as_deref()
        .ok_or_else(|| CliError::Config(format!("`{}` needs a data file (use --data)", cfg.command)))?;
    Ok(Sample::new(family, read_observations(path)?)?)
}

fn dpd_config(cfg: &RunConfig, alpha: f64) -> Result<DpdConfig, CliError> {
    Ok(DpdConfig::new(alpha)?.with_quad(cfg.quadrature))
}

pub fn fit(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve("fit", args)?;
    if cfg.generator.is_some() {
        return Err(CliError::Config("`fit` reads data from --data, not a generator".into()));
    }
    let family = cfg.family()?;
    let sample = load_sample(&cfg, family)?;
    let result = fit_sample(family, &sample, &dpd_config(&cfg, cfg.alpha)?, &cfg.fit)?;
    let text = match cfg.format {
        Format::Json => document(&cfg, "result", serde_json::to_value(&result).expect("result serializes")),
        Format::Text => fit_text(&result),
    };
    emit(cfg.out.as_deref(), &text)?;
    if result.boundary {
        return Err(MdpdeError::Boundary(format!("estimate {} lies on the parameter boundary", result.theta_hat)).into());
    }
    Ok(())
}

fn fit_text(r: &FitResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} fit, α = {}, n = {}", r.family, r.alpha, r.n);
    let _ = writeln!(
        s,
        "objective {:.10e}, gradient norm {:.3e}, {} of {} starts agree",
        r.objective_value,
        r.gradient_norm,
        r.n_starts_agreeing,
        r.starts.len()
    );
    let level = 100.0 * r.wald_level;
    for (j, name) in r.family.param_names().iter().enumerate() {
        let _ = write!(s, "  {name:<6} {:>16.10}", r.theta_hat.values()[j]);
        if let (Some(se), Some(ci)) = (&r.standard_errors, &r.wald_intervals) {
            let _ = write!(s, "  se {:.6}  {level}% [{:.6}, {:.6}]", se[j], ci[j][0], ci[j][1]);
        }
        s.push('\n');
    }
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

pub fn simulate(args: &CommonArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve("simulate", args)?;
    if cfg.data.is_some() {
        return Err(CliError::Config("`simulate` draws data from --generator, not a data file".into()));
    }
    let family = cfg.family()?;
    let spec = cfg
        .generator
        .clone()
        .ok_or_else(|| CliError::Config("`simulate` needs a generator (use --generator)".into()))?;
    let gen = parse_generator(&spec)?;
    if let Some(theta) = &cfg.theta {
        cfg.montecarlo.theta0 = Some(family.point(theta)?);
    }
    let dir = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Config("`simulate` needs an output directory (use --out)".into()))?;
    let report = match cfg.study {
        Study::Consistency => run_consistency_study(&gen, family, &cfg.montecarlo)?,
        Study::Normality => run_normality_study(&gen, family, &cfg.montecarlo)?,
    };
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let csv_path = dir.join("replications.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    report.write_csv(file)?;
    let summary = document(&cfg, "report", serde_json::to_value(&report).expect("report serializes"));
    emit(Some(&dir.join("summary.json")), &summary)
}

pub fn sweep(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve("sweep", args)?;
    let family = cfg.family()?;
    let names = family.param_names();
    let mut w = csv::Writer::from_writer(Vec::new());
    if cfg.data.is_some() {
        if cfg.theta.is_some() {
            return Err(CliError::Config("a data sweep takes --data or --theta, not both".into()));
        }
        let sample = load_sample(&cfg, family)?;
        let fits = fit_path(family, &sample, &cfg.alpha_grid, &cfg.quadrature, &cfg.fit)?;
        let mut header = vec!["alpha".to_string()];
        header.extend(names.iter().map(|n| n.to_string()));
        header.extend(names.iter().map(|n| format!("se_{n}")));
        header.extend(["converged".into(), "error".into()]);
        w.write_record(&header).map_err(csv_err)?;
        for (alpha, r) in cfg.alpha_grid.iter().zip(&fits) {
            let mut row = vec![alpha.to_string()];
            match r {
                Ok(r) => {
                    row.extend(r.theta_hat.values().iter().map(f64::to_string));
                    match &r.standard_errors {
                        Some(se) => row.extend(se.iter().map(f64::to_string)),
                        None => row.extend(names.iter().map(|_| String::new())),
                    }
                    row.push(r.converged.to_string());
                    row.push(if r.boundary { "parameter on the boundary".into() } else { String::new() });
                }
                Err(e) => {
                    row.extend((0..2 * names.len()).map(|_| String::new()));
                    row.push("false".into());
                    row.push(e.to_string());
                }
            }
            w.write_record(&row).map_err(csv_err)?;
        }
    } else {
        let theta = cfg
            .theta
            .as_deref()
            .ok_or_else(|| CliError::Config("an efficiency sweep needs --theta (or --data for a data sweep)".into()))?;
        let theta = family.point(theta)?;
        let rows = efficiency_curve(family, &theta, &cfg.alpha_grid, &cfg.quadrature)?;
        let mut header = vec!["alpha".to_string()];
        header.extend(names.iter().map(|n| format!("are_{n}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in rows {
            let mut row = vec![r.alpha.to_string()];
            row.extend(r.are.iter().map(f64::to_string));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    let table = String::from_utf8(bytes).expect("csv is utf-8");
    if let Some(path) = &cfg.out {
        emit(Some(&sidecar(path)), &document(&cfg, "columns", json!(table.lines().next())))?;
    }
    emit(cfg.out.as_deref(), &table)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

/// `curve.csv` gets its resolved config in `curve.config.json`.
fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("config.json")
}

pub fn diagnose(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve("diagnose", args)?;
    let family = cfg.family()?;
    let dpd = dpd_config(&cfg, cfg.alpha)?;
    let theta0: ParamPoint = match (&cfg.theta, &cfg.data) {
        (Some(t), None) => family.point(t)?,
        (None, Some(_)) => {
            let sample = load_sample(&cfg, family)?;
            fit_sample(family, &sample, &dpd, &cfg.fit)?.theta_hat
        }
        _ => return Err(CliError::Config("`diagnose` needs exactly one of --theta or --data".into())),
    };
    // the model itself stands in for g unless a generator says otherwise
    let g = match &cfg.generator {
        Some(spec) => parse_generator(spec)?,
        None => Mixture::single(family, theta0.clone())?,
    };
    let report = diagnose_regularity(family, &theta0, &g, &dpd, &cfg.diagnostics)?;
    let text = match cfg.format {
        Format::Json => document(&cfg, "report", serde_json::to_value(&report).expect("report serializes")),
        Format::Text => report.to_text(),
    };
    emit(cfg.out.as_deref(), &text)
}
