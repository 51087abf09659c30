//! Data files and generator specifications.

use std::fs::File;
use std::path::Path;

use mdpde::{Family, Mixture, MixtureComponent};

use crate::CliError;

/// Reads a single-column CSV of observations. A non-numeric first line is
/// taken as a header; any other malformed row is an error naming its line.
pub fn read_observations(path: &Path) -> Result<Vec<f64>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    parse_observations(file, &path.display().to_string())
}

pub fn parse_observations<R: std::io::Read>(reader: R, name: &str) -> Result<Vec<f64>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    for (index, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| CliError::Parse(format!("{name}: {e}")))?;
        let line = record.position().map_or(index as u64 + 1, |p| p.line());
        if record.len() != 1 {
            return Err(CliError::Parse(format!(
                "{name}, line {line}: expected one column, found {}",
                record.len()
            )));
        }
        let field = &record[0];
        if field.is_empty() {
            return Err(CliError::Parse(format!("{name}, line {line}: missing value")));
        }
        match field.parse::<f64>() {
            Ok(v) if v.is_finite() => values.push(v),
            Ok(_) => return Err(CliError::Parse(format!("{name}, line {line}: non-finite value {field:?}"))),
            Err(_) if index == 0 => continue,
            Err(_) => return Err(CliError::Parse(format!("{name}, line {line}: not a number: {field:?}"))),
        }
    }
    if values.is_empty() {
        return Err(CliError::Parse(format!("{name}: no observations")));
    }
    Ok(values)
}

/// Parses `w1*family(p, ...) + w2*family(p, ...)`. A lone component may omit
/// its weight.
pub fn parse_generator(spec: &str) -> Result<Mixture, CliError> {
    let parts: Vec<&str> = spec.split('+').map(str::trim).collect();
    let mut components = Vec::with_capacity(parts.len());
    for part in &parts {
        let (weight, body) = match part.split_once('*') {
            Some((w, b)) => (
                w.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Config(format!("bad weight in generator component {part:?}")))?,
                b.trim(),
            ),
            None if parts.len() == 1 => (1.0, *part),
            None => return Err(CliError::Config(format!("generator component {part:?} needs a weight"))),
        };
        let (name, args) = body
            .strip_suffix(')')
            .and_then(|b| b.split_once('('))
            .ok_or_else(|| CliError::Config(format!("expected family(params) in {part:?}")))?;
        let family: Family = name.trim().parse().map_err(CliError::from)?;
        let params = parse_list(args)?;
        components.push(MixtureComponent {
            family,
            theta: family.point(&params)?,
            weight,
        });
    }
    Ok(Mixture::new(components)?)
}

/// Comma-separated reals.
pub fn parse_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("not a number: {v:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_optional() {
        let with = parse_observations("x\n1.5\n-2\n".as_bytes(), "t").unwrap();
        let without = parse_observations("1.5\n-2\n".as_bytes(), "t").unwrap();
        assert_eq!(with, vec![1.5, -2.0]);
        assert_eq!(with, without);
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let err = parse_observations("x\n1.0\nabc\n".as_bytes(), "t").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = parse_observations("1.0\n2.0,3.0\n".as_bytes(), "t").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = parse_observations("1.0\n\"\"\n".as_bytes(), "t").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(parse_observations("".as_bytes(), "t").is_err());
        assert!(parse_observations("value\n".as_bytes(), "t").is_err());
    }

    #[test]
    fn generator_specs() {
        let g = parse_generator("0.9*normal(0,1) + 0.1*normal(10, 1)").unwrap();
        assert_eq!(g.components().len(), 2);
        assert_eq!(g.components()[1].theta.values(), &[10.0, 1.0]);
        let single = parse_generator("exponential(2)").unwrap();
        assert_eq!(single.components()[0].weight, 1.0);
        assert!(parse_generator("0.5*normal(0,1) + 0.4*normal(1,1)").is_err());
        assert!(parse_generator("cauchy(0,1)").is_err());
        assert!(parse_generator("normal(0,1) + normal(1,1)").is_err());
    }
}
