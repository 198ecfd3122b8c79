//! Backward function specs given on the command line.

use std::collections::BTreeMap;
use std::path::Path;

use adfa_snn::backward::sample_prfs_with_shift;
use adfa_snn::{BackwardFnSpec, LifParams};

use crate::commands::CliError;

pub const PRFS_HARMONICS: usize = 4;

/// Builds a spec from a family name and optional parameters, filling in the
/// usual defaults.
pub fn build(
    family: &str,
    params: &BTreeMap<String, f64>,
    lif: &LifParams,
) -> Result<BackwardFnSpec, CliError> {
    let get = |k: &str, default: f64| params.get(k).copied().unwrap_or(default);
    let allowed: &[&str] = match family {
        "surrogate" | "lif_surrogate" => &[],
        "opto" => &["omega", "theta"],
        "gaussian" => &["a", "b", "c"],
        "prfs" => &["seed", "omega", "m", "k"],
        other => {
            return Err(CliError::Usage(format!(
                "unknown backward family {other:?} (expected surrogate, opto, gaussian or prfs)"
            )))
        }
    };
    if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(CliError::Usage(format!("{family} takes no parameter {k:?}")));
    }
    let spec = match family {
        "opto" => BackwardFnSpec::opto(get("omega", 0.1), get("theta", 150.0)),
        "gaussian" => BackwardFnSpec::Gaussian {
            a: get("a", 1.0),
            b: get("b", 0.4),
            c: get("c", 13.0),
        },
        "prfs" => sample_prfs_with_shift(
            get("seed", 0.0) as u64,
            get("k", PRFS_HARMONICS as f64) as usize,
            get("omega", 0.01),
            get("m", 1.0),
        )?,
        _ => BackwardFnSpec::surrogate(lif),
    };
    spec.validate()?;
    Ok(spec)
}

/// Parses `family[:key=value,...]`, or reads a TOML file holding a spec.
pub fn parse(text: &str, lif: &LifParams) -> Result<BackwardFnSpec, CliError> {
    let path = Path::new(text);
    if text.ends_with(".toml") || path.is_file() {
        let body = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{text}: {e}")))?;
        let spec: BackwardFnSpec =
            toml::from_str(&body).map_err(|e| CliError::Usage(format!("{text}: {e}")))?;
        spec.validate()?;
        return Ok(spec);
    }
    let (family, rest) = text.split_once(':').unwrap_or((text, ""));
    let mut params = BTreeMap::new();
    for kv in rest.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value in {text:?}, got {kv:?}")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{k} in {text:?} is not a number")))?;
        params.insert(k.trim().to_string(), v);
    }
    build(family.trim(), &params, lif)
}
