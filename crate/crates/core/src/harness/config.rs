//! Plain-text `key=value` sweep configuration.
//!
//! Keys are the long CLI flag names without the leading dashes. Blank lines
//! and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::path::PathBuf;

use num_complex::Complex;

use super::{ChannelModel, CsirMode, ExperimentSpec};
use crate::constellation::Modulation;
use crate::detectors::DetectorKind;
use crate::error::{Error, Result};

pub const CONFIG_KEYS: [&str; 16] = [
    "m",
    "k",
    "mod",
    "channel",
    "alpha",
    "csir",
    "pp",
    "tp",
    "snr-db",
    "detectors",
    "trials",
    "seed",
    "max-iters",
    "tol",
    "out",
    "trace-out",
];

/// Parse `key=value` lines; unknown or repeated keys are configuration errors.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", n + 1)))?;
        let key = key.trim().trim_start_matches("--").to_ascii_lowercase();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("config line {}: unknown key '{key}'", n + 1)));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("config line {}: duplicate key '{key}'", n + 1)));
        }
    }
    Ok(map)
}

/// Sweep settings as strings, before validation. Unset fields take defaults
/// in [`SweepOptions::into_spec`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepOptions {
    pub values: BTreeMap<String, String>,
}

impl SweepOptions {
    pub fn from_config_text(text: &str) -> Result<Self> {
        Ok(Self { values: parse_config_text(text)? })
    }

    /// Set `key`; later calls win.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown option '{key}'")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// `other` overrides `self`.
    pub fn merged(mut self, other: &SweepOptions) -> Self {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
        self
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|_| Error::Config(format!("invalid value '{v}' for {key}"))))
            .transpose()
    }

    pub fn out(&self) -> Option<PathBuf> {
        self.values.get("out").map(PathBuf::from)
    }

    pub fn trace_out(&self) -> Option<PathBuf> {
        self.values.get("trace-out").map(PathBuf::from)
    }

    /// Build and validate the experiment.
    ///
    /// Defaults: `m = k = 32`, QPSK, i.i.d. channel, perfect CSIR, SNR 10 dB,
    /// every detector valid for the CSIR mode, 1000 trials, seed 0, 50
    /// iterations, tolerance 1e-6. `pp` defaults to 1 and `tp` to `k`.
    pub fn into_spec(&self) -> Result<ExperimentSpec> {
        let m = self.get::<usize>("m")?.unwrap_or(32);
        let k = self.get::<usize>("k")?.unwrap_or(32);
        let modulation = self.get::<Modulation>("mod")?.unwrap_or(Modulation::QPSK);
        let alpha = self.values.get("alpha").map(|s| parse_complex(s)).transpose()?;
        let channel = match self.values.get("channel").map(|s| s.trim().to_ascii_lowercase()) {
            None if alpha.is_some() => return Err(Error::Config("alpha given without --channel exp_corr".into())),
            None => ChannelModel::Iid,
            Some(s) if s == "iid" => {
                if alpha.is_some() {
                    return Err(Error::Config("alpha is only valid with exp_corr channels".into()));
                }
                ChannelModel::Iid
            }
            Some(s) if s == "exp_corr" => ChannelModel::ExpCorr(
                alpha.ok_or_else(|| Error::Config("exp_corr channel needs --alpha".into()))?,
            ),
            Some(s) => match s.strip_prefix("exp_corr(").and_then(|r| r.strip_suffix(')')) {
                Some(inner) => ChannelModel::ExpCorr(parse_complex(inner)?),
                None => return Err(Error::Config(format!("unknown channel model '{s}'"))),
            },
        };
        let pp = self.get::<f64>("pp")?;
        let tp = self.get::<usize>("tp")?;
        let csir = match self.values.get("csir").map(|s| s.trim().to_ascii_lowercase()).as_deref() {
            None | Some("perfect") => {
                if pp.is_some() || tp.is_some() {
                    return Err(Error::Config("pp/tp are only valid with --csir pilot".into()));
                }
                CsirMode::Perfect
            }
            Some("pilot") => CsirMode::Pilot { pp: pp.unwrap_or(1.0), tp: tp.unwrap_or(k) },
            Some(other) => return Err(Error::Config(format!("unknown CSIR mode '{other}'"))),
        };
        let snr_db = match self.values.get("snr-db") {
            None => vec![10.0],
            Some(s) => parse_list(s, "snr-db")?,
        };
        let detectors = match self.values.get("detectors") {
            None => DetectorKind::ALL
                .into_iter()
                .filter(|d| !d.needs_estimation_context() || matches!(csir, CsirMode::Pilot { .. }))
                .collect(),
            Some(s) => s.split(',').map(|d| d.parse()).collect::<Result<Vec<DetectorKind>>>()?,
        };
        let spec = ExperimentSpec {
            m,
            k,
            modulation,
            channel,
            csir,
            snr_db,
            detectors,
            trials: self.get("trials")?.unwrap_or(1000),
            base_seed: self.get("seed")?.unwrap_or(0),
            max_iters: self.get("max-iters")?.unwrap_or(50),
            tol: self.get("tol")?.unwrap_or(1e-6),
            record_convergence: self.values.contains_key("trace-out"),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_list(s: &str, key: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("invalid value '{v}' in {key}"))))
        .collect()
}

/// `0.5`, `0.5+0.5j`, `-0.3-0.2i`, `0.7j`.
fn parse_complex(s: &str) -> Result<Complex<f64>> {
    s.trim()
        .replace(' ', "")
        .parse::<Complex<f64>>()
        .map_err(|_| Error::Config(format!("invalid complex number '{s}'")))
}
