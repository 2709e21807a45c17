//! System loading and key resolution. Every key resolves as flag, then `[run]` entry,
//! then default, and the resolved value is recorded for the manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use clap::Args;
use nesp_core::sysdsl::parse_document_bytes;
use nesp_core::systems::{builtin, BuiltinOptions, ClosedFormOrbit};
use nesp_core::{NespError, SlowFastSystem};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Core(NespError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Core(e) if e.is_config_error() => 3,
            CliError::Core(_) => 4,
        }
    }

    /// `{kind, message}` for the manifest; the kind is the core error variant.
    pub fn to_json(&self) -> Value {
        let kind = match self {
            CliError::Usage(_) => "Usage".to_string(),
            CliError::Config(_) => "Config".to_string(),
            CliError::Core(e) => {
                let dbg = format!("{e:?}");
                dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or_default().to_string()
            }
        };
        serde_json::json!({ "kind": kind, "message": self.to_string(), "exit_code": self.exit_code() })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<NespError> for CliError {
    fn from(e: NespError) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Flags selecting and overriding the system.
#[derive(Debug, Clone, Default, Args)]
pub struct SystemArgs {
    /// `builtin:NAME` or the path of a system document.
    #[arg(long)]
    pub system: Option<String>,
    /// Parameter override `name=value`; repeatable.
    #[arg(long = "param", value_name = "NAME=VALUE")]
    pub params: Vec<String>,
    /// Shorthand for `--param gamma=VALUE`.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Forcing expression of a builtin system.
    #[arg(long)]
    pub forcing: Option<String>,
    /// Other expression override of a builtin system `key=source`; repeatable.
    #[arg(long = "expr", value_name = "KEY=SOURCE")]
    pub exprs: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

pub struct LoadedSystem {
    pub label: String,
    pub system: SlowFastSystem,
    pub closed_form: Option<ClosedFormOrbit>,
    pub run: Vec<(String, String)>,
    pub input: Option<InputFile>,
}

fn split_pair(s: &str, what: &str) -> CliResult<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| CliError::Usage(format!("{what} expects KEY=VALUE, got '{s}'")))
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("'{s}' is not finite"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl SystemArgs {
    pub fn overrides(&self) -> CliResult<(Vec<(String, f64)>, Vec<(String, String)>)> {
        let mut params = Vec::new();
        for p in &self.params {
            let (k, v) = split_pair(p, "--param")?;
            params.push((k, parse_f64(&v).map_err(|e| CliError::Usage(format!("--param {p}: {e}")))?));
        }
        if let Some(g) = self.gamma {
            params.push(("gamma".into(), g));
        }
        let mut exprs = Vec::new();
        if let Some(f) = &self.forcing {
            exprs.push(("forcing".to_string(), f.clone()));
        }
        for e in &self.exprs {
            exprs.push(split_pair(e, "--expr")?);
        }
        Ok((params, exprs))
    }

    /// Record of the overrides for the manifest.
    pub fn resolved(&self) -> Value {
        serde_json::json!({
            "system": self.system,
            "param": self.params,
            "gamma": self.gamma,
            "forcing": self.forcing,
            "expr": self.exprs,
        })
    }

    pub fn load(&self) -> CliResult<LoadedSystem> {
        let spec = self.system.as_deref().ok_or_else(|| CliError::Usage("--system is required".into()))?;
        let (params, exprs) = self.overrides()?;
        if let Some(name) = spec.strip_prefix("builtin:") {
            let opts = BuiltinOptions { params, expressions: exprs };
            let b = builtin(name, &opts)?;
            return Ok(LoadedSystem {
                label: spec.to_string(),
                system: b.system,
                closed_form: b.reference.homoclinic,
                run: Vec::new(),
                input: None,
            });
        }
        if !exprs.is_empty() {
            return Err(CliError::Config("expression overrides apply to builtin systems; edit the document instead".into()));
        }
        let bytes = std::fs::read(spec).map_err(|e| CliError::Config(format!("cannot read {spec}: {e}")))?;
        let mut doc = parse_document_bytes(&bytes)?;
        for (k, v) in &params {
            doc.set_param(k, *v)?;
        }
        Ok(LoadedSystem {
            label: spec.to_string(),
            system: doc.build()?,
            closed_form: None,
            run: doc.run.clone(),
            input: Some(InputFile { path: spec.to_string(), sha256: sha256_hex(&bytes) }),
        })
    }
}

/// A value that can be read from a `[run]` entry.
pub trait RunValue: Sized + Serialize {
    fn parse_run(s: &str) -> Result<Self, String>;
}

impl RunValue for f64 {
    fn parse_run(s: &str) -> Result<Self, String> {
        parse_f64(s)
    }
}

impl RunValue for usize {
    fn parse_run(s: &str) -> Result<Self, String> {
        s.trim().parse().map_err(|_| format!("'{s}' is not a non-negative integer"))
    }
}

impl RunValue for bool {
    fn parse_run(s: &str) -> Result<Self, String> {
        match s.trim() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(format!("'{s}' is not a boolean")),
        }
    }
}

impl RunValue for String {
    fn parse_run(s: &str) -> Result<Self, String> {
        Ok(s.trim().to_string())
    }
}

impl RunValue for Vec<f64> {
    fn parse_run(s: &str) -> Result<Self, String> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(parse_f64).collect()
    }
}

/// Key resolution against the document's `[run]` section.
#[derive(Debug, Default)]
pub struct Resolver {
    run: BTreeMap<String, String>,
    used: BTreeSet<String>,
    pub resolved: BTreeMap<String, Value>,
}

impl Resolver {
    pub fn new(run: &[(String, String)]) -> Self {
        Resolver { run: run.iter().cloned().collect(), ..Default::default() }
    }

    fn lookup<T: RunValue>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>> {
        let from_run = self.run.get(key).cloned();
        if from_run.is_some() {
            self.used.insert(key.to_string());
        }
        match (flag, from_run) {
            (Some(v), _) => Ok(Some(v)),
            (None, Some(s)) => T::parse_run(&s).map(Some).map_err(|e| CliError::Config(format!("[run] {key}: {e}"))),
            (None, None) => Ok(None),
        }
    }

    pub fn get<T: RunValue>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T> {
        let v = self.lookup(key, flag)?.unwrap_or(default);
        self.resolved.insert(key.to_string(), serde_json::to_value(&v).unwrap_or(Value::Null));
        Ok(v)
    }

    /// A key without a default; `None` is recorded as `null`.
    pub fn opt<T: RunValue>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>> {
        let v = self.lookup(key, flag)?;
        self.resolved.insert(key.to_string(), serde_json::to_value(&v).unwrap_or(Value::Null));
        Ok(v)
    }

    /// Records a derived value that has no key of its own.
    pub fn record<T: Serialize>(&mut self, key: &str, v: &T) {
        self.resolved.insert(key.to_string(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    pub fn unused(&self) -> Vec<String> {
        self.run.keys().filter(|k| !self.used.contains(*k)).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_run_beats_default() {
        let run = vec![("horizon".to_string(), "7".to_string()), ("eps".to_string(), "0.1, 0.01".to_string())];
        let mut r = Resolver::new(&run);
        assert_eq!(r.get("horizon", Some(3.0), 1.0).unwrap(), 3.0);
        assert_eq!(r.get::<Vec<f64>>("eps", None, vec![]).unwrap(), vec![0.1, 0.01]);
        assert_eq!(r.get("samples", None, 400usize).unwrap(), 400);
        assert!(r.unused().is_empty());
        assert_eq!(r.resolved["horizon"], serde_json::json!(3.0));
    }

    #[test]
    fn malformed_run_value_is_a_config_error() {
        let mut r = Resolver::new(&[("t0".to_string(), "soon".to_string())]);
        let e = r.get("t0", None, 0.0).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn unused_keys_are_reported() {
        let r = Resolver::new(&[("typo".to_string(), "1".to_string())]);
        assert_eq!(r.unused(), vec!["typo".to_string()]);
    }

    #[test]
    fn digest_is_lowercase_hex() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
