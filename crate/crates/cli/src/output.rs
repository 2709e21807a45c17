//! Output directory, CSV and JSON emission, and the run manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::config::{CliError, CliResult, InputFile, Resolver};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Bumped whenever a CSV or JSON layout changes.
pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "NESP_OUT_DIR";

pub fn default_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("nesp-out"))
}

/// Per-run state shared by the subcommands.
pub struct Ctx {
    pub subcommand: &'static str,
    pub out_dir: PathBuf,
    pub dry_run: bool,
    pub system: String,
    pub cfg: Resolver,
    pub inputs: Vec<InputFile>,
    outputs: Vec<String>,
    started: Instant,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema: String,
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    system: &'a str,
    config: &'a std::collections::BTreeMap<String, Value>,
    inputs: &'a [InputFile],
    outputs: &'a [String],
    wall_clock_s: f64,
    status: &'static str,
    error: Option<Value>,
}

impl Ctx {
    pub fn new(subcommand: &'static str, out_dir: PathBuf, dry_run: bool) -> Self {
        Ctx {
            subcommand,
            out_dir,
            dry_run,
            system: String::new(),
            cfg: Resolver::default(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    /// In a dry run, prints the resolved plan and returns true; the caller then stops.
    /// Also warns about `[run]` keys the subcommand did not read.
    pub fn plan(&self, files: &[&str]) -> bool {
        for k in self.cfg.unused() {
            eprintln!("warning: [run] key '{k}' is not used by {}", self.subcommand);
        }
        if !self.dry_run {
            return false;
        }
        println!("plan: {}", self.subcommand);
        println!("system: {}", self.system);
        for i in &self.inputs {
            println!("input: {} (sha256 {})", i.path, i.sha256);
        }
        println!("config:");
        for (k, v) in &self.cfg.resolved {
            println!("  {k} = {v}");
        }
        let mut all: Vec<String> = files.iter().map(|f| f.to_string()).collect();
        all.push(self.manifest_name());
        println!("outputs in {}:", self.out_dir.display());
        for f in all {
            println!("  {f}");
        }
        true
    }

    fn manifest_name(&self) -> String {
        format!("{}.manifest.json", self.subcommand)
    }

    fn ensure_dir(&self) -> CliResult<()> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", self.out_dir.display())))
    }

    fn write(&mut self, name: &str, body: &str) -> CliResult<PathBuf> {
        self.ensure_dir()?;
        let path = self.out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        Ok(path)
    }

    /// `#`-prefixed metadata block: tool, schema, system and every resolved key.
    /// Wall-clock data stays in the manifest so identical configs give identical files.
    pub fn csv_header(&self) -> String {
        let mut s = format!("# nesp {VERSION}\n# schema: {}/{SCHEMA_VERSION}\n# system: {}\n", self.subcommand, self.system);
        for i in &self.inputs {
            s.push_str(&format!("# input: {} sha256={}\n", i.path, i.sha256));
        }
        for (k, v) in &self.cfg.resolved {
            s.push_str(&format!("# {k} = {v}\n"));
        }
        s
    }

    pub fn write_csv(&mut self, name: &str, body: &str) -> CliResult<PathBuf> {
        let text = self.csv_header() + body;
        self.write(name, &text)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let body = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(format!("cannot encode {name}: {e}")))?;
        self.write(name, &(body + "\n"))
    }

    pub fn write_text(&mut self, name: &str, body: &str) -> CliResult<PathBuf> {
        self.write(name, body)
    }

    /// Writes the manifest, recording the failure when there is one.
    pub fn finish(&mut self, outcome: &CliResult<()>) -> CliResult<()> {
        if self.dry_run {
            return Ok(());
        }
        let schema = format!("manifest/{SCHEMA_VERSION}");
        let manifest = Manifest {
            schema,
            tool: "nesp",
            version: VERSION,
            subcommand: self.subcommand,
            system: &self.system,
            config: &self.cfg.resolved,
            inputs: &self.inputs,
            outputs: &self.outputs,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            status: if outcome.is_ok() { "ok" } else { "error" },
            error: outcome.as_ref().err().map(CliError::to_json),
        };
        let body = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
        let name = self.manifest_name();
        self.ensure_dir()?;
        let path: &Path = &self.out_dir.join(name);
        std::fs::write(path, body + "\n").map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
    }
}

/// Several sweeps in one table.
pub fn sweeps_csv(sweeps: &[&nesp_core::slowlimit::SweepResult]) -> String {
    let mut s = String::from("quantity,eps,error,floor,floored\n");
    for r in sweeps {
        for p in &r.points {
            let e = p.error.map(|e| format!("{e:e}")).unwrap_or_else(|| "nan".into());
            s.push_str(&format!("{},{:e},{e},{:e},{}\n", r.quantity, p.eps, p.floor, p.floored));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_lists_resolved_keys_in_order() {
        let mut ctx = Ctx::new("converge", PathBuf::from("unused"), true);
        ctx.system = "builtin:x".into();
        ctx.cfg.record("zeta", &1.0);
        ctx.cfg.record("alpha", &vec![0.1, 0.2]);
        let h = ctx.csv_header();
        assert!(h.lines().all(|l| l.starts_with('#')));
        let a = h.find("# alpha = [0.1,0.2]").unwrap();
        let z = h.find("# zeta = 1.0").unwrap();
        assert!(a < z);
    }
}
