//! Output directory, report and manifest handling.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

/// Plain-text report: `key = value` lines and one `check` line per
/// requested check.
#[derive(Debug, Default)]
pub struct Report {
    lines: Vec<String>,
    failed: Vec<String>,
    checks: usize,
}

impl Report {
    pub fn info(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("{key} = {value}"));
    }

    pub fn section(&mut self, title: &str) {
        self.lines.push(format!("\n[{title}]"));
    }

    pub fn check(&mut self, name: &str, ok: bool, detail: impl std::fmt::Display) {
        self.checks += 1;
        let verdict = if ok { "PASS" } else { "FAIL" };
        self.lines.push(format!("check {name}: {verdict} ({detail})"));
        if !ok {
            self.failed.push(name.to_string());
        }
    }

    /// Verdict line for a rate theorem: certified, probe-certified or failed.
    pub fn verdict(&mut self, theorem: &str, verdict: Verdict, detail: impl std::fmt::Display) {
        self.checks += 1;
        let word = match verdict {
            Verdict::Certified => "certified",
            Verdict::ProbeCertified => "probe-certified",
            Verdict::Failed => "failed",
        };
        self.lines.push(format!("verdict {theorem}: {word} ({detail})"));
        if verdict == Verdict::Failed {
            self.failed.push(theorem.to_string());
        }
    }

    pub fn passed(&self) -> bool {
        self.failed.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push_str(&format!(
            "\n\nstatus = {}\nchecks = {}\nfailed = [{}]\n",
            if self.passed() { "ok" } else { "failed" },
            self.checks,
            self.failed.join(", ")
        ));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Certified,
    ProbeCertified,
    Failed,
}

pub struct OutDir {
    pub root: PathBuf,
    pub written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Opens `name` for writing and records it in the manifest file list.
    pub fn file(&mut self, name: &str) -> std::io::Result<BufWriter<fs::File>> {
        self.written.push(name.to_string());
        Ok(BufWriter::new(fs::File::create(self.root.join(name))?))
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> std::io::Result<()> {
        let mut f = self.file(name)?;
        f.write_all(text.as_bytes())?;
        f.flush()
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// The manifest is the resolved configuration plus a `[manifest]` table, so
/// it can be fed back through `--config` to repeat the run.
pub fn manifest(command: &str, resolved_toml: &str, seed: u64, threads: usize, files: &[String]) -> String {
    let mut table = toml::Table::new();
    table.insert("command".into(), command.into());
    table.insert("seed".into(), toml::Value::Integer(seed as i64));
    table.insert("config_sha256".into(), sha256_hex(resolved_toml).into());
    table.insert("bdenv_version".into(), env!("CARGO_PKG_VERSION").into());
    table.insert("threads".into(), toml::Value::Integer(threads as i64));
    table.insert(
        "files".into(),
        toml::Value::Array(files.iter().map(|f| toml::Value::from(f.as_str())).collect()),
    );
    let mut outer = toml::Table::new();
    outer.insert("manifest".into(), toml::Value::Table(table));
    format!("{resolved_toml}\n{}", toml::to_string(&outer).expect("manifest serializes"))
}
