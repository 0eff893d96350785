//! Output directory with a digest manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use sha2::{Digest, Sha256};

use sepda::estimation::EstimationReport;
use sepda::fields::ScalarField;
use sepda::io::{write_field, write_pgm, AnyField};

pub const MANIFEST: &str = "manifest.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects files written under one root and the key/value notes that go
/// into `manifest.txt`.
pub struct Artifacts {
    root: PathBuf,
    notes: Vec<(String, String)>,
    files: Vec<(String, String)>,
    stage: &'static str,
}

impl Artifacts {
    pub fn create(root: &Path, command: &str) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let mut a = Self { root: root.to_path_buf(), notes: Vec::new(), files: Vec::new(), stage: "setup" };
        a.note("command", command);
        Ok(a)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.to_string(), value.to_string()));
    }

    /// Marks the start of a pipeline stage; failures report the last one.
    pub fn stage(&mut self, name: &'static str) {
        self.stage = name;
    }

    pub fn current_stage(&self) -> &'static str {
        self.stage
    }

    pub fn bytes(&mut self, rel: &str, data: &[u8]) -> anyhow::Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, data).with_context(|| format!("writing {}", path.display()))?;
        self.files.push((rel.to_string(), sha256_hex(data)));
        Ok(())
    }

    pub fn field(&mut self, rel: &str, f: impl Into<AnyField>) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        write_field(&mut buf, &f.into())?;
        self.bytes(rel, &buf)
    }

    /// 16-bit PGM plus its `.range` sidecar.
    pub fn pgm(&mut self, rel: &str, f: &ScalarField) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        let (lo, hi) = write_pgm(&mut buf, f)?;
        self.bytes(rel, &buf)?;
        self.bytes(&format!("{rel}.range"), format!("min {lo:e}\nmax {hi:e}\n").as_bytes())
    }

    pub fn report(&mut self, rel: &str, r: &EstimationReport) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        r.write_csv(&mut buf)?;
        self.bytes(rel, &buf)
    }

    /// Writes the manifest. A failure is recorded with its stage, and the
    /// files already written are listed as partial.
    pub fn finish(mut self, outcome: Result<(), &anyhow::Error>) -> anyhow::Result<()> {
        let mut text = String::new();
        match outcome {
            Ok(()) => self.notes.push(("status".into(), "complete".into())),
            Err(e) => {
                self.notes.push(("status".into(), "failed".into()));
                self.notes.push(("failed_stage".into(), self.stage.into()));
                self.notes.push(("error".into(), format!("{e:#}").replace('\n', " ")));
            }
        }
        for (k, v) in &self.notes {
            writeln!(text, "{k} = {v}").unwrap();
        }
        let tag = if outcome.is_ok() { "file" } else { "partial" };
        for (rel, digest) in &self.files {
            writeln!(text, "{tag} {rel} sha256={digest}").unwrap();
        }
        fs::write(self.root.join(MANIFEST), text)?;
        Ok(())
    }
}

pub fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}
