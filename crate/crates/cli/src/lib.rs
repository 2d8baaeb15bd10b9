//! Shared plumbing for the `adatok` and `itk-codec` binaries.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use adatok_core::source::geometric_source;
use adatok_core::{DiscreteSource, Error};
use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_DIVERGED: u8 = 5;

/// Maps an error chain to a process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(_) => EXIT_IO,
                Error::Diverged { .. } => EXIT_DIVERGED,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
        if cause.is::<serde_json::Error>() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_VALIDATION
}

/// Git blob hash (`blob <len>\0<content>`) with SHA-256, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputHash {
    pub path: String,
    pub hash: String,
}

/// Provenance record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(RunManifest {
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)
            .map_err(Error::Io)
            .with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            hash: content_hash(&bytes),
        });
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_file(path, &json)
    }
}

/// Pretty JSON on stdout. A closed pipe is not an error.
pub fn print_json(v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io(e).into()),
        _ => Ok(()),
    }
}

/// `<path>.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)
        .map_err(Error::Io)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path)
        .map_err(Error::Io)
        .with_context(|| format!("reading {}", path.display()))
}

/// Comma-separated probabilities, or `geometric:M`.
pub fn parse_source(text: &str) -> Result<DiscreteSource> {
    if let Some(m) = text.strip_prefix("geometric:") {
        let m: u32 = m
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("bad geometric order {m:?}")))?;
        return Ok(geometric_source(m)?);
    }
    let probs = parse_list(text)?;
    Ok(DiscreteSource::new(probs)?)
}

pub fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Validation(format!("not a number: {t:?}")).into())
        })
        .collect()
}
