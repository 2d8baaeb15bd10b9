//! Standalone reader and writer for `.itk` token streams.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adatok_cli::{exit_code, print_json, read_file, write_file, EXIT_OK, EXIT_USAGE};
use adatok_core::codec::{deserialize, serialize};
use adatok_core::{Error, FsqConfig, TokenMask};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "itk-codec",
    version,
    about = "Inspect and write ITK1 token streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a stream as JSON.
    Inspect { file: PathBuf },
    /// Write a stream from its JSON description (as printed by `inspect`).
    Encode {
        /// JSON description; `-` reads stdin.
        #[arg(long)]
        json: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Stream contents in plain form.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamJson {
    levels: Vec<u8>,
    n_max: usize,
    /// One character per position, `1` for kept.
    mask: String,
    indices: Vec<u64>,
}

fn inspect(file: &Path) -> Result<()> {
    let s =
        deserialize(&read_file(file)?).with_context(|| format!("parsing {}", file.display()))?;
    let out = StreamJson {
        levels: s.config.levels().to_vec(),
        n_max: s.mask.n_max(),
        mask: s
            .mask
            .as_slice()
            .iter()
            .map(|&k| if k { '1' } else { '0' })
            .collect(),
        indices: s.indices()?,
    };
    print_json(&out)
}

fn encode(json: &Path, out: &Path) -> Result<()> {
    let text = if json.as_os_str() == "-" {
        std::io::read_to_string(std::io::stdin()).map_err(Error::Io)?
    } else {
        String::from_utf8(read_file(json)?)?
    };
    let desc: StreamJson = serde_json::from_str(&text).context("parsing stream description")?;
    let config = FsqConfig::new(desc.levels)?;
    let kept = desc
        .mask
        .chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(Error::Validation(format!(
                "mask characters must be 0 or 1, got {c:?}"
            ))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if kept.len() != desc.n_max {
        return Err(Error::Validation(format!(
            "mask has {} positions, n_max is {}",
            kept.len(),
            desc.n_max
        ))
        .into());
    }
    let codes = desc
        .indices
        .iter()
        .map(|&i| config.index_decode(i))
        .collect::<Result<Vec<_>, _>>()?;
    let bytes = serialize(&codes, &TokenMask::new(kept), &config)?;
    write_file(out, &bytes)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    let result = match &cli.command {
        Command::Inspect { file } => inspect(file),
        Command::Encode { json, out } => encode(json, out),
    };
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
