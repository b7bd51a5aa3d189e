//! Hash-stamped files and manifests in a run directory.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use din_core::objective::WeightsMatrix;
use ndarray::Array2;
use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, Result};

const HASH_PREFIX: &str = "# config_hash=";

/// Hash recorded on the first line of a CSV artifact.
pub fn read_hash(path: &Path) -> Result<String> {
    let mut line = String::new();
    BufReader::new(File::open(path)?).read_line(&mut line)?;
    line.trim_end()
        .strip_prefix(HASH_PREFIX)
        .map(str::to_string)
        .ok_or_else(|| CliError::Data(format!("{} has no config hash header", path.display())))
}

/// Fails unless `path` exists; the message names the command producing it.
pub fn require(path: PathBuf, producer: &'static str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact { path, producer })
    }
}

pub fn check_hash(path: &Path, expected: &str) -> Result<()> {
    let found = read_hash(path)?;
    if found != expected {
        return Err(CliError::HashMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}

pub fn check_json_hash(path: &Path, expected: &str) -> Result<Value> {
    let v: Value = serde_json::from_reader(BufReader::new(File::open(path)?)).map_err(CliError::data)?;
    let found = v.get("config_hash").and_then(Value::as_str).unwrap_or_default();
    if found != expected {
        return Err(CliError::HashMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(v)
}

/// Writes `body` with the hash header; `body` carries its own trailing newline.
pub fn write_stamped(path: &Path, hash: &str, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = File::create(path)?;
    writeln!(f, "{HASH_PREFIX}{hash}")?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

/// SVG with the hash in a leading comment.
pub fn write_svg(path: &Path, hash: &str, svg: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, format!("<!-- config_hash={hash} -->\n{svg}"))?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    config_hash: &'a str,
    command: &'a str,
    outputs: &'a [String],
    #[serde(flatten)]
    body: T,
}

/// Manifest marking `command` complete; written after every output.
pub fn write_manifest<T: Serialize>(path: &Path, hash: &str, command: &str, outputs: &[String], body: T) -> Result<()> {
    let m = Manifest {
        config_hash: hash,
        command,
        outputs,
        body,
    };
    let text = serde_json::to_string_pretty(&m).map_err(CliError::data)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Whether `manifest` exists with `hash` and every listed output is present.
pub fn is_done(manifest: &Path, hash: &str) -> bool {
    let Ok(v) = check_json_hash(manifest, hash) else {
        return false;
    };
    let dir = manifest.parent().unwrap_or(Path::new("."));
    v.get("outputs")
        .and_then(Value::as_array)
        .map(|o| o.iter().all(|p| p.as_str().is_some_and(|p| dir.join(p).exists())))
        .unwrap_or(false)
}

/// Reads a long-format `date,asset,weight` file into `assets` order.
pub fn read_weights(path: &Path, hash: &str, assets: &[String]) -> Result<WeightsMatrix> {
    check_hash(path, hash)?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(CliError::data)?;
    let col: HashMap<&str, usize> = assets.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(CliError::data)?;
        let bad = || CliError::Data(format!("malformed weights row in {}", path.display()));
        let date: NaiveDate = rec.get(0).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let c = *col.get(rec.get(1).ok_or_else(bad)?).ok_or_else(bad)?;
        let w: f64 = rec.get(2).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if dates.last() != Some(&date) {
            dates.push(date);
        }
        cells.push((dates.len() - 1, c, w));
    }
    let mut values = Array2::zeros((dates.len(), assets.len()));
    for (t, c, w) in cells {
        values[[t, c]] = w;
    }
    WeightsMatrix::new(dates, assets.to_vec(), values).map_err(CliError::data)
}
