//! Input parsing and atomic output files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::Format;

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::schema(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(text.as_bytes());
    reader.deserialize().collect::<Result<Vec<T>, _>>().map_err(|e| CliError::schema(path, e))
}

pub fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Run-level facts echoed into every JSON output and into `metadata.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub command: &'static str,
    pub seed: u64,
    pub format: Format,
    pub version: &'static str,
}

/// Writes output files into one directory, each through a temporary file
/// that is renamed into place.
pub struct OutputDir {
    dir: PathBuf,
    pub metadata: Metadata,
    written: Vec<String>,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    metadata: &'a Metadata,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    #[serde(flatten)]
    metadata: &'a Metadata,
    outputs: &'a [String],
}

impl OutputDir {
    pub fn create(dir: &Path, metadata: Metadata) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), metadata, written: Vec::new() })
    }

    pub fn format(&self) -> Format {
        self.metadata.format
    }

    pub fn write_text(&mut self, name: &str, contents: &str) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(path)
    }

    /// Pretty JSON with the run metadata merged in as a `metadata` field.
    pub fn write_json<T: Serialize>(&mut self, name: &str, body: &T) -> CliResult<PathBuf> {
        let envelope = Envelope { metadata: &self.metadata, body };
        let mut text = serde_json::to_string_pretty(&envelope).map_err(|e| CliError::Schema(e.to_string()))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> CliResult<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| CliError::Schema(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Schema(e.to_string()))?;
        self.write_text(name, &String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Writes `metadata.json` listing every file produced by the run.
    pub fn finish(mut self) -> CliResult<Vec<String>> {
        let outputs = self.written.clone();
        let record = RunRecord { metadata: &self.metadata, outputs: &outputs };
        let mut text = serde_json::to_string_pretty(&record).map_err(|e| CliError::Schema(e.to_string()))?;
        text.push('\n');
        self.write_text("metadata.json", &text)?;
        Ok(outputs)
    }
}
