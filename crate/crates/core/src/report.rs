//! Line-delimited JSON result records: one `{command, metric, value, params}`
//! object per line, appended and never rewritten.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub command: String,
    pub metric: String,
    pub value: f64,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

impl Record {
    pub fn new(command: &str, metric: &str, value: f64) -> Self {
        Self {
            command: command.into(),
            metric: metric.into(),
            value,
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }

    pub fn to_line(&self) -> Result<String> {
        if !self.value.is_finite() {
            return Err(Error::Domain(format!("metric {} is not finite ({})", self.metric, self.value)));
        }
        Ok(serde_json::to_string(self).expect("record serializes"))
    }
}

/// Appends records to a file (created if missing) and optionally echoes them to stdout.
pub struct ReportWriter {
    path: PathBuf,
    file: File,
    echo: bool,
    written: usize,
}

impl ReportWriter {
    pub fn append(path: &Path, echo: bool) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::file(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            echo,
            written: 0,
        })
    }

    pub fn push(&mut self, record: &Record) -> Result<()> {
        let line = record.to_line()?;
        writeln!(self.file, "{line}").map_err(|e| Error::file(&self.path, e))?;
        if self.echo {
            println!("{line}");
        }
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }
}

pub fn parse_records(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.trim().is_empty() {
            let r = serde_json::from_str(body).map_err(|e| Error::Parse {
                offset,
                msg: e.to_string(),
            })?;
            out.push(r);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line.map_err(|e| Error::file(path, e))?);
        text.push('\n');
    }
    parse_records(&text)
}
