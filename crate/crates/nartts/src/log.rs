//! Append-only training logs.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nartts_core::train::TrainRecord;

use crate::error::{Error, Result};

/// `step<TAB>total<TAB>l1_before<TAB>l1_after<TAB>l1_dur`, one line per step.
pub fn format_record(r: &TrainRecord) -> String {
    format!("{}\t{}\t{}\t{}\t{}", r.step, r.total, r.l1_before, r.l1_after, r.l1_dur)
}

pub fn parse_record(line: &str) -> Option<TrainRecord> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 5 {
        return None;
    }
    Some(TrainRecord {
        step: f[0].parse().ok()?,
        total: f[1].parse().ok()?,
        l1_before: f[2].parse().ok()?,
        l1_after: f[3].parse().ok()?,
        l1_dur: f[4].parse().ok()?,
    })
}

pub struct LineLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LineLog {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.out, "{text}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn record(&mut self, r: &TrainRecord) -> Result<()> {
        self.line(&format_record(r))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
