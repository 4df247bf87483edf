//! Corpus manifests: one `id<TAB>token ids<TAB>feature path` line per
//! utterance. Relative feature paths resolve against the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const WHAT: &str = "manifest";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub tokens: Vec<usize>,
    pub features: PathBuf,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let toks: Vec<String> = e.tokens.iter().map(usize::to_string).collect();
        writeln!(out, "{}\t{}\t{}", e.id, toks.join(" "), e.features.display()).expect("writing to a String");
    }
    out
}

/// Parses manifest text; relative paths are joined onto `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out: Vec<ManifestEntry> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            what: WHAT,
            line: i + 1,
            msg,
        };
        let mut fields = line.split('\t');
        let (Some(id), Some(toks), Some(path), None) = (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(err("expected `id<TAB>tokens<TAB>path`".into()));
        };
        if id.is_empty() || path.is_empty() {
            return Err(err("empty id or path".into()));
        }
        if out.iter().any(|e| e.id == id) {
            return Err(err(format!("duplicate id `{id}`")));
        }
        let tokens = toks
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| err(format!("bad token id `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        if tokens.is_empty() {
            return Err(err(format!("no tokens for `{id}`")));
        }
        let p = Path::new(path);
        let features = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        out.push(ManifestEntry {
            id: id.to_owned(),
            tokens,
            features,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    std::fs::write(path, format_manifest(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)
}
