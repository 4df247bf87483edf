//! Duration text files: one `id<TAB>d1 d2 ... dN` line per utterance.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const WHAT: &str = "duration file";

pub type DurationEntry = (String, Vec<usize>);

pub fn format_durations(entries: &[DurationEntry]) -> String {
    let mut out = String::new();
    for (id, d) in entries {
        let joined: Vec<String> = d.iter().map(usize::to_string).collect();
        writeln!(out, "{id}\t{}", joined.join(" ")).expect("writing to a String");
    }
    out
}

pub fn parse_durations(text: &str) -> Result<Vec<DurationEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            what: WHAT,
            line: line_no,
            msg,
        };
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `id<TAB>durations`".into()))?;
        if id.is_empty() {
            return Err(err("empty utterance id".into()));
        }
        let durs = rest
            .split_whitespace()
            .map(|f| {
                f.parse::<usize>()
                    .map_err(|_| err(format!("`{f}` is not a non-negative integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        if durs.is_empty() {
            return Err(err(format!("no durations for `{id}`")));
        }
        out.push((id.to_owned(), durs));
    }
    Ok(out)
}

pub fn write_durations(path: &Path, entries: &[DurationEntry]) -> Result<()> {
    std::fs::write(path, format_durations(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_durations(path: &Path) -> Result<Vec<DurationEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_durations(&text)
}
