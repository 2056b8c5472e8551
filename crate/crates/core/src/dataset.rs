//! Line-oriented UTF-8 text files.
//!
//! Every file this crate writes starts with `#amtl` metadata lines carrying
//! the format version and the resolved configuration; readers skip them.
//! Files without the header (plain user text) read the same way.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::toy::ErrorRecord;
use crate::vocab::Vocab;

pub const TEXT_FORMAT_VERSION: u32 = 1;
const HEADER_PREFIX: &str = "#amtl";

/// One `corrupted<TAB>clean<TAB>span_start<TAB>span_end` line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRecord {
    pub corrupted: String,
    pub clean: String,
    pub span_start: usize,
    pub span_end: usize,
}

impl PairRecord {
    pub fn from_error(r: &ErrorRecord, vocab: &Vocab) -> Result<Self> {
        Ok(PairRecord {
            corrupted: vocab.decode(&r.corrupted)?,
            clean: vocab.decode(&r.clean)?,
            span_start: r.span_start,
            span_end: r.span_end,
        })
    }
}

fn header_lines(meta: &[(String, String)]) -> Vec<String> {
    let mut lines = vec![format!(
        "{HEADER_PREFIX} format_version={TEXT_FORMAT_VERSION}"
    )];
    lines.extend(meta.iter().map(|(k, v)| format!("{HEADER_PREFIX} {k}={v}")));
    lines
}

/// Writes the metadata header followed by `lines`.
pub fn write_lines<I, S>(path: &Path, meta: &[(String, String)], lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    for h in header_lines(meta) {
        writeln!(w, "{h}").map_err(io)?;
    }
    for l in lines {
        writeln!(w, "{}", l.as_ref()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Body lines of a file, header and trailing blank lines dropped.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_lines(&text))
}

pub fn parse_lines(text: &str) -> Vec<String> {
    text.lines()
        .skip_while(|l| l.starts_with(HEADER_PREFIX))
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

/// `key=value` metadata from the header of a file written by [`write_lines`].
pub fn read_meta(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .take_while(|l| l.starts_with(HEADER_PREFIX))
        .filter_map(|l| {
            l[HEADER_PREFIX.len()..]
                .trim()
                .split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
        })
        .collect())
}

pub fn format_pair(r: &PairRecord) -> String {
    format!(
        "{}\t{}\t{}\t{}",
        r.corrupted, r.clean, r.span_start, r.span_end
    )
}

pub fn parse_pair(line: &str) -> Result<PairRecord> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 4 {
        return Err(Error::InvalidInput(format!(
            "pair line needs 4 tab-separated fields, got {}",
            f.len()
        )));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::InvalidInput(format!("bad span index {s:?}")))
    };
    let r = PairRecord {
        corrupted: f[0].to_string(),
        clean: f[1].to_string(),
        span_start: num(f[2])?,
        span_end: num(f[3])?,
    };
    if r.span_start > r.span_end || r.span_end > r.corrupted.chars().count() {
        return Err(Error::InvalidInput(format!(
            "span [{}, {}) does not fit {:?}",
            r.span_start, r.span_end, r.corrupted
        )));
    }
    Ok(r)
}

pub fn write_pairs(path: &Path, meta: &[(String, String)], pairs: &[PairRecord]) -> Result<()> {
    write_lines(path, meta, pairs.iter().map(format_pair))
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    read_lines(path)?.iter().map(|l| parse_pair(l)).collect()
}
