//! Plain-text utterance files and manifests.
//!
//! An utterance file starts with
//! `frames=N subject=S phoneme_table=p1,p2,…` followed by `N` rows of
//! 13 MFCC values, 12 EMA values and one label index, space-separated.
//! Floats use Rust's shortest round-trip formatting, so write → load is exact.
//! A manifest lists one utterance path per line, relative to the manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::channel::{EMA_DIM, MFCC_DIM};
use super::utterance::{Corpus, Utterance};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const UTTERANCE_EXT: &str = "utt";

pub fn format_utterance(u: &Utterance) -> String {
    let mut s = format!(
        "frames={} subject={} phoneme_table={}\n",
        u.frames(),
        u.subject,
        u.phoneme_table.join(",")
    );
    for t in 0..u.frames() {
        let vals = u.mfcc.row(t).iter().chain(u.ema.row(t));
        for (i, v) in vals.enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{v}").unwrap();
        }
        writeln!(s, " {}", u.labels[t]).unwrap();
    }
    s
}

pub fn parse_utterance(path: &Path, id: &str, text: &str) -> Result<Utterance> {
    let perr = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let mut frames = None;
    let mut subject = None;
    let mut table = None;
    for field in header.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| perr(1, format!("header field `{field}` is not key=value")))?;
        match k {
            "frames" => {
                frames = Some(
                    v.parse::<usize>()
                        .map_err(|e| perr(1, format!("frames `{v}`: {e}")))?,
                )
            }
            "subject" => subject = Some(v.to_string()),
            "phoneme_table" => table = Some(v.split(',').map(str::to_string).collect::<Vec<_>>()),
            other => return Err(perr(1, format!("unknown header field `{other}`"))),
        }
    }
    let frames = frames.ok_or_else(|| perr(1, "header missing frames".into()))?;
    let subject = subject.ok_or_else(|| perr(1, "header missing subject".into()))?;
    let table = table.ok_or_else(|| perr(1, "header missing phoneme_table".into()))?;

    let width = MFCC_DIM + EMA_DIM + 1;
    let mut mfcc = Vec::with_capacity(frames * MFCC_DIM);
    let mut ema = Vec::with_capacity(frames * EMA_DIM);
    let mut labels = Vec::with_capacity(frames);
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != width {
            return Err(perr(
                lineno,
                format!("expected {width} values, found {}", fields.len()),
            ));
        }
        for (j, f) in fields[..width - 1].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|e| perr(lineno, format!("value `{f}`: {e}")))?;
            if !v.is_finite() {
                return Err(perr(lineno, format!("non-finite value `{f}`")));
            }
            if j < MFCC_DIM {
                mfcc.push(v);
            } else {
                ema.push(v);
            }
        }
        let label: usize = fields[width - 1]
            .parse()
            .map_err(|e| perr(lineno, format!("label `{}`: {e}", fields[width - 1])))?;
        if label >= table.len() {
            return Err(perr(
                lineno,
                format!("label {label} outside phoneme table of {}", table.len()),
            ));
        }
        labels.push(label);
    }
    if labels.len() != frames {
        return Err(perr(
            1,
            format!("header declares {frames} frames, found {}", labels.len()),
        ));
    }
    Ok(Utterance {
        id: id.to_string(),
        subject,
        mfcc: Tensor::new(vec![frames, MFCC_DIM], mfcc)?,
        ema: Tensor::new(vec![frames, EMA_DIM], ema)?,
        labels,
        phoneme_table: table,
    })
}

pub fn read_utterance(path: &Path) -> Result<Utterance> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_utterance(path, &id, &text)
}

/// Loads every utterance listed in a manifest.
pub fn load_corpus(manifest: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut utts = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let p = Path::new(line);
        let p = if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        };
        utts.push(read_utterance(&p)?);
    }
    Corpus::new(utts)
}

/// Writes `<id>.utt` per utterance and a manifest into `dir`; returns the
/// manifest path.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for u in &corpus.utterances {
        let name = format!("{}.{UTTERANCE_EXT}", u.id);
        let path = dir.join(&name);
        fs::write(&path, format_utterance(u)).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let mpath = dir.join(MANIFEST_NAME);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}
