//! LVB1 clip files and JSON-lines manifests.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VideoClip;

const MAGIC: &[u8; 4] = b"LVB1";
const HEADER_LEN: usize = 4 + 4 * 4;

/// One manifest line. The optional fields are filled by the dataset
/// pipeline and omitted when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub speaker_id: String,
    pub path: String,
    pub duration_s: f64,
    pub transcript: String,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label: Option<bool>,
}

pub fn encode_lvb1(clip: &VideoClip) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + clip.frames.len());
    out.extend_from_slice(MAGIC);
    for d in [clip.t, clip.h, clip.w, clip.c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&clip.frames);
    out
}

/// Parses an LVB1 byte stream; the format carries no frame rate, so the
/// caller supplies it.
pub fn decode_lvb1(bytes: &[u8], frame_rate: f64) -> Result<VideoClip> {
    let bad = |detail: String| Error::Format {
        what: "LVB1 clip".into(),
        detail,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing LVB1 magic".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (t, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    let body = &bytes[HEADER_LEN..];
    if body.len() != t * h * w * c {
        return Err(bad(format!("{t}x{h}x{w}x{c} header but {} pixel bytes", body.len())));
    }
    VideoClip::new(body.to_vec(), t, h, w, c, frame_rate)
}

pub fn write_lvb1(path: &Path, clip: &VideoClip) -> Result<()> {
    std::fs::write(path, encode_lvb1(clip)).map_err(|e| Error::io(path, e))
}

pub fn read_lvb1(path: &Path, frame_rate: f64) -> Result<VideoClip> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_lvb1(&bytes, frame_rate)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            what: format!("{} line {}", path.display(), i + 1),
            detail: e.to_string(),
        })?);
    }
    Ok(rows)
}
