//! Binary PGM (P5) reader for label masks. Samples are one byte when
//! maxval < 256 and two big-endian bytes otherwise.

use std::fs;
use std::path::Path;

use dgm_core::LabelMask;

use crate::error::{CliError, CliResult};

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64, (usize, String)> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err((start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| (start, format!("{what} out of range")))
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<LabelMask, (usize, String)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err((0, "not a binary PGM (missing \"P5\")".into()));
    }
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    hdr.skip_space();
    let maxval_at = hdr.pos;
    let maxval = hdr.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err((maxval_at, format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(hdr.pos) {
        Some(b) if b.is_ascii_whitespace() => hdr.pos += 1,
        _ => return Err((hdr.pos, "expected a single whitespace byte after maxval".into())),
    }
    let sample = if maxval < 256 { 1 } else { 2 };
    let (w, h) = (width as usize, height as usize);
    let need = w.checked_mul(h).and_then(|n| n.checked_mul(sample)).ok_or((0, "image too large".to_string()))?;
    let payload = &bytes[hdr.pos..];
    if payload.len() < need {
        return Err((bytes.len(), format!("truncated raster: {} of {need} bytes", payload.len())));
    }
    let labels: Vec<u16> = if sample == 1 {
        payload[..need].iter().map(|&b| u16::from(b)).collect()
    } else {
        payload[..need].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    };
    if let Some(i) = labels.iter().position(|&v| u64::from(v) > maxval) {
        return Err((hdr.pos + i * sample, format!("sample {} exceeds maxval {maxval}", labels[i])));
    }
    LabelMask::new(h, w, labels).map_err(|e| (hdr.pos, e.to_string()))
}

pub fn read_pgm(path: &Path) -> CliResult<LabelMask> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_pgm(&bytes).map_err(|(offset, reason)| CliError::format(path, offset as u64, reason))
}

/// Encodes a mask as P5, one byte per sample when every label is below 256.
pub fn encode_pgm(mask: &LabelMask) -> Vec<u8> {
    let maxval = mask.max_label().max(1);
    let mut out = format!("P5\n{} {}\n{}\n", mask.width(), mask.height(), maxval).into_bytes();
    for &v in mask.labels() {
        if maxval < 256 {
            out.push(v as u8);
        } else {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    out
}
