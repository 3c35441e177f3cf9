//! Motion files.
//!
//! Text: a header line `VMOT1 T=<frames> D=263 FPS=<fps>` followed by one line
//! of 263 space-separated floats per frame.
//!
//! Binary: magic `VMOTB`, then little-endian u32 frames, width and fps, then
//! the frames as little-endian f32, row-major.

use std::fmt::Write as _;
use std::path::Path;

use super::{MotionSequence, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::io::write_atomic;

const TEXT_MAGIC: &str = "VMOT1";
const BINARY_MAGIC: &[u8; 5] = b"VMOTB";

pub fn motion_to_text(m: &MotionSequence) -> String {
    let mut out = String::with_capacity(m.data().len() * 12 + 64);
    let _ = writeln!(
        out,
        "{TEXT_MAGIC} T={} D={FEATURE_DIM} FPS={}",
        m.num_frames(),
        m.fps()
    );
    for t in 0..m.num_frames() {
        let frame = m.frame(t);
        for (i, v) in frame.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            // Display prints the shortest string that parses back to the same f32.
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

fn header_field(tok: Option<&str>, key: &str) -> Result<u32> {
    let tok = tok.ok_or_else(|| Error::Parse {
        line: 1,
        msg: format!("missing {key}= field"),
    })?;
    tok.strip_prefix(key)
        .and_then(|s| s.strip_prefix('='))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("expected {key}=<int>, found {tok:?}"),
        })
}

pub fn motion_from_text(text: &str) -> Result<MotionSequence> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some(TEXT_MAGIC) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected {TEXT_MAGIC} header"),
        });
    }
    let frames = header_field(toks.next(), "T")? as usize;
    let width = header_field(toks.next(), "D")? as usize;
    let fps = header_field(toks.next(), "FPS")?;
    if width != FEATURE_DIM {
        return Err(Error::Parse {
            line: 1,
            msg: format!("feature width {width} is not {FEATURE_DIM}"),
        });
    }
    if fps == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "FPS must be positive".into(),
        });
    }
    let mut data = Vec::with_capacity(frames * FEATURE_DIM);
    let mut seen = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f32 = tok.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("not a number: {tok:?}"),
            })?;
            data.push(v);
        }
        if data.len() - before != FEATURE_DIM {
            return Err(Error::Parse {
                line: lineno,
                msg: format!(
                    "expected {FEATURE_DIM} values, found {}",
                    data.len() - before
                ),
            });
        }
        seen += 1;
    }
    if seen != frames {
        return Err(Error::Parse {
            line: seen + 1,
            msg: format!("header declares {frames} frames, found {seen}"),
        });
    }
    MotionSequence::new(data, fps)
}

pub fn motion_to_bytes(m: &MotionSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + m.data().len() * 4);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(m.num_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    out.extend_from_slice(&m.fps().to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn motion_from_bytes(bytes: &[u8]) -> Result<MotionSequence> {
    let bad = |msg: String| Error::Parse { line: 0, msg };
    if bytes.len() < 17 || &bytes[..5] != BINARY_MAGIC {
        return Err(bad("missing VMOTB header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap());
    let (frames, width, fps) = (word(0) as usize, word(1) as usize, word(2));
    if width != FEATURE_DIM {
        return Err(bad(format!("feature width {width} is not {FEATURE_DIM}")));
    }
    let body = &bytes[17..];
    if body.len() != frames * width * 4 {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            frames * width * 4,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MotionSequence::new(data, fps)
}

pub fn write_motion_text(path: &Path, m: &MotionSequence) -> Result<()> {
    write_atomic(path, motion_to_text(m).as_bytes())
}

pub fn write_motion_binary(path: &Path, m: &MotionSequence) -> Result<()> {
    write_atomic(path, &motion_to_bytes(m))
}

pub fn read_motion_text(path: &Path) -> Result<MotionSequence> {
    motion_from_text(&std::fs::read_to_string(path)?)
}

pub fn read_motion_binary(path: &Path) -> Result<MotionSequence> {
    motion_from_bytes(&std::fs::read(path)?)
}

/// Read either format, detected from the leading magic.
pub fn read_motion(path: &Path) -> Result<MotionSequence> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(BINARY_MAGIC) {
        motion_from_bytes(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
            line: 0,
            msg: "motion file is neither VMOTB nor UTF-8 text".into(),
        })?;
        motion_from_text(&text)
    }
}
