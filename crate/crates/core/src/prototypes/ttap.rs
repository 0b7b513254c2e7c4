//! TTAP prompt-bank files.
//!
//! Layout (little-endian): magic `TTAP`, `u32` version (1), `u32` K, `u32` D,
//! then K records of `u32` name length, UTF-8 name, `u32` J_k and
//! `J_k · D` `f32` values.

use std::fs;
use std::path::Path;

use super::PromptBank;
use crate::binio::{put_f32, put_str, put_u32, FormatError, FormatErrorKind, Reader};
use crate::error::Error;

const MAGIC: &[u8; 4] = b"TTAP";
pub const TTAP_VERSION: u32 = 1;

pub fn encode_prompt_bank(bank: &PromptBank) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, TTAP_VERSION);
    put_u32(&mut out, bank.num_classes() as u32);
    put_u32(&mut out, bank.dim() as u32);
    for (k, name) in bank.class_names().iter().enumerate() {
        put_str(&mut out, name);
        let prompts = bank.prompts(k);
        put_u32(&mut out, prompts.len() as u32);
        for v in prompts {
            for &x in v {
                put_f32(&mut out, x as f32);
            }
        }
    }
    out
}

/// Parses a TTAP buffer; vectors are re-normalized after widening to `f64`.
pub fn decode_prompt_bank(buf: &[u8]) -> Result<PromptBank, FormatError> {
    let mut r = Reader::new("TTAP", buf);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u32()?;
    if version != TTAP_VERSION {
        return Err(r.error(at, FormatErrorKind::UnsupportedVersion(version)));
    }
    let k = r.u32()? as usize;
    let at = r.offset();
    let d = r.u32()? as usize;
    if d == 0 {
        return Err(r.error(at, FormatErrorKind::OutOfRange("D = 0".into())));
    }
    let mut names = Vec::with_capacity(k.min(1 << 16));
    let mut lists = Vec::with_capacity(k.min(1 << 16));
    for _ in 0..k {
        names.push(r.string()?);
        let j = r.u32()? as usize;
        let at = r.offset();
        let n = j.checked_mul(d).ok_or_else(|| {
            r.error(at, FormatErrorKind::OutOfRange(format!("J_k = {j}")))
        })?;
        let flat = r.f32s(n)?;
        let list: Vec<Vec<f64>> = flat
            .chunks_exact(d)
            .map(|c| c.iter().map(|&x| x as f64).collect())
            .collect();
        lists.push(list);
    }
    let end = r.offset();
    r.finish()?;
    PromptBank::from_raw(names, lists, d, "file").map_err(|e| FormatError {
        format: "TTAP",
        offset: end,
        kind: FormatErrorKind::Invalid(e.to_string()),
    })
}

pub fn save_prompt_bank(bank: &PromptBank, path: &Path) -> Result<(), Error> {
    bank.validate()?;
    fs::write(path, encode_prompt_bank(bank)).map_err(|e| Error::io(path, e))
}

pub fn load_prompt_bank(path: &Path) -> Result<PromptBank, Error> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut bank = decode_prompt_bank(&buf)?;
    bank.validate()?;
    bank.source_tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "file".into());
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> PromptBank {
        PromptBank::from_raw(
            vec!["cat".into(), "dog".into()],
            vec![
                vec![vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]],
                vec![vec![1.0, 2.0, 2.0]],
            ],
            3,
            "ensemble",
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let b = bank();
        let back = decode_prompt_bank(&encode_prompt_bank(&b)).unwrap();
        assert_eq!(back.class_names(), b.class_names());
        assert_eq!(back.prompt_counts(), b.prompt_counts());
        for k in 0..2 {
            for (x, y) in back.prompts(k).iter().zip(b.prompts(k)) {
                for (a, c) in x.iter().zip(y) {
                    assert!((a - c).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn bad_magic() {
        let mut buf = encode_prompt_bank(&bank());
        buf[0] = b'X';
        let err = decode_prompt_bank(&buf).unwrap_err();
        assert_eq!(err.offset, 0);
        assert!(matches!(err.kind, FormatErrorKind::BadMagic { .. }));
    }

    #[test]
    fn bad_version() {
        let mut buf = encode_prompt_bank(&bank());
        buf[4] = 7;
        let err = decode_prompt_bank(&buf).unwrap_err();
        assert_eq!(err.offset, 4);
        assert_eq!(err.kind, FormatErrorKind::UnsupportedVersion(7));
    }

    #[test]
    fn truncation_reports_offset() {
        let buf = encode_prompt_bank(&bank());
        // header 16 + "cat" record header 4+3+4 = 27; first vector starts there
        let cut = &buf[..30];
        let err = decode_prompt_bank(cut).unwrap_err();
        assert_eq!(err.offset, 27);
        assert!(matches!(err.kind, FormatErrorKind::Truncated { needed: 24, available: 3 }));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut buf = encode_prompt_bank(&bank());
        let n = buf.len();
        buf.push(0);
        let err = decode_prompt_bank(&buf).unwrap_err();
        assert_eq!(err.offset, n);
    }
}
