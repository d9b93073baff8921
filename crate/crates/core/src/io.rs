//! The PPGB signal container and the segments-directory manifest.
//!
//! PPGB is a little-endian binary layout: magic `PPGB`, version (u32),
//! sample_rate_hz (f32), n_samples (u64), then n_samples f32 values where a
//! quiet NaN marks a missing sample. Readers reject bad magic, unknown
//! versions, truncation, and trailing bytes rather than guessing.

use crate::dsp::RawRecord;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"PPGB";
const VERSION: u32 = 1;

/// Write `record` to `path` in PPGB format. Samples are stored as f32; NaN
/// (missing) is preserved as a quiet NaN.
pub fn write_ppgb(path: &Path, record: &RawRecord) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + record.samples.len() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(record.sample_rate_hz as f32).to_le_bytes());
    buf.extend_from_slice(&(record.samples.len() as u64).to_le_bytes());
    for &s in &record.samples {
        let v = if s.is_nan() { f32::NAN } else { s as f32 };
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a PPGB file written by [`write_ppgb`].
pub fn read_ppgb(path: &Path) -> Result<RawRecord> {
    let mut f = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    parse_ppgb(&bytes)
}

fn parse_ppgb(bytes: &[u8]) -> Result<RawRecord> {
    let corrupt = |detail: &str| Error::CorruptContainer { detail: detail.into() };
    if bytes.len() < 20 {
        return Err(corrupt("shorter than the fixed header"));
    }
    if bytes[0..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CorruptContainer {
            detail: format!("unsupported version {version}"),
        });
    }
    let sample_rate_hz = f32::from_le_bytes(bytes[8..12].try_into().unwrap()) as f64;
    if !(sample_rate_hz > 0.0) {
        return Err(corrupt("non-positive sample rate"));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let want = 20 + n * 4;
    if bytes.len() < want {
        return Err(corrupt("truncated sample data"));
    }
    if bytes.len() > want {
        return Err(corrupt("trailing bytes after sample data"));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let off = 20 + i * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        samples.push(v as f64);
    }
    Ok(RawRecord { sample_rate_hz, samples })
}

/// Manifest saved next to a directory of PPGB files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentsManifest {
    /// File names relative to the manifest's directory, in pipeline order.
    pub files: Vec<String>,
    /// Root seed the records or segments were generated from, if any.
    pub seed: Option<u64>,
    /// Windows dropped by the missing-fraction screen.
    pub dropped_missing: usize,
    /// Windows dropped by the flatline screen.
    pub dropped_flatline: usize,
    /// Effective configuration echoed by the command that wrote this.
    pub config: serde_json::Value,
}

impl SegmentsManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("ppg-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_preserves_samples_and_missing() {
        let rec = RawRecord {
            sample_rate_hz: 125.0,
            samples: vec![0.0, 1.5, f64::NAN, -2.25, 0.0009765625],
        };
        let p = tmp("round_trip.ppgb");
        write_ppgb(&p, &rec).unwrap();
        let back = read_ppgb(&p).unwrap();
        assert_eq!(back.sample_rate_hz, 125.0);
        assert_eq!(back.samples.len(), 5);
        for (a, b) in rec.samples.iter().zip(&back.samples) {
            if a.is_nan() {
                assert!(b.is_nan());
            } else {
                // Values chosen exactly representable in f32.
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let p = tmp("bad_magic.ppgb");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
        match read_ppgb(&p) {
            Err(Error::CorruptContainer { .. }) => {}
            other => panic!("want CorruptContainer, got {other:?}"),
        }
    }

    #[test]
    fn truncated_and_trailing_data_are_rejected() {
        let rec = RawRecord { sample_rate_hz: 50.0, samples: vec![1.0, 2.0, 3.0] };
        let p = tmp("trunc.ppgb");
        write_ppgb(&p, &rec).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        let cut = &bytes[..bytes.len() - 2];
        assert!(matches!(parse_ppgb(cut), Err(Error::CorruptContainer { .. })));

        let mut extended = bytes.clone();
        extended.push(0);
        assert!(matches!(parse_ppgb(&extended), Err(Error::CorruptContainer { .. })));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let rec = RawRecord { sample_rate_hz: 50.0, samples: vec![1.0] };
        let p = tmp("version.ppgb");
        write_ppgb(&p, &rec).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 9;
        match parse_ppgb(&bytes) {
            Err(Error::CorruptContainer { detail }) => {
                assert!(detail.contains("version"), "{detail}");
            }
            other => panic!("want CorruptContainer, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip() {
        let m = SegmentsManifest {
            files: vec!["seg_000.ppgb".into()],
            seed: Some(42),
            dropped_missing: 1,
            dropped_flatline: 2,
            config: serde_json::json!({"window_s": 240.0}),
        };
        let p = tmp("manifest.json");
        m.save(&p).unwrap();
        let back = SegmentsManifest::load(&p).unwrap();
        assert_eq!(back.files, m.files);
        assert_eq!(back.seed, Some(42));
        assert_eq!(back.dropped_missing, 1);
        assert_eq!(back.dropped_flatline, 2);
    }
}
