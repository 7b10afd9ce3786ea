//! Binary field dumps and small CSV/JSON writers.
//!
//! Dump layout (all little-endian):
//!
//! ```text
//! offset  size  content
//! 0       8     magic "GKDVDUMP"
//! 8       4     format version (u32, currently 1)
//! 12      4     field count (u32)
//! 16      16    reserved, zero
//! 32      8     N (u64)
//! 40      8     L (f64)
//! 48      8     t (f64)
//! 56      ...   per field, N interleaved (re, im) f64 pairs of the unitary
//!               spectral coefficients in FFT order
//! ```
//!
//! A JSON sidecar with the same stem carries the same metadata in readable
//! form.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::spectral::{Field, SpectralGrid};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GKDVDUMP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 56;

#[derive(Debug, Clone)]
pub struct FieldDump {
    pub grid: Arc<SpectralGrid>,
    pub time: f64,
    pub fields: Vec<Field>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpSidecar {
    pub format: String,
    pub version: u32,
    pub n: usize,
    pub length: f64,
    pub time: f64,
    pub fields: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `fields` (sharing one grid) and the JSON sidecar.
pub fn write_dump(path: &Path, time: f64, fields: &[(&str, &Field)]) -> Result<()> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to dump".into()))?
        .1;
    let grid = first.grid();
    let n = grid.n();
    let mut buf = Vec::with_capacity(HEADER_LEN + fields.len() * n * 16);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    buf.extend_from_slice(&[0u8; 16]);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&grid.length().to_le_bytes());
    buf.extend_from_slice(&time.to_le_bytes());
    for (_, f) in fields {
        first.ensure_same_grid(f)?;
        for c in f.coeffs() {
            buf.extend_from_slice(&c.re.to_le_bytes());
            buf.extend_from_slice(&c.im.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    let sidecar = DumpSidecar {
        format: "gkdv-field-dump".into(),
        version: FORMAT_VERSION,
        n,
        length: grid.length(),
        time,
        fields: fields.iter().map(|(name, _)| name.to_string()).collect(),
    };
    write_json(&sidecar_path(path), &sidecar)
}

pub fn read_dump(path: &Path) -> Result<FieldDump> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedDump {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(malformed(format!(
            "truncated header: {} bytes, need {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[0..8] != MAGIC {
        return Err(malformed("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(8);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let count = u32_at(12) as usize;
    let n = usize::try_from(u64_at(32)).map_err(|_| malformed("grid size overflows".into()))?;
    let length = f64_at(40);
    let time = f64_at(48);
    let grid = SpectralGrid::new(n, length).map_err(|e| malformed(format!("bad grid: {e}")))?;
    let expected = n
        .checked_mul(16)
        .and_then(|b| b.checked_mul(count))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| malformed("size overflows".into()))?;
    if bytes.len() != expected {
        return Err(malformed(format!(
            "expected {expected} bytes for {count} field(s) of N = {n}, found {}",
            bytes.len()
        )));
    }
    let fields = (0..count)
        .map(|f| {
            let base = HEADER_LEN + f * n * 16;
            let coeffs = (0..n)
                .map(|k| Complex64::new(f64_at(base + 16 * k), f64_at(base + 16 * k + 8)))
                .collect();
            Field::from_coeffs(&grid, coeffs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FieldDump { grid, time, fields })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Arc<SpectralGrid>, Field, Field) {
        let g = SpectralGrid::new(64, 12.5).unwrap();
        let u = Field::from_fn(&g, |x| (-x * x).exp());
        let v = Field::from_fn(&g, |x| x.sin() * 0.3);
        (g, u, v)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (_, u, v) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.bin");
        write_dump(&path, 0.75, &[("u", &u), ("v", &v)]).unwrap();
        let dump = read_dump(&path).unwrap();
        assert_eq!(dump.time, 0.75);
        assert_eq!(dump.grid.n(), 64);
        assert_eq!(dump.grid.length(), 12.5);
        assert_eq!(dump.fields[0].coeffs(), u.coeffs());
        assert_eq!(dump.fields[1].coeffs(), v.coeffs());
        let side: DumpSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side.fields, vec!["u", "v"]);
    }

    #[test]
    fn truncated_and_versioned_files_are_rejected() {
        let (_, u, _) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.bin");
        write_dump(&path, 0.0, &[("u", &u)]).unwrap();
        let mut bytes = fs::read(&path).unwrap();

        let cut = dir.path().join("cut.bin");
        fs::write(&cut, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_dump(&cut), Err(Error::MalformedDump { .. })));
        fs::write(&cut, &bytes[..20]).unwrap();
        assert!(matches!(read_dump(&cut), Err(Error::MalformedDump { .. })));

        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let newer = dir.path().join("newer.bin");
        fs::write(&newer, &bytes).unwrap();
        match read_dump(&newer) {
            Err(e @ Error::VersionMismatch { found: 7, supported: 1 }) => {
                assert!(e.to_string().contains('7'));
            }
            other => panic!("unexpected {other:?}"),
        }

        bytes[0] = b'X';
        fs::write(&newer, &bytes).unwrap();
        assert!(matches!(read_dump(&newer), Err(Error::MalformedDump { .. })));
    }
}
