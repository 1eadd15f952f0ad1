//! Little-endian binary primitives shared by the dataset and checkpoint file
//! formats. Readers fail with explicit truncation errors naming expected and
//! actual byte counts rather than panicking or zero-filling.

use std::io::{self, Read, Write};

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f64_slice(w: &mut impl Write, vs: &[f64]) -> io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

/// Truncation-aware exact read: on EOF the error names how many bytes were
/// wanted and how many arrived.
pub(crate) fn read_exact_describing(
    r: &mut impl Read,
    buf: &mut [u8],
    what: &str,
) -> Result<(), BinReadError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(BinReadError::Truncated {
                    what: what.to_string(),
                    expected: buf.len(),
                    actual: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(BinReadError::Io(e)),
        }
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum BinReadError {
    #[error("truncated file: {what} expected {expected} bytes, got {actual}")]
    Truncated {
        what: String,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("string block of {len} bytes is not valid UTF-8")]
    BadUtf8 { len: usize },
    #[error("{what} value {got} exceeds the sane limit {limit}")]
    Unreasonable {
        what: &'static str,
        got: u64,
        limit: u64,
    },
}

pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, BinReadError> {
    let mut b = [0u8; 4];
    read_exact_describing(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read, what: &str) -> Result<u64, BinReadError> {
    let mut b = [0u8; 8];
    read_exact_describing(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64_vec(
    r: &mut impl Read,
    count: usize,
    what: &str,
) -> Result<Vec<f64>, BinReadError> {
    let mut bytes = vec![0u8; count * 8];
    read_exact_describing(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Guard against absurd length prefixes in corrupt files before allocating.
pub(crate) const MAX_STRING_LEN: u64 = 1 << 16;
pub(crate) const MAX_ELEMENTS: u64 = 1 << 32;

pub(crate) fn read_str(r: &mut impl Read, what: &str) -> Result<String, BinReadError> {
    let len = read_u32(r, what)? as u64;
    if len > MAX_STRING_LEN {
        return Err(BinReadError::Unreasonable {
            what: "string length",
            got: len,
            limit: MAX_STRING_LEN,
        });
    }
    let mut bytes = vec![0u8; len as usize];
    read_exact_describing(r, &mut bytes, what)?;
    String::from_utf8(bytes).map_err(|_| BinReadError::BadUtf8 { len: len as usize })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u64_round_trip() {
        let mut buf = Vec::new();
        write_u64(&mut buf, 0x0123_4567_89ab_cdef).unwrap();
        let v = read_u64(&mut buf.as_slice(), "test").unwrap();
        assert_eq!(v, 0x0123_4567_89ab_cdef);
    }

    #[test]
    fn truncation_names_counts() {
        let buf = [1u8, 2, 3];
        let err = read_u64(&mut buf.as_ref(), "header").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 8"), "{msg}");
        assert!(msg.contains("got 3"), "{msg}");
    }

    #[test]
    fn string_round_trip() {
        let mut buf = Vec::new();
        write_str(&mut buf, "target-domain").unwrap();
        let s = read_str(&mut buf.as_slice(), "test").unwrap();
        assert_eq!(s, "target-domain");
    }

    #[test]
    fn f64_round_trip_bit_exact() {
        let vals = [0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25];
        let mut buf = Vec::new();
        write_f64_slice(&mut buf, &vals).unwrap();
        let got = read_f64_vec(&mut buf.as_slice(), vals.len(), "test").unwrap();
        for (a, b) in vals.iter().zip(&got) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
