//! The on-disk container shared by samples, predictions, models and
//! measurement tensors.
//!
//! Layout, all integers little-endian:
//!
//! | offset        | size | content                                   |
//! |---------------|------|-------------------------------------------|
//! | 0             | 8    | magic, identifies the payload kind        |
//! | 8             | 4    | format version (`u32`, currently 1)       |
//! | 12            | 4    | header length `H` in bytes (`u32`)        |
//! | 16            | 8    | payload length `P` in f64 values (`u64`)  |
//! | 24            | H    | UTF-8 JSON header                         |
//! | 24 + H        | 8P   | payload, `f64` values                     |
//! | 24 + H + 8P   | 4    | CRC-32 (IEEE) of bytes `0 .. 24 + H + 8P` |

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub type Magic = [u8; 8];

pub const SAMPLE_MAGIC: Magic = *b"RSSAMPLE";
pub const FIELD_MAGIC: Magic = *b"RSFIELD\0";
pub const MODEL_MAGIC: Magic = *b"RSMODEL\0";
pub const MEASUREMENT_MAGIC: Magic = *b"RSMEASUR";

const PREFIX: usize = 24;

pub fn encode<H: Serialize>(magic: Magic, header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    encode_with_version(magic, FORMAT_VERSION, header, payload)
}

pub(crate) fn encode_with_version<H: Serialize>(
    magic: Magic,
    version: u32,
    header: &H,
    payload: &[f64],
) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let header_len =
        u32::try_from(json.len()).map_err(|_| Error::InvalidArgument("container header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + 8 * payload.len() + 4);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

/// Parses a container; `path` is only used in error messages.
pub fn decode<H: DeserializeOwned>(bytes: &[u8], magic: Magic, path: &Path) -> Result<(H, Vec<f64>)> {
    if bytes.len() < PREFIX + 4 {
        return Err(format_error(path, format!("truncated: {} bytes", bytes.len())));
    }
    if bytes[..8] != magic {
        return Err(format_error(
            path,
            format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&bytes[..8])
            ),
        ));
    }
    let version = le_u32(&bytes[8..12]);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = le_u32(&bytes[12..16]) as usize;
    let payload_len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let expected = usize::try_from(payload_len)
        .ok()
        .and_then(|p| p.checked_mul(8))
        .and_then(|p| p.checked_add(PREFIX + header_len + 4));
    if expected != Some(bytes.len()) {
        return Err(format_error(
            path,
            format!(
                "length {} does not match header ({header_len} header bytes, {payload_len} values)",
                bytes.len()
            ),
        ));
    }
    let body = bytes.len() - 4;
    let stored = le_u32(&bytes[body..]);
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let header = serde_json::from_slice(&bytes[PREFIX..PREFIX + header_len])
        .map_err(|e| format_error(path, format!("header: {e}")))?;
    let payload = bytes[PREFIX + header_len..body]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, payload))
}

pub fn read_container<H: DeserializeOwned>(path: &Path, magic: Magic) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, magic, path)
}

pub fn write_container<H: Serialize>(path: &Path, magic: Magic, header: &H, payload: &[f64]) -> Result<()> {
    write_bytes(path, &encode(magic, header, payload)?)
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_raw_f64(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(path, &bytes)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| format_error(path, e.to_string()))
}

/// Fails with [`Error::AlreadyExists`] if `path` exists and `force` is off.
pub fn guard_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        Err(Error::AlreadyExists(path.to_path_buf()))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Head {
        name: String,
        n: usize,
    }

    fn head() -> Head {
        Head { name: "x".into(), n: 3 }
    }

    #[test]
    fn layout_is_as_documented() {
        let bytes = encode(FIELD_MAGIC, &head(), &[1.5, -2.0]).unwrap();
        let json = br#"{"name":"x","n":3}"#;
        assert_eq!(&bytes[..8], b"RSFIELD\0");
        assert_eq!(le_u32(&bytes[8..12]), 1);
        assert_eq!(le_u32(&bytes[12..16]) as usize, json.len());
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(&bytes[24..24 + json.len()], json);
        let p = 24 + json.len();
        assert_eq!(&bytes[p..p + 8], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), p + 16 + 4);
        assert_eq!(le_u32(&bytes[p + 16..]), crc32fast::hash(&bytes[..p + 16]));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = encode(FIELD_MAGIC, &head(), &[1.0, 2.0, 3.0]).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0x40;
        let err = decode::<Head>(&bytes, FIELD_MAGIC, Path::new("f")).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }), "{err}");
    }

    #[test]
    fn newer_version_is_rejected_explicitly() {
        let bytes = encode_with_version(FIELD_MAGIC, 2, &head(), &[1.0]).unwrap();
        let err = decode::<Head>(&bytes, FIELD_MAGIC, Path::new("f")).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Version {
                    found: 2,
                    supported: 1,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn truncation_and_wrong_magic_are_format_errors() {
        let bytes = encode(FIELD_MAGIC, &head(), &[1.0, 2.0]).unwrap();
        let err = decode::<Head>(&bytes[..bytes.len() - 3], FIELD_MAGIC, Path::new("f")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let err = decode::<Head>(&bytes[..10], FIELD_MAGIC, Path::new("f")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let err = decode::<Head>(&bytes, MODEL_MAGIC, Path::new("f")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn overwrite_guard() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        guard_overwrite(&p, false).unwrap();
        write_container(&p, FIELD_MAGIC, &head(), &[]).unwrap();
        assert!(matches!(guard_overwrite(&p, false), Err(Error::AlreadyExists(_))));
        guard_overwrite(&p, true).unwrap();
        let (h, v): (Head, _) = read_container(&p, FIELD_MAGIC).unwrap();
        assert_eq!(h, head());
        assert!(v.is_empty());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>(), 0..64), n in 0usize..1000) {
            let h = Head { name: "p".into(), n };
            let bytes = encode(SAMPLE_MAGIC, &h, &values).unwrap();
            let (h2, v2): (Head, Vec<f64>) = decode(&bytes, SAMPLE_MAGIC, Path::new("f")).unwrap();
            prop_assert_eq!(h2, h);
            prop_assert_eq!(
                v2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
