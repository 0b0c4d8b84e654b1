//! `.vol` binary container and plain-text key-value files.
//!
//! `.vol` layout (all little-endian):
//!
//! | bytes | content                          |
//! |-------|----------------------------------|
//! | 8     | magic `NEUVOL01`                 |
//! | 4     | dtype tag, u32 (1 = f32, 2 = i32) |
//! | 32    | shape H, W, D, C as u64          |
//! | 24    | spacing sH, sW, sD as f64        |
//! | ...   | raw buffer, row-major, C fastest |

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{LabelVolume, Spacing, Volume4};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"NEUVOL01";
pub const DTYPE_F32: u32 = 1;
pub const DTYPE_I32: u32 = 2;
const HEADER_LEN: usize = 8 + 4 + 32 + 24;

/// Decoded contents of a `.vol` file.
#[derive(Clone, Debug, PartialEq)]
pub enum VolFile {
    F32(Volume4<f32>),
    /// Integer volume; labels use a single channel.
    I32 {
        data: Vec<i32>,
        shape: [usize; 4],
        spacing: Spacing,
    },
}

fn write_header(out: &mut Vec<u8>, dtype: u32, shape: [usize; 4], spacing: Spacing) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&dtype.to_le_bytes());
    for n in shape {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
}

pub fn encode_volume<T: Scalar>(v: &Volume4<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.len());
    write_header(&mut out, DTYPE_F32, v.shape(), v.spacing());
    for x in v.data() {
        out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn encode_labels(l: &LabelVolume, spacing: Spacing) -> Vec<u8> {
    let s = l.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * l.len());
    write_header(&mut out, DTYPE_I32, [s[0], s[1], s[2], 1], spacing);
    for &x in l.data() {
        out.extend_from_slice(&(x as i32).to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let chunk = self.bytes.get(self.pos..self.pos + N)?;
        self.pos += N;
        chunk.try_into().ok()
    }
}

/// Decodes one `.vol` record from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_vol(bytes: &[u8], path: &Path) -> Result<(VolFile, usize)> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 8] = cur.take().ok_or_else(|| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic, expected NEUVOL01"));
    }
    let dtype = u32::from_le_bytes(cur.take().ok_or_else(|| bad("truncated header"))?);
    let mut shape = [0usize; 4];
    for n in shape.iter_mut() {
        *n = u64::from_le_bytes(cur.take().ok_or_else(|| bad("truncated header"))?) as usize;
    }
    let mut spacing = [0f64; 3];
    for s in spacing.iter_mut() {
        *s = f64::from_le_bytes(cur.take().ok_or_else(|| bad("truncated header"))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| bad("shape overflows"))?;
    let body = bytes
        .get(HEADER_LEN..)
        .and_then(|b| b.get(..count.checked_mul(4)?))
        .ok_or_else(|| bad("buffer shorter than shape requires"))?;
    let consumed = HEADER_LEN + body.len();
    let file = match dtype {
        DTYPE_F32 => {
            let data = body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            VolFile::F32(Volume4::new(data, shape, spacing).map_err(|e| bad(&e.to_string()))?)
        }
        DTYPE_I32 => {
            if shape.contains(&0) || !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
                return Err(bad("invalid shape or spacing"));
            }
            let data = body
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            VolFile::I32 {
                data,
                shape,
                spacing,
            }
        }
        other => return Err(bad(&format!("unknown dtype tag {other}"))),
    };
    Ok((file, consumed))
}

pub fn read_vol(path: &Path) -> Result<VolFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (file, used) = decode_vol(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(file)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_volume<T: Scalar>(path: &Path, v: &Volume4<T>) -> Result<()> {
    write_bytes(path, &encode_volume(v))
}

pub fn read_volume(path: &Path) -> Result<Volume4<f32>> {
    match read_vol(path)? {
        VolFile::F32(v) => Ok(v),
        VolFile::I32 { .. } => Err(Error::Format {
            path: path.to_path_buf(),
            reason: "expected f32 volume, found i32".into(),
        }),
    }
}

pub fn write_labels(path: &Path, l: &LabelVolume, spacing: Spacing) -> Result<()> {
    write_bytes(path, &encode_labels(l, spacing))
}

/// Reads an i32 `.vol` as labels with the given class count.
pub fn read_labels(path: &Path, num_classes: u32) -> Result<(LabelVolume, Spacing)> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    match read_vol(path)? {
        VolFile::I32 {
            data,
            shape,
            spacing,
        } => {
            if shape[3] != 1 {
                return Err(bad(format!("label volume has {} channels", shape[3])));
            }
            let data = data
                .into_iter()
                .map(|v| u32::try_from(v).map_err(|_| bad(format!("negative label {v}"))))
                .collect::<Result<Vec<_>>>()?;
            let labels = LabelVolume::new(data, [shape[0], shape[1], shape[2]], num_classes)
                .map_err(|e| bad(e.to_string()))?;
            Ok((labels, spacing))
        }
        VolFile::F32(_) => Err(bad("expected i32 label volume, found f32".into())),
    }
}

/// Ordered `key=value` records. Blank lines and `#` comments are skipped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    order: Vec<String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut kv = KeyValues::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
            kv.insert(k.trim(), v.trim());
        }
        Ok(kv)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        if !self.entries.contains_key(&key) {
            self.order.push(key.clone());
        }
        self.entries.insert(key, value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn require(&self, key: &str) -> std::result::Result<&str, String> {
        self.get(key).ok_or_else(|| format!("missing key `{key}`"))
    }

    pub fn parse_value<V: std::str::FromStr>(&self, key: &str) -> std::result::Result<V, String> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| format!("key `{key}`: cannot parse `{raw}`"))
    }

    /// Comma-separated list value.
    pub fn parse_list<V: std::str::FromStr>(&self, key: &str) -> std::result::Result<Vec<V>, String> {
        let raw = self.require(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| format!("key `{key}`: cannot parse element `{s}`"))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in &self.order {
            out.push_str(k);
            out.push('=');
            out.push_str(&self.entries[k]);
            out.push('\n');
        }
        out
    }
}

pub fn read_key_values(path: &Path) -> Result<KeyValues> {
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    KeyValues::parse(&text).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn join_list<V: ToString>(values: &[V]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let v = Volume4::new(vec![1.5f32, -2.0], [1, 1, 2, 1], [0.5, 1.0, 2.0]).unwrap();
        let bytes = encode_volume(&v);
        assert_eq!(&bytes[..8], b"NEUVOL01");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1u64.to_le_bytes());
        assert_eq!(&bytes[28..36], &2u64.to_le_bytes());
        assert_eq!(&bytes[36..44], &1u64.to_le_bytes());
        assert_eq!(&bytes[44..52], &0.5f64.to_le_bytes());
        assert_eq!(&bytes[68..72], &1.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 76);
        let (back, used) = decode_vol(&bytes, Path::new("mem")).unwrap();
        assert_eq!(used, 76);
        assert_eq!(back, VolFile::F32(v));
    }

    #[test]
    fn labels_round_trip_and_truncation_is_rejected() {
        let l = LabelVolume::new(vec![0, 1, 2, 1], [2, 2, 1], 3).unwrap();
        let bytes = encode_labels(&l, [1.0, 2.0, 3.0]);
        let (file, _) = decode_vol(&bytes, Path::new("mem")).unwrap();
        match file {
            VolFile::I32 { data, shape, .. } => {
                assert_eq!(data, vec![0, 1, 2, 1]);
                assert_eq!(shape, [2, 2, 1, 1]);
            }
            _ => panic!("expected i32"),
        }
        assert!(decode_vol(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_vol(&wrong, Path::new("mem")).is_err());
    }

    #[test]
    fn key_values_keep_insertion_order() {
        let kv = KeyValues::parse("# header\nb = 2\na=1,2,3\n\n").unwrap();
        assert_eq!(kv.keys().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(kv.parse_list::<u32>("a").unwrap(), vec![1, 2, 3]);
        assert_eq!(kv.parse_value::<f64>("b").unwrap(), 2.0);
        assert!(KeyValues::parse("novalue").is_err());
        assert_eq!(KeyValues::parse(&kv.to_text()).unwrap(), kv);
    }
}
