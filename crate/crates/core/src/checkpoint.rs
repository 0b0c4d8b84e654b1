//! `.nvckpt` checkpoints.
//!
//! A checkpoint is a plain-text `key=value` header terminated by a line
//! reading `end_header`, followed by one `.vol` record per parameter in
//! manifest order and, when present, one record per momentum buffer in the
//! same order. Parameters are stored as `[n, 1, 1, 1]` f32 volumes, so an
//! f32 network round-trips bit for bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{decode_vol, encode_volume, write_bytes, KeyValues, VolFile};
use crate::network::{NetConfig, Network, Param};
use crate::volume::Volume4;

pub const CHECKPOINT_TAG: &str = "nvckpt";
const END_MARKER: &str = "end_header\n";
const META_PREFIX: &str = "meta.";

/// Network parameters plus optional optimizer state and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: Network<f32>,
    pub momentum: Option<Vec<Vec<f32>>>,
    pub meta: KeyValues,
}

fn flat_record(values: &[f32]) -> Vec<u8> {
    let v = Volume4::new(values.to_vec(), [values.len(), 1, 1, 1], [1.0; 3]).expect("non-empty parameter");
    encode_volume(&v)
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let net = &ckpt.net;
    let mut header = KeyValues::new();
    header.insert("format", CHECKPOINT_TAG);
    header.insert("version", 1);
    let config = net.config().to_key_values();
    for key in config.keys() {
        header.insert(key, config.get(key).unwrap_or_default());
    }
    let manifest: Vec<String> = net
        .params()
        .iter()
        .map(|p| format!("{}:{}:{}", p.name, p.values.len(), u8::from(p.frozen)))
        .collect();
    header.insert("params", manifest.join(","));
    header.insert("momentum", u8::from(ckpt.momentum.is_some()));
    for key in ckpt.meta.keys() {
        header.insert(format!("{META_PREFIX}{key}"), ckpt.meta.get(key).unwrap_or_default());
    }
    let mut out = header.to_text().into_bytes();
    out.extend_from_slice(END_MARKER.as_bytes());
    for p in net.params() {
        out.extend(flat_record(&p.values));
    }
    if let Some(m) = &ckpt.momentum {
        for buf in m {
            out.extend(flat_record(buf));
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let marker = END_MARKER.as_bytes();
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("missing end_header line".into()))?;
    let text = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
    let header = KeyValues::parse(text).map_err(bad)?;
    if header.get("format") != Some(CHECKPOINT_TAG) {
        return Err(bad(format!("not a {CHECKPOINT_TAG} file")));
    }
    let config = NetConfig::from_key_values(&header)?;
    let manifest = header.require("params").map_err(bad)?;
    let entries: Vec<(String, usize, bool)> = manifest
        .split(',')
        .map(|item| {
            let mut it = item.split(':');
            match (it.next(), it.next().and_then(|n| n.parse().ok()), it.next(), it.next()) {
                (Some(name), Some(len), Some(f @ ("0" | "1")), None) => Ok((name.to_string(), len, f == "1")),
                _ => Err(bad(format!("bad manifest entry `{item}`"))),
            }
        })
        .collect::<Result<_>>()?;
    let has_momentum = header.get("momentum") == Some("1");

    let mut pos = split + marker.len();
    let mut next_record = |expect: usize, name: &str| -> Result<Vec<f32>> {
        let (file, used) = decode_vol(&bytes[pos..], path)?;
        pos += used;
        match file {
            VolFile::F32(v) if v.len() == expect => Ok(v.into_data()),
            _ => Err(bad(format!("record for {name} does not hold {expect} f32 values"))),
        }
    };
    let mut params = Vec::with_capacity(entries.len());
    for (name, len, frozen) in &entries {
        params.push(Param {
            values: next_record(*len, name)?,
            name: name.clone(),
            frozen: *frozen,
        });
    }
    let momentum = if has_momentum {
        let mut m = Vec::with_capacity(entries.len());
        for (name, len, _) in &entries {
            m.push(next_record(*len, &format!("momentum of {name}"))?);
        }
        Some(m)
    } else {
        None
    };
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    let mut meta = KeyValues::new();
    for key in header.keys() {
        if let Some(stripped) = key.strip_prefix(META_PREFIX) {
            meta.insert(stripped, header.get(key).unwrap_or_default());
        }
    }
    Ok(Checkpoint {
        net: Network::from_params(config, params)?,
        momentum,
        meta,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_bytes(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
