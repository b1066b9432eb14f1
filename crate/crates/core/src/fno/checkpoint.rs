//! Checkpoint files: a JSON metadata document plus a little-endian weight
//! blob.
//!
//! Blob layout: magic `FNOW1\0`, then one record per tensor until EOF:
//!
//! ```text
//! u32 name length | name (UTF-8) | u32 rank | u64 extents[rank] | u8 dtype | f64 payload
//! ```
//!
//! dtype is 0 for real and 1 for complex; complex payloads are interleaved
//! `(re, im)`. Spectral weights are written as complex `[in, out, modes]`.

use super::{FnoConfig, FnoParams};
use crate::dataset::{ModelId, NormStats};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const WEIGHTS_MAGIC: &[u8; 6] = b"FNOW1\0";
const META_FORMAT: u32 = 1;

/// Where the weights came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub best_val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub model: ModelId,
    pub t_end: f64,
    pub n_points: usize,
    /// Whether the normalized time coordinate is fed as an input channel.
    pub coord_channel: bool,
    pub config: FnoConfig,
    pub normalization: NormStats,
    pub provenance: Provenance,
}

impl CheckpointMeta {
    pub fn new(
        model: ModelId,
        t_end: f64,
        n_points: usize,
        coord_channel: bool,
        config: FnoConfig,
        normalization: NormStats,
        provenance: Provenance,
    ) -> Self {
        Self {
            format: META_FORMAT,
            model,
            t_end,
            n_points,
            coord_channel,
            config,
            normalization,
            provenance,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: FnoParams,
}

fn is_spectral(name: &str) -> bool {
    name.ends_with(".spectral")
}

pub fn encode_weights(params: &FnoParams) -> Vec<u8> {
    let mut buf = WEIGHTS_MAGIC.to_vec();
    let names = params.names();
    for (name, t) in names.iter().zip(params.iter()) {
        let (extents, dtype) = if is_spectral(name) {
            (&t.shape()[..3], 1u8)
        } else {
            (t.shape(), 0u8)
        };
        buf.extend((name.len() as u32).to_le_bytes());
        buf.extend(name.as_bytes());
        buf.extend((extents.len() as u32).to_le_bytes());
        for &e in extents {
            buf.extend((e as u64).to_le_bytes());
        }
        buf.push(dtype);
        for v in t.data() {
            buf.extend(v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated weight blob".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a blob into tensors shaped like `template`.
pub fn decode_weights(bytes: &[u8], template: &FnoParams) -> Result<FnoParams> {
    if bytes.len() < 6 || &bytes[..6] != WEIGHTS_MAGIC {
        return Err(Error::Format("bad weight blob magic".into()));
    }
    let mut r = Reader { bytes, pos: 6 };
    let mut decoded = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let extents = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = match r.take(1)?[0] {
            0 => DType::Real,
            1 => DType::Complex,
            t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
        };
        let count = extents.iter().product::<usize>() * dtype.width();
        let payload = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("oversized tensor".into()))?)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut shape = extents;
        if dtype == DType::Complex {
            shape.push(2);
        }
        decoded.push((name, Tensor::new(&shape, data)?));
    }

    let mut it = decoded.into_iter();
    let mut failure = None;
    let params = template.map_named(|name, t| {
        match it.next() {
            Some((n, v)) if n == name && v.shape() == t.shape() => v,
            Some((n, v)) => {
                failure.get_or_insert_with(|| {
                    format!("expected `{name}` {:?}, found `{n}` {:?}", t.shape(), v.shape())
                });
                Tensor::zeros_like(t)
            }
            None => {
                failure.get_or_insert_with(|| format!("missing tensor `{name}`"));
                Tensor::zeros_like(t)
            }
        }
    });
    if let Some(msg) = failure {
        return Err(Error::Format(msg));
    }
    if it.next().is_some() {
        return Err(Error::Format("unexpected extra tensors".into()));
    }
    Ok(params)
}

impl Checkpoint {
    pub fn save(&self, meta_path: &Path, weights_path: &Path) -> Result<()> {
        fs::write(meta_path, serde_json::to_string_pretty(&self.meta)? + "\n")?;
        fs::write(weights_path, encode_weights(&self.params))?;
        Ok(())
    }

    pub fn load(meta_path: &Path, weights_path: &Path) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
        if meta.format != META_FORMAT {
            return Err(Error::Format(format!(
                "unsupported checkpoint format {}",
                meta.format
            )));
        }
        meta.config.validate()?;
        let template = super::init(&meta.config, 0)?;
        let params = decode_weights(&fs::read(weights_path)?, &template)?;
        Ok(Self { meta, params })
    }

    /// `model.json` + `model.fnow` inside `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.save(&dir.join("model.json"), &dir.join("model.fnow"))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Self::load(&dir.join("model.json"), &dir.join("model.fnow"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fno::{init, ActivationKind, Variant};

    fn cfg() -> FnoConfig {
        FnoConfig {
            in_channels: 2,
            out_channels: 4,
            width: 6,
            depth: 2,
            modes: 3,
            activation: ActivationKind::Tanh,
            padding: 1,
            variant: Variant::Mlp,
            projection_hidden: 7,
        }
    }

    #[test]
    fn blob_round_trip_is_bitwise() {
        let p = init(&cfg(), 5).unwrap();
        let blob = encode_weights(&p);
        assert_eq!(&blob[..6], WEIGHTS_MAGIC);
        let back = decode_weights(&blob, &init(&cfg(), 0).unwrap()).unwrap();
        for (a, b) in p.iter().iter().zip(back.iter()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn spectral_records_are_complex() {
        let p = init(&cfg(), 5).unwrap();
        let blob = encode_weights(&p);
        // first record is lift.weight, real; locate the first spectral record
        let name = b"layers.0.spectral";
        let at = blob.windows(name.len()).position(|w| w == name).unwrap();
        let rank_at = at + name.len();
        let rank = u32::from_le_bytes(blob[rank_at..rank_at + 4].try_into().unwrap());
        assert_eq!(rank, 3);
        let dtype_at = rank_at + 4 + 3 * 8;
        assert_eq!(blob[dtype_at], 1);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = init(&cfg(), 5).unwrap();
        let mut blob = encode_weights(&p);
        let template = init(&cfg(), 0).unwrap();
        assert!(matches!(
            decode_weights(&blob[..blob.len() - 3], &template),
            Err(Error::Format(_))
        ));
        blob[0] = b'X';
        assert!(matches!(decode_weights(&blob, &template), Err(Error::Format(_))));
    }
}
