//! Binary dataset files, JSON sidecars and CSV export.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "IONDS1\0" | u32 version | u8 model | f64 T | u64 n_points | u32 n_dim
//! n_dim x (u32 len | name) | u8 split
//! u32 subsets | subsets x (u32 len | name | u64 count | f64 i_min i_max ts_min ts_max)
//! u64 records | records x (f64 i | f64 T_stim | n_dim * n_points f64)
//! ```

use super::{Dataset, ModelId, Record, Split, Subset};
use crate::error::{Error, Result};
use crate::ionic::StimulusProtocol;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const DATASET_MAGIC: &[u8; 7] = b"IONDS1\0";
pub const DATASET_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend(s.as_bytes());
    }
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
            .ok_or_else(|| Error::Format(format!("truncated dataset at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }
}

/// Inspection copy of the binary header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub model: ModelId,
    pub split: Split,
    pub t_end: f64,
    pub n_points: usize,
    pub channels: Vec<String>,
    pub subsets: Vec<Subset>,
    pub records: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    Ok(serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?)
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(DATASET_MAGIC.to_vec());
        w.u32(DATASET_VERSION);
        w.u8(self.model.tag());
        w.f64(self.t_end);
        w.u64(self.n_points as u64);
        w.u32(self.channels.len() as u32);
        for c in &self.channels {
            w.str(c);
        }
        w.u8(self.split.tag());
        w.u32(self.subsets.len() as u32);
        for s in &self.subsets {
            w.str(&s.name);
            w.u64(s.count as u64);
            for v in [s.amplitude.0, s.amplitude.1, s.duration.0, s.duration.1] {
                w.f64(v);
            }
        }
        w.u64(self.records.len() as u64);
        for r in &self.records {
            w.f64(r.protocol.amplitude);
            w.f64(r.protocol.duration);
            for &v in &r.values {
                w.f64(v);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < DATASET_MAGIC.len() || &bytes[..DATASET_MAGIC.len()] != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let mut r = Reader {
            bytes,
            pos: DATASET_MAGIC.len(),
        };
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let model = ModelId::from_tag(r.u8()?)?;
        let t_end = r.f64()?;
        let n_points = r.u64()? as usize;
        let n_dim = r.u32()? as usize;
        if n_points < 2 || !(t_end > 0.0) {
            return Err(Error::Format(format!("invalid grid (T = {t_end}, n = {n_points})")));
        }
        let channels = (0..n_dim).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let split = Split::from_tag(r.u8()?)?;
        let n_subsets = r.u32()? as usize;
        let mut subsets = Vec::new();
        for _ in 0..n_subsets {
            let name = r.str()?;
            let count = r.u64()? as usize;
            let (a, b, c, d) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            subsets.push(Subset {
                name,
                amplitude: (a, b),
                duration: (c, d),
                count,
            });
        }
        let n_records = r.u64()? as usize;
        let width = n_dim
            .checked_mul(n_points)
            .ok_or_else(|| Error::Format("oversized record".into()))?;
        let record_bytes = width
            .checked_add(2)
            .and_then(|w| w.checked_mul(8))
            .and_then(|w| w.checked_mul(n_records))
            .ok_or_else(|| Error::Format("oversized dataset".into()))?;
        if bytes.len() - r.pos != record_bytes {
            return Err(Error::Format(format!(
                "payload is {} bytes, header declares {record_bytes}",
                bytes.len() - r.pos
            )));
        }
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let amplitude = r.f64()?;
            let duration = r.f64()?;
            let values = r
                .take(width * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(Record {
                protocol: StimulusProtocol::new(amplitude, duration),
                values,
            });
        }
        let ds = Dataset {
            model,
            split,
            t_end,
            n_points,
            channels,
            subsets,
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            format: "IONDS1".into(),
            version: DATASET_VERSION,
            model: self.model,
            split: self.split,
            t_end: self.t_end,
            n_points: self.n_points,
            channels: self.channels.clone(),
            subsets: self.subsets.clone(),
            records: self.records.len(),
        }
    }

    /// Writes the binary file and its `.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        fs::write(
            sidecar_path(path),
            serde_json::to_string_pretty(&self.sidecar())? + "\n",
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// `time, I_app, <channels...>` for record `k`.
pub fn write_record_csv(ds: &Dataset, k: usize, path: &Path) -> Result<()> {
    if k >= ds.len() {
        return Err(Error::Config(format!("record {k} out of range ({} records)", ds.len())));
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "time,I_app")?;
    for c in &ds.channels {
        write!(f, ",{c}")?;
    }
    writeln!(f)?;
    let stim = ds.stimulus(k);
    for (p, t) in ds.times().iter().enumerate() {
        write!(f, "{t},{}", stim[p])?;
        for j in 0..ds.n_dim() {
            write!(f, ",{}", ds.channel(k, j)[p])?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}
