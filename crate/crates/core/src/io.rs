//! Tensor container, PGM previews, run configuration and latency CSV.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! "MI2V" | version u32 = 1 | count u32
//! per entry: name_len u32 | name utf-8 | rank u32 | dims u32 x rank | dtype u8 (0 = f32) | payload
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::LatencyRow;
use crate::denoiser::DenoiserConfig;
use crate::distill::ToyConfig;
use crate::error::{shape_err, Error, Result};
use crate::flow::{LatentSpec, SamplerConfig, LATENT_CHANNELS};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MI2V";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MAX_RANK: u32 = 8;

pub fn encode_container(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for (name, _) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateName(name.clone()));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(entries.len())?.to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&u32_len(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_len(t.rank())?.to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&u32_len(d)?.to_le_bytes());
        }
        out.push(DTYPE_F32);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{n} does not fit in u32")))
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(format!("{what} at byte {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf: bytes, at: 0 };
    if c.take(4, "magic").map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = c.u32("entry count")?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::InvalidArgument("entry name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        let rank = c.u32("rank")?;
        if rank > MAX_RANK {
            return Err(Error::RankTooLarge(rank as usize));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(c.u32("dims")? as usize);
        }
        let dtype = c.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::InvalidArgument(format!("unsupported dtype {dtype} in {name}")));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Truncated(format!("payload size of {name} overflows")))?;
        let payload = c.take(n, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    if c.at != bytes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} trailing bytes after the last entry",
            bytes.len() - c.at
        )));
    }
    Ok(out)
}

pub fn tensor_io_save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode_container(entries)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn tensor_io_load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_container(&bytes)
}

/// Binary PGM of one latent frame `(H * W, 128)`: channel mean per token,
/// min-max scaled to 0..255, rows top to bottom. A constant frame is mid-gray.
pub fn emit_pgm_preview(latent_frame: &Tensor, spec: &LatentSpec) -> Result<Vec<u8>> {
    let (w, h) = (spec.latent_width(), spec.latent_height());
    if latent_frame.dims() != [h * w, LATENT_CHANNELS] {
        return Err(shape_err(format!(
            "preview frame {:?}, expected [{}, {LATENT_CHANNELS}]",
            latent_frame.dims(),
            h * w
        )));
    }
    let means: Vec<f64> = latent_frame
        .data()
        .chunks_exact(LATENT_CHANNELS)
        .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() / LATENT_CHANNELS as f64)
        .collect();
    if means.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("preview frame"));
    }
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(means.iter().map(|&m| {
        if hi > lo {
            (255.0 * (m - lo) / (hi - lo)).round() as u8
        } else {
            128
        }
    }));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub lengths: Vec<usize>,
    pub reps: usize,
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            lengths: vec![256, 512, 1024, 2048, 2760, 4096, 8192],
            reps: 5,
            batch: 1,
            heads: 4,
            head_dim: 32,
        }
    }
}

/// The JSON run configuration. Every section is optional; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub denoiser: DenoiserConfig,
    pub sampler: SamplerConfig,
    pub bench: BenchSettings,
    pub distill_toy: ToyConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.sampler.grid()?;
        self.distill_toy.validate()?;
        if self.bench.reps < 3 || self.bench.lengths.is_empty() {
            return Err(Error::Config("bench needs reps >= 3 and at least one length".into()));
        }
        Ok(())
    }
}

pub const LATENCY_CSV_HEADER: &str = "kind,strategy,length,reps,median_ns,min_ns";

pub fn latency_csv(rows: &[LatencyRow]) -> String {
    let mut out = String::from(LATENCY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.kind.as_str(),
            r.strategy,
            r.length,
            r.reps,
            r.median_ns,
            r.min_ns
        );
    }
    out
}
