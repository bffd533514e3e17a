//! Error-bounded predictive lossy codec for 3D float volumes.
//!
//! Order-1 Lorenzo prediction over already-reconstructed neighbors, linear
//! quantization with bin width 2e, an exact-value escape path for spiky
//! elements, and a canonical prefix coder over the quantization codes.
//! Compression yields the decompressed volume as a by-product, which the
//! enhancement stage consumes directly.

mod huffman;

use crate::error::{Error, Result};
use crate::volume::Volume;
use crate::wire::{dims_from_u32, ByteReader, ByteWriter};

pub const PAYLOAD_MAGIC: &[u8; 4] = b"GWLP";
pub const PAYLOAD_VERSION: u16 = 1;
pub const DEFAULT_MAX_QUANT_CODE: u32 = (1 << 15) - 1;
const MAX_SUPPORTED_QUANT_CODE: u32 = 1 << 20;

/// Prediction scheme; only the order-1 3D Lorenzo predictor is built in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predictor {
    Lorenzo3d,
}

impl Predictor {
    fn id(self) -> u8 {
        0
    }

    fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Self::Lorenzo3d),
            other => Err(Error::Format(format!("unknown predictor id {other}"))),
        }
    }
}

/// Absolute bound derived from a relative bound and the data's value range.
pub fn abs_bound_from_reb(reb: f64, range: f64) -> f64 {
    reb * range
}

/// Codec parameters. The absolute bound is fixed at construction and stored
/// in the payload; the reconstruction side never sees the original range.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub reb: f64,
    pub e_abs: f64,
    pub predictor: Predictor,
    pub max_quant_code: u32,
}

impl CodecConfig {
    /// Config from a relative bound and the original volume's range.
    pub fn from_reb(reb: f64, range: f64) -> Result<Self> {
        Self::with_abs_bound(reb, abs_bound_from_reb(reb, range))
    }

    pub fn with_abs_bound(reb: f64, e_abs: f64) -> Result<Self> {
        let cfg = Self {
            reb,
            e_abs,
            predictor: Predictor::Lorenzo3d,
            max_quant_code: DEFAULT_MAX_QUANT_CODE,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reb > 0.0) || !self.reb.is_finite() {
            return Err(Error::Config(format!(
                "relative error bound must be positive and finite, got {}",
                self.reb
            )));
        }
        if !(self.e_abs > 0.0) || !self.e_abs.is_finite() {
            return Err(Error::Config(format!(
                "absolute error bound must be positive and finite, got {}",
                self.e_abs
            )));
        }
        if self.max_quant_code < 1 || self.max_quant_code > MAX_SUPPORTED_QUANT_CODE {
            return Err(Error::Config(format!(
                "max_quant_code must be in 1..={MAX_SUPPORTED_QUANT_CODE}, got {}",
                self.max_quant_code
            )));
        }
        Ok(())
    }
}

/// Compressed form of one volume: entropy-coded quantization codes plus
/// exact-value records for elements the quantizer cannot bound.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedPayload {
    pub config: CodecConfig,
    pub dims: (usize, usize, usize),
    code_stream: Vec<u8>,
    outliers: Vec<(u64, f32)>,
}

impl CompressedPayload {
    pub fn outlier_count(&self) -> usize {
        self.outliers.len()
    }

    /// Serializes to the on-disk payload layout, checksum included.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (d0, d1, d2) = self.dims;
        if d0 > u32::MAX as usize || d1 > u32::MAX as usize || d2 > u32::MAX as usize {
            return Err(Error::Format("dims exceed the u32 header fields".into()));
        }
        let mut w = ByteWriter::new();
        w.bytes(PAYLOAD_MAGIC);
        w.u16(PAYLOAD_VERSION);
        w.u8(self.config.predictor.id());
        w.u32(self.config.max_quant_code);
        w.f64(self.config.reb);
        w.f64(self.config.e_abs);
        w.u32(d0 as u32);
        w.u32(d1 as u32);
        w.u32(d2 as u32);
        w.u64(self.outliers.len() as u64);
        for &(idx, v) in &self.outliers {
            w.u64(idx);
            w.f32(v);
        }
        w.u64(self.code_stream.len() as u64);
        w.bytes(&self.code_stream);
        Ok(w.finish_with_crc())
    }

    /// Parses and checksum-verifies a serialized payload.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::with_crc_checked(bytes, "payload")?;
        r.magic(PAYLOAD_MAGIC)?;
        let version = r.u16()?;
        if version != PAYLOAD_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let predictor = Predictor::from_id(r.u8()?)?;
        let max_quant_code = r.u32()?;
        let reb = r.f64()?;
        let e_abs = r.f64()?;
        let dims = dims_from_u32(r.u32()?, r.u32()?, r.u32()?)?;
        let n_outliers = r.u64()? as usize;
        let mut outliers = Vec::with_capacity(n_outliers.min(1 << 20));
        let mut prev: Option<u64> = None;
        for _ in 0..n_outliers {
            let idx = r.u64()?;
            let v = r.f32()?;
            if let Some(p) = prev {
                if idx <= p {
                    return Err(Error::Format(
                        "outlier indices must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(idx);
            outliers.push((idx, v));
        }
        let stream_len = r.u64()? as usize;
        let code_stream = r.bytes(stream_len)?.to_vec();
        r.expect_end()?;
        let config = CodecConfig {
            reb,
            e_abs,
            predictor,
            max_quant_code,
        };
        config.validate()?;
        Ok(Self {
            config,
            dims,
            code_stream,
            outliers,
        })
    }
}

/// Serialized payload size in bytes.
pub fn compressed_size(payload: &CompressedPayload) -> Result<usize> {
    Ok(payload.to_bytes()?.len())
}

/// Compression ratio |X| / |Z| for a volume against its payload.
pub fn ratio(vol: &Volume, payload: &CompressedPayload) -> Result<f64> {
    Ok((vol.len() * 4) as f64 / compressed_size(payload)? as f64)
}

/// Compresses `vol`, returning the payload and the decompressed volume the
/// reconstruction side will reproduce bit-exactly.
pub fn compress(vol: &Volume, cfg: &CodecConfig) -> Result<(CompressedPayload, Volume)> {
    cfg.validate()?;
    if let Some(idx) = vol.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "non-finite value at flat index {idx}"
        )));
    }

    let n = vol.len();
    let m = cfg.max_quant_code;
    let sentinel = outlier_symbol(m);
    let e = cfg.e_abs;
    let two_e = 2.0 * e;

    let mut recon = vec![0f32; n];
    let mut codes = Vec::with_capacity(n);
    let mut outliers = Vec::new();

    let (d0, d1, d2) = vol.dims();
    let mut idx = 0usize;
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let pred = lorenzo_pred(&recon, (d1, d2), i, j, k);
                let x = vol.values()[idx];
                let q = ((x as f64 - pred) / two_e).round();
                let mut escape = !(q.abs() <= m as f64);
                let mut xr = 0f32;
                if !escape {
                    xr = (pred + two_e * q) as f32;
                    // Rounding can nudge the reconstruction past the bound;
                    // such elements are stored exactly instead.
                    escape = !((x as f64 - xr as f64).abs() <= e) || !xr.is_finite();
                }
                if escape {
                    codes.push(sentinel);
                    outliers.push((idx as u64, x));
                    recon[idx] = x;
                } else {
                    codes.push((q as i64 + m as i64) as u32);
                    recon[idx] = xr;
                }
                idx += 1;
            }
        }
    }

    let code_stream = huffman::encode(&codes, sentinel + 1)?;
    let payload = CompressedPayload {
        config: cfg.clone(),
        dims: vol.dims(),
        code_stream,
        outliers,
    };
    let decompressed = Volume::new(vol.dims(), recon)?;
    Ok((payload, decompressed))
}

/// Reconstructs the volume from a payload. Pure: equals the decompressed
/// volume emitted by [`compress`] bit-exactly.
pub fn decompress(payload: &CompressedPayload) -> Result<Volume> {
    payload.config.validate()?;
    let (d0, d1, d2) = payload.dims;
    let n = d0
        .checked_mul(d1)
        .and_then(|p| p.checked_mul(d2))
        .ok_or_else(|| Error::Format("dims overflow".into()))?;

    let codes = huffman::decode(&payload.code_stream)?;
    if codes.len() != n {
        return Err(Error::Format(format!(
            "code stream holds {} codes but dims require {}",
            codes.len(),
            n
        )));
    }

    let m = payload.config.max_quant_code;
    let sentinel = outlier_symbol(m);
    let two_e = 2.0 * payload.config.e_abs;

    let mut recon = vec![0f32; n];
    let mut next_outlier = 0usize;
    let mut idx = 0usize;
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let code = codes[idx];
                if code == sentinel {
                    let (oidx, v) = *payload.outliers.get(next_outlier).ok_or_else(|| {
                        Error::Corrupt("more escape codes than outlier records".into())
                    })?;
                    if oidx != idx as u64 {
                        return Err(Error::Corrupt(format!(
                            "outlier record index {oidx} does not match element {idx}"
                        )));
                    }
                    if !v.is_finite() {
                        return Err(Error::Data(format!(
                            "non-finite outlier value at flat index {idx}"
                        )));
                    }
                    recon[idx] = v;
                    next_outlier += 1;
                } else if code <= 2 * m {
                    let q = code as i64 - m as i64;
                    let pred = lorenzo_pred(&recon, (d1, d2), i, j, k);
                    recon[idx] = (pred + two_e * q as f64) as f32;
                } else {
                    return Err(Error::Corrupt(format!(
                        "quantization code {code} outside alphabet"
                    )));
                }
                idx += 1;
            }
        }
    }
    if next_outlier != payload.outliers.len() {
        return Err(Error::Corrupt(
            "unconsumed outlier records after decoding".into(),
        ));
    }
    Volume::new(payload.dims, recon)
}

fn outlier_symbol(max_quant_code: u32) -> u32 {
    2 * max_quant_code + 1
}

/// Order-1 Lorenzo prediction from already-reconstructed neighbors; indices
/// off the low edge contribute zero.
#[inline]
fn lorenzo_pred(recon: &[f32], (d1, d2): (usize, usize), i: usize, j: usize, k: usize) -> f64 {
    let at = |ii: usize, jj: usize, kk: usize| recon[(ii * d1 + jj) * d2 + kk] as f64;
    let mut pred = 0.0;
    if i > 0 {
        pred += at(i - 1, j, k);
    }
    if j > 0 {
        pred += at(i, j - 1, k);
    }
    if k > 0 {
        pred += at(i, j, k - 1);
    }
    if i > 0 && j > 0 {
        pred -= at(i - 1, j - 1, k);
    }
    if i > 0 && k > 0 {
        pred -= at(i - 1, j, k - 1);
    }
    if j > 0 && k > 0 {
        pred -= at(i, j - 1, k - 1);
    }
    if i > 0 && j > 0 && k > 0 {
        pred += at(i - 1, j - 1, k - 1);
    }
    pred
}
