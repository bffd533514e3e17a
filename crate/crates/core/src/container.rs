//! Byte-exact archive formats.
//!
//! `.gwlz` carries a compressed payload plus (optionally) the enhancer
//! bundle and a quality record measured at compression time. `.gwe` is the
//! standalone sidecar for the enhance-only mode: just the bundle plus
//! enough provenance to refuse mismatched volumes. All integers and floats
//! are little-endian; both files end in a CRC32 over everything before it.

use std::fs;
use std::path::Path;

use crate::codec::CompressedPayload;
use crate::enhancer::{ArchHyper, EnhancerBundle};
use crate::error::{Error, Result};
use crate::grouping::{GroupSpec, GroupStat, GroupStats, GroupStrategy};
use crate::nn::{deserialize_weights, serialize_weights};
use crate::volume::Volume;
use crate::wire::{dims_from_u32, ByteReader, ByteWriter};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"GWLZ";
pub const SIDECAR_MAGIC: &[u8; 4] = b"GWLE";
pub const CONTAINER_VERSION: u16 = 1;

pub const FLAG_HAS_ENHANCER: u16 = 1 << 0;
pub const FLAG_CLAMP_RECOMMENDED: u16 = 1 << 1;

/// PSNR of the plain and enhanced reconstruction, measured while the
/// original volume was still available.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityRecord {
    pub psnr_base: f64,
    pub psnr_enhanced: f64,
}

/// Parsed `.gwlz` contents.
#[derive(Debug)]
pub struct Archive {
    pub version: u16,
    pub flags: u16,
    pub dims: (usize, usize, usize),
    pub reb: f64,
    pub e_abs: f64,
    pub axis: usize,
    pub payload: CompressedPayload,
    pub bundle: Option<EnhancerBundle>,
    pub quality: QualityRecord,
    /// Byte lengths of the two sections as stored, for overhead accounting.
    pub payload_bytes: usize,
    pub enhancer_bytes: usize,
}

/// Writes a `.gwlz` archive; returns the file size in bytes.
pub fn write_archive(
    path: &Path,
    payload: &CompressedPayload,
    bundle: Option<&EnhancerBundle>,
    quality: &QualityRecord,
    clamp_recommended: bool,
) -> Result<u64> {
    let bytes = archive_to_bytes(payload, bundle, quality, clamp_recommended)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn archive_to_bytes(
    payload: &CompressedPayload,
    bundle: Option<&EnhancerBundle>,
    quality: &QualityRecord,
    clamp_recommended: bool,
) -> Result<Vec<u8>> {
    let (d0, d1, d2) = payload.dims;
    let mut flags = 0u16;
    if bundle.is_some() {
        flags |= FLAG_HAS_ENHANCER;
    }
    if clamp_recommended {
        flags |= FLAG_CLAMP_RECOMMENDED;
    }
    let mut w = ByteWriter::new();
    w.bytes(ARCHIVE_MAGIC);
    w.u16(CONTAINER_VERSION);
    w.u16(flags);
    w.u32(d0 as u32);
    w.u32(d1 as u32);
    w.u32(d2 as u32);
    w.f64(payload.config.reb);
    w.f64(payload.config.e_abs);
    w.u8(bundle.map(|b| b.axis as u8).unwrap_or(0));
    let payload_bytes = payload.to_bytes()?;
    w.u64(payload_bytes.len() as u64);
    w.bytes(&payload_bytes);
    if let Some(bundle) = bundle {
        let blob = enhancer_blob_to_bytes(bundle)?;
        w.u64(blob.len() as u64);
        w.bytes(&blob);
    }
    w.f64(quality.psnr_base);
    w.f64(quality.psnr_enhanced);
    Ok(w.finish_with_crc())
}

/// Reads and checksum-verifies a `.gwlz` archive.
pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path)?;
    archive_from_bytes(&bytes)
}

pub fn archive_from_bytes(bytes: &[u8]) -> Result<Archive> {
    let mut r = ByteReader::with_crc_checked(bytes, "archive")?;
    r.magic(ARCHIVE_MAGIC)?;
    let version = r.u16()?;
    if version != CONTAINER_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let flags = r.u16()?;
    let dims = dims_from_u32(r.u32()?, r.u32()?, r.u32()?)?;
    let reb = r.f64()?;
    let e_abs = r.f64()?;
    let axis = r.u8()? as usize;
    if axis > 2 {
        return Err(Error::Format(format!("axis {axis} out of range")));
    }
    let payload_len = r.u64()? as usize;
    let payload_bytes = r.bytes(payload_len)?;
    let payload = CompressedPayload::from_bytes(payload_bytes)?;
    if payload.dims != dims {
        return Err(Error::Format(
            "payload dims disagree with archive header".into(),
        ));
    }
    let (bundle, enhancer_bytes) = if flags & FLAG_HAS_ENHANCER != 0 {
        let blob_len = r.u64()? as usize;
        let blob = r.bytes(blob_len)?;
        let bundle = enhancer_blob_from_bytes(blob, axis)?;
        let total: u64 = bundle.stats.all().iter().map(|s| s.count).sum();
        if total != (dims.0 * dims.1 * dims.2) as u64 {
            return Err(Error::Format(
                "enhancer stats cover a different element count than dims".into(),
            ));
        }
        (Some(bundle), blob_len)
    } else {
        (None, 0)
    };
    let quality = QualityRecord {
        psnr_base: r.f64()?,
        psnr_enhanced: r.f64()?,
    };
    r.expect_end()?;
    Ok(Archive {
        version,
        flags,
        dims,
        reb,
        e_abs,
        axis,
        payload,
        bundle,
        quality,
        payload_bytes: payload_len,
        enhancer_bytes,
    })
}

/// Enhancer-section bytes over payload-section bytes; 0 without an enhancer.
pub fn overhead_ratio(archive: &Archive) -> f64 {
    overhead_from_sizes(archive.enhancer_bytes, archive.payload_bytes)
}

pub fn overhead_from_sizes(enhancer_bytes: usize, payload_bytes: usize) -> f64 {
    if enhancer_bytes == 0 {
        return 0.0;
    }
    enhancer_bytes as f64 / payload_bytes as f64
}

/// Serialized size of a bundle's enhancer section.
pub fn enhancer_blob_bytes(bundle: &EnhancerBundle) -> Result<usize> {
    Ok(enhancer_blob_to_bytes(bundle)?.len())
}

/// Weight bytes alone (excluding grouping metadata) in a bundle's blob.
pub fn enhancer_weight_bytes(bundle: &EnhancerBundle) -> usize {
    bundle
        .models
        .iter()
        .flatten()
        .map(|m| m.state_count() * 4)
        .sum()
}

fn enhancer_blob_to_bytes(bundle: &EnhancerBundle) -> Result<Vec<u8>> {
    let n_groups = bundle.spec.n_groups();
    if bundle.models.len() != n_groups || bundle.stats.len() != n_groups {
        return Err(Error::Format(
            "bundle group count disagrees across spec, stats and models".into(),
        ));
    }
    let mut w = ByteWriter::new();
    w.u32(n_groups as u32);
    w.u8(bundle.spec.strategy().id());
    for &b in bundle.spec.boundaries() {
        w.f64(b);
    }
    for (st, model) in bundle.stats.all().iter().zip(&bundle.models) {
        w.f32(st.in_min);
        w.f32(st.in_max);
        w.f32(st.res_scale);
        w.u64(st.count);
        w.u8(model.is_some() as u8);
    }
    w.u8(bundle.hyper.channels);
    w.u8(bundle.hyper.kernel);
    w.u8(bundle.hyper.layers);
    for model in bundle.models.iter().flatten() {
        if model.channels() != bundle.hyper.channels as usize {
            return Err(Error::Format(
                "model width disagrees with the bundle's architecture descriptor".into(),
            ));
        }
        w.bytes(&serialize_weights(model));
    }
    Ok(w.into_bytes())
}

fn enhancer_blob_from_bytes(bytes: &[u8], axis: usize) -> Result<EnhancerBundle> {
    let mut r = ByteReader::new(bytes, "enhancer blob");
    let n_groups = r.u32()? as usize;
    if n_groups == 0 || n_groups > u16::MAX as usize {
        return Err(Error::Format(format!("implausible group count {n_groups}")));
    }
    let strategy = GroupStrategy::from_id(r.u8()?)?;
    let mut boundaries = Vec::with_capacity(n_groups - 1);
    for _ in 0..n_groups - 1 {
        boundaries.push(r.f64()?);
    }
    let spec = GroupSpec::from_parts(n_groups, boundaries, strategy)?;
    let mut stats = Vec::with_capacity(n_groups);
    let mut model_flags = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let in_min = r.f32()?;
        let in_max = r.f32()?;
        let res_scale = r.f32()?;
        let count = r.u64()?;
        let flag = r.u8()?;
        if flag > 1 {
            return Err(Error::Format(format!("invalid model flag {flag}")));
        }
        stats.push(GroupStat {
            in_min,
            in_max,
            res_scale,
            count,
        });
        model_flags.push(flag == 1);
    }
    let hyper = ArchHyper {
        channels: r.u8()?,
        kernel: r.u8()?,
        layers: r.u8()?,
    };
    if hyper.kernel != 3 || hyper.layers != 2 || hyper.channels == 0 {
        return Err(Error::Format(format!(
            "unsupported enhancer architecture {}x{} kernel {} layers",
            hyper.channels, hyper.kernel, hyper.layers
        )));
    }
    let weight_len = (23 * hyper.channels as usize + 1) * 4;
    let mut models = Vec::with_capacity(n_groups);
    for &present in &model_flags {
        if present {
            let blob = r.bytes(weight_len)?;
            models.push(Some(deserialize_weights(blob)?));
        } else {
            models.push(None);
        }
    }
    r.expect_end()?;
    Ok(EnhancerBundle {
        spec,
        stats: GroupStats::from_parts(stats),
        models,
        hyper,
        axis,
        train_meta: None,
    })
}

/// What a sidecar knows about the volume pair it was trained on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SidecarProvenance {
    pub dims: (usize, usize, usize),
    pub e_abs: f64,
}

/// Writes a `.gwe` sidecar; returns the file size in bytes.
pub fn write_sidecar(
    path: &Path,
    bundle: &EnhancerBundle,
    provenance: &SidecarProvenance,
) -> Result<u64> {
    let bytes = sidecar_to_bytes(bundle, provenance)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn sidecar_to_bytes(bundle: &EnhancerBundle, provenance: &SidecarProvenance) -> Result<Vec<u8>> {
    let (d0, d1, d2) = provenance.dims;
    let mut w = ByteWriter::new();
    w.bytes(SIDECAR_MAGIC);
    w.u16(CONTAINER_VERSION);
    w.u32(d0 as u32);
    w.u32(d1 as u32);
    w.u32(d2 as u32);
    w.u8(bundle.axis as u8);
    w.f64(provenance.e_abs);
    w.bytes(&enhancer_blob_to_bytes(bundle)?);
    Ok(w.finish_with_crc())
}

/// Reads and verifies a `.gwe` sidecar.
pub fn read_sidecar(path: &Path) -> Result<(EnhancerBundle, SidecarProvenance)> {
    let bytes = fs::read(path)?;
    sidecar_from_bytes(&bytes)
}

pub fn sidecar_from_bytes(bytes: &[u8]) -> Result<(EnhancerBundle, SidecarProvenance)> {
    let mut r = ByteReader::with_crc_checked(bytes, "sidecar")?;
    r.magic(SIDECAR_MAGIC)?;
    let version = r.u16()?;
    if version != CONTAINER_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dims = dims_from_u32(r.u32()?, r.u32()?, r.u32()?)?;
    let axis = r.u8()? as usize;
    if axis > 2 {
        return Err(Error::Format(format!("axis {axis} out of range")));
    }
    let e_abs = r.f64()?;
    let blob = r.bytes(r.remaining())?;
    let bundle = enhancer_blob_from_bytes(blob, axis)?;
    let total: u64 = bundle.stats.all().iter().map(|s| s.count).sum();
    if total != (dims.0 * dims.1 * dims.2) as u64 {
        return Err(Error::Format(
            "sidecar stats cover a different element count than dims".into(),
        ));
    }
    Ok((bundle, SidecarProvenance { dims, e_abs }))
}

/// Checks a sidecar against the volume it is about to enhance.
pub fn check_sidecar_dims(provenance: &SidecarProvenance, vol: &Volume) -> Result<()> {
    if provenance.dims != vol.dims() {
        return Err(Error::Data(format!(
            "sidecar was trained on dims {:?} but volume has {:?}",
            provenance.dims,
            vol.dims()
        )));
    }
    Ok(())
}
