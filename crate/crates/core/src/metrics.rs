//! Quality and efficiency measures: MSE, PSNR, compression ratio,
//! improvement percentage, and the aggregate report printed by the CLI.

use crate::codec::{self, CompressedPayload};
use crate::container;
use crate::error::{Error, Result};
use crate::volume::Volume;

/// Mean squared error of two equal-length f64 sequences.
pub fn mse_f64(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Data(format!(
            "mse length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let sum: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = a - b;
            d * d
        })
        .sum();
    Ok(sum / x.len() as f64)
}

/// PSNR over f64 sequences; the value range comes from `x`.
pub fn psnr_f64(x: &[f64], y: &[f64]) -> Result<f64> {
    let m = mse_f64(x, y)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range == 0.0 {
        return Err(Error::Data(
            "psnr undefined: zero value range with nonzero mse".into(),
        ));
    }
    Ok(20.0 * range.log10() - 10.0 * m.log10())
}

fn promote(v: &Volume) -> Vec<f64> {
    v.values().iter().map(|&x| x as f64).collect()
}

/// Mean squared error with f64 accumulation.
pub fn mse(x: &Volume, y: &Volume) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::Data(format!(
            "mse dims mismatch: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    mse_f64(&promote(x), &promote(y))
}

/// Peak signal-to-noise ratio in dB: 20·log10(vrange(X)) − 10·log10(mse).
/// The range always comes from `x`, the reference volume. Returns +inf for
/// identical inputs.
pub fn psnr(x: &Volume, y: &Volume) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::Data(format!(
            "psnr dims mismatch: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    psnr_f64(&promote(x), &promote(y))
}

/// Relative PSNR improvement in percent, the quality-gain figure of merit.
pub fn improvement_pct(psnr_base: f64, psnr_enhanced: f64) -> Result<f64> {
    if !psnr_base.is_finite() || psnr_base <= 0.0 {
        return Err(Error::Data(format!(
            "improvement undefined for base PSNR {psnr_base}"
        )));
    }
    Ok((psnr_enhanced - psnr_base) / psnr_base * 100.0)
}

/// Aggregate quality record for one compression run.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub mse: f64,
    pub psnr_db: f64,
    pub cr: f64,
    pub overhead: f64,
    pub improvement_pct: f64,
}

impl QualityReport {
    /// Renders the machine-readable `key=value` lines. Infinite PSNR prints
    /// as the literal token `inf`.
    pub fn render(&self) -> String {
        format!(
            "mse={}\npsnr_db={}\ncr={}\noverhead={}\nimprovement_pct={}\n",
            self.mse, self.psnr_db, self.cr, self.overhead, self.improvement_pct
        )
    }
}

/// Builds the full report for a run: distortion of `enhanced` against
/// `original`, ratio of the payload, overhead of the enhancer section.
pub fn report(
    original: &Volume,
    decompressed: &Volume,
    enhanced: &Volume,
    payload: &CompressedPayload,
    enhancer_bytes: usize,
) -> Result<QualityReport> {
    let psnr_base = psnr(original, decompressed)?;
    let psnr_enh = psnr(original, enhanced)?;
    let improvement = if psnr_base.is_finite() && psnr_base > 0.0 {
        improvement_pct(psnr_base, psnr_enh)?
    } else {
         0.0
    };
    Ok(QualityReport {
        mse: mse(original, enhanced)?,
        psnr_db: psnr_enh,
        cr: codec::ratio(original, payload)?,
        overhead: container::overhead_from_sizes(enhancer_bytes, codec::compressed_size(payload)?),
        improvement_pct: improvement,
    })
}
