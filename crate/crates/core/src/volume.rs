//! 3D float volumes: raw file I/O, synthetic field generation, slicing.
//!
//! Volumes are dense row-major arrays of finite `f32` with the first
//! dimension outermost. Raw files are headerless IEEE-754 binary32 dumps;
//! dimensions travel out-of-band.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Endianness of a raw volume file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

/// A dense 3D array of finite 32-bit floats, row-major with `dims.0` outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    values: Vec<f32>,
}

impl Volume {
    /// Builds a volume, validating shape and finiteness.
    pub fn new(dims: (usize, usize, usize), values: Vec<f32>) -> Result<Self> {
        let n = checked_len(dims)?;
        if values.len() != n {
            return Err(Error::Data(format!(
                "value count {} does not match dims {}x{}x{} ({} elements)",
                values.len(),
                dims.0,
                dims.1,
                dims.2,
                n
            )));
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at flat index {idx}",
                values[idx]
            )));
        }
        Ok(Self { dims, values })
    }

    /// All-zero volume of the given shape.
    pub fn zeros(dims: (usize, usize, usize)) -> Result<Self> {
        let n = checked_len(dims)?;
        Ok(Self {
            dims,
            values: vec![0.0; n],
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    #[inline]
    pub fn flat_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims.1 + j) * self.dims.2 + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.flat_index(i, j, k)]
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.values
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    }

    /// Value range max − min, the `vrange` term of the PSNR definition.
    pub fn vrange(&self) -> f64 {
        self.max() as f64 - self.min() as f64
    }

    /// Extracts one 2D slice perpendicular to `axis`, copied row-major.
    ///
    /// Iterating `index` over `0..dims[axis]` tiles the volume exactly once.
    pub fn slice(&self, axis: usize, index: usize) -> Result<Grid2> {
        let (d0, d1, d2) = self.dims;
        let extent = self.axis_len(axis)?;
        if index >= extent {
            return Err(Error::Data(format!(
                "slice index {index} out of range for axis {axis} (extent {extent})"
            )));
        }
        let (rows, cols) = match axis {
            0 => (d1, d2),
            1 => (d0, d2),
            _ => (d0, d1),
        };
        let mut values = Vec::with_capacity(rows * cols);
        match axis {
            0 => values.extend_from_slice(&self.values[index * d1 * d2..(index + 1) * d1 * d2]),
            1 => {
                for i in 0..d0 {
                    let base = (i * d1 + index) * d2;
                    values.extend_from_slice(&self.values[base..base + d2]);
                }
            }
            _ => {
                for i in 0..d0 {
                    for j in 0..d1 {
                        values.push(self.values[(i * d1 + j) * d2 + index]);
                    }
                }
            }
        }
        Ok(Grid2 { rows, cols, values })
    }

    /// Writes a 2D slice back at `(axis, index)`; inverse of [`Volume::slice`].
    pub fn set_slice(&mut self, axis: usize, index: usize, grid: &Grid2) -> Result<()> {
        let (d0, d1, d2) = self.dims;
        let extent = self.axis_len(axis)?;
        if index >= extent {
            return Err(Error::Data(format!(
                "slice index {index} out of range for axis {axis} (extent {extent})"
            )));
        }
        let expect = match axis {
            0 => (d1, d2),
            1 => (d0, d2),
            _ => (d0, d1),
        };
        if (grid.rows, grid.cols) != expect {
            return Err(Error::Data(format!(
                "slice shape {}x{} does not match axis {axis} shape {}x{}",
                grid.rows, grid.cols, expect.0, expect.1
            )));
        }
        match axis {
            0 => self.values[index * d1 * d2..(index + 1) * d1 * d2]
                .copy_from_slice(&grid.values),
            1 => {
                for i in 0..d0 {
                    let base = (i * d1 + index) * d2;
                    self.values[base..base + d2]
                        .copy_from_slice(&grid.values[i * d2..(i + 1) * d2]);
                }
            }
            _ => {
                for i in 0..d0 {
                    for j in 0..d1 {
                        self.values[(i * d1 + j) * d2 + index] = grid.values[i * d1 + j];
                    }
                }
            }
        }
        Ok(())
    }

    pub fn axis_len(&self, axis: usize) -> Result<usize> {
        match axis {
            0 => Ok(self.dims.0),
            1 => Ok(self.dims.1),
            2 => Ok(self.dims.2),
            _ => Err(Error::Config(format!("axis must be 0, 1 or 2, got {axis}"))),
        }
    }

    /// Bit-exact comparison (distinguishes payload bits NaN boxing never sees;
    /// volumes hold no NaNs, so this is plain `to_bits` equality).
    pub fn bit_eq(&self, other: &Volume) -> bool {
        self.dims == other.dims
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn checked_len(dims: (usize, usize, usize)) -> Result<usize> {
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(Error::Config(format!(
            "dims must be positive, got {}x{}x{}",
            dims.0, dims.1, dims.2
        )));
    }
    dims.0
        .checked_mul(dims.1)
        .and_then(|p| p.checked_mul(dims.2))
        .ok_or_else(|| Error::Config("dims overflow".into()))
}

/// A 2D row-major float grid, the slice view used for training images.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl Grid2 {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), rows * cols, "grid shape mismatch");
        Self { rows, cols, values }
    }

    pub fn filled(rows: usize, cols: usize, v: f32) -> Self {
        Self {
            rows,
            cols,
            values: vec![v; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Loads a headerless raw binary32 volume.
pub fn load_raw(path: &Path, dims: (usize, usize, usize), order: ByteOrder) -> Result<Volume> {
    let n = checked_len(dims)?;
    let bytes = fs::read(path)?;
    let expected = n * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "file {} holds {} bytes but dims {}x{}x{} require {} bytes",
            path.display(),
            bytes.len(),
            dims.0,
            dims.1,
            dims.2,
            expected
        )));
    }
    let mut values = Vec::with_capacity(n);
    for (idx, chunk) in bytes.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = match order {
            ByteOrder::Little => f32::from_le_bytes(raw),
            ByteOrder::Big => f32::from_be_bytes(raw),
        };
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "non-finite value {v} at flat index {idx} in {}",
                path.display()
            )));
        }
        values.push(v);
    }
    Ok(Volume { dims, values })
}

/// Writes a volume as headerless raw binary32; returns the byte count.
pub fn save_raw(vol: &Volume, path: &Path, order: ByteOrder) -> Result<u64> {
    let mut bytes = Vec::with_capacity(vol.len() * 4);
    for v in vol.values() {
        let raw = match order {
            ByteOrder::Little => v.to_le_bytes(),
            ByteOrder::Big => v.to_be_bytes(),
        };
        bytes.extend_from_slice(&raw);
    }
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

/// Families of synthetic test fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Constant,
    CosineField,
    GaussianMixture,
    SkewedExponential,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine-field" => Ok(Self::CosineField),
            "gaussian-mixture" => Ok(Self::GaussianMixture),
            "skewed-exponential" => Ok(Self::SkewedExponential),
            other => Err(Error::Config(format!(
                "unknown synthetic kind '{other}' (expected constant, cosine-field, \
                 gaussian-mixture or skewed-exponential)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Constant => "constant",
            Self::CosineField => "cosine-field",
            Self::GaussianMixture => "gaussian-mixture",
            Self::SkewedExponential => "skewed-exponential",
        }
    }
}

/// Parameters of a synthetic field; generation is a pure function of this.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub dims: (usize, usize, usize),
    pub seed: u64,
    pub amplitude: f32,
}

/// Generates a deterministic synthetic volume from `spec`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Volume> {
    let n = checked_len(spec.dims)?;
    if !(spec.amplitude > 0.0) {
        return Err(Error::Config(format!(
            "amplitude must be positive, got {}",
            spec.amplitude
        )));
    }
    let (d0, d1, d2) = spec.dims;
    let amp = spec.amplitude as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = vec![0.0f32; n];

    match spec.kind {
        SyntheticKind::Constant => values.fill(spec.amplitude),
        SyntheticKind::CosineField => {
            let modes = cosine_modes(&mut rng, 4, 1.0, 3.0);
            fill_field(&mut values, spec.dims, |x, y, z| {
                amp * eval_modes(&modes, x, y, z)
            });
        }
        SyntheticKind::GaussianMixture => {
            // A handful of smooth bumps of random width and sign.
            let n_bumps = 6;
            let mut bumps = Vec::with_capacity(n_bumps);
            for _ in 0..n_bumps {
                let c = (
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                );
                let sigma: f64 = rng.random_range(0.06..0.25);
                let height: f64 = rng.random_range(0.3..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                bumps.push((c, sigma, height));
            }
            fill_field(&mut values, spec.dims, |x, y, z| {
                let mut v = 0.0;
                for ((cx, cy, cz), sigma, height) in &bumps {
                    let r2 = (x - cx).powi(2) + (y - cy).powi(2) + (z - cz).powi(2);
                    v += height * (-r2 / (2.0 * sigma * sigma)).exp();
                }
                amp * v
            });
        }
        SyntheticKind::SkewedExponential => {
            // Smooth quasi-Gaussian base pushed through an exponential: a
            // long positive tail with most mass concentrated near zero.
            // A texture whose spatial frequency rises with the base value
            // gives each magnitude tier its own local structure, the way
            // simulation fields mix smooth voids with turbulent filaments.
            let modes = cosine_modes(&mut rng, 6, 0.5, 2.0);
            let norm = 1.0 / (modes.len() as f64 / 2.0).sqrt();
            let dir = (
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
            );
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            fill_field(&mut values, spec.dims, |x, y, z| {
                let u = eval_modes(&modes, x, y, z) * norm;
                let gate = 1.0 / (1.0 + (-u).exp());
                let freq = 3.0 + 7.0 * gate;
                let t = (std::f64::consts::TAU * freq * (dir.0 * x + dir.1 * y + dir.2 * z)
                    + phase)
                    .sin();
                amp * (1.3 * u).exp() * (1.0 + 0.5 * t)
            });
        }
    }

    debug_assert!(values.iter().all(|v| v.is_finite()));
    let _ = (d0, d1, d2);
    Ok(Volume {
        dims: spec.dims,
        values,
    })
}

type CosMode = (f64, f64, f64, f64, f64); // (fx, fy, fz, phase, weight)

fn cosine_modes(rng: &mut ChaCha8Rng, count: usize, fmin: f64, fmax: f64) -> Vec<CosMode> {
    (0..count)
        .map(|_| {
            (
                rng.random_range(fmin..fmax),
                rng.random_range(fmin..fmax),
                rng.random_range(fmin..fmax),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.5..1.0),
            )
        })
        .collect()
}

fn eval_modes(modes: &[CosMode], x: f64, y: f64, z: f64) -> f64 {
    modes
        .iter()
        .map(|(fx, fy, fz, phase, w)| {
            w * (std::f64::consts::TAU * (fx * x + fy * y + fz * z) + phase).cos()
        })
        .sum()
}

fn fill_field(values: &mut [f32], dims: (usize, usize, usize), f: impl Fn(f64, f64, f64) -> f64) {
    let (d0, d1, d2) = dims;
    let step = |extent: usize| if extent > 1 { 1.0 / (extent - 1) as f64 } else { 0.0 };
    let (sx, sy, sz) = (step(d0), step(d1), step(d2));
    let mut idx = 0;
    for i in 0..d0 {
        let x = i as f64 * sx;
        for j in 0..d1 {
            let y = j as f64 * sy;
            for k in 0..d2 {
                values[idx] = f(x, y, k as f64 * sz) as f32;
                idx += 1;
            }
        }
    }
}
