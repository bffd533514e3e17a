//! End-to-end enhancement: residual computation, grouping, per-group
//! training, residual prediction, merge, optional bound clamping.
//!
//! Models are trained on the very volume being compressed and travel with
//! it; there is no cross-dataset generalization and none is attempted.

use crate::error::{Error, Result};
use crate::grouping::{
    build_spec, compute_stats, masked_pair, GroupSpec, GroupStats, GroupStrategy, MaskedPair,
};
use crate::nn::{
    train_group, LossHistory, Model, ModelWeights, TrainConfig, DEFAULT_BN_EPSILON,
    DEFAULT_BN_MOMENTUM,
};
use crate::volume::{Grid2, Volume};

/// Groups smaller than this train no model: batch statistics degenerate on
/// a handful of pixels and the zero-model identity is always safe.
pub const MIN_GROUP_ELEMENTS: u64 = 64;

/// Architecture descriptor attached to the container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchHyper {
    pub channels: u8,
    pub kernel: u8,
    pub layers: u8,
}

impl ArchHyper {
    pub fn with_channels(channels: usize) -> Self {
        Self {
            channels: channels as u8,
            kernel: 3,
            layers: 2,
        }
    }
}

/// Echo of the training run kept in memory for reporting; not serialized.
#[derive(Debug, Clone)]
pub struct TrainMeta {
    pub config: TrainConfig,
    pub final_loss: Vec<Option<f64>>,
    pub history: Vec<Option<LossHistory>>,
}

/// Post-enhancement residual clamping policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClampMode {
    /// Apply predicted residuals as-is.
    None,
    /// Clamp each predicted residual to ±e_abs, which bounds the enhanced
    /// error by 2·e_abs against the original.
    Bound2e { e_abs: f64 },
}

/// Group spec, per-group stats and one model per group; the unit attached
/// to compressed archives. Zero-model groups predict residual 0.
#[derive(Debug, Clone)]
pub struct EnhancerBundle {
    pub spec: GroupSpec,
    pub stats: GroupStats,
    pub models: Vec<Option<ModelWeights>>,
    pub hyper: ArchHyper,
    pub axis: usize,
    pub train_meta: Option<TrainMeta>,
}

impl EnhancerBundle {
    pub fn n_groups(&self) -> usize {
        self.spec.n_groups()
    }

    pub fn trained_models(&self) -> usize {
        self.models.iter().filter(|m| m.is_some()).count()
    }

    /// Bundle that enhances nothing: one group, no model.
    pub fn identity(decompressed: &Volume, axis: usize, channels: usize) -> Result<Self> {
        let spec = build_spec(decompressed, 1, GroupStrategy::Quantile)?;
        let stats = compute_stats(decompressed, decompressed, &spec)?;
        Ok(Self {
            spec,
            stats,
            models: vec![None],
            hyper: ArchHyper::with_channels(channels),
            axis,
            train_meta: None,
        })
    }
}

/// Trains one enhancer bundle for an (original, decompressed) pair.
///
/// Slices run along `axis`; each group with at least [`MIN_GROUP_ELEMENTS`]
/// elements gets its own model seeded with `cfg.seed ⊕ group`. `threads`
/// bounds group-level parallelism and never changes the result.
pub fn fit(
    original: &Volume,
    decompressed: &Volume,
    n_groups: usize,
    strategy: GroupStrategy,
    cfg: &TrainConfig,
    axis: usize,
    threads: usize,
) -> Result<EnhancerBundle> {
    if original.dims() != decompressed.dims() {
        return Err(Error::Data(format!(
            "fit dims mismatch: {:?} vs {:?}",
            original.dims(),
            decompressed.dims()
        )));
    }
    cfg.validate()?;
    let residual = residual_volume(original, decompressed)?;
    let spec = build_spec(decompressed, n_groups, strategy)?;
    let stats = compute_stats(original, decompressed, &spec)?;

    // Collect each group's masked slice pairs; slices that never touch a
    // group contribute nothing to it.
    let extent = decompressed.axis_len(axis)?;
    let mut group_pairs: Vec<Vec<MaskedPair>> = vec![Vec::new(); n_groups];
    for s in 0..extent {
        let dec_slice = decompressed.slice(axis, s)?;
        let res_slice = residual.slice(axis, s)?;
        for g in 0..n_groups {
            if stats.group(g).count < MIN_GROUP_ELEMENTS {
                continue;
            }
            let pair = masked_pair(&dec_slice, &res_slice, g, &spec, &stats)?;
            if pair.mask_count() > 0 {
                group_pairs[g].push(pair);
            }
        }
    }

    let jobs: Vec<(usize, Vec<MaskedPair>)> = group_pairs
        .into_iter()
        .enumerate()
        .filter(|(_, pairs)| !pairs.is_empty())
        .collect();

    let mut models: Vec<Option<ModelWeights>> = vec![None; n_groups];
    let mut final_loss: Vec<Option<f64>> = vec![None; n_groups];
    let mut history: Vec<Option<LossHistory>> = vec![None; n_groups];

    let outcomes = run_jobs(jobs, cfg, threads)?;
    for (g, outcome) in outcomes {
        if let Some((weights, hist)) = outcome {
            final_loss[g] = hist.last().copied();
            history[g] = Some(hist);
            models[g] = Some(weights);
        }
    }

    Ok(EnhancerBundle {
        spec,
        stats,
        models,
        hyper: ArchHyper::with_channels(cfg.channels),
        axis,
        train_meta: Some(TrainMeta {
            config: cfg.clone(),
            final_loss,
            history,
        }),
    })
}

type TrainOutcome = Option<(ModelWeights, LossHistory)>;

fn run_jobs(
    jobs: Vec<(usize, Vec<MaskedPair>)>,
    cfg: &TrainConfig,
    threads: usize,
) -> Result<Vec<(usize, TrainOutcome)>> {
    let train_one = |g: usize, pairs: &[MaskedPair]| -> Result<TrainOutcome> {
        let group_cfg = TrainConfig {
            seed: cfg.seed ^ g as u64,
            ..cfg.clone()
        };
        train_group(pairs, &group_cfg)
    };

    let workers = threads.max(1).min(jobs.len().max(1));
    if workers <= 1 {
        return jobs
            .into_iter()
            .map(|(g, pairs)| Ok((g, train_one(g, &pairs)?)))
            .collect();
    }

    // Round-robin assignment; per-group seeds make scheduling irrelevant.
    let mut buckets: Vec<Vec<(usize, Vec<MaskedPair>)>> = (0..workers).map(|_| Vec::new()).collect();
    for (i, job) in jobs.into_iter().enumerate() {
        buckets[i % workers].push(job);
    }
    let mut results = Vec::new();
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = buckets
            .into_iter()
            .map(|bucket| {
                scope.spawn(move || -> Result<Vec<(usize, TrainOutcome)>> {
                    bucket
                        .into_iter()
                        .map(|(g, pairs)| Ok((g, train_one(g, &pairs)?)))
                        .collect()
                })
            })
            .collect();
        for handle in handles {
            let part = handle
                .join()
                .map_err(|_| Error::Data("training worker panicked".into()))??;
            results.extend(part);
        }
        Ok(())
    })?;
    results.sort_by_key(|&(g, _)| g);
    Ok(results)
}

/// Residual map original − decompressed as a volume.
pub fn residual_volume(original: &Volume, decompressed: &Volume) -> Result<Volume> {
    if original.dims() != decompressed.dims() {
        return Err(Error::Data("residual dims mismatch".into()));
    }
    let values: Vec<f32> = original
        .values()
        .iter()
        .zip(decompressed.values())
        .map(|(&x, &xd)| x - xd)
        .collect();
    Volume::new(original.dims(), values)
}

/// Predicts the residual map for a decompressed volume.
///
/// Per slice and per group: normalized masked input, eval-mode forward,
/// output rescaled by the group's residual scale, scattered through the
/// group mask. Groups are disjoint, so each element receives exactly one
/// prediction; zero-model and zero-scale groups contribute zero.
pub fn predict_residual(bundle: &EnhancerBundle, decompressed: &Volume) -> Result<Volume> {
    let total: u64 = bundle.stats.all().iter().map(|s| s.count).sum();
    if total != decompressed.len() as u64 {
        return Err(Error::Data(format!(
            "bundle was built for {total} elements but volume has {}",
            decompressed.len()
        )));
    }
    let axis = bundle.axis;
    let extent = decompressed.axis_len(axis)?;
    let n_groups = bundle.n_groups();

    let eval_models: Vec<Option<Model>> = bundle
        .models
        .iter()
        .map(|m| {
            m.as_ref()
                .map(|w| Model::from_weights(w, DEFAULT_BN_MOMENTUM, DEFAULT_BN_EPSILON))
        })
        .collect();

    let mut rhat = Volume::zeros(decompressed.dims())?;
    let zero_res = |g: &Grid2| Grid2::filled(g.rows, g.cols, 0.0);
    for s in 0..extent {
        let dec_slice = decompressed.slice(axis, s)?;
        let mut out_slice = Grid2::filled(dec_slice.rows, dec_slice.cols, 0.0);
        let res_dummy = zero_res(&dec_slice);
        for g in 0..n_groups {
            let Some(model) = &eval_models[g] else {
                continue;
            };
            let st = bundle.stats.group(g);
            if st.res_scale == 0.0 || st.count == 0 {
                continue;
            }
            let pair = masked_pair(&dec_slice, &res_dummy, g, &bundle.spec, &bundle.stats)?;
            if pair.mask_count() == 0 {
                continue;
            }
            let x: Vec<f64> = pair.input.iter().map(|&v| v as f64).collect();
            let pred = model.forward_eval(&x, 1, pair.rows, pair.cols);
            let scale = st.res_scale as f64;
            for i in 0..pair.mask.len() {
                if pair.mask[i] != 0 {
                    out_slice.values[i] = (pred[i] * scale) as f32;
                }
            }
        }
        rhat.set_slice(axis, s, &out_slice)?;
    }
    Ok(rhat)
}

/// Enhanced reconstruction X′ + R̂ with optional residual clamping.
pub fn enhance(decompressed: &Volume, bundle: &EnhancerBundle, clamp: ClampMode) -> Result<Volume> {
    let rhat = predict_residual(bundle, decompressed)?;
    apply_residual(decompressed, &rhat, clamp)
}

/// Adds a residual map to a decompressed volume under the clamp policy.
pub fn apply_residual(decompressed: &Volume, rhat: &Volume, clamp: ClampMode) -> Result<Volume> {
    if decompressed.dims() != rhat.dims() {
        return Err(Error::Data("residual dims mismatch".into()));
    }
    if let ClampMode::Bound2e { e_abs } = clamp {
        if !(e_abs > 0.0) || !e_abs.is_finite() {
            return Err(Error::Config(format!(
                "bound2e requires a positive finite e_abs, got {e_abs}"
            )));
        }
    }
    let mut values = Vec::with_capacity(decompressed.len());
    match clamp {
        ClampMode::None => {
            for (&xd, &r) in decompressed.values().iter().zip(rhat.values()) {
                // Skipping the add on zero residual keeps the identity path
                // bit-exact (including negative zeros in the input).
                values.push(if r == 0.0 { xd } else { xd + r });
            }
        }
        ClampMode::Bound2e { e_abs } => {
            for (&xd, &r) in decompressed.values().iter().zip(rhat.values()) {
                if r == 0.0 {
                    values.push(xd);
                    continue;
                }
                let c = (r as f64).clamp(-e_abs, e_abs);
                let mut v = (xd as f64 + c) as f32;
                // Float rounding may land just past the bound; walk back.
                while (v as f64 - xd as f64).abs() > e_abs {
                    v = step_toward(v, xd);
                }
                values.push(v);
            }
        }
    }
    Volume::new(decompressed.dims(), values)
}

/// Next representable f32 from `v` in the direction of `target`.
fn step_toward(v: f32, target: f32) -> f32 {
    if v == target {
        return v;
    }
    if v == 0.0 {
        return if target > 0.0 {
            f32::from_bits(1)
        } else {
            f32::from_bits(0x8000_0001)
        };
    }
    let bits = v.to_bits();
    let up = v < target;
    let positive = v > 0.0;
    let next = if up == positive { bits + 1 } else { bits - 1 };
    f32::from_bits(next)
}
