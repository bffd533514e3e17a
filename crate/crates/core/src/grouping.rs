//! Value-magnitude partitioning of decompressed data and the paired residual
//! map, plus per-group normalization and masked training inputs.
//!
//! Grouping is always keyed on decompressed values: they are the only thing
//! both the compression and reconstruction side can see, so a spec built
//! from them is reproducible on either side. It is still serialized in the
//! container to rule out recomputation drift.

use crate::error::{Error, Result};
use crate::volume::{Grid2, Volume};

/// Boundary-selection strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupStrategy {
    /// Empirical quantiles: balanced counts, narrow ranges where the data
    /// concentrates. The default.
    Quantile,
    /// Uniform split of [min, max]; kept for ablation.
    EqualWidth,
}

impl GroupStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "quantile" => Ok(Self::Quantile),
            "equal-width" | "equal_width" => Ok(Self::EqualWidth),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected quantile or equal-width)"
            ))),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Self::Quantile => 0,
            Self::EqualWidth => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Self::Quantile),
            1 => Ok(Self::EqualWidth),
            other => Err(Error::Format(format!("unknown strategy id {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Quantile => "quantile",
            Self::EqualWidth => "equal-width",
        }
    }
}

/// A value-range partition: `n_groups − 1` ascending thresholds.
///
/// Assignment is half-open: group g covers [b_g, b_{g+1}), a value equal to
/// a boundary goes to the higher group, and the last group is closed above.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    n_groups: usize,
    boundaries: Vec<f64>,
    strategy: GroupStrategy,
}

impl GroupSpec {
    pub fn from_parts(
        n_groups: usize,
        boundaries: Vec<f64>,
        strategy: GroupStrategy,
    ) -> Result<Self> {
        if n_groups == 0 {
            return Err(Error::Config("n_groups must be at least 1".into()));
        }
        if boundaries.len() != n_groups - 1 {
            return Err(Error::Format(format!(
                "{} boundaries do not delimit {} groups",
                boundaries.len(),
                n_groups
            )));
        }
        if boundaries.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Format("boundaries must be non-decreasing".into()));
        }
        if boundaries.iter().any(|b| !b.is_finite()) {
            return Err(Error::Format("boundaries must be finite".into()));
        }
        Ok(Self {
            n_groups,
            boundaries,
            strategy,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn strategy(&self) -> GroupStrategy {
        self.strategy
    }

    /// Group id for a value: the number of boundaries ≤ value.
    #[inline]
    pub fn assign(&self, value: f32) -> usize {
        let v = value as f64;
        self.boundaries.partition_point(|&b| b <= v)
    }
}

/// Builds a partition of the decompressed volume's value range.
pub fn build_spec(
    decompressed: &Volume,
    n_groups: usize,
    strategy: GroupStrategy,
) -> Result<GroupSpec> {
    if n_groups == 0 {
        return Err(Error::Config("n_groups must be at least 1".into()));
    }
    if n_groups > u16::MAX as usize {
        return Err(Error::Config(format!(
            "n_groups {n_groups} is unreasonably large (max {})",
            u16::MAX
        )));
    }
    if n_groups == 1 {
        return GroupSpec::from_parts(1, Vec::new(), strategy);
    }
    let boundaries = match strategy {
        GroupStrategy::Quantile => {
            let mut sorted = decompressed.values().to_vec();
            sorted.sort_unstable_by(f32::total_cmp);
            let len = sorted.len();
            (1..n_groups)
                .map(|k| {
                    // Midpoint of the order statistics straddling the k/n cut.
                    let cut = (len * k / n_groups).clamp(1, len.max(2) - 1);
                    if len == 1 {
                        sorted[0] as f64
                    } else {
                        (sorted[cut - 1] as f64 + sorted[cut] as f64) / 2.0
                    }
                })
                .collect()
        }
        GroupStrategy::EqualWidth => {
            let lo = decompressed.min() as f64;
            let hi = decompressed.max() as f64;
            (1..n_groups)
                .map(|k| lo + (hi - lo) * k as f64 / n_groups as f64)
                .collect()
        }
    };
    GroupSpec::from_parts(n_groups, boundaries, strategy)
}

/// Per-group normalization statistics over one (original, decompressed) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    groups: Vec<GroupStat>,
}

/// Stats of a single group: decompressed-value extent, residual scale,
/// element count. Empty groups carry all-zero stats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStat {
    pub in_min: f32,
    pub in_max: f32,
    pub res_scale: f32,
    pub count: u64,
}

impl GroupStats {
    pub fn from_parts(groups: Vec<GroupStat>) -> Self {
        Self { groups }
    }

    pub fn group(&self, g: usize) -> &GroupStat {
        &self.groups[g]
    }

    pub fn all(&self) -> &[GroupStat] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Computes per-group stats; the residual is original − decompressed.
pub fn compute_stats(
    original: &Volume,
    decompressed: &Volume,
    spec: &GroupSpec,
) -> Result<GroupStats> {
    if original.dims() != decompressed.dims() {
        return Err(Error::Data(format!(
            "stats dims mismatch: {:?} vs {:?}",
            original.dims(),
            decompressed.dims()
        )));
    }
    struct Acc {
        min: f32,
        max: f32,
        scale: f32,
        count: u64,
    }
    let mut accs: Vec<Acc> = (0..spec.n_groups())
        .map(|_| Acc {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
            scale: 0.0,
            count: 0,
        })
        .collect();
    for (&x, &xd) in original.values().iter().zip(decompressed.values()) {
        let g = spec.assign(xd);
        let acc = &mut accs[g];
        acc.min = acc.min.min(xd);
        acc.max = acc.max.max(xd);
        acc.scale = acc.scale.max((x - xd).abs());
        acc.count += 1;
    }
    Ok(GroupStats {
        groups: accs
            .into_iter()
            .map(|a| {
                if a.count == 0 {
                    GroupStat {
                        in_min: 0.0,
                        in_max: 0.0,
                        res_scale: 0.0,
                        count: 0,
                    }
                } else {
                    GroupStat {
                        in_min: a.min,
                        in_max: a.max,
                        res_scale: a.scale,
                        count: a.count,
                    }
                }
            })
            .collect(),
    })
}

/// One masked training example: normalized input, normalized residual target,
/// binary in-group mask. Out-of-group entries are zero placeholders.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPair {
    pub rows: usize,
    pub cols: usize,
    pub input: Vec<f32>,
    pub target: Vec<f32>,
    pub mask: Vec<u8>,
}

impl MaskedPair {
    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

/// Builds the masked input/target for one group on one slice pair.
///
/// Inputs are min-max scaled into [0,1] with the group's volume-wide extent;
/// targets are the residual divided by the group's max-|residual| so they
/// stay sign-preserving in [−1,1]. Degenerate extents or scales yield zeros.
pub fn masked_pair(
    dec_slice: &Grid2,
    res_slice: &Grid2,
    group: usize,
    spec: &GroupSpec,
    stats: &GroupStats,
) -> Result<MaskedPair> {
    if (dec_slice.rows, dec_slice.cols) != (res_slice.rows, res_slice.cols) {
        return Err(Error::Data("slice shapes differ".into()));
    }
    if group >= spec.n_groups() {
        return Err(Error::Config(format!(
            "group {group} out of range ({} groups)",
            spec.n_groups()
        )));
    }
    let st = stats.group(group);
    let span = st.in_max as f64 - st.in_min as f64;
    let scale = st.res_scale as f64;
    let n = dec_slice.len();
    let mut input = vec![0.0f32; n];
    let mut target = vec![0.0f32; n];
    let mut mask = vec![0u8; n];
    for i in 0..n {
        let v = dec_slice.values[i];
        if spec.assign(v) != group {
            continue;
        }
        mask[i] = 1;
        if span > 0.0 {
            input[i] = ((v as f64 - st.in_min as f64) / span) as f32;
        }
        if scale > 0.0 {
            target[i] = (res_slice.values[i] as f64 / scale) as f32;
        }
    }
    Ok(MaskedPair {
        rows: dec_slice.rows,
        cols: dec_slice.cols,
        input,
        target,
        mask,
    })
}
