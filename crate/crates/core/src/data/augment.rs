use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{contract, Result};
use crate::rng::{self, Rng};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentLevel {
    /// No perturbation at all.
    Identity,
    Simple,
    Default,
    Strong,
}

impl AugmentLevel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" | "none" => Some(Self::Identity),
            "simple" => Some(Self::Simple),
            "default" => Some(Self::Default),
            "strong" => Some(Self::Strong),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Simple => "simple",
            Self::Default => "default",
            Self::Strong => "strong",
        }
    }
}

/// Label-free vector perturbation.
///
/// Applied in order: random global scaling, coordinate dropout, additive
/// Gaussian noise, then (if `block > 1`) a random permutation of the
/// coordinates inside each consecutive block of `block` entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub level: AugmentLevel,
    pub sigma: f64,
    pub dropout: f64,
    pub scale: (f64, f64),
    pub block: usize,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self { level: AugmentLevel::Identity, sigma: 0.0, dropout: 0.0, scale: (1.0, 1.0), block: 1 }
    }

    pub fn simple() -> Self {
        Self { level: AugmentLevel::Simple, sigma: 0.05, ..Self::identity() }
    }

    pub fn default_policy() -> Self {
        Self { level: AugmentLevel::Default, sigma: 0.15, dropout: 0.1, scale: (0.8, 1.2), block: 1 }
    }

    pub fn strong() -> Self {
        Self { level: AugmentLevel::Strong, sigma: 0.3, dropout: 0.2, scale: (0.6, 1.4), block: 2 }
    }

    pub fn for_level(level: AugmentLevel) -> Self {
        match level {
            AugmentLevel::Identity => Self::identity(),
            AugmentLevel::Simple => Self::simple(),
            AugmentLevel::Default => Self::default_policy(),
            AugmentLevel::Strong => Self::strong(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(contract!("augmentation sigma must be non-negative, got {}", self.sigma));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(contract!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(contract!("scale range must satisfy 0 < lo <= hi, got {:?}", self.scale));
        }
        if self.block == 0 {
            return Err(contract!("permutation block size must be positive"));
        }
        Ok(())
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::default_policy()
    }
}

/// One augmented view of `x`.
pub fn augment(x: &[f64], policy: &AugmentPolicy, rng: &mut Rng) -> Vec<f64> {
    let mut out = x.to_vec();
    augment_in_place(&mut out, policy, rng);
    out
}

pub fn augment_in_place(x: &mut [f64], policy: &AugmentPolicy, rng: &mut Rng) {
    let (lo, hi) = policy.scale;
    if hi > lo {
        let s = rng.random_range(lo..hi);
        x.iter_mut().for_each(|v| *v *= s);
    } else if lo != 1.0 {
        x.iter_mut().for_each(|v| *v *= lo);
    }
    if policy.dropout > 0.0 {
        for v in x.iter_mut() {
            if rng.random::<f64>() < policy.dropout {
                *v = 0.0;
            }
        }
    }
    if policy.sigma > 0.0 {
        for v in x.iter_mut() {
            *v += policy.sigma * rng::normal(rng);
        }
    }
    if policy.block > 1 {
        for chunk in x.chunks_mut(policy.block) {
            // Fisher-Yates inside the block.
            for i in (1..chunk.len()).rev() {
                let j = rng.random_range(0..=i);
                chunk.swap(i, j);
            }
        }
    }
}

/// Two views of `B` instances stacked as `2B x d` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub views: Tensor,
    pub b: usize,
    /// Instance id of each row; `ids[i] == ids[i + b]`.
    pub ids: Vec<usize>,
}

/// Rows `0..B` are first views of `instances` in order, rows `B..2B` are
/// independent second views in the same order. First views are drawn before
/// second views.
pub fn build_pair_batch(instances: &Tensor, ids: &[usize], policy: &AugmentPolicy, rng: &mut Rng) -> Result<PairBatch> {
    policy.validate()?;
    if instances.rank() != 2 {
        return Err(contract!("instances must be a B x d matrix, got {:?}", instances.shape()));
    }
    let (b, d) = (instances.rows(), instances.cols());
    if b < 2 {
        return Err(contract!("a pair batch needs at least 2 instances, got {}", b));
    }
    if ids.len() != b {
        return Err(contract!("{} provenance ids for {} instances", ids.len(), b));
    }
    let mut data = Vec::with_capacity(2 * b * d);
    for _view in 0..2 {
        for i in 0..b {
            let start = data.len();
            data.extend_from_slice(instances.row(i));
            augment_in_place(&mut data[start..], policy, rng);
        }
    }
    let views = Tensor::matrix(2 * b, d, data)?;
    let ids = ids.iter().chain(ids).copied().collect();
    Ok(PairBatch { views, b, ids })
}
