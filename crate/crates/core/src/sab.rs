//! Semantic adversarial branch: feature-level occlusion that keeps only a
//! sampled subset of body regions before pooling.

use numcore::{Graph, Mode, ParameterSet, RngStream, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{branch_head, BranchOutput};
use crate::semantics::{union_plane, RegionPartition, SemanticAlignedRep, NUM_PARTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    RandomTorso,
    RandomBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SabConfig {
    pub k_hat: usize,
    pub strategy: SamplingStrategy,
}

impl Default for SabConfig {
    fn default() -> Self {
        Self {
            k_hat: 4,
            strategy: SamplingStrategy::RandomTorso,
        }
    }
}

impl SabConfig {
    pub fn validate(&self, partition: &RegionPartition) -> Result<()> {
        match self.strategy {
            SamplingStrategy::RandomBaseline => check_baseline(NUM_PARTS, self.k_hat),
            SamplingStrategy::RandomTorso => check_torso(partition, self.k_hat),
        }
    }
}

/// Regions that survive occlusion, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionPlan {
    kept: Vec<usize>,
}

impl OcclusionPlan {
    pub fn new(mut kept: Vec<usize>) -> Result<Self> {
        if kept.is_empty() {
            return Err(Error::Num(numcore::Error::Contract("occlusion plan keeps no region".into())));
        }
        kept.sort_unstable();
        kept.dedup();
        if let Some(&bad) = kept.iter().find(|&&k| k >= NUM_PARTS) {
            return Err(Error::Config(format!("region {bad} is not a body part")));
        }
        Ok(Self { kept })
    }

    /// Every body part kept; background stays out of the pool.
    pub fn keep_all() -> Self {
        Self {
            kept: (0..NUM_PARTS).collect(),
        }
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn k_hat(&self) -> usize {
        self.kept.len()
    }
}

fn check_baseline(k_parts: usize, k_hat: usize) -> Result<()> {
    if k_hat == 0 || k_hat > k_parts {
        return Err(Error::Config(format!("k_hat must be in 1..={k_parts}, got {k_hat}")));
    }
    Ok(())
}

fn check_torso(partition: &RegionPartition, k_hat: usize) -> Result<()> {
    if k_hat == 0 || k_hat % 2 != 0 {
        return Err(Error::Config(format!("random_torso needs a positive even k_hat, got {k_hat}")));
    }
    let half = k_hat / 2;
    if half > partition.upper().len().min(partition.lower().len()) {
        return Err(Error::Config(format!(
            "k_hat/2 = {half} exceeds a torso group ({} upper, {} lower)",
            partition.upper().len(),
            partition.lower().len()
        )));
    }
    Ok(())
}

/// A uniformly random `k_hat`-subset of the first `k_parts` regions.
pub fn sample_random_baseline(k_parts: usize, k_hat: usize, rng: &mut RngStream) -> Result<OcclusionPlan> {
    check_baseline(k_parts, k_hat)?;
    let all: Vec<usize> = (0..k_parts).collect();
    OcclusionPlan::new(rng.choose_subset(&all, k_hat))
}

/// Independent uniform `k_hat/2`-subsets of the upper and lower groups.
pub fn sample_random_torso(partition: &RegionPartition, k_hat: usize, rng: &mut RngStream) -> Result<OcclusionPlan> {
    check_torso(partition, k_hat)?;
    let mut kept = rng.choose_subset(partition.upper(), k_hat / 2);
    kept.extend(rng.choose_subset(partition.lower(), k_hat / 2));
    OcclusionPlan::new(kept)
}

pub fn sample_plan(cfg: &SabConfig, partition: &RegionPartition, rng: &mut RngStream) -> Result<OcclusionPlan> {
    match cfg.strategy {
        SamplingStrategy::RandomBaseline => sample_random_baseline(NUM_PARTS, cfg.k_hat, rng),
        SamplingStrategy::RandomTorso => sample_random_torso(partition, cfg.k_hat, rng),
    }
}

/// `GMP(Σ_{k kept} x_k)` with one plan shared by the whole batch.
pub fn adversarial_feature<T: Scalar>(g: &mut Graph<T>, rep: &SemanticAlignedRep, plan: &OcclusionPlan) -> Result<Var> {
    let mut kept = plan.kept().iter();
    let first = *kept.next().expect("plans are never empty");
    let mut acc = *rep
        .maps
        .get(first)
        .ok_or_else(|| Error::Shape(format!("plan keeps region {first} but only {} maps exist", rep.maps.len())))?;
    for &k in kept {
        let m = *rep
            .maps
            .get(k)
            .ok_or_else(|| Error::Shape(format!("plan keeps region {k} but only {} maps exist", rep.maps.len())))?;
        acc = g.add(acc, m)?;
    }
    Ok(g.global_max_pool(acc)?)
}

/// Per-image plans. `Σ_k F ⊙ m_k = F ⊙ Σ_k m_k`, so each image is masked once
/// by the sum of its kept masks and then pooled.
pub fn adversarial_feature_per_image<T: Scalar>(
    g: &mut Graph<T>,
    f: Var,
    masks: &Tensor<T>,
    plans: &[OcclusionPlan],
) -> Result<Var> {
    let kept: Vec<Vec<usize>> = plans.iter().map(|p| p.kept().to_vec()).collect();
    let plane = union_plane(masks, &kept)?;
    let masked = g.mask_channels(f, &plane)?;
    Ok(g.global_max_pool(masked)?)
}

/// SAB forward pass. Train mode occludes every image by its own plan and
/// needs labels; eval mode ignores `plans` and keeps all body parts.
#[allow(clippy::too_many_arguments)]
pub fn sab_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut ParameterSet<T>,
    f: Var,
    masks: &Tensor<T>,
    plans: &[OcclusionPlan],
    labels: Option<&[usize]>,
    mode: Mode,
    margin: f64,
) -> Result<BranchOutput> {
    let n = g.value(f).dims4("sab_forward")?[0];
    let keep_all;
    let plans = match mode {
        Mode::Train => {
            if labels.is_none() {
                return Err(Error::Num(numcore::Error::Contract("SAB training needs labels".into())));
            }
            plans
        }
        Mode::Eval => {
            keep_all = vec![OcclusionPlan::keep_all(); n];
            &keep_all
        }
    };
    if plans.len() != n {
        return Err(Error::Shape(format!("{} occlusion plans for a batch of {n}", plans.len())));
    }
    let emb = adversarial_feature_per_image(g, f, masks, plans)?;
    branch_head(g, params, "sab", emb, labels, mode, margin)
}
