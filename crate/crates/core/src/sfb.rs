//! Semantic fusion branch: pooled region vectors fed through a one-layer GRU
//! in a fixed order, plus the per-region projection comparator.

use numcore::nn::{self, GruWeights};
use numcore::{Graph, Mode, ParameterSet, RngStream, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{branch_head, bnneck_cls, register_bnneck, BranchOutput};
use crate::semantics::{region_index, NUM_REGIONS, REGION_NAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfbConfig {
    pub hidden_dim: usize,
    pub region_order: Vec<String>,
    pub use_ablation_branch: bool,
}

impl Default for SfbConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            region_order: REGION_NAMES.iter().map(|s| s.to_string()).collect(),
            use_ablation_branch: false,
        }
    }
}

impl SfbConfig {
    /// Region indices in feed order; must be a permutation of all regions.
    pub fn order(&self) -> Result<Vec<usize>> {
        let order: Vec<usize> = self
            .region_order
            .iter()
            .map(|n| region_index(n).ok_or_else(|| Error::Config(format!("unknown region `{n}` in sfb.region_order"))))
            .collect::<Result<_>>()?;
        let mut seen = order.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != NUM_REGIONS || order.len() != NUM_REGIONS {
            return Err(Error::Config("sfb.region_order must list every region exactly once".into()));
        }
        Ok(order)
    }

    pub fn validate(&self) -> Result<()> {
        self.order()?;
        if self.hidden_dim == 0 {
            return Err(Error::Config("sfb.hidden_dim must be positive".into()));
        }
        if self.use_ablation_branch && self.hidden_dim % NUM_REGIONS != 0 {
            return Err(Error::Config(format!(
                "sfb.hidden_dim {} is not divisible by {NUM_REGIONS} regions",
                self.hidden_dim
            )));
        }
        Ok(())
    }
}

/// Registers the fusion module (GRU or projections), the fused-embedding
/// BNNeck head and one BNNeck head per region.
pub fn register_sfb<T: Scalar>(
    params: &mut ParameterSet<T>,
    cfg: &SfbConfig,
    channels: usize,
    classes: usize,
    rng: &mut RngStream,
) -> Result<()> {
    cfg.validate()?;
    if cfg.use_ablation_branch {
        let width = cfg.hidden_dim / NUM_REGIONS;
        let std = (1.0 / channels as f64).sqrt();
        for k in 0..NUM_REGIONS {
            nn::register_linear(params, &format!("sfb.ab.proj{k}"), channels, width, std, true, rng)?;
        }
    } else {
        nn::register_gru(params, "sfb.gru", channels, cfg.hidden_dim, rng)?;
    }
    register_bnneck(params, "sfb", cfg.hidden_dim, classes, rng)?;
    for k in 0..NUM_REGIONS {
        register_bnneck(params, &format!("sfb.region{k}"), channels, classes, rng)?;
    }
    Ok(())
}

/// `h_0 = 0`, `h_t = GRU(pooled[order[t]], h_{t-1})`; returns the last state.
pub fn fuse_sequential<T: Scalar>(g: &mut Graph<T>, pooled: &[Var], order: &[usize], gru: &GruWeights) -> Result<Var> {
    let first = *pooled.first().ok_or_else(|| Error::Shape("no pooled regions to fuse".into()))?;
    let n = g.value(first).dims2("fuse_sequential")?[0];
    let hidden = g.shape(gru.u_z)[0];
    let mut h = g.constant(Tensor::zeros(&[n, hidden]));
    for &k in order {
        let x = *pooled
            .get(k)
            .ok_or_else(|| Error::Shape(format!("region order names {k} but {} vectors were pooled", pooled.len())))?;
        h = nn::gru_cell_step(g, x, h, gru)?;
    }
    Ok(h)
}

/// Per-region linear projection to `Hd/K` dims, concatenated in feed order.
pub fn ablation_branch<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParameterSet<T>,
    pooled: &[Var],
    order: &[usize],
) -> Result<Var> {
    let mut parts = Vec::with_capacity(order.len());
    for &k in order {
        let x = *pooled
            .get(k)
            .ok_or_else(|| Error::Shape(format!("region order names {k} but {} vectors were pooled", pooled.len())))?;
        parts.push(nn::linear(g, params, &format!("sfb.ab.proj{k}"), x)?);
    }
    Ok(g.concat_cols(&parts)?)
}

/// One cross-entropy per region through that region's own BNNeck head.
pub fn per_region_supervision<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut ParameterSet<T>,
    pooled: &[Var],
    labels: &[usize],
    mode: Mode,
) -> Result<Vec<Var>> {
    if mode != Mode::Train {
        return Err(Error::Num(numcore::Error::Contract(
            "per-region supervision only exists in train mode".into(),
        )));
    }
    pooled
        .iter()
        .enumerate()
        .map(|(k, &p)| Ok(bnneck_cls(g, params, &format!("sfb.region{k}"), p, labels, mode)?.0))
        .collect()
}

/// The fused branch output and, in train mode, the mean region loss.
#[derive(Debug)]
pub struct SfbOutput {
    pub branch: BranchOutput,
    pub region_cls: Option<Var>,
}

pub fn sfb_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut ParameterSet<T>,
    cfg: &SfbConfig,
    pooled: &[Var],
    labels: Option<&[usize]>,
    mode: Mode,
    margin: f64,
) -> Result<SfbOutput> {
    let order = cfg.order()?;
    let fused = if cfg.use_ablation_branch {
        ablation_branch(g, params, pooled, &order)?
    } else {
        let w = GruWeights::bind(g, params, "sfb.gru")?;
        fuse_sequential(g, pooled, &order, &w)?
    };
    let branch = branch_head(g, params, "sfb", fused, labels, mode, margin)?;
    let region_cls = match labels {
        Some(labels) if mode == Mode::Train => {
            let losses = per_region_supervision(g, params, pooled, labels, mode)?;
            Some(g.mean_of(&losses)?)
        }
        _ => None,
    };
    Ok(SfbOutput { branch, region_cls })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_order_is_canonical() {
        assert_eq!(SfbConfig::default().order().unwrap(), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn order_must_be_a_permutation() {
        let mut cfg = SfbConfig::default();
        cfg.region_order[1] = "head".into();
        assert!(cfg.validate().is_err());
        cfg.region_order[1] = "wing".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ablation_width_must_divide() {
        let cfg = SfbConfig {
            hidden_dim: 60,
            use_ablation_branch: true,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
