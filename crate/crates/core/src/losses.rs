//! Classification through a BNNeck head, batch-hard triplet, semantic
//! diversity, and the weighted total objective.

use numcore::nn::{self, BatchNormConfig};
use numcore::{Graph, Mode, ParameterSet, RngStream, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gamma: f64,
    pub lambda_mask: f64,
    pub margin: f64,
    pub sd_epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 2e-3,
            lambda_mask: 2.0,
            margin: 0.3,
            sd_epsilon: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.lambda_mask >= 0.0) {
            return Err(Error::Config("loss.gamma and loss.lambda_mask must be non-negative".into()));
        }
        if !(self.sd_epsilon > 0.0) {
            return Err(Error::Config("loss.sd_epsilon must be positive".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config("loss.margin must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_tri: f64,
    pub l_sd: f64,
    pub l_mask: f64,
    pub l_total: f64,
}

/// Registers a BNNeck head: batchnorm over the embedding and a bias-free
/// classifier.
pub fn register_bnneck<T: Scalar>(
    params: &mut ParameterSet<T>,
    prefix: &str,
    dim: usize,
    classes: usize,
    rng: &mut RngStream,
) -> Result<()> {
    nn::register_batchnorm(params, &format!("{prefix}.neck"), dim)?;
    nn::register_linear(params, &format!("{prefix}.classifier"), dim, classes, 1e-3, false, rng)?;
    Ok(())
}

/// Post-neck feature of an embedding.
pub fn bnneck_feature<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut ParameterSet<T>,
    prefix: &str,
    embedding: Var,
    mode: Mode,
) -> Result<Var> {
    Ok(nn::batchnorm(g, params, &format!("{prefix}.neck"), embedding, mode, BatchNormConfig::default())?)
}

/// Cross-entropy of `classifier(batchnorm(embedding))`; returns the loss and
/// the post-neck feature.
pub fn bnneck_cls<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut ParameterSet<T>,
    prefix: &str,
    embedding: Var,
    labels: &[usize],
    mode: Mode,
) -> Result<(Var, Var)> {
    let feat = bnneck_feature(g, params, prefix, embedding, mode)?;
    let logits = nn::linear(g, params, &format!("{prefix}.classifier"), feat)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    Ok((loss, feat))
}

/// Hardest positive and hardest negative of every anchor that has both, as
/// flat indices into the `B×B` distance matrix.
pub fn hard_pairs<T: Scalar>(dist: &[T], labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let b = labels.len();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for a in 0..b {
        let row = &dist[a * b..][..b];
        let mut hp: Option<usize> = None;
        let mut hn: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if hp.is_none_or(|p| row[j] > row[p]) {
                    hp = Some(j);
                }
            } else if hn.is_none_or(|n| row[j] < row[n]) {
                hn = Some(j);
            }
        }
        if let (Some(p), Some(n)) = (hp, hn) {
            pos.push(a * b + p);
            neg.push(a * b + n);
        }
    }
    (pos, neg)
}

/// Batch-hard triplet loss: mean over anchors of
/// `max(0, d(a, hardest positive) - d(a, hardest negative) + margin)`.
/// Anchors without a positive or a negative are skipped.
pub fn batch_hard_triplet<T: Scalar>(g: &mut Graph<T>, embeddings: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let [b, _] = g.value(embeddings).dims2("batch_hard_triplet")?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} embeddings", labels.len())));
    }
    let dist = g.pairwise_distances(embeddings)?;
    let (pos, neg) = hard_pairs(g.value(dist).data(), labels);
    if pos.is_empty() {
        return Err(Error::Num(numcore::Error::Contract(
            "batch_hard_triplet: no anchor has both a positive and a negative".into(),
        )));
    }
    let dp = g.gather(dist, &pos)?;
    let dn = g.gather(dist, &neg)?;
    let gap = g.sub(dp, dn)?;
    let gap = g.add_scalar(gap, T::lit(margin));
    let hinge = g.relu(gap);
    Ok(g.mean(hinge))
}

/// Mean over the batch and over unordered distinct region pairs of the
/// cosine similarity `<p_i, p_j> / max(|p_i| |p_j|, eps)`.
pub fn sd_loss<T: Scalar>(g: &mut Graph<T>, pooled: &[Var], epsilon: f64) -> Result<Var> {
    if pooled.len() < 2 {
        return Err(Error::Config("sd_loss needs at least two regions".into()));
    }
    let sq: Vec<Var> = pooled.iter().map(|&p| g.row_dot(p, p)).collect::<numcore::Result<_>>()?;
    let floor = T::lit(epsilon * epsilon);
    let mut terms = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            let dot = g.row_dot(pooled[i], pooled[j])?;
            let prod = g.mul(sq[i], sq[j])?;
            let prod = g.clamp_min(prod, floor);
            let denom = g.sqrt(prod);
            let cos = g.div(dot, denom)?;
            terms.push(g.mean(cos));
        }
    }
    Ok(g.mean_of(&terms)?)
}

/// The scalar parts of the objective before weighting.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub cls: Var,
    pub tri: Var,
    pub sd: Option<Var>,
    pub mask: Option<Var>,
}

/// `l_cls + l_tri + gamma·l_sd + lambda·l_mask`. A missing term counts as
/// zero; a non-finite term aborts with its name.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossReport)> {
    let read = |g: &Graph<T>, v: Option<Var>, name: &str| -> Result<f64> {
        match v {
            None => Ok(0.0),
            Some(v) => {
                let x = g.value(v).item().as_f64();
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(Error::NonFinite { component: name.into() })
                }
            }
        }
    };
    let l_cls = read(g, Some(terms.cls), "l_cls")?;
    let l_tri = read(g, Some(terms.tri), "l_tri")?;
    let l_sd = read(g, terms.sd, "l_sd")?;
    let l_mask = read(g, terms.mask, "l_mask")?;

    let mut total = g.add(terms.cls, terms.tri)?;
    if let Some(sd) = terms.sd {
        let w = g.scale(sd, T::lit(weights.gamma));
        total = g.add(total, w)?;
    }
    if let Some(m) = terms.mask {
        let w = g.scale(m, T::lit(weights.lambda_mask));
        total = g.add(total, w)?;
    }
    let report = LossReport {
        l_cls,
        l_tri,
        l_sd,
        l_mask,
        l_total: g.value(total).item().as_f64(),
    };
    Ok((total, report))
}

/// Plain-number form of the objective.
pub fn combine(l_cls: f64, l_tri: f64, l_sd: f64, l_mask: f64, weights: &LossWeights) -> LossReport {
    LossReport {
        l_cls,
        l_tri,
        l_sd,
        l_mask,
        l_total: l_cls + l_tri + weights.gamma * l_sd + weights.lambda_mask * l_mask,
    }
}

/// What one branch contributes: its pre-neck embedding, post-neck feature,
/// and in train mode its classification and triplet losses.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    pub embedding: Var,
    pub feature: Var,
    pub cls: Option<Var>,
    pub tri: Option<Var>,
}

/// Runs the BNNeck head on an embedding. With labels, also computes the
/// cross-entropy on the post-neck feature and the triplet loss on the
/// pre-neck embedding.
pub fn branch_head<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut ParameterSet<T>,
    prefix: &str,
    embedding: Var,
    labels: Option<&[usize]>,
    mode: Mode,
    margin: f64,
) -> Result<BranchOutput> {
    match labels {
        Some(labels) => {
            let (cls, feature) = bnneck_cls(g, params, prefix, embedding, labels, mode)?;
            let tri = batch_hard_triplet(g, embedding, labels, margin)?;
            Ok(BranchOutput {
                embedding,
                feature,
                cls: Some(cls),
                tri: Some(tri),
            })
        }
        None => Ok(BranchOutput {
            embedding,
            feature: bnneck_feature(g, params, prefix, embedding, mode)?,
            cls: None,
            tri: None,
        }),
    }
}
