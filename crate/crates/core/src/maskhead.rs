//! Light segmentation head on the backbone map: two 3x3 convs with ReLU and a
//! 1x1 conv to one logit plane per region, trained with per-pixel BCE.

use numcore::kernels::sigmoid;
use numcore::nn;
use numcore::{Graph, ParameterSet, RngStream, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantics::{BACKGROUND, NUM_PARTS, NUM_REGIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub threshold: f64,
    /// Same coefficient as `loss.lambda_mask`; either key may set it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub hidden_channels: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            lambda: None,
            hidden_channels: 64,
        }
    }
}

pub fn register_mask_head<T: Scalar>(
    params: &mut ParameterSet<T>,
    channels: usize,
    hidden: usize,
    rng: &mut RngStream,
) -> Result<()> {
    nn::register_conv(params, "mask.conv1", channels, hidden, 3, true, rng)?;
    nn::register_conv(params, "mask.conv2", hidden, hidden, 3, true, rng)?;
    nn::register_conv(params, "mask.conv3", hidden, NUM_REGIONS, 1, true, rng)?;
    Ok(())
}

/// Raw logits `[N,K,h,w]` from features `[N,C,h,w]`.
pub fn predict_masks<T: Scalar>(g: &mut Graph<T>, params: &ParameterSet<T>, f: Var) -> Result<Var> {
    let x = nn::conv(g, params, "mask.conv1", f, 1, 1)?;
    let x = g.relu(x);
    let x = nn::conv(g, params, "mask.conv2", x, 1, 1)?;
    let x = g.relu(x);
    Ok(nn::conv(g, params, "mask.conv3", x, 1, 0)?)
}

/// Mean per-pixel, per-channel binary cross-entropy against `pseudo` in [0,1].
pub fn mask_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, pseudo: &Tensor<T>) -> Result<Var> {
    if pseudo.data().iter().any(|&v| v < T::zero() || v > T::one()) {
        return Err(Error::Data("pseudo masks must lie in [0, 1]".into()));
    }
    Ok(g.bce_with_logits(logits, pseudo)?)
}

/// Inference masks: `sigmoid(logit) >= threshold`, background forced to ones.
pub fn binarize<T: Scalar>(logits: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
    let [_, k, h, w] = logits.dims4("binarize")?;
    let plane = h * w;
    let thr = T::lit(threshold);
    let mut out = Tensor::from_fn(logits.shape(), |i| {
        if sigmoid(logits.data()[i]) >= thr {
            T::one()
        } else {
            T::zero()
        }
    });
    if k > BACKGROUND {
        for chunk in out.data_mut().chunks_mut(k * plane) {
            chunk[BACKGROUND * plane..][..plane].fill(T::one());
        }
    }
    Ok(out)
}

/// Intersection and union counts per body part, summed over images.
/// Ground truth counts a pixel when its value is at least 0.5.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IouTally {
    pub intersection: [u64; NUM_PARTS],
    pub union: [u64; NUM_PARTS],
}

impl IouTally {
    /// `pred` and `truth` are `[N,K,h,w]`.
    pub fn add<T: Scalar>(&mut self, pred: &Tensor<T>, truth: &Tensor<T>) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(Error::Shape(format!(
                "predicted masks {:?} vs ground truth {:?}",
                pred.shape(),
                truth.shape()
            )));
        }
        let [n, k, h, w] = pred.dims4("iou")?;
        let plane = h * w;
        let half = T::lit(0.5);
        for b in 0..n {
            for part in 0..NUM_PARTS.min(k) {
                let off = (b * k + part) * plane;
                for (&p, &t) in pred.data()[off..][..plane].iter().zip(&truth.data()[off..][..plane]) {
                    let (p, t) = (p >= half, t >= half);
                    self.intersection[part] += (p && t) as u64;
                    self.union[part] += (p || t) as u64;
                }
            }
        }
        Ok(())
    }

    /// IoU per part; a part absent from both prediction and truth scores 1.
    pub fn per_part(&self) -> [f64; NUM_PARTS] {
        std::array::from_fn(|k| {
            if self.union[k] == 0 {
                1.0
            } else {
                self.intersection[k] as f64 / self.union[k] as f64
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_threshold_to_ones() {
        let m = binarize(&Tensor::<f32>::zeros(&[1, 8, 2, 2]), 0.5).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn background_is_forced_on() {
        let m = binarize(&Tensor::<f32>::full(&[2, 8, 2, 2], -5.0), 0.5).unwrap();
        for b in 0..2 {
            let img = &m.data()[b * 32..][..32];
            assert!(img[..28].iter().all(|&v| v == 0.0));
            assert!(img[28..].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn iou_counts() {
        let mut pred = Tensor::<f32>::zeros(&[1, 8, 1, 4]);
        let mut truth = Tensor::<f32>::zeros(&[1, 8, 1, 4]);
        pred.data_mut()[..3].fill(1.0);
        truth.data_mut()[1..4].fill(1.0);
        let mut t = IouTally::default();
        t.add(&pred, &truth).unwrap();
        let iou = t.per_part();
        assert!((iou[0] - 0.5).abs() < 1e-12);
        assert_eq!(iou[1], 1.0);
    }
}
