//! The full network: conv backbone, global branch, mask head, adversarial
//! branch and fusion branch, with the combined training objective.

use numcore::nn::{self, BatchNormConfig};
use numcore::{Graph, Mode, ParameterSet, RngStream, Scalar, Tensor, Var};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::{branch_head, register_bnneck, sd_loss, total_loss, BranchOutput, LossReport, LossTerms};
use crate::maskhead::{binarize, mask_loss, predict_masks, register_mask_head};
use crate::sab::{sab_forward, sample_plan, OcclusionPlan};
use crate::semantics::{RegionPartition, SemanticAlignedRep};
use crate::sfb::{register_sfb, sfb_forward, SfbOutput};

/// Total stride of the backbone.
pub const FEATURE_STRIDE: usize = 4;

const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    pub config: TrainConfig,
    pub params: ParameterSet<T>,
    pub num_classes: usize,
    pub image_size: (usize, usize),
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &TrainConfig, num_classes: usize, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        if height % FEATURE_STRIDE != 0 || width % FEATURE_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image size {height}x{width} is not a multiple of the backbone stride {FEATURE_STRIDE}"
            )));
        }
        if num_classes < 2 {
            return Err(Error::Config("at least two training identities are needed".into()));
        }
        let mut rng = RngStream::derive(config.seed, INIT_STREAM);
        let mut params = ParameterSet::new();
        let [c1, c2, c3] = config.backbone.channels;
        for (i, (cin, cout)) in [(3, c1), (c1, c2), (c2, c3)].into_iter().enumerate() {
            nn::register_conv(&mut params, &format!("backbone.conv{}", i + 1), cin, cout, 3, false, &mut rng)?;
            nn::register_batchnorm(&mut params, &format!("backbone.bn{}", i + 1), cout)?;
        }
        register_bnneck(&mut params, "global", c3, num_classes, &mut rng)?;
        let comp = config.components;
        if comp.mask {
            register_mask_head(&mut params, c3, config.mask.hidden_channels, &mut rng)?;
        }
        if comp.sab {
            register_bnneck(&mut params, "sab", c3, num_classes, &mut rng)?;
        }
        if comp.sfb {
            register_sfb(&mut params, &config.sfb, c3, num_classes, &mut rng)?;
        }
        Ok(Self {
            config: config.clone(),
            params,
            num_classes,
            image_size: (height, width),
        })
    }

    pub fn feature_grid(&self) -> (usize, usize) {
        (self.image_size.0 / FEATURE_STRIDE, self.image_size.1 / FEATURE_STRIDE)
    }

    pub fn channels(&self) -> usize {
        self.config.backbone.channels[2]
    }

    /// Length of the concatenated inference embedding.
    pub fn embedding_dim(&self) -> usize {
        let c = self.channels();
        let comp = self.config.components;
        c + if comp.sab { c } else { 0 } + if comp.sfb { self.config.sfb.hidden_dim } else { 0 }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            num_classes: self.num_classes,
            image_size: self.image_size,
        }
    }
}

/// Three conv + batchnorm + ReLU blocks with strides 2, 2, 1. The output is
/// non-negative.
pub fn backbone<T: Scalar>(g: &mut Graph<T>, params: &mut ParameterSet<T>, images: Var, mode: Mode) -> Result<Var> {
    let mut x = images;
    for (i, stride) in [2, 2, 1].into_iter().enumerate() {
        x = nn::conv(g, params, &format!("backbone.conv{}", i + 1), x, stride, 1)?;
        x = nn::batchnorm(g, params, &format!("backbone.bn{}", i + 1), x, mode, BatchNormConfig::default())?;
        x = g.relu(x);
    }
    Ok(x)
}

/// One batch. `masks` are ground-truth masks at the feature grid
/// `[N,K,h,w]`, required in train mode when masks are used.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar = f32> {
    pub images: Tensor<T>,
    pub masks: Option<Tensor<T>>,
    pub labels: Vec<usize>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub features: Var,
    pub global: BranchOutput,
    pub sab: Option<BranchOutput>,
    pub sfb: Option<SfbOutput>,
    pub mask_logits: Option<Var>,
    /// Masks the region branches consumed, `[N,K,h,w]`.
    pub region_masks: Option<Tensor<f64>>,
    pub pooled: Option<Vec<Var>>,
    pub total: Option<Var>,
    pub report: Option<LossReport>,
}

impl ForwardOutput {
    /// Post-neck branch features in concatenation order.
    pub fn inference_parts(&self) -> Vec<Var> {
        let mut v = vec![self.global.feature];
        v.extend(self.sab.map(|b| b.feature));
        v.extend(self.sfb.as_ref().map(|s| s.branch.feature));
        v
    }
}

/// Forward pass through every enabled component.
///
/// Train mode uses ground-truth masks, draws a fresh occlusion plan per image
/// from `plan_rng`, and returns the objective with `gamma` as the weight of
/// the diversity term. Eval mode uses the mask head's thresholded prediction
/// and the un-occluded adversarial branch.
pub fn forward_full<T: Scalar>(
    g: &mut Graph<T>,
    model: &mut Model<T>,
    batch: &Batch<T>,
    mode: Mode,
    gamma: f64,
    plan_rng: Option<&mut RngStream>,
) -> Result<ForwardOutput> {
    let cfg = model.config.clone();
    let comp = cfg.components;
    let margin = cfg.loss.margin;
    let train = mode == Mode::Train;
    let labels = if train {
        if batch.labels.len() != batch.images.shape()[0] {
            return Err(Error::Shape(format!(
                "{} labels for {} images",
                batch.labels.len(),
                batch.images.shape()[0]
            )));
        }
        Some(batch.labels.as_slice())
    } else {
        None
    };
    let params = &mut model.params;

    let x = g.constant(batch.images.clone());
    let f = backbone(g, params, x, mode)?;
    let n = g.value(f).dims4("forward_full")?[0];
    let global_emb = g.global_max_pool(f)?;
    let global = branch_head(g, params, "global", global_emb, labels, mode, margin)?;

    let mut mask_logits = None;
    let mut l_mask = None;
    let mut region_masks: Option<Tensor<T>> = None;
    if comp.mask {
        let logits = predict_masks(g, params, f)?;
        mask_logits = Some(logits);
        if train {
            let gt = batch
                .masks
                .as_ref()
                .ok_or_else(|| Error::Data("train mode needs ground-truth masks".into()))?;
            l_mask = Some(mask_loss(g, logits, gt)?);
            region_masks = Some(gt.clone());
        } else {
            region_masks = Some(binarize(g.value(logits), cfg.mask.threshold)?);
        }
    }

    let mut sab = None;
    let mut sfb = None;
    let mut pooled = None;
    if comp.sab || comp.sfb {
        let masks = region_masks.as_ref().expect("validated: region branches imply the mask head");
        if comp.sab {
            let plans: Vec<OcclusionPlan> = if train {
                let rng = plan_rng.ok_or_else(|| Error::Config("SAB training needs an occlusion RNG".into()))?;
                let part = RegionPartition::default();
                (0..n).map(|_| sample_plan(&cfg.sab, &part, rng)).collect::<Result<_>>()?
            } else {
                vec![OcclusionPlan::keep_all(); n]
            };
            sab = Some(sab_forward(g, params, f, masks, &plans, labels, mode, margin)?);
        }
        let rep = SemanticAlignedRep::build(g, f, masks)?;
        if comp.sfb {
            sfb = Some(sfb_forward(g, params, &cfg.sfb, &rep.pooled, labels, mode, margin)?);
        }
        pooled = Some(rep.pooled);
    }

    let (mut total, mut report) = (None, None);
    if train {
        let mut cls = vec![global.cls.expect("train mode")];
        let mut tri = vec![global.tri.expect("train mode")];
        if let Some(b) = sab {
            cls.extend(b.cls);
            tri.extend(b.tri);
        }
        if let Some(s) = &sfb {
            cls.extend(s.branch.cls);
            cls.extend(s.region_cls);
            tri.extend(s.branch.tri);
        }
        let l_cls = g.mean_of(&cls)?;
        let l_tri = g.mean_of(&tri)?;
        let l_sd = match &pooled {
            Some(p) => Some(sd_loss(g, p, cfg.loss.sd_epsilon)?),
            None => None,
        };
        let weights = crate::losses::LossWeights { gamma, ..cfg.loss };
        let terms = LossTerms {
            cls: l_cls,
            tri: l_tri,
            sd: l_sd,
            mask: l_mask,
        };
        let (t, r) = total_loss(g, &terms, &weights)?;
        total = Some(t);
        report = Some(r);
    }

    Ok(ForwardOutput {
        features: f,
        global,
        sab,
        sfb,
        mask_logits,
        region_masks: region_masks.map(|m| m.cast()),
        pooled,
        total,
        report,
    })
}
