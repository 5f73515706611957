//! Region masks and the semantic aligned representation: the backbone map
//! masked by every region, and its per-region max-pooled vectors.

use numcore::{bilinear_resize, Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

pub const REGION_NAMES: [&str; 8] = [
    "head",
    "chest",
    "upper_arm",
    "lower_arm",
    "upper_leg",
    "lower_leg",
    "foot",
    "background",
];
pub const NUM_REGIONS: usize = 8;
pub const NUM_PARTS: usize = 7;

pub const HEAD: usize = 0;
pub const CHEST: usize = 1;
pub const UPPER_ARM: usize = 2;
pub const LOWER_ARM: usize = 3;
pub const UPPER_LEG: usize = 4;
pub const LOWER_LEG: usize = 5;
pub const FOOT: usize = 6;
pub const BACKGROUND: usize = 7;

pub fn region_index(name: &str) -> Option<usize> {
    REGION_NAMES.iter().position(|&n| n == name)
}

/// `K` region masks at image resolution, stored as one `[K,H,W]` tensor in
/// [`REGION_NAMES`] order. Body parts are binary; background is all ones.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMaskSet<T: Scalar = f32> {
    masks: Tensor<T>,
}

impl<T: Scalar> RegionMaskSet<T> {
    pub fn new(masks: Tensor<T>) -> Result<Self> {
        let [k, _, _] = dims3(&masks)?;
        if k != NUM_REGIONS {
            return Err(Error::Shape(format!("expected {NUM_REGIONS} region masks, got {k}")));
        }
        let plane = masks.numel() / k;
        for (r, chunk) in masks.data().chunks(plane).enumerate() {
            let ok = if r == BACKGROUND {
                chunk.iter().all(|&v| v == T::one())
            } else {
                chunk.iter().all(|&v| v == T::zero() || v == T::one())
            };
            if !ok {
                return Err(Error::Data(format!("mask `{}` is not binary as required", REGION_NAMES[r])));
            }
        }
        Ok(Self { masks })
    }

    pub fn height(&self) -> usize {
        self.masks.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.masks.shape()[2]
    }

    pub fn mask(&self, k: usize) -> &[T] {
        let plane = self.height() * self.width();
        &self.masks.data()[k * plane..][..plane]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.masks
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.masks
    }

    /// Number of pixels covered by each region.
    pub fn areas(&self) -> Vec<usize> {
        (0..NUM_REGIONS)
            .map(|k| self.mask(k).iter().filter(|&&v| v > T::zero()).count())
            .collect()
    }
}

fn dims3<T: Scalar>(t: &Tensor<T>) -> Result<[usize; 3]> {
    match *t.shape() {
        [a, b, c] => Ok([a, b, c]),
        ref s => Err(Error::Shape(format!("expected a [K,H,W] mask tensor, got {s:?}"))),
    }
}

/// Bilinear resize of every mask to the feature grid. Values stay fractional.
pub fn resize_masks<T: Scalar>(masks: &RegionMaskSet<T>, feat_h: usize, feat_w: usize) -> Result<Tensor<T>> {
    Ok(bilinear_resize(masks.tensor(), feat_h, feat_w)?)
}

/// The `[N,h,w]` plane of region `k` from batched masks `[N,K,h,w]`.
pub fn region_plane<T: Scalar>(masks: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [n, kk, h, w] = masks.dims4("region_plane")?;
    if k >= kk {
        return Err(Error::Shape(format!("region {k} out of range for {kk} masks")));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        out.extend_from_slice(&masks.data()[(b * kk + k) * plane..][..plane]);
    }
    Ok(Tensor::new(&[n, h, w], out)?)
}

/// Per-image sum of the selected regions' planes: `[N,K,h,w] -> [N,h,w]`.
pub fn union_plane<T: Scalar>(masks: &Tensor<T>, kept: &[Vec<usize>]) -> Result<Tensor<T>> {
    let [n, kk, h, w] = masks.dims4("union_plane")?;
    if kept.len() != n {
        return Err(Error::Shape(format!("{} region sets for a batch of {n}", kept.len())));
    }
    let plane = h * w;
    let mut out = vec![T::zero(); n * plane];
    for (b, regions) in kept.iter().enumerate() {
        let dst = &mut out[b * plane..][..plane];
        for &k in regions {
            if k >= kk {
                return Err(Error::Shape(format!("region {k} out of range for {kk} masks")));
            }
            for (d, &m) in dst.iter_mut().zip(&masks.data()[(b * kk + k) * plane..][..plane]) {
                *d += m;
            }
        }
    }
    Ok(Tensor::new(&[n, h, w], out)?)
}

fn check_grid<T: Scalar>(g: &Graph<T>, f: Var, masks: &Tensor<T>) -> Result<usize> {
    let [n, _, h, w] = g.value(f).dims4("align")?;
    let [mn, k, mh, mw] = masks.dims4("align")?;
    if mn != n {
        return Err(Error::Shape(format!("masks cover {mn} images, features {n}")));
    }
    if (mh, mw) != (h, w) {
        return Err(Error::Shape(format!(
            "masks are {mh}x{mw} but the feature map is {h}x{w}; resize the masks to the feature grid first"
        )));
    }
    Ok(k)
}

/// `x_k = F ⊙ mask_k` for every region, `F` `[N,C,h,w]`, masks `[N,K,h,w]`.
pub fn align<T: Scalar>(g: &mut Graph<T>, f: Var, masks: &Tensor<T>) -> Result<Vec<Var>> {
    let k = check_grid(g, f, masks)?;
    (0..k)
        .map(|r| {
            let plane = region_plane(masks, r)?;
            Ok(g.mask_channels(f, &plane)?)
        })
        .collect()
}

/// Global max pooling of each region map, `[N,C,h,w] -> [N,C]`.
pub fn pool_regions<T: Scalar>(g: &mut Graph<T>, maps: &[Var]) -> Result<Vec<Var>> {
    maps.iter().map(|&m| Ok(g.global_max_pool(m)?)).collect()
}

/// Masked region maps together with their pooled vectors.
#[derive(Debug, Clone)]
pub struct SemanticAlignedRep {
    pub maps: Vec<Var>,
    pub pooled: Vec<Var>,
}

impl SemanticAlignedRep {
    pub fn build<T: Scalar>(g: &mut Graph<T>, f: Var, masks: &Tensor<T>) -> Result<Self> {
        let maps = align(g, f, masks)?;
        let pooled = pool_regions(g, &maps)?;
        Ok(Self { maps, pooled })
    }
}

/// Upper and lower torso groups used by torso-balanced sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    upper: Vec<usize>,
    lower: Vec<usize>,
}

impl Default for RegionPartition {
    fn default() -> Self {
        Self {
            upper: vec![HEAD, UPPER_ARM, LOWER_ARM, CHEST],
            lower: vec![UPPER_LEG, LOWER_LEG, FOOT],
        }
    }
}

impl RegionPartition {
    pub fn new(upper: Vec<usize>, lower: Vec<usize>) -> Result<Self> {
        let all: Vec<usize> = upper.iter().chain(&lower).copied().collect();
        if all.iter().any(|&k| k >= NUM_PARTS) {
            return Err(Error::Config("torso groups may only hold body parts".into()));
        }
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != all.len() {
            return Err(Error::Config("torso groups overlap".into()));
        }
        Ok(Self { upper, lower })
    }

    pub fn upper(&self) -> &[usize] {
        &self.upper
    }

    pub fn lower(&self) -> &[usize] {
        &self.lower
    }
}
