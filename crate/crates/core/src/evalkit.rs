//! Inference embeddings (concatenated post-neck branch features) and
//! retrieval metrics: CMC and mean average precision.

use numcore::{Graph, Mode, Tensor};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::maskhead::{binarize, IouTally};
use crate::model::{backbone, forward_full, Batch, Model};
use crate::semantics::{resize_masks, SemanticAlignedRep, NUM_PARTS};

const EVAL_BATCH: usize = 32;

/// One embedding per row with the identity and camera of its image.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>, labels: Vec<usize>, cameras: Vec<usize>) -> Result<Self> {
        if dim == 0 || data.len() != dim * labels.len() || cameras.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} values, {} labels and {} cameras do not form rows of {dim}",
                data.len(),
                labels.len(),
                cameras.len()
            )));
        }
        Ok(Self {
            dim,
            data,
            labels,
            cameras,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..][..self.dim]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.rows(), self.dim], self.data.clone()).expect("rows validated at construction")
    }

    /// Rows scaled to unit L2 norm, accumulated in f64; zero rows stay zero.
    pub fn normalized_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows())
            .map(|i| {
                let r: Vec<f64> = self.row(i).iter().map(|&v| v as f64).collect();
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    r.into_iter().map(|v| v / n).collect()
                } else {
                    r
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// `cmc[r]` is the fraction of queries whose first match sits at rank
    /// `r + 1` or better.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub average_precisions: Vec<f64>,
    /// Queries without any valid gallery match, left out of every average.
    pub skipped_queries: usize,
}

impl RetrievalResult {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    pub fn cmc_at(&self, rank: usize) -> f64 {
        match self.cmc.get(rank.saturating_sub(1)) {
            Some(&v) => v,
            None => self.cmc.last().copied().unwrap_or(0.0),
        }
    }
}

/// Average precision of one ranked relevance list.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Ranks the gallery for every query by Euclidean distance between unit
/// rows, ties broken by gallery order. Gallery items sharing both identity
/// and camera with the query are dropped from its ranking.
pub fn retrieve(query: &EmbeddingMatrix, gallery: &EmbeddingMatrix) -> Result<RetrievalResult> {
    if query.dim != gallery.dim {
        return Err(Error::Shape(format!(
            "query rows have {} dims, gallery rows {}",
            query.dim, gallery.dim
        )));
    }
    let qn = query.normalized_rows();
    let gn = gallery.normalized_rows();
    let mut cmc = vec![0.0; gallery.rows().max(1)];
    let mut aps = Vec::new();
    let mut skipped = 0;
    for (qi, q) in qn.iter().enumerate() {
        let (ql, qc) = (query.labels[qi], query.cameras[qi]);
        let mut ranked: Vec<(f64, usize)> = gn
            .iter()
            .enumerate()
            .filter(|&(gi, _)| !(gallery.labels[gi] == ql && gallery.cameras[gi] == qc))
            .map(|(gi, g)| (q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), gi))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let relevant: Vec<bool> = ranked.iter().map(|&(_, gi)| gallery.labels[gi] == ql).collect();
        let Some(first) = relevant.iter().position(|&r| r) else {
            skipped += 1;
            continue;
        };
        for c in &mut cmc[first..] {
            *c += 1.0;
        }
        aps.push(average_precision(&relevant));
    }
    if aps.is_empty() {
        return Err(Error::Data("no query has a valid gallery match".into()));
    }
    if skipped > 0 {
        log::warn!("{skipped} queries had no valid gallery match and were skipped");
    }
    let valid = aps.len() as f64;
    cmc.iter_mut().for_each(|c| *c /= valid);
    Ok(RetrievalResult {
        cmc,
        map: aps.iter().sum::<f64>() / valid,
        average_precisions: aps,
        skipped_queries: skipped,
    })
}

/// Stacks images `[3,H,W]` into `[N,3,H,W]`.
pub fn stack_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let owned: Vec<Tensor<f32>> = images.iter().map(|t| (*t).clone()).collect();
    Ok(Tensor::stack(&owned)?)
}

/// Eval-mode embeddings of the given images.
pub fn extract_embeddings(
    model: &mut Model<f32>,
    images: &[&Tensor<f32>],
    labels: &[usize],
    cameras: &[usize],
) -> Result<EmbeddingMatrix> {
    let dim = model.embedding_dim();
    let mut data = Vec::with_capacity(images.len() * dim);
    for chunk in images.chunks(EVAL_BATCH) {
        let batch = Batch {
            images: stack_images(chunk)?,
            masks: None,
            labels: Vec::new(),
        };
        let mut g = Graph::new();
        let out = forward_full(&mut g, model, &batch, Mode::Eval, 0.0, None)?;
        let parts = out.inference_parts();
        let emb = g.concat_cols(&parts)?;
        data.extend_from_slice(g.value(emb).data());
    }
    EmbeddingMatrix::new(dim, data, labels.to_vec(), cameras.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    /// Clean queries against the gallery.
    Test,
    /// Occluded query variants against the same gallery.
    Occluded,
}

impl std::str::FromStr for EvalSplit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "test" => Ok(Self::Test),
            "occluded" => Ok(Self::Occluded),
            other => Err(format!("unknown split `{other}` (expected test or occluded)")),
        }
    }
}

pub fn embed_samples(model: &mut Model<f32>, ds: &Dataset, indices: &[usize]) -> Result<EmbeddingMatrix> {
    let images: Vec<&Tensor<f32>> = indices.iter().map(|&i| &ds.images[i]).collect();
    let labels: Vec<usize> = indices.iter().map(|&i| ds.identity(i)).collect();
    let cams: Vec<usize> = indices.iter().map(|&i| ds.camera(i)).collect();
    extract_embeddings(model, &images, &labels, &cams)
}

pub fn query_embeddings(model: &mut Model<f32>, ds: &Dataset, split: EvalSplit) -> Result<EmbeddingMatrix> {
    match split {
        EvalSplit::Test => embed_samples(model, ds, &ds.manifest.query),
        EvalSplit::Occluded => {
            let occ = &ds.manifest.occluded_queries;
            if occ.is_empty() {
                return Err(Error::Data("the dataset has no occluded queries".into()));
            }
            let images: Vec<&Tensor<f32>> = ds.occluded_images.iter().collect();
            let labels: Vec<usize> = occ.iter().map(|o| ds.identity(o.base)).collect();
            let cams: Vec<usize> = occ.iter().map(|o| ds.camera(o.base)).collect();
            extract_embeddings(model, &images, &labels, &cams)
        }
    }
}

pub fn evaluate(model: &mut Model<f32>, ds: &Dataset, split: EvalSplit) -> Result<RetrievalResult> {
    let q = query_embeddings(model, ds, split)?;
    let g = embed_samples(model, ds, &ds.manifest.gallery)?;
    retrieve(&q, &g)
}

/// Ground-truth masks of the given samples at the feature grid, `[N,K,h,w]`.
pub fn feature_masks(ds: &Dataset, indices: &[usize], grid: (usize, usize)) -> Result<Tensor<f32>> {
    let resized: Vec<Tensor<f32>> = indices
        .iter()
        .map(|&i| resize_masks(&ds.masks[i], grid.0, grid.1))
        .collect::<Result<_>>()?;
    Ok(Tensor::stack(&resized)?)
}

/// Per-part IoU of the predicted masks against ground truth at the feature
/// grid, pooled over the given samples.
pub fn mask_iou(model: &mut Model<f32>, ds: &Dataset, indices: &[usize]) -> Result<[f64; NUM_PARTS]> {
    if !model.config.components.mask {
        return Err(Error::Config("the model has no mask head".into()));
    }
    let grid = model.feature_grid();
    let mut tally = IouTally::default();
    for chunk in indices.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &ds.images[i]).collect();
        let batch = Batch {
            images: stack_images(&images)?,
            masks: None,
            labels: Vec::new(),
        };
        let mut g = Graph::new();
        let out = forward_full(&mut g, model, &batch, Mode::Eval, 0.0, None)?;
        let logits = out.mask_logits.expect("mask head enabled");
        let pred = binarize(g.value(logits), model.config.mask.threshold)?;
        tally.add(&pred, &feature_masks(ds, chunk, grid)?)?;
    }
    Ok(tally.per_part())
}

/// Mean pairwise cosine similarity of the pooled region vectors, using
/// ground-truth masks and eval-mode batchnorm.
pub fn region_similarity(model: &mut Model<f32>, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    let grid = model.feature_grid();
    let eps = model.config.loss.sd_epsilon;
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &ds.images[i]).collect();
        let mut g = Graph::new();
        let x = g.constant(stack_images(&images)?);
        let f = backbone(&mut g, &mut model.params, x, Mode::Eval)?;
        let masks = feature_masks(ds, chunk, grid)?;
        let rep = SemanticAlignedRep::build(&mut g, f, &masks)?;
        let sd = crate::losses::sd_loss(&mut g, &rep.pooled, eps)?;
        total += g.value(sd).item() as f64 * chunk.len() as f64;
    }
    Ok(total / indices.len().max(1) as f64)
}
