//! Procedural pedestrian-like images with exact region masks, identity and
//! camera labels, the train/query/gallery split, occluded query variants and
//! the P x Q identity batch sampler.

use std::fs;
use std::path::{Path, PathBuf};

use numcore::rng::mix64;
use numcore::{io as mgt, RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantics::{RegionMaskSet, BACKGROUND, NUM_PARTS, NUM_REGIONS, REGION_NAMES};
use crate::semantics::{CHEST, FOOT, HEAD, LOWER_ARM, LOWER_LEG, UPPER_ARM, UPPER_LEG};

/// The body layout lives on a 16 x 8 grid of cells; every part boundary and
/// every jitter step is a whole cell.
pub const GRID_ROWS: usize = 16;
pub const GRID_COLS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub num_ids: usize,
    pub imgs_per_id: usize,
    pub occlusion_rate: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_ids: 32,
            imgs_per_id: 16,
            occlusion_rate: 1.0,
            height: 64,
            width: 32,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 4 {
            return Err(Error::Config(format!(
                "num_ids must be at least 4 to split train and test identities, got {}",
                self.num_ids
            )));
        }
        if self.imgs_per_id < 4 {
            return Err(Error::Config(format!(
                "imgs_per_id must be at least 4 so every query keeps a cross-camera match, got {}",
                self.imgs_per_id
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(Error::Config("occlusion_rate must lie in [0, 1]".into()));
        }
        if self.height == 0 || self.width == 0 || self.height % GRID_ROWS != 0 || self.width % GRID_COLS != 0 {
            return Err(Error::Config(format!(
                "image size must be a positive multiple of {GRID_ROWS}x{GRID_COLS}, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub identity: usize,
    pub camera: usize,
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccludedEntry {
    /// Index of the un-occluded query sample.
    pub base: usize,
    pub image: String,
    pub occluded_regions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DataConfig,
    pub region_names: Vec<String>,
    pub samples: Vec<SampleEntry>,
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
    pub occluded_queries: Vec<OccludedEntry>,
}

/// Appearance of one region: palette color and stripe frequency (0 = plain).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionLook {
    pub color: usize,
    pub stripes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticIdentity {
    pub id: usize,
    pub looks: [RegionLook; NUM_PARTS],
    /// Overall reflectance multiplier.
    pub scale: f64,
}

const CLOTH: [[f64; 3]; 7] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.2],
    [0.2, 0.3, 0.9],
    [0.9, 0.85, 0.2],
    [0.8, 0.8, 0.8],
    [0.6, 0.2, 0.75],
    [0.95, 0.5, 0.1],
];
const SKIN: [[f64; 3]; 3] = [[0.95, 0.8, 0.65], [0.75, 0.55, 0.4], [0.45, 0.3, 0.2]];
const SHOES: [[f64; 3]; 3] = [[0.3, 0.18, 0.1], [0.1, 0.1, 0.12], [0.32, 0.32, 0.36]];
const STRIPE_LEVELS: usize = 3;

fn palette(part: usize) -> &'static [[f64; 3]] {
    match part {
        HEAD | LOWER_ARM => &SKIN,
        FOOT => &SHOES,
        _ => &CLOTH,
    }
}

impl SyntheticIdentity {
    fn draw(id: usize, rng: &mut RngStream) -> Self {
        let looks = std::array::from_fn(|part| RegionLook {
            color: rng.below(palette(part).len()),
            stripes: if part == CHEST || part == UPPER_LEG {
                rng.below(STRIPE_LEVELS)
            } else {
                0
            },
        });
        Self {
            id,
            looks,
            scale: rng.uniform_range(0.85, 1.0),
        }
    }

    pub fn differing_regions(&self, other: &Self) -> usize {
        self.looks.iter().zip(&other.looks).filter(|(a, b)| a != b).count()
    }
}

/// Identities with pairwise at least two differing regions.
pub fn draw_identities(seed: u64, count: usize) -> Vec<SyntheticIdentity> {
    let mut rng = RngStream::derive(seed, 0x1d);
    let mut out: Vec<SyntheticIdentity> = Vec::with_capacity(count);
    while out.len() < count {
        let cand = SyntheticIdentity::draw(out.len(), &mut rng);
        if out.iter().all(|o| o.differing_regions(&cand) >= 2) {
            out.push(cand);
        }
    }
    out
}

/// Cell rectangles `(row0, row1, col0, col1)` of each body part in the
/// canonical pose, before per-image variation.
type Rect = (isize, isize, isize, isize);

struct Pose {
    parts: [Vec<Rect>; NUM_PARTS],
}

fn draw_pose(rng: &mut RngStream) -> Pose {
    let dy = rng.below(3) as isize - 1;
    let dx = rng.below(3) as isize - 1;
    let arm_len = 2 + rng.below(2) as isize;
    let wide_feet = rng.uniform() < 0.5;
    let r = |r0: isize, r1: isize, c0: isize, c1: isize| (r0 + dy, r1 + dy, c0 + dx, c1 + dx);
    let (f0, f1) = if wide_feet { (1, 3) } else { (2, 3) };
    let mut parts: [Vec<Rect>; NUM_PARTS] = Default::default();
    parts[HEAD] = vec![r(1, 3, 3, 5)];
    parts[CHEST] = vec![r(3, 7, 2, 6)];
    parts[UPPER_ARM] = vec![r(3, 5, 1, 2), r(3, 5, 6, 7)];
    parts[LOWER_ARM] = vec![r(5, 5 + arm_len, 1, 2), r(5, 5 + arm_len, 6, 7)];
    parts[UPPER_LEG] = vec![r(7, 10, 2, 6)];
    parts[LOWER_LEG] = vec![r(10, 13, 2, 3), r(10, 13, 5, 6)];
    parts[FOOT] = vec![r(13, 15, f0, f1), r(13, 15, 8 - f1, 8 - f0)];
    Pose { parts }
}

struct Camera {
    gain: f64,
    tint: [f64; 3],
    noise: f64,
}

const CAMERAS: [Camera; 2] = [
    Camera {
        gain: 1.0,
        tint: [1.0, 1.0, 1.0],
        noise: 0.03,
    },
    Camera {
        gain: 0.75,
        tint: [0.9, 0.95, 1.1],
        noise: 0.07,
    },
];

/// Fine fabric pattern typical of each part, shared by all identities.
fn weave(part: usize, x: usize, y: usize) -> f64 {
    let dark = match part {
        CHEST => x % 2 == 1,
        UPPER_LEG => (x / 2 + y / 2) % 2 == 1,
        LOWER_ARM | LOWER_LEG => y % 2 == 1,
        FOOT => (x + y) % 2 == 1,
        _ => false,
    };
    if dark {
        0.75
    } else {
        1.0
    }
}

/// Renders one image `[3,H,W]` and its masks `[K,H,W]`.
fn render(ident: &SyntheticIdentity, camera: usize, h: usize, w: usize, rng: &mut RngStream) -> (Tensor<f32>, Tensor<f32>) {
    let (ch, cw) = ((h / GRID_ROWS) as isize, (w / GRID_COLS) as isize);
    let plane = h * w;
    let pose = draw_pose(rng);
    let mut masks = vec![0f32; NUM_REGIONS * plane];
    masks[BACKGROUND * plane..].fill(1.0);
    let mut seam = vec![false; plane];
    for (part, rects) in pose.parts.iter().enumerate() {
        for &(r0, r1, c0, c1) in rects {
            let (y0, y1) = ((r0 * ch).max(0), (r1 * ch).min(h as isize));
            let (x0, x1) = ((c0 * cw).max(0), (c1 * cw).min(w as isize));
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y as usize * w + x as usize;
                    masks[part * plane + p] = 1.0;
                    seam[p] |= y == r0 * ch || y == r1 * ch - 1 || x == c0 * cw || x == c1 * cw - 1;
                }
            }
        }
    }

    let bg_level = rng.uniform_range(0.35, 0.65);
    let bg_tint: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(0.85, 1.15));
    let bg_slope = rng.uniform_range(-0.15, 0.15);
    let stripe_phase = rng.below(2);
    let jitter: [[f64; 3]; NUM_PARTS] = std::array::from_fn(|_| std::array::from_fn(|_| rng.uniform_range(-0.12, 0.12)));
    let cam = &CAMERAS[camera % CAMERAS.len()];
    let brightness = cam.gain * rng.uniform_range(0.9, 1.1);

    let mut img = vec![0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let part = (0..NUM_PARTS).find(|&k| masks[k * plane + p] > 0.0);
            let rgb: [f64; 3] = match part {
                Some(k) => {
                    let look = ident.looks[k];
                    let base = palette(k)[look.color];
                    let band = look.stripes > 0 && (y / (2 * look.stripes) + stripe_phase) % 2 == 1;
                    let edge = if seam[p] { 0.6 } else { 1.0 };
                    let shade = if band { 0.55 } else { 1.0 } * weave(k, x, y) * edge;
                    std::array::from_fn(|c| (base[c] + jitter[k][c]) * shade * ident.scale)
                }
                None => {
                    let v = bg_level + bg_slope * (y as f64 / h as f64 - 0.5);
                    std::array::from_fn(|c| v * bg_tint[c])
                }
            };
            for c in 0..3 {
                let v = rgb[c] * brightness * cam.tint[c] + cam.noise * rng.normal();
                img[c * plane + p] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    (
        Tensor::new(&[3, h, w], img).expect("image buffer matches shape"),
        Tensor::new(&[NUM_REGIONS, h, w], masks).expect("mask buffer matches shape"),
    )
}

/// Zeroes every pixel covered by the given parts.
pub fn occlude(image: &Tensor<f32>, masks: &RegionMaskSet, regions: &[usize]) -> Tensor<f32> {
    let plane = masks.height() * masks.width();
    let mut out = image.clone();
    for &k in regions {
        for (p, &m) in masks.mask(k).iter().enumerate() {
            if m > 0.0 {
                for c in 0..3 {
                    out.data_mut()[c * plane + p] = 0.0;
                }
            }
        }
    }
    out
}

/// A generated or loaded dataset held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<Tensor<f32>>,
    pub masks: Vec<RegionMaskSet>,
    pub occluded_images: Vec<Tensor<f32>>,
}

fn sample_name(i: usize) -> String {
    format!("{i:04}.mgt")
}

impl Dataset {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let idents = draw_identities(cfg.seed, cfg.num_ids);
        let mut samples = Vec::new();
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for ident in &idents {
            for j in 0..cfg.imgs_per_id {
                let idx = samples.len();
                let camera = j % 2;
                let mut rng = RngStream::derive(cfg.seed, mix64(0x5a_0000 + idx as u64));
                let (img, m) = render(ident, camera, cfg.height, cfg.width, &mut rng);
                samples.push(SampleEntry {
                    identity: ident.id,
                    camera,
                    image: format!("images/{}", sample_name(idx)),
                    mask: format!("masks/{}", sample_name(idx)),
                });
                images.push(img);
                masks.push(RegionMaskSet::new(m)?);
            }
        }

        let n_train = cfg.num_ids / 2;
        let mut train = Vec::new();
        let mut query = Vec::new();
        let mut gallery = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            if s.identity < n_train {
                train.push(i);
                continue;
            }
            let same_cam = |o: &SampleEntry| o.identity == s.identity && o.camera == s.camera;
            let rank = samples[..i].iter().filter(|o| same_cam(o)).count();
            let per_cam = samples.iter().filter(|o| same_cam(o)).count();
            if rank < (per_cam / 2).max(1) {
                query.push(i);
            } else {
                gallery.push(i);
            }
        }

        let mut rng = RngStream::derive(cfg.seed, 0x0cc1);
        let mut occluded_queries = Vec::new();
        let mut occluded_images = Vec::new();
        let parts: Vec<usize> = (0..NUM_PARTS).collect();
        for &q in &query {
            if rng.uniform() >= cfg.occlusion_rate {
                continue;
            }
            let count = 1 + rng.below(3);
            let regions = rng.choose_subset(&parts, count);
            occluded_images.push(occlude(&images[q], &masks[q], &regions));
            occluded_queries.push(OccludedEntry {
                base: q,
                image: format!("occluded/{}", sample_name(occluded_queries.len())),
                occluded_regions: regions.iter().map(|&k| REGION_NAMES[k].to_string()).collect(),
            });
        }

        Ok(Self {
            manifest: Manifest {
                config: cfg.clone(),
                region_names: REGION_NAMES.iter().map(|s| s.to_string()).collect(),
                samples,
                train,
                query,
                gallery,
                occluded_queries,
            },
            images,
            masks,
            occluded_images,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks", "occluded"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let save = |t: &Tensor<f32>, rel: &str| -> Result<()> {
            let p = dir.join(rel);
            fs::write(&p, mgt::encode(t)).map_err(|e| Error::io(&p, e))
        };
        for (i, s) in self.manifest.samples.iter().enumerate() {
            save(&self.images[i], &s.image)?;
            save(self.masks[i].tensor(), &s.mask)?;
        }
        for (o, img) in self.manifest.occluded_queries.iter().zip(&self.occluded_images) {
            save(img, &o.image)?;
        }
        let p = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(&p, e))?;
        fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("manifest.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&p, e))?;
        let load = |rel: &str| -> Result<Tensor<f32>> {
            let p: PathBuf = dir.join(rel);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            mgt::decode(&bytes).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
        };
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for s in &manifest.samples {
            images.push(load(&s.image)?);
            masks.push(RegionMaskSet::new(load(&s.mask)?)?);
        }
        let occluded_images = manifest
            .occluded_queries
            .iter()
            .map(|o| load(&o.image))
            .collect::<Result<_>>()?;
        let ds = Self {
            manifest,
            images,
            masks,
            occluded_images,
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        let m = &self.manifest;
        let (h, w) = (m.config.height, m.config.width);
        for (i, img) in self.images.iter().enumerate() {
            if img.shape() != [3, h, w] {
                return Err(Error::Data(format!("image {i} has shape {:?}, expected [3, {h}, {w}]", img.shape())));
            }
        }
        let n = m.samples.len();
        for &i in m.train.iter().chain(&m.query).chain(&m.gallery) {
            if i >= n {
                return Err(Error::Data(format!("split refers to sample {i} of {n}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn identity(&self, i: usize) -> usize {
        self.manifest.samples[i].identity
    }

    pub fn camera(&self, i: usize) -> usize {
        self.manifest.samples[i].camera
    }

    /// Training identities mapped to contiguous class labels, in first-seen
    /// order.
    pub fn train_labels(&self) -> Vec<(usize, usize)> {
        let mut ids: Vec<usize> = Vec::new();
        self.manifest
            .train
            .iter()
            .map(|&i| {
                let id = self.identity(i);
                let label = ids.iter().position(|&x| x == id).unwrap_or_else(|| {
                    ids.push(id);
                    ids.len() - 1
                });
                (i, label)
            })
            .collect()
    }

    pub fn num_train_classes(&self) -> usize {
        let mut ids: Vec<usize> = self.manifest.train.iter().map(|&i| self.identity(i)).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

/// Generates a dataset and writes it under `out`.
pub fn generate_dataset(cfg: &DataConfig, out: &Path) -> Result<Manifest> {
    let ds = Dataset::generate(cfg)?;
    ds.write(out)?;
    Ok(ds.manifest)
}

/// Identity-balanced batches of `P` identities with `Q` images each.
///
/// Every epoch, each identity's images are shuffled and cut into runs of `Q`
/// (an identity with fewer than `Q` images is padded by drawing with
/// replacement; an incomplete last run is dropped). Batches then take the `P`
/// identities with the most runs left, ties broken at random, so every
/// identity appears before any appears twice.
#[derive(Debug, Clone)]
pub struct PkSampler {
    groups: Vec<(usize, Vec<usize>)>,
    p: usize,
    q: usize,
}

impl PkSampler {
    /// `samples` pairs a sample index with its class label.
    pub fn new(samples: &[(usize, usize)], p: usize, q: usize) -> Result<Self> {
        if p < 2 || q < 2 {
            return Err(Error::Config(format!("P and Q must both be at least 2, got P={p}, Q={q}")));
        }
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for &(idx, label) in samples {
            match groups.iter_mut().find(|(l, _)| *l == label) {
                Some((_, v)) => v.push(idx),
                None => groups.push((label, vec![idx])),
            }
        }
        if groups.len() < p {
            return Err(Error::Config(format!("P={p} exceeds the {} available identities", groups.len())));
        }
        Ok(Self { groups, p, q })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.q
    }

    /// All batches of one epoch as `(sample index, label)` lists.
    pub fn epoch(&self, rng: &mut RngStream) -> Vec<Vec<(usize, usize)>> {
        let mut runs: Vec<(usize, Vec<Vec<usize>>)> = self
            .groups
            .iter()
            .map(|(label, idx)| {
                let mut idx = idx.clone();
                rng.shuffle(&mut idx);
                while idx.len() < self.q {
                    let extra = idx[rng.below(idx.len())];
                    idx.push(extra);
                }
                let chunks = idx.chunks_exact(self.q).map(|c| c.to_vec()).collect();
                (*label, chunks)
            })
            .collect();

        let mut batches = Vec::new();
        loop {
            let mut ready: Vec<(usize, u64, usize)> = runs
                .iter()
                .enumerate()
                .filter(|(_, (_, c))| !c.is_empty())
                .map(|(g, (_, c))| (c.len(), rng.next_u64(), g))
                .collect();
            if ready.len() < self.p {
                break;
            }
            ready.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut batch = Vec::with_capacity(self.batch_size());
            for &(_, _, g) in &ready[..self.p] {
                let (label, chunks) = &mut runs[g];
                let chunk = chunks.pop().expect("ready groups have runs left");
                batch.extend(chunk.into_iter().map(|i| (i, *label)));
            }
            batches.push(batch);
        }
        batches
    }
}
