//! Backbone activation maps exported as greyscale PGM images.

use std::path::{Path, PathBuf};

use numcore::kernels::bilinear_resize;
use numcore::{Graph, Mode, Tensor};

use crate::error::{Error, Result};
use crate::evalkit::stack_images;
use crate::model::{backbone, Model};

/// Channel mean of `|F|` for one feature map `[C,h,w]`, as `[h,w]`.
pub fn activation_map(features: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("feature map must be [C,h,w], got {s:?}")));
    }
    let (c, plane) = (s[0], s[1] * s[2]);
    let mut out = vec![0f32; plane];
    for ch in features.data().chunks(plane) {
        for (o, &v) in out.iter_mut().zip(ch) {
            *o += v.abs();
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f32);
    Ok(Tensor::new(&[s[1], s[2]], out)?)
}

/// Upscales a `[h,w]` map to `height x width` and rescales it to 0..=255.
/// A constant map becomes uniform 128.
pub fn to_grey(map: &Tensor<f32>, height: usize, width: usize) -> Result<Vec<u8>> {
    let up = bilinear_resize(map, height, width)?;
    let (lo, hi) = up
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Ok(vec![128; height * width]);
    }
    Ok(up
        .data()
        .iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect())
}

/// Binary PGM (P5) bytes.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Saliency images of `images` `[3,H,W]` under the model, each `H*W` bytes.
pub fn saliency_images(model: &mut Model<f32>, images: &[&Tensor<f32>]) -> Result<Vec<Vec<u8>>> {
    let (h, w) = model.image_size;
    let mut g = Graph::new();
    let x = g.constant(stack_images(images)?);
    let f = backbone(&mut g, &mut model.params, x, Mode::Eval)?;
    let feats = g.value(f);
    let n = feats.shape()[0];
    let per = feats.numel() / n.max(1);
    let fshape = &feats.shape()[1..];
    (0..n)
        .map(|i| {
            let fi = Tensor::new(fshape, feats.data()[i * per..(i + 1) * per].to_vec())?;
            to_grey(&activation_map(&fi)?, h, w)
        })
        .collect()
}

/// Writes `{out}/sample{idx}_{label}.pgm` for every sample and returns the paths.
pub fn write_saliency(
    model: &mut Model<f32>,
    label: &str,
    images: &[(usize, &Tensor<f32>)],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (h, w) = model.image_size;
    let refs: Vec<&Tensor<f32>> = images.iter().map(|(_, t)| *t).collect();
    let maps = saliency_images(model, &refs)?;
    let mut paths = Vec::with_capacity(maps.len());
    for ((idx, _), px) in images.iter().zip(maps) {
        let path = out.join(format!("sample{idx}_{label}.pgm"));
        std::fs::write(&path, encode_pgm(w, h, &px)?).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
