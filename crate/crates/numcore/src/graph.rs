//! Reverse-mode tape.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. Nodes are only ever appended, so creation order is a
//! topological order and `backward` is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::params::ParameterSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a train-mode batchnorm, for the caller to fold
/// into its running averages.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, the one used for normalization.
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sqrt(Var),
    ClampMin(Var, T),
    Sum(Var),
    Mean(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        // Train mode differentiates through the batch statistics.
        train: bool,
    },
    MaskChannels {
        x: Var,
        mask: Vec<T>,
    },
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    RowDot(Var, Var),
    PairwiseDistances(Var),
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Pairwise distances below this squared value are clamped so the square
/// root stays differentiable.
pub const MIN_SQUARED_DISTANCE: f64 = 1e-12;

#[derive(Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    backward_done: bool,
}

/// Gradients of one backward sweep, kept for leaves only.
pub struct Gradients<T> {
    leaves: Vec<Option<Vec<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.leaves.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every bound parameter into the parameter set.
    pub fn accumulate_into(&self, params: &mut ParameterSet<T>) -> Result<()> {
        for &(idx, var) in &self.params {
            if let Some(g) = self.get(var) {
                params.accumulate_grad(idx, g)?;
            }
        }
        params.mark_backward();
        Ok(())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the graph can record a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by `backward`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter; repeated lookups return the same node.
    pub fn param(&mut self, params: &ParameterSet<T>, name: &str) -> Result<Var> {
        let idx = params.index_of(name)?;
        if let Some(&v) = self.params.get(&idx) {
            return Ok(v);
        }
        let t = params.tensor_at(idx);
        let rg = t.requires_grad;
        let v = self.push(Tensor::new(t.shape(), t.data().to_vec())?, Op::Leaf, rg);
        self.nodes[v.0].param = Some(idx);
        self.params.insert(idx, v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, "operands", format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, node, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, node: Op<T>) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| f(t.data()[i]));
        let rg = self.rg(&[x]);
        self.push(out, node, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    /// `max(x, floor)` elementwise; the gradient is zero where the floor wins.
    pub fn clamp_min(&mut self, x: Var, floor: T) -> Var {
        self.map(x, |v| if v > floor { v } else { floor }, Op::ClampMin(x, floor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean of same-shaped terms, built from `add` and `scale`.
    pub fn mean_of(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("mean_of: no terms".into()))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(if terms.len() == 1 {
            acc
        } else {
            self.scale(acc, T::lit(1.0 / terms.len() as f64))
        })
    }

    /// `x[B,I] · w[O,I]ᵀ + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [batch, fan_in] = self.value(x).dims2("linear")?;
        let [fan_out, w_in] = self.value(w).dims2("linear")?;
        if w_in != fan_in {
            return Err(Error::shape(
                "linear",
                "input features (x axis 1, weight axis 1)",
                format!("{fan_in} vs {w_in}"),
            ));
        }
        let mut out = vec![T::zero(); batch * fan_out];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != fan_out {
                return Err(Error::shape("linear", "bias", format!("{} vs {fan_out}", bias.numel())));
            }
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bias.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            batch,
            fan_in,
            fan_out,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            beta,
            &mut out,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(&[batch, fan_out], out)?, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution via im2col and a single matrix product per batch.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, padding)?;
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let l = geom.out_positions();
        let width = geom.batch * l;
        let mut out = vec![T::zero(); geom.out_ch * width];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != geom.out_ch {
                return Err(Error::shape(
                    "conv2d",
                    "bias",
                    format!("{} values for {} output channels", bias.numel(), geom.out_ch),
                ));
            }
            for (row, &bv) in out.chunks_mut(width).zip(bias.data()) {
                row.fill(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            geom.out_ch,
            geom.patch_len(),
            width,
            T::one(),
            self.value(w).data(),
            false,
            &cols,
            false,
            beta,
            &mut out,
        );
        let data = kernels::channel_major_to_batch_major(&out, geom.batch, geom.out_ch, l);
        let value = Tensor::new(&[geom.batch, geom.out_ch, geom.out_h, geom.out_w], data)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        // Only the weight gradient needs the columns.
        let cols = if self.requires_grad(w) { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    fn bn_layout(&self, x: Var, scale: Var, shift: Var) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(Error::shape("batchnorm", "input", format!("rank {} < 2", shape.len())));
        }
        let (outer, ch) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.value(scale).numel() != ch || self.value(shift).numel() != ch {
            return Err(Error::shape(
                "batchnorm",
                "scale/shift",
                format!("channel axis has {ch}, scale/shift have {}/{}", self.value(scale).numel(), self.value(shift).numel()),
            ));
        }
        Ok((outer, ch, inner))
    }

    /// Train-mode batchnorm over axis 1, normalizing with batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, scale: Var, shift: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        if eps <= T::zero() {
            return Err(Error::Contract("batchnorm: eps must be > 0".into()));
        }
        let (outer, ch, inner) = self.bn_layout(x, scale, shift)?;
        let count = outer * inner;
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for (c, m) in mean.iter_mut().enumerate() {
            let mut s = T::zero();
            for n in 0..outer {
                s += xd[(n * ch + c) * inner..][..inner].iter().copied().sum::<T>();
            }
            *m = s / T::lit(count as f64);
        }
        for c in 0..ch {
            let mut s = T::zero();
            for n in 0..outer {
                for &v in &xd[(n * ch + c) * inner..][..inner] {
                    let d = v - mean[c];
                    s += d * d;
                }
            }
            var[c] = s / T::lit(count as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, scale, shift, &mean, &inv_std, outer, ch, inner);
        let rg = self.rg(&[x, scale, shift]);
        let (value, xhat) = out?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train: true,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Eval-mode batchnorm using running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (outer, ch, inner) = self.bn_layout(x, scale, shift)?;
        if running_mean.len() != ch || running_var.len() != ch {
            return Err(Error::shape("batchnorm", "running stats", format!("expected {ch} channels")));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(x, scale, shift, running_mean, &inv_std, outer, ch, inner)?;
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train: false,
            },
            rg,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[T],
        inv_std: &[T],
        outer: usize,
        ch: usize,
        inner: usize,
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let xv = self.value(x);
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = vec![T::zero(); xv.numel()];
        for n in 0..outer {
            for c in 0..ch {
                let base = (n * ch + c) * inner;
                for i in base..base + inner {
                    let h = (xv.data()[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = h * sc[c] + sh[c];
                }
            }
        }
        Ok((Tensor::new(xv.shape(), out)?, xhat))
    }

    /// `x[N,C,H,W] ⊙ mask[N,H,W]`, the mask broadcast across channels.
    /// The mask is a constant of the graph.
    pub fn mask_channels(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("mask_channels")?;
        let ok = match mask.shape() {
            [mn, mh, mw] => (*mn, *mh, *mw) == (n, h, w),
            [mn, 1, mh, mw] => (*mn, *mh, *mw) == (n, h, w),
            _ => false,
        };
        if !ok {
            return Err(Error::shape(
                "mask_channels",
                "mask",
                format!(
                    "mask {:?} does not cover features [{n}, {c}, {h}, {w}]; resize the mask to {h}x{w} first",
                    mask.shape()
                ),
            ));
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let md = mask.data();
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            let m = &md[b * plane..][..plane];
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for ((o, &xv), &mv) in out[off..off + plane].iter_mut().zip(&xd[off..off + plane]).zip(m) {
                    *o = xv * mv;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[n, c, h, w], out)?,
            Op::MaskChannels {
                x,
                mask: md.to_vec(),
            },
            rg,
        ))
    }

    /// `[N,C,H,W] -> [N,C]` spatial maximum. Ties go to the first position in
    /// row-major order, which is also where the gradient is routed.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("global_max_pool")?;
        let (maxima, argmax) = kernels::max_pool_planes(self.value(x).data(), n * c, h * w);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c], maxima)?, Op::GlobalMaxPool { x, argmax }, rg))
    }

    /// Row-wise inner product `[N,D] x [N,D] -> [N]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let [n, d] = self.value(a).dims2("row_dot")?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out = (0..n)
            .map(|i| ad[i * d..][..d].iter().zip(&bd[i * d..][..d]).map(|(&x, &y)| x * y).sum())
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[n], out)?, Op::RowDot(a, b), rg))
    }

    /// Euclidean distance matrix `[B,D] -> [B,B]`; squared distances are
    /// clamped at [`MIN_SQUARED_DISTANCE`] before the square root.
    pub fn pairwise_distances(&mut self, x: Var) -> Result<Var> {
        let [b, d] = self.value(x).dims2("pairwise_distances")?;
        let xd = self.value(x).data();
        let floor = T::lit(MIN_SQUARED_DISTANCE);
        let mut out = vec![T::zero(); b * b];
        for i in 0..b {
            for j in 0..b {
                let sq: T = xd[i * d..][..d]
                    .iter()
                    .zip(&xd[j * d..][..d])
                    .map(|(&p, &q)| (p - q) * (p - q))
                    .sum();
                out[i * b + j] = if sq > floor { sq } else { floor }.sqrt();
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[b, b], out)?, Op::PairwiseDistances(x), rg))
    }

    /// Picks flat elements of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::Index {
                op: "gather",
                index: bad,
                bound: t.numel(),
            });
        }
        if indices.is_empty() {
            return Err(Error::Contract("gather: empty index list".into()));
        }
        let out = indices.iter().map(|&i| t.data()[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[indices.len()], out)?,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates `[B,Di]` blocks along axis 1.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols: no inputs".into()))?;
        let [b, _] = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pb, pd] = self.value(p).dims2("concat_cols")?;
            if pb != b {
                return Err(Error::shape("concat_cols", "rows (axis 0)", format!("{pb} vs {b}")));
            }
            widths.push(pd);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * total);
        for row in 0..b {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[row * w..][..w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&[b, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`, stabilized by
    /// subtracting the row maximum.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [b, c] = self.value(logits).dims2("softmax_cross_entropy")?;
        if targets.len() != b {
            return Err(Error::shape(
                "softmax_cross_entropy",
                "targets",
                format!("{} targets for {b} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &ld[r * c..][..c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for (p, &v) in probs[r * c..][..c].iter_mut().zip(row) {
                *p = (v - m).exp() / z;
            }
            total += lse - row[t];
        }
        let loss = total / T::lit(b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean elementwise binary cross-entropy on logits, in the stable form
    /// `max(x, 0) - x·t + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let lt = self.value(logits);
        if lt.shape() != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                "targets",
                format!("{:?} vs logits {:?}", targets.shape(), lt.shape()),
            ));
        }
        let total: T = lt
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let loss = total / T::lit(lt.numel() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    /// Sweeps the tape in reverse from a scalar root.
    ///
    /// A graph can be differentiated once; call [`Graph::reset`] and record a
    /// new forward pass before the next sweep.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this graph; reset it first".into()));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                leaves[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }

        // Leaves that requested gradients but sit off the root's path get zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && leaves[i].is_none() {
                leaves[i] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        let mut params: Vec<(usize, Var)> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        params.sort_unstable();
        Ok(Gradients { leaves, params })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                self.acc(grads, *b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                self.acc(grads, *a, g.iter().zip(bv).map(|(&d, &y)| d / y).collect());
                self.acc(
                    grads,
                    *b,
                    g.iter().zip(bv).zip(out).map(|((&d, &y), &q)| -d * q / y).collect(),
                );
            }
            Op::AddScalar(x) => self.acc(grads, *x, g.to_vec()),
            Op::Scale(x, c) => self.acc(grads, *x, g.iter().map(|&d| d * *c).collect()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect(),
                );
            }
            Op::Sigmoid(x) => {
                self.acc(grads, *x, g.iter().zip(out).map(|(&d, &s)| d * s * (T::one() - s)).collect());
            }
            Op::Tanh(x) => {
                self.acc(grads, *x, g.iter().zip(out).map(|(&d, &t)| d * (T::one() - t * t)).collect());
            }
            Op::Sqrt(x) => {
                let half = T::lit(0.5);
                self.acc(grads, *x, g.iter().zip(out).map(|(&d, &r)| d * half / r).collect());
            }
            Op::ClampMin(x, floor) => {
                let xv = self.value(*x).data();
                self.acc(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(&d, &v)| if v > *floor { d } else { T::zero() }).collect(),
                );
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::Linear { x, w, b } => {
                let [batch, fan_in] = self.value(*x).dims2("linear")?;
                let [fan_out, _] = self.value(*w).dims2("linear")?;
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); batch * fan_in];
                    T::gemm(batch, fan_out, fan_in, T::one(), g, false, self.value(*w).data(), false, T::zero(), &mut dx);
                    self.acc(grads, *x, dx);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); fan_out * fan_in];
                    T::gemm(fan_out, batch, fan_in, T::one(), g, true, self.value(*x).data(), false, T::zero(), &mut dw);
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); fan_out];
                    for row in g.chunks(fan_out) {
                        for (a, &d) in db.iter_mut().zip(row) {
                            *a += d;
                        }
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let l = geom.out_positions();
                let width = geom.batch * l;
                let gcm = kernels::batch_major_to_channel_major(g, geom.batch, geom.out_ch, l);
                if let Some(b) = b {
                    let db = gcm.chunks(width).map(|row| row.iter().copied().sum()).collect();
                    self.acc(grads, *b, db);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); geom.out_ch * geom.patch_len()];
                    T::gemm(geom.out_ch, width, geom.patch_len(), T::one(), &gcm, false, cols, true, T::zero(), &mut dw);
                    self.acc(grads, *w, dw);
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![T::zero(); geom.patch_len() * width];
                    T::gemm(
                        geom.patch_len(),
                        geom.out_ch,
                        width,
                        T::one(),
                        self.value(*w).data(),
                        true,
                        &gcm,
                        false,
                        T::zero(),
                        &mut dcols,
                    );
                    self.acc(grads, *x, kernels::col2im(&dcols, geom));
                }
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.shape(*x);
                let (outer, ch) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let sc = self.value(*scale).data();
                let mut sum_g = vec![T::zero(); ch];
                let mut sum_gx = vec![T::zero(); ch];
                for n in 0..outer {
                    for c in 0..ch {
                        let base = (n * ch + c) * inner;
                        for k in base..base + inner {
                            sum_g[c] += g[k];
                            sum_gx[c] += g[k] * xhat[k];
                        }
                    }
                }
                self.acc(grads, *scale, sum_gx.clone());
                self.acc(grads, *shift, sum_g.clone());
                if self.requires_grad(*x) {
                    let m = T::lit((outer * inner) as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for n in 0..outer {
                        for c in 0..ch {
                            let base = (n * ch + c) * inner;
                            let k_scale = sc[c] * inv_std[c];
                            for k in base..base + inner {
                                dx[k] = if *train {
                                    k_scale * (g[k] - sum_g[c] / m - xhat[k] * sum_gx[c] / m)
                                } else {
                                    k_scale * g[k]
                                };
                            }
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::MaskChannels { x, mask } => {
                let [n, c, h, w] = self.value(*x).dims4("mask_channels")?;
                let plane = h * w;
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..n {
                    let m = &mask[b * plane..][..plane];
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for ((d, &gv), &mv) in dx[off..off + plane].iter_mut().zip(&g[off..off + plane]).zip(m) {
                            *d = gv * mv;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::GlobalMaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&pos, &d) in argmax.iter().zip(g) {
                    dx[pos] += d;
                }
                self.acc(grads, *x, dx);
            }
            Op::RowDot(a, b) => {
                let [n, d] = self.value(*a).dims2("row_dot")?;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = (0..n * d).map(|k| g[k / d] * bv[k]).collect();
                let db = (0..n * d).map(|k| g[k / d] * av[k]).collect();
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::PairwiseDistances(x) => {
                let [b, d] = self.value(*x).dims2("pairwise_distances")?;
                let xv = self.value(*x).data();
                let floor = T::lit(MIN_SQUARED_DISTANCE).sqrt();
                let mut dx = vec![T::zero(); b * d];
                for i in 0..b {
                    for j in 0..b {
                        let dist = out[i * b + j];
                        if dist <= floor {
                            continue;
                        }
                        let coef = g[i * b + j] / dist;
                        for k in 0..d {
                            let diff = (xv[i * d + k] - xv[j * d + k]) * coef;
                            dx[i * d + k] += diff;
                            dx[j * d + k] -= diff;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Gather { x, indices } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&i, &d) in indices.iter().zip(g) {
                    dx[i] += d;
                }
                self.acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..][..w]);
                    }
                    self.acc(grads, p, dp);
                    offset += w;
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let c = self.shape(*logits)[1];
                let coef = g[0] / T::lit(targets.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * coef).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * c + t] -= coef;
                }
                self.acc(grads, *logits, dl);
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits).data();
                let coef = g[0] / T::lit(lv.len() as f64);
                let dl = lv
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| (kernels::sigmoid(x) - t) * coef)
                    .collect();
                self.acc(grads, *logits, dl);
            }
        }
        Ok(())
    }
}
