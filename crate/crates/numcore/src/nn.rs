//! Layer helpers over [`Graph`] and [`ParameterSet`]: parameter registration
//! with standard initializers, batchnorm with running statistics, and the GRU
//! cell.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParameterSet;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.normal() * std))
}

pub fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut RngStream) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.uniform_range(-bound, bound)))
}

/// Registers `{prefix}.weight` `[out, in, k, k]` (He-normal, fan-in) and,
/// when requested, a zero `{prefix}.bias`.
pub fn register_conv<T: Scalar>(
    params: &mut ParameterSet<T>,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    bias: bool,
    rng: &mut RngStream,
) -> Result<()> {
    let fan_in = (in_ch * kernel * kernel) as f64;
    params.add_param(
        &format!("{prefix}.weight"),
        normal_tensor(&[out_ch, in_ch, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
    )?;
    if bias {
        params.add_param(&format!("{prefix}.bias"), Tensor::zeros(&[out_ch]))?;
    }
    Ok(())
}

pub fn conv<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParameterSet<T>,
    prefix: &str,
    x: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let w = g.param(params, &format!("{prefix}.weight"))?;
    let b = optional_param(g, params, &format!("{prefix}.bias"))?;
    g.conv2d(x, w, b, stride, padding)
}

/// Registers `{prefix}.scale`, `{prefix}.shift` and the running-stat buffers.
pub fn register_batchnorm<T: Scalar>(params: &mut ParameterSet<T>, prefix: &str, channels: usize) -> Result<()> {
    params.add_param(&format!("{prefix}.scale"), Tensor::ones(&[channels]))?;
    params.add_param(&format!("{prefix}.shift"), Tensor::zeros(&[channels]))?;
    params.add_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[channels]))?;
    params.add_buffer(&format!("{prefix}.running_var"), Tensor::ones(&[channels]))
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Batchnorm over axis 1. Train mode normalizes with batch statistics and
/// folds them into the running averages (unbiased variance); eval mode uses
/// the running averages.
pub fn batchnorm<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut ParameterSet<T>,
    prefix: &str,
    x: Var,
    mode: Mode,
    cfg: BatchNormConfig,
) -> Result<Var> {
    let scale = g.param(params, &format!("{prefix}.scale"))?;
    let shift = g.param(params, &format!("{prefix}.shift"))?;
    let rm_name = format!("{prefix}.running_mean");
    let rv_name = format!("{prefix}.running_var");
    let eps = T::lit(cfg.eps);
    match mode {
        Mode::Eval => {
            let rm = params.get(&rm_name)?.data().to_vec();
            let rv = params.get(&rv_name)?.data().to_vec();
            g.batch_norm_eval(x, scale, shift, &rm, &rv, eps)
        }
        Mode::Train => {
            let (y, stats) = g.batch_norm_train(x, scale, shift, eps)?;
            let mom = T::lit(cfg.momentum);
            let keep = T::one() - mom;
            let unbias = if stats.count > 1 {
                T::lit(stats.count as f64 / (stats.count - 1) as f64)
            } else {
                T::one()
            };
            for (r, &m) in params.get_mut(&rm_name)?.data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + mom * m;
            }
            for (r, &v) in params.get_mut(&rv_name)?.data_mut().iter_mut().zip(&stats.var) {
                *r = keep * *r + mom * v * unbias;
            }
            Ok(y)
        }
    }
}

/// Registers a fully connected layer `{prefix}.weight` `[out, in]`, and
/// `{prefix}.bias` when requested.
pub fn register_linear<T: Scalar>(
    params: &mut ParameterSet<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    bias: bool,
    rng: &mut RngStream,
) -> Result<()> {
    params.add_param(&format!("{prefix}.weight"), normal_tensor(&[fan_out, fan_in], std, rng))?;
    if bias {
        params.add_param(&format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(())
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, params: &ParameterSet<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(params, &format!("{prefix}.weight"))?;
    let b = optional_param(g, params, &format!("{prefix}.bias"))?;
    g.linear(x, w, b)
}

fn optional_param<T: Scalar>(g: &mut Graph<T>, params: &ParameterSet<T>, name: &str) -> Result<Option<Var>> {
    if params.contains(name) {
        g.param(params, name).map(Some)
    } else {
        Ok(None)
    }
}

/// Bound GRU weights: input maps `w_*` `[H, I]`, recurrent maps `u_*` `[H, H]`
/// and biases `b_*` `[H]` for the update (z), reset (r) and candidate (h)
/// paths.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

const GRU_GATES: [&str; 3] = ["z", "r", "h"];

/// Registers GRU weights with the usual `U(-1/√H, 1/√H)` initialization.
pub fn register_gru<T: Scalar>(
    params: &mut ParameterSet<T>,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut RngStream,
) -> Result<()> {
    let bound = 1.0 / (hidden as f64).sqrt();
    for gate in GRU_GATES {
        params.add_param(&format!("{prefix}.w_{gate}"), uniform_tensor(&[hidden, input], bound, rng))?;
        params.add_param(&format!("{prefix}.u_{gate}"), uniform_tensor(&[hidden, hidden], bound, rng))?;
        params.add_param(&format!("{prefix}.b_{gate}"), uniform_tensor(&[hidden], bound, rng))?;
    }
    Ok(())
}

impl GruWeights {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ParameterSet<T>, prefix: &str) -> Result<Self> {
        let mut p = |n: &str| g.param(params, &format!("{prefix}.{n}"));
        Ok(Self {
            w_z: p("w_z")?,
            u_z: p("u_z")?,
            b_z: p("b_z")?,
            w_r: p("w_r")?,
            u_r: p("u_r")?,
            b_r: p("b_r")?,
            w_h: p("w_h")?,
            u_h: p("u_h")?,
            b_h: p("b_h")?,
        })
    }
}

/// One GRU step:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `ĥ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 - z) ⊙ h + z ⊙ ĥ`.
pub fn gru_cell_step<T: Scalar>(g: &mut Graph<T>, x: Var, h_prev: Var, w: &GruWeights) -> Result<Var> {
    let gate = |g: &mut Graph<T>, wi: Var, wh: Var, b: Var, h: Var| -> Result<Var> {
        let a = g.linear(x, wi, Some(b))?;
        let c = g.linear(h, wh, None)?;
        g.add(a, c)
    };
    let z_pre = gate(g, w.w_z, w.u_z, w.b_z, h_prev)?;
    let z = g.sigmoid(z_pre);
    let r_pre = gate(g, w.w_r, w.u_r, w.b_r, h_prev)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h_prev)?;
    let cand_pre = gate(g, w.w_h, w.u_h, w.b_h, rh)?;
    let cand = g.tanh(cand_pre);
    // h + z ⊙ (ĥ - h)
    let delta = g.sub(cand, h_prev)?;
    let step = g.mul(z, delta)?;
    g.add(h_prev, step)
}
