//! Finite-difference sweep over every differentiable primitive of the tape.
//!
//! Each primitive is wrapped as `root = Σ out ⊙ R` with a fixed random `R`, so
//! every output element contributes a distinct weight to the checked scalar.

use super::{check_gradients, GradCheckConfig, GradCheckReport};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{gru_cell_step, GruWeights};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub struct PrimitiveCheck {
    pub name: &'static str,
    pub instances: usize,
    pub report: GradCheckReport,
}

fn rand_t(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.05, 1.0);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    if g.value(out).is_scalar() {
        return Ok(out);
    }
    let mut rng = RngStream::new(seed);
    let r = rand_t(&mut rng, g.shape(out), -1.0, 1.0);
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Builder,
}

fn case(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        inputs,
        build: Box::new(build),
    }
}

fn make_case(name: &str, rng: &mut RngStream, wseed: u64) -> Case {
    let w = move |g: &mut Graph<f64>, v: Var| weighted_sum(g, v, wseed);
    match name {
        "add" | "sub" | "mul" => {
            let a = rand_t(rng, &[2, 3], -1.0, 1.0);
            let b = rand_t(rng, &[2, 3], -1.0, 1.0);
            let n = name.to_string();
            case(vec![a, b], move |g, v| {
                let o = match n.as_str() {
                    "add" => g.add(v[0], v[1])?,
                    "sub" => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                w(g, o)
            })
        }
        "div" => {
            let a = rand_t(rng, &[2, 3], -1.0, 1.0);
            let b = rand_t(rng, &[2, 3], 0.5, 2.0);
            case(vec![a, b], move |g, v| {
                let o = g.div(v[0], v[1])?;
                w(g, o)
            })
        }
        "add_scalar" | "scale" => {
            let c = rng.uniform_range(-2.0, 2.0);
            let scale = name == "scale";
            case(vec![rand_t(rng, &[3, 2], -1.0, 1.0)], move |g, v| {
                let o = if scale { g.scale(v[0], c) } else { g.add_scalar(v[0], c) };
                w(g, o)
            })
        }
        "relu" => case(vec![away_from_zero(rng, &[3, 4])], move |g, v| {
            let o = g.relu(v[0]);
            w(g, o)
        }),
        "clamp_min" => {
            let x = away_from_zero(rng, &[3, 4]);
            case(vec![x], move |g, v| {
                let o = g.clamp_min(v[0], 0.0);
                w(g, o)
            })
        }
        "sigmoid" | "tanh" => {
            let s = name == "sigmoid";
            case(vec![rand_t(rng, &[3, 3], -3.0, 3.0)], move |g, v| {
                let o = if s { g.sigmoid(v[0]) } else { g.tanh(v[0]) };
                w(g, o)
            })
        }
        "sqrt" => case(vec![rand_t(rng, &[2, 4], 0.3, 3.0)], move |g, v| {
            let o = g.sqrt(v[0]);
            w(g, o)
        }),
        "sum" | "mean" => {
            let s = name == "sum";
            case(vec![rand_t(rng, &[2, 5], -1.0, 1.0)], move |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(if s { g.sum(sq) } else { g.mean(sq) })
            })
        }
        "linear" => {
            let x = rand_t(rng, &[3, 4], -1.0, 1.0);
            let wt = rand_t(rng, &[2, 4], -1.0, 1.0);
            let b = rand_t(rng, &[2], -1.0, 1.0);
            case(vec![x, wt, b], move |g, v| {
                let o = g.linear(v[0], v[1], Some(v[2]))?;
                w(g, o)
            })
        }
        "conv2d" => {
            let stride = 1 + rng.below(2);
            let padding = rng.below(2);
            let k = 1 + 2 * rng.below(2);
            let x = rand_t(rng, &[2, 2, 5, 4], -1.0, 1.0);
            let wt = rand_t(rng, &[3, 2, k, k], -1.0, 1.0);
            let b = rand_t(rng, &[3], -1.0, 1.0);
            case(vec![x, wt, b], move |g, v| {
                let o = g.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
                w(g, o)
            })
        }
        "batchnorm_train" => {
            let x = rand_t(rng, &[3, 2, 2, 2], -1.0, 1.0);
            let sc = rand_t(rng, &[2], 0.5, 1.5);
            let sh = rand_t(rng, &[2], -0.5, 0.5);
            case(vec![x, sc, sh], move |g, v| {
                let (o, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                w(g, o)
            })
        }
        "batchnorm_eval" => {
            let x = rand_t(rng, &[4, 3], -1.0, 1.0);
            let sc = rand_t(rng, &[3], 0.5, 1.5);
            let sh = rand_t(rng, &[3], -0.5, 0.5);
            let rm: Vec<f64> = (0..3).map(|_| rng.uniform_range(-0.3, 0.3)).collect();
            let rv: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.5, 2.0)).collect();
            case(vec![x, sc, sh], move |g, v| {
                let o = g.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)?;
                w(g, o)
            })
        }
        "mask_channels" => {
            let x = rand_t(rng, &[2, 3, 3, 2], -1.0, 1.0);
            let m = rand_t(rng, &[2, 3, 2], 0.0, 1.0);
            case(vec![x], move |g, v| {
                let o = g.mask_channels(v[0], &m)?;
                w(g, o)
            })
        }
        "global_max_pool" => case(vec![rand_t(rng, &[2, 3, 3, 3], -1.0, 1.0)], move |g, v| {
            let o = g.global_max_pool(v[0])?;
            w(g, o)
        }),
        "row_dot" => {
            let a = rand_t(rng, &[3, 4], -1.0, 1.0);
            let b = rand_t(rng, &[3, 4], -1.0, 1.0);
            case(vec![a, b], move |g, v| {
                let o = g.row_dot(v[0], v[1])?;
                w(g, o)
            })
        }
        "pairwise_distances" => case(vec![rand_t(rng, &[4, 3], -1.0, 1.0)], move |g, v| {
            let o = g.pairwise_distances(v[0])?;
            w(g, o)
        }),
        "gather" => {
            let idx: Vec<usize> = (0..5).map(|_| rng.below(12)).collect();
            case(vec![rand_t(rng, &[3, 4], -1.0, 1.0)], move |g, v| {
                let o = g.gather(v[0], &idx)?;
                w(g, o)
            })
        }
        "concat_cols" => {
            let a = rand_t(rng, &[2, 3], -1.0, 1.0);
            let b = rand_t(rng, &[2, 2], -1.0, 1.0);
            case(vec![a, b], move |g, v| {
                let o = g.concat_cols(&[v[0], v[1]])?;
                w(g, o)
            })
        }
        "softmax_cross_entropy" => {
            let targets: Vec<usize> = (0..3).map(|_| rng.below(4)).collect();
            case(vec![rand_t(rng, &[3, 4], -2.0, 2.0)], move |g, v| g.softmax_cross_entropy(v[0], &targets))
        }
        "bce_with_logits" => {
            let t = rand_t(rng, &[2, 3, 2], 0.0, 1.0);
            case(vec![rand_t(rng, &[2, 3, 2], -3.0, 3.0)], move |g, v| g.bce_with_logits(v[0], &t))
        }
        "gru_cell_step" => {
            let (i, h) = (2, 3);
            let mut inputs = vec![rand_t(rng, &[2, i], -1.0, 1.0), rand_t(rng, &[2, h], -1.0, 1.0)];
            for _ in 0..3 {
                inputs.push(rand_t(rng, &[h, i], -0.8, 0.8));
                inputs.push(rand_t(rng, &[h, h], -0.8, 0.8));
                inputs.push(rand_t(rng, &[h], -0.5, 0.5));
            }
            case(inputs, move |g, v| {
                let gw = GruWeights {
                    w_z: v[2],
                    u_z: v[3],
                    b_z: v[4],
                    w_r: v[5],
                    u_r: v[6],
                    b_r: v[7],
                    w_h: v[8],
                    u_h: v[9],
                    b_h: v[10],
                };
                let o = gru_cell_step(g, v[0], v[1], &gw)?;
                w(g, o)
            })
        }
        other => panic!("no gradient case for `{other}`"),
    }
}

pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "add_scalar",
    "scale",
    "relu",
    "clamp_min",
    "sigmoid",
    "tanh",
    "sqrt",
    "sum",
    "mean",
    "linear",
    "conv2d",
    "batchnorm_train",
    "batchnorm_eval",
    "mask_channels",
    "global_max_pool",
    "row_dot",
    "pairwise_distances",
    "gather",
    "concat_cols",
    "softmax_cross_entropy",
    "bce_with_logits",
    "gru_cell_step",
];

/// Checks `instances` random instances of every primitive.
pub fn run_primitive_suite(seed: u64, instances: usize, cfg: &GradCheckConfig) -> Result<Vec<PrimitiveCheck>> {
    let mut out = Vec::new();
    for (pi, &name) in PRIMITIVES.iter().enumerate() {
        let mut report = GradCheckReport::default();
        for inst in 0..instances {
            let label = (pi as u64) << 32 | inst as u64;
            let mut rng = RngStream::derive(seed, label);
            let c = make_case(name, &mut rng, label ^ 0xabcd);
            let r = check_gradients(&c.inputs, &c.build, cfg)?;
            report.merge(&r);
        }
        out.push(PrimitiveCheck {
            name,
            instances,
            report,
        });
    }
    Ok(out)
}
