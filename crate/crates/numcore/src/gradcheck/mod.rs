//! Central finite-difference verification of tape gradients, in `f64`.

pub mod suite;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation for the central difference.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub rel_tol: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is (near) zero are compared absolutely.
    pub floor: f64,
    /// Coordinates whose one-sided slopes disagree by more than this
    /// (relative) straddle a kink of ReLU / max / hard mining and are skipped.
    pub kink_tol: f64,
    /// Slope jumps smaller than `kink_tol * kink_floor` are curvature, not kinks.
    pub kink_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-4,
            floor: 1e-3,
            kink_tol: 0.05,
            kink_floor: 0.2,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, cfg: &GradCheckConfig) -> bool {
        self.checked > 0 && self.max_rel_err < cfg.rel_tol
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let f0 = g.value(root).item();
    let grads = g.backward(root)?;

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("inputs require grad").to_vec();
        for (ei, &a) in analytic.iter().enumerate() {
            let orig = probe[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + cfg.step;
            let fp = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - cfg.step;
            let fm = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;

            let fwd = (fp - f0) / cfg.step;
            let bwd = (f0 - fm) / cfg.step;
            if (fwd - bwd).abs() > cfg.kink_tol * fwd.abs().max(bwd.abs()).max(cfg.kink_floor) {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((ti, ei, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
