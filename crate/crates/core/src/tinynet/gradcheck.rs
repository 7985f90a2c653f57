//! Central finite-difference verification of the analytic backward pass.
//!
//! The objective is the full training loss (dice + γ·centre) composed with
//! the network, in double precision. A parameter is skipped when the `±h`
//! perturbation changes a ReLU on/off state, a pooling argmax, or the sign
//! of a centroid difference: the loss is not differentiable across those
//! switches, so the difference quotient measures nothing useful there.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::unet::{Tensor, UNetConfig, UNetGrads, UNetParams};
use crate::error::Result;
use crate::losscore::{slice_centroid, weighted_loss, Prediction};
use crate::volgrid::{Dims, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub unet: UNetConfig,
    /// Edge length of the random cubic input.
    pub input_size: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    /// Check this many random entries per layer; `None` checks all of them.
    pub samples_per_layer: Option<usize>,
    pub gamma: f64,
    pub epsilon: f64,
    /// Seeds the input, target and parameter sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig {
                depth: 1,
                base_channels: 4,
                seed: 0,
            },
            input_size: 8,
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            samples_per_layer: None,
            gamma: 1e-3,
            epsilon: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub parameters: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    /// Flat index (weights then bias) of the worst entry.
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub layers: Vec<LayerReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn checked(&self) -> usize {
        self.layers.iter().map(|l| l.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.layers.iter().map(|l| l.skipped_kinks).sum()
    }

    pub fn parameters(&self) -> usize {
        self.layers.iter().map(|l| l.parameters).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("layer,parameters,checked,skipped_kinks,max_rel_error\n");
        for l in &self.layers {
            s.push_str(&format!(
                "{},{},{},{},{:.3e}\n",
                l.name, l.parameters, l.checked, l.skipped_kinks, l.max_rel_error
            ));
        }
        s.push_str(&format!(
            "total,{},{},{},{:.3e}\n",
            self.parameters(),
            self.checked(),
            self.skipped(),
            self.max_rel_error()
        ));
        s
    }
}

/// Relative error with a floored denominator.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Random input in `[0, 1)` and a random target with roughly 30 % foreground.
pub fn random_case(size: usize, seed: u64) -> (Tensor<f64>, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::cube(size);
    let data = (0..dims.voxel_count()).map(|_| rng.gen::<f64>()).collect();
    let target = LabelMap::from_fn(dims, |_, _, _| rng.gen_bool(0.3));
    (Tensor::new(1, dims, data).expect("sized"), target)
}

/// Signs of the per-slice centroid differences, the kinks of the centre loss.
fn centroid_signs(y: &LabelMap, p: &Prediction) -> Vec<(i8, i8)> {
    let dims = y.dims();
    let plane = dims.w * dims.h;
    let yf = y.to_f64();
    (0..dims.d)
        .map(|z| {
            let r = z * plane..(z + 1) * plane;
            match (
                slice_centroid(&yf[r.clone()], dims.w, dims.h),
                slice_centroid(&p.data()[r], dims.w, dims.h),
            ) {
                (Some(a), Some(b)) => (
                    (b.cx - a.cx).partial_cmp(&0.0).map_or(0, |o| o as i8),
                    (b.cy - a.cy).partial_cmp(&0.0).map_or(0, |o| o as i8),
                ),
                _ => (2, 2),
            }
        })
        .collect()
}

struct Probe {
    loss: f64,
    signature: (Vec<bool>, Vec<u32>, Vec<(i8, i8)>),
}

fn probe(params: &UNetParams<f64>, x: &Tensor<f64>, y: &LabelMap, cfg: &GradCheckConfig) -> Result<Probe> {
    let (pred, cache) = params.forward(x)?;
    let loss = weighted_loss(y, &pred, cfg.gamma, cfg.epsilon)?.total;
    let (on, arg) = cache.kink_signature();
    Ok(Probe {
        loss,
        signature: (on, arg, centroid_signs(y, &pred)),
    })
}

/// Analytic parameter gradients of the training loss at `(x, y)`.
pub fn analytic_gradients(
    params: &UNetParams<f64>,
    x: &Tensor<f64>,
    y: &LabelMap,
    gamma: f64,
    epsilon: f64,
) -> Result<UNetGrads<f64>> {
    let (pred, cache) = params.forward(x)?;
    let terms = weighted_loss(y, &pred, gamma, epsilon)?;
    params.backward(&cache, &terms.grad)
}

/// Compare `analytic` against central differences of the loss.
pub fn check_gradients(
    params: &UNetParams<f64>,
    x: &Tensor<f64>,
    y: &LabelMap,
    analytic: &UNetGrads<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let base = probe(params, x, y, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut work = params.clone();
    let mut layers = Vec::with_capacity(params.layers().len());
    for (li, (layer, grad)) in params.layers().iter().zip(&analytic.layers).enumerate() {
        let total = layer.len();
        let picks: Vec<usize> = match cfg.samples_per_layer {
            Some(k) if k < total => {
                let mut v = index::sample(&mut rng, total, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..total).collect(),
        };
        let mut report = LayerReport {
            name: layer.name.clone(),
            parameters: total,
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            worst_index: 0,
        };
        let nw = layer.weight.len();
        for flat in picks {
            let set = |p: &mut UNetParams<f64>, value: f64| {
                let l = p.layer_mut(li);
                if flat < nw {
                    l.weight[flat] = value;
                } else {
                    l.bias[flat - nw] = value;
                }
            };
            let original = if flat < nw { layer.weight[flat] } else { layer.bias[flat - nw] };
            set(&mut work, original + cfg.step);
            let plus = probe(&work, x, y, cfg)?;
            set(&mut work, original - cfg.step);
            let minus = probe(&work, x, y, cfg)?;
            set(&mut work, original);

            if plus.signature != base.signature || minus.signature != base.signature {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * cfg.step);
            let a = if flat >= nw { grad.bias[flat - nw] } else { grad.weight[flat] };
            let e = rel_error(a, numeric, cfg.abs_floor);
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_index = flat;
            }
        }
        layers.push(report);
    }
    Ok(GradCheckReport {
        layers,
        tolerance: cfg.tolerance,
    })
}

/// Gradient check of a freshly initialized network on a random case.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let params = UNetParams::<f64>::init(cfg.unet)?;
    let (x, y) = random_case(cfg.input_size, cfg.seed);
    let analytic = analytic_gradients(&params, &x, &y, cfg.gamma, cfg.epsilon)?;
    check_gradients(&params, &x, &y, &analytic, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_network_passes_exhaustively() {
        let cfg = GradCheckConfig {
            unet: UNetConfig {
                depth: 1,
                base_channels: 2,
                seed: 3,
            },
            seed: 3,
            ..GradCheckConfig::default()
        };
        let r = grad_check(&cfg).unwrap();
        assert_eq!(r.parameters(), cfg.unet.parameter_count());
        assert_eq!(r.checked() + r.skipped(), r.parameters());
        assert!(r.passed(), "{}", r.to_text());
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let cfg = GradCheckConfig {
            unet: UNetConfig {
                depth: 1,
                base_channels: 2,
                seed: 4,
            },
            seed: 4,
            ..GradCheckConfig::default()
        };
        let params = UNetParams::<f64>::init(cfg.unet).unwrap();
        let (x, y) = random_case(cfg.input_size, cfg.seed);
        let mut g = analytic_gradients(&params, &x, &y, cfg.gamma, cfg.epsilon).unwrap();
        // the largest kernel entry of the first decoder conv
        let li = params.layers().iter().position(|l| l.name == "dec0.conv1").unwrap();
        let (wi, _) = g.layers[li]
            .weight
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        g.layers[li].weight[wi] *= 2.0;
        let r = check_gradients(&params, &x, &y, &g, &cfg).unwrap();
        assert!(!r.passed());
        assert_eq!(r.layers[li].worst_index, wi);
        assert!(r.layers.iter().enumerate().all(|(i, l)| i == li || l.max_rel_error < cfg.tolerance));
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(1.0, 1.0, 1e-6), 0.0);
        assert!((rel_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((rel_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }
}
