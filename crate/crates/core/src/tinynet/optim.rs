//! Adaptive-moment (Adam) optimizer.

use super::ops::Real;
use super::unet::{UNetGrads, UNetParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `param` in place. `step` is 1-based.
pub fn adam_update<T: Real>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], step: u64, cfg: &AdamConfig) {
    let b1 = T::of_f64(cfg.beta1);
    let b2 = T::of_f64(cfg.beta2);
    let one = T::one();
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    let lr = T::of_f64(cfg.lr / c1);
    let c2_sqrt = T::of_f64(c2.sqrt());
    let eps = T::of_f64(cfg.eps);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        *p = *p - lr * *m / ((*v).sqrt() / c2_sqrt + eps);
    }
}

/// Moment accumulators mirroring a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &UNetParams<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = params.slices().map(|s| vec![T::zero(); s.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut UNetParams<T>, grads: &UNetGrads<T>) -> Result<()> {
        if grads.slices().count() != self.m.len() {
            return Err(Error::Shape("gradient layout does not match optimizer state".into()));
        }
        self.step += 1;
        let step = self.step;
        let cfg = self.config;
        for (((p, g), m), v) in params
            .slices_mut()
            .zip(grads.slices())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            if p.len() != g.len() {
                return Err(Error::Shape("gradient slice length mismatch".into()));
            }
            adam_update(p, g, m, v, step, &cfg);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::unet::UNetConfig;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = UNetConfig { depth: 1, base_channels: 2, seed: 4 };
        let mut p = UNetParams::<f32>::init(cfg).unwrap();
        let before = p.clone();
        let g = UNetGrads::zeros_like(&p);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        for _ in 0..3 {
            st.step(&mut p, &g).unwrap();
        }
        assert!(p.slices().zip(before.slices()).all(|(a, b)| a == b));
        assert_eq!(st.steps(), 3);
    }

    #[test]
    fn descends_on_square() {
        let mut w = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        let g = [2.0 * w[0]];
        adam_update(&mut w, &g, &mut m, &mut v, 1, &AdamConfig::default());
        assert!(w[0].abs() < 1.0);
        // the first bias-corrected step moves by lr·sign(g)
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn trajectories_are_reproducible() {
        let run = || {
            let mut w = [0.7f32, -1.3];
            let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
            for s in 1..=50 {
                let g = [2.0 * w[0], 6.0 * w[1]];
                adam_update(&mut w, &g, &mut m, &mut v, s, &AdamConfig::default());
            }
            w
        };
        assert_eq!(run(), run());
    }
}
