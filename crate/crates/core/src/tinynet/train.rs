//! Per-case full-volume training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::Real;
use super::optim::{AdamConfig, OptimizerState};
use super::unet::{Tensor, UNetParams};
use crate::error::{Error, Result};
use crate::losscore::{combined_loss, LossConfig};
use crate::volgrid::{Dims, LabelMap};

/// One training case: network input and its target mask on the same grid.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub input: Tensor<T>,
    pub target: LabelMap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Seeds the per-epoch case order and the flips.
    pub seed: u64,
    /// Mirror each case along a random subset of the axes at every step.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            adam: AdamConfig::default(),
            seed: 0,
            flip: false,
        }
    }
}

/// Mean loss terms over the cases of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub dice: f64,
    pub center: f64,
    pub gamma: f64,
    pub total: f64,
}

/// `data` (channel-major, x fastest) mirrored along the flagged axes.
fn mirrored<V: Copy>(data: &[V], dims: Dims, axes: [bool; 3]) -> Vec<V> {
    let [w, h, d] = dims.to_array();
    let pick = |i: usize, n: usize, on: bool| if on { n - 1 - i } else { i };
    let mut out = Vec::with_capacity(data.len());
    for block in data.chunks(dims.voxel_count()) {
        for z in 0..d {
            for y in 0..h {
                let row = w * (pick(y, h, axes[1]) + h * pick(z, d, axes[2]));
                out.extend((0..w).map(|x| block[row + pick(x, w, axes[0])]));
            }
        }
    }
    out
}

fn flip_sample<T: Real>(s: &Sample<T>, axes: [bool; 3]) -> Sample<T> {
    let dims = s.input.dims;
    Sample {
        input: Tensor {
            data: mirrored(&s.input.data, dims, axes),
            ..s.input.clone()
        },
        target: LabelMap::new(dims, mirrored(s.target.data(), dims, axes)).expect("same shape"),
    }
}

/// One optimizer step per case per epoch, cases visited in a seeded random
/// order. The centre-loss weight follows the γ schedule by epoch.
pub fn train_epochs<T: Real>(
    params: &mut UNetParams<T>,
    state: &mut OptimizerState<T>,
    samples: &[Sample<T>],
    cfg: &TrainConfig,
    loss: &LossConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    loss.validate()?;
    let mut history = Vec::with_capacity(cfg.epochs);
    if samples.is_empty() {
        return Ok(history);
    }
    for s in samples {
        if s.input.dims != s.target.dims() {
            return Err(Error::dims(s.input.dims.to_array(), s.target.dims().to_array()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut log = EpochLog {
            epoch,
            dice: 0.0,
            center: 0.0,
            gamma: 0.0,
            total: 0.0,
        };
        for &case in &order {
            let flipped;
            let s = if cfg.flip {
                let axes: [bool; 3] = rng.gen();
                flipped = flip_sample(&samples[case], axes);
                &flipped
            } else {
                &samples[case]
            };
            let (pred, cache) = params.forward(&s.input)?;
            let terms = combined_loss(&s.target, &pred, epoch, loss)?;
            if !terms.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    case,
                    value: terms.total,
                });
            }
            let grads = params.backward(&cache, &terms.grad)?;
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    case,
                    value: f64::NAN,
                });
            }
            state.step(params, &grads)?;
            log.dice += terms.dice;
            log.center += terms.center;
            log.gamma = terms.gamma;
            log.total += terms.total;
        }
        let n = samples.len() as f64;
        log.dice /= n;
        log.center /= n;
        log.total /= n;
        on_epoch(&log);
        history.push(log);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::unet::UNetConfig;
    use crate::volgrid::Dims;

    fn blob_sample(dims: Dims) -> Sample<f32> {
        let target = LabelMap::from_fn(dims, |x, y, z| {
            let r2 = (x as i32 - 4).pow(2) + (y as i32 - 3).pow(2) + (z as i32 - 4).pow(2);
            r2 <= 5
        });
        let data = target.data().iter().map(|&v| 0.2 + 0.5 * v as f32).collect();
        Sample {
            input: Tensor::new(1, dims, data).unwrap(),
            target,
        }
    }

    #[test]
    fn empty_dataset_is_a_no_op() {
        let mut p = UNetParams::<f32>::init(UNetConfig { depth: 1, base_channels: 2, seed: 0 }).unwrap();
        let before = p.clone();
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        let h = train_epochs(&mut p, &mut st, &[], &TrainConfig::default(), &LossConfig::default(), |_| {}).unwrap();
        assert!(h.is_empty());
        assert_eq!(p, before);
    }

    #[test]
    fn loss_decreases_on_a_small_blob() {
        let mut p = UNetParams::<f32>::init(UNetConfig { depth: 1, base_channels: 4, seed: 1 }).unwrap();
        let mut st = OptimizerState::new(&p, AdamConfig { lr: 1e-2, ..AdamConfig::default() });
        let cfg = TrainConfig { epochs: 60, seed: 2, ..TrainConfig::default() };
        let samples = [blob_sample(Dims::cube(8))];
        let h = train_epochs(&mut p, &mut st, &samples, &cfg, &LossConfig::default(), |_| {}).unwrap();
        assert_eq!(h.len(), 60);
        assert!(h[59].dice < h[0].dice - 0.2, "{} -> {}", h[0].dice, h[59].dice);
        assert_eq!(h[49].gamma, 1e-3);
        assert_eq!(h[50].gamma, 0.0);
        assert!(p.is_finite());
    }

    #[test]
    fn mirroring_twice_is_identity_and_moves_voxels() {
        let dims = Dims::new(3, 4, 5);
        let data: Vec<u32> = (0..2 * dims.voxel_count() as u32).collect();
        for axes in [[true, false, false], [false, true, true], [true, true, true]] {
            let once = mirrored(&data, dims, axes);
            assert_ne!(once, data);
            assert_eq!(mirrored(&once, dims, axes), data);
        }
        let x = mirrored(&data, dims, [true, false, false]);
        assert_eq!(x[0], 2);
        assert_eq!(x[dims.voxel_count()], dims.voxel_count() as u32 + 2);
        let z = mirrored(&data, dims, [false, false, true]);
        assert_eq!(z[0], (4 * 12) as u32);
    }

    #[test]
    fn flipping_training_is_seeded() {
        let cfg = TrainConfig { epochs: 3, seed: 4, flip: true, ..TrainConfig::default() };
        let samples = [blob_sample(Dims::cube(8))];
        let run = || {
            let mut p = UNetParams::<f32>::init(UNetConfig { depth: 1, base_channels: 2, seed: 0 }).unwrap();
            let mut st = OptimizerState::new(&p, AdamConfig::default());
            train_epochs(&mut p, &mut st, &samples, &cfg, &LossConfig::default(), |_| {}).unwrap();
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_sample_dims_rejected() {
        let mut p = UNetParams::<f32>::init(UNetConfig { depth: 1, base_channels: 2, seed: 0 }).unwrap();
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        let mut s = blob_sample(Dims::cube(8));
        s.target = LabelMap::zeros(Dims::cube(4));
        assert!(train_epochs(&mut p, &mut st, &[s], &TrainConfig::default(), &LossConfig::default(), |_| {}).is_err());
    }
}
