//! A small 3D U-Net with a hand-written backward pass.
//!
//! Layout per level `l` (channels `base · 2^l`): two 3×3×3 conv + ReLU, then
//! 2× max-pool on the way down; on the way up, 2× nearest upsampling,
//! channel concatenation `[upsampled, skip]`, and two 3×3×3 conv + ReLU. A
//! 1×1×1 conv and a logistic squash produce one probability per voxel.
//!
//! Parameter order (also the checkpoint order): `enc0.conv1, enc0.conv2, …,
//! bottleneck.conv1, bottleneck.conv2, dec{depth-1}.conv1, …, dec0.conv2,
//! head`, each as weights `[cout][cin][taps]` followed by biases `[cout]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, Real};
use crate::error::{Error, Result};
use crate::losscore::Prediction;
use crate::volgrid::{Dims, Volume};

pub const KERNEL: usize = 3;
pub const POOL: usize = 2;
/// Output-logit gradients below this magnitude are flushed to zero.
const GRAD_FLUSH: f64 = 1e-30;
const TAPS: usize = KERNEL * KERNEL * KERNEL;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            base_channels: 8,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.depth > 8 {
            return Err(Error::Config(format!(
                "unet needs 1 <= depth <= 8 and base_channels >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Spatial dims must be a multiple of this on every axis.
    pub fn divisor(&self) -> usize {
        POOL.pow(self.depth as u32)
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `(name, cin, cout, taps)` for every layer in parameter order.
    pub fn layer_shapes(&self) -> Vec<(String, usize, usize, usize)> {
        let mut v = Vec::with_capacity(4 * self.depth + 3);
        let mut cin = 1;
        for l in 0..self.depth {
            let c = self.channels(l);
            v.push((format!("enc{l}.conv1"), cin, c, TAPS));
            v.push((format!("enc{l}.conv2"), c, c, TAPS));
            cin = c;
        }
        let cb = self.channels(self.depth);
        v.push(("bottleneck.conv1".into(), cin, cb, TAPS));
        v.push(("bottleneck.conv2".into(), cb, cb, TAPS));
        let mut below = cb;
        for l in (0..self.depth).rev() {
            let c = self.channels(l);
            v.push((format!("dec{l}.conv1"), below + c, c, TAPS));
            v.push((format!("dec{l}.conv2"), c, c, TAPS));
            below = c;
        }
        v.push(("head".into(), below, 1, 1));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(_, cin, cout, taps)| cout * cin * taps + cout)
            .sum()
    }

    fn enc(&self, level: usize, j: usize) -> usize {
        2 * level + j
    }

    fn bottleneck(&self, j: usize) -> usize {
        2 * self.depth + j
    }

    fn dec(&self, level: usize, j: usize) -> usize {
        2 * self.depth + 2 + 2 * (self.depth - 1 - level) + j
    }

    fn head(&self) -> usize {
        4 * self.depth + 2
    }
}

/// Channel-major feature map `[c][z][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(channels: usize, dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * dims.voxel_count() {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape ({channels}, {:?})",
                data.len(),
                dims.to_array()
            )));
        }
        Ok(Self { channels, dims, data })
    }

    /// Single-channel tensor from an intensity volume.
    pub fn from_volume(v: &Volume) -> Self {
        Self {
            channels: 1,
            dims: v.dims(),
            data: v.data().iter().map(|&x| T::of_f64(x as f64)).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.dims.w, self.dims.h, self.dims.d]
    }
}

/// Weights and biases of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub taps: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    fn zeros(name: String, cin: usize, cout: usize, taps: usize) -> Self {
        Self {
            name,
            cin,
            cout,
            taps,
            weight: vec![T::zero(); cout * cin * taps],
            bias: vec![T::zero(); cout],
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Learnable parameters plus a version counter bumped on every update.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams<T> {
    config: UNetConfig,
    layers: Vec<ConvLayer<T>>,
    version: u64,
}

/// Gradients with the same layout as [`UNetParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct UNetGrads<T> {
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Real> UNetGrads<T> {
    pub fn zeros_like(params: &UNetParams<T>) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| ConvLayer::zeros(l.name.clone(), l.cin, l.cout, l.taps))
                .collect(),
        }
    }

    pub fn slices(&self) -> impl Iterator<Item = &[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn is_finite(&self) -> bool {
        self.slices().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Activations retained by [`UNetParams::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    version: u64,
    /// Grid at each level; `levels[depth]` is the bottleneck grid.
    levels: Vec<Dims>,
    input: Vec<T>,
    /// Post-ReLU output of every 3×3×3 layer, by layer index.
    acts: Vec<Vec<T>>,
    pooled: Vec<Vec<T>>,
    pool_idx: Vec<Vec<u32>>,
    concat: Vec<Vec<T>>,
    probs: Vec<f64>,
}

impl<T> ForwardCache<T> {
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// Activation pattern: ReLU on/off per unit and pool argmax choices.
    /// Finite differences are only meaningful when this is unchanged.
    pub fn kink_signature(&self) -> (Vec<bool>, Vec<u32>)
    where
        T: Real,
    {
        let on = self
            .acts
            .iter()
            .flat_map(|a| a.iter().map(|v| *v > T::zero()))
            .collect();
        let arg = self.pool_idx.iter().flatten().copied().collect();
        (on, arg)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl<T: Real> UNetParams<T> {
    /// Fan-in scaled uniform initialization, `U(-√(6/fan_in), √(6/fan_in))`,
    /// zero biases, drawn from the config seed.
    pub fn init(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(name, cin, cout, taps)| {
                let bound = (6.0 / (cin * taps) as f64).sqrt();
                let mut layer = ConvLayer::zeros(name, cin, cout, taps);
                for w in &mut layer.weight {
                    *w = T::of_f64(rng.gen_range(-bound..bound));
                }
                layer
            })
            .collect();
        Ok(Self {
            config,
            layers,
            version: 0,
        })
    }

    /// Assemble from explicit layers (checkpoint loading); shapes are checked
    /// against the config.
    pub fn from_layers(config: UNetConfig, layers: Vec<ConvLayer<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for ((name, cin, cout, taps), l) in shapes.iter().zip(&layers) {
            if (l.cin, l.cout, l.taps) != (*cin, *cout, *taps)
                || l.weight.len() != cin * cout * taps
                || l.bias.len() != *cout
            {
                return Err(Error::Shape(format!("layer {name} has the wrong shape")));
            }
        }
        Ok(Self {
            config,
            layers,
            version: 0,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::len).sum()
    }

    pub fn slices(&self) -> impl Iterator<Item = &[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    /// Mutable access to every parameter; bumps the version so that caches
    /// from earlier forward passes are rejected.
    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Mutable access to one layer; bumps the version.
    pub fn layer_mut(&mut self, index: usize) -> &mut ConvLayer<T> {
        self.version += 1;
        &mut self.layers[index]
    }

    /// Set the output bias to the logit of `fraction`, so every voxel starts
    /// at the foreground prior rather than at p = 0.5. With a rare
    /// foreground the dice gradient at p = 0.5 is dominated by background
    /// voxels and drives the target into sigmoid saturation first.
    pub fn set_output_prior(&mut self, fraction: f64) {
        let f = fraction.clamp(1e-4, 1.0 - 1e-4);
        let head = self.config.head();
        self.layer_mut(head).bias[0] = T::of_f64((f / (1.0 - f)).ln());
    }

    pub fn is_finite(&self) -> bool {
        self.slices().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> UNetParams<U> {
        UNetParams {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    name: l.name.clone(),
                    cin: l.cin,
                    cout: l.cout,
                    taps: l.taps,
                    weight: l.weight.iter().map(|v| U::of_f64(v.as_f64())).collect(),
                    bias: l.bias.iter().map(|v| U::of_f64(v.as_f64())).collect(),
                })
                .collect(),
            version: 0,
        }
    }

    fn conv_relu(&self, idx: usize, input: &[T], dims: Dims) -> Vec<T> {
        let l = &self.layers[idx];
        let mut out = vec![T::zero(); l.cout * dims.voxel_count()];
        ops::conv3(input, l.cin, dims, &l.weight, Some(&l.bias), l.cout, false, &mut out);
        ops::relu_inplace(&mut out);
        out
    }

    /// Voxel-wise foreground probabilities for a one-channel input.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Prediction, ForwardCache<T>)> {
        let cfg = &self.config;
        let div = cfg.divisor();
        let dims = x.dims;
        if x.channels != 1 {
            return Err(Error::Shape(format!("expected 1 input channel, got {}", x.channels)));
        }
        if dims.w % div != 0 || dims.h % div != 0 || dims.d % div != 0 {
            return Err(Error::Shape(format!(
                "input dims {:?} are not divisible by {div}",
                dims.to_array()
            )));
        }
        let depth = cfg.depth;
        let levels: Vec<Dims> = (0..=depth)
            .map(|l| Dims::new(dims.w >> l, dims.h >> l, dims.d >> l))
            .collect();
        let mut acts: Vec<Vec<T>> = vec![Vec::new(); self.layers.len() - 1];
        let mut pooled = Vec::with_capacity(depth);
        let mut pool_idx = Vec::with_capacity(depth);

        for l in 0..depth {
            let input = if l == 0 { &x.data } else { &pooled[l - 1] };
            let a = self.conv_relu(cfg.enc(l, 0), input, levels[l]);
            let b = self.conv_relu(cfg.enc(l, 1), &a, levels[l]);
            let (p, idx) = ops::maxpool2(&b, cfg.channels(l), levels[l]);
            acts[cfg.enc(l, 0)] = a;
            acts[cfg.enc(l, 1)] = b;
            pooled.push(p);
            pool_idx.push(idx);
        }
        let a = self.conv_relu(cfg.bottleneck(0), &pooled[depth - 1], levels[depth]);
        let b = self.conv_relu(cfg.bottleneck(1), &a, levels[depth]);
        acts[cfg.bottleneck(0)] = a;
        acts[cfg.bottleneck(1)] = b;

        let mut concat = vec![Vec::new(); depth];
        let mut below = cfg.bottleneck(1);
        let mut below_ch = cfg.channels(depth);
        for l in (0..depth).rev() {
            let mut cat = ops::upsample2(&acts[below], below_ch, levels[l + 1]);
            cat.extend_from_slice(&acts[cfg.enc(l, 1)]);
            let a = self.conv_relu(cfg.dec(l, 0), &cat, levels[l]);
            let b = self.conv_relu(cfg.dec(l, 1), &a, levels[l]);
            concat[l] = cat;
            acts[cfg.dec(l, 0)] = a;
            acts[cfg.dec(l, 1)] = b;
            below = cfg.dec(l, 1);
            below_ch = cfg.channels(l);
        }

        let head = &self.layers[cfg.head()];
        let n = dims.voxel_count();
        let mut logits = vec![T::zero(); n];
        ops::conv1(&acts[below], head.cin, n, &head.weight, &head.bias, 1, &mut logits);
        let probs: Vec<f64> = logits.iter().map(|z| sigmoid(z.as_f64())).collect();

        let pred = Prediction::new(dims, probs.clone())?;
        Ok((
            pred,
            ForwardCache {
                version: self.version,
                levels,
                input: x.data.clone(),
                acts,
                pooled,
                pool_idx,
                concat,
                probs,
            },
        ))
    }

    /// Backward through one conv + ReLU; returns the input gradient when asked.
    fn conv_relu_backward(
        &self,
        idx: usize,
        input: &[T],
        act: &[T],
        mut dact: Vec<T>,
        dims: Dims,
        grads: &mut UNetGrads<T>,
        want_input: bool,
    ) -> Option<Vec<T>> {
        let l = &self.layers[idx];
        let n = dims.voxel_count();
        ops::relu_backward(act, &mut dact);
        let g = &mut grads.layers[idx];
        ops::bias_grad(&dact, n, &mut g.bias);
        ops::conv3_weight_grad(input, l.cin, dims, &dact, l.cout, &mut g.weight);
        want_input.then(|| {
            let mut din = vec![T::zero(); l.cin * n];
            ops::conv3_input_grad(&dact, l.cout, dims, &l.weight, l.cin, &mut din);
            din
        })
    }

    /// Parameter gradients given `∂L/∂p` for every output probability.
    pub fn backward(&self, cache: &ForwardCache<T>, dprob: &[f64]) -> Result<UNetGrads<T>> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cache: cache.version,
                params: self.version,
            });
        }
        if dprob.len() != cache.probs.len() {
            return Err(Error::Shape(format!(
                "upstream gradient has {} entries, output has {}",
                dprob.len(),
                cache.probs.len()
            )));
        }
        let cfg = &self.config;
        let depth = cfg.depth;
        let levels = &cache.levels;
        let acts = &cache.acts;
        let mut grads = UNetGrads::zeros_like(self);

        let n = levels[0].voxel_count();
        let dlogit: Vec<T> = dprob
            .iter()
            .zip(&cache.probs)
            .map(|(g, p)| {
                // Negligible gradients would become f32 subnormals, which
                // are very slow on common hardware; they cannot move the
                // update anyway.
                let v = g * p * (1.0 - p);
                T::of_f64(if v.abs() < GRAD_FLUSH { 0.0 } else { v })
            })
            .collect();
        let head = &self.layers[cfg.head()];
        let top = &acts[cfg.dec(0, 1)];
        {
            let g = &mut grads.layers[cfg.head()];
            ops::bias_grad(&dlogit, n, &mut g.bias);
            ops::conv1_weight_grad(top, head.cin, n, &dlogit, 1, &mut g.weight);
        }
        let mut dx = vec![T::zero(); head.cin * n];
        ops::conv1_input_grad(&dlogit, 1, n, &head.weight, head.cin, &mut dx);

        let mut dskip: Vec<Vec<T>> = vec![Vec::new(); depth];
        for l in 0..depth {
            let (i1, i2) = (cfg.dec(l, 0), cfg.dec(l, 1));
            let da = self
                .conv_relu_backward(i2, &acts[i1], &acts[i2], dx, levels[l], &mut grads, true)
                .expect("input gradient requested");
            let dcat = self
                .conv_relu_backward(i1, &cache.concat[l], &acts[i1], da, levels[l], &mut grads, true)
                .expect("input gradient requested");
            let below_ch = cfg.channels(l + 1);
            let split = below_ch * levels[l].voxel_count();
            dskip[l] = dcat[split..].to_vec();
            dx = ops::upsample2_backward(&dcat[..split], below_ch, levels[l + 1]);
        }

        let (b1, b2) = (cfg.bottleneck(0), cfg.bottleneck(1));
        let da = self
            .conv_relu_backward(b2, &acts[b1], &acts[b2], dx, levels[depth], &mut grads, true)
            .expect("input gradient requested");
        dx = self
            .conv_relu_backward(b1, &cache.pooled[depth - 1], &acts[b1], da, levels[depth], &mut grads, true)
            .expect("input gradient requested");

        for l in (0..depth).rev() {
            let (e1, e2) = (cfg.enc(l, 0), cfg.enc(l, 1));
            let mut db = std::mem::take(&mut dskip[l]);
            ops::maxpool2_backward(&dx, &cache.pool_idx[l], cfg.channels(l), levels[l], &mut db);
            let da = self
                .conv_relu_backward(e2, &acts[e1], &acts[e2], db, levels[l], &mut grads, true)
                .expect("input gradient requested");
            let input = if l == 0 { &cache.input } else { &cache.pooled[l - 1] };
            match self.conv_relu_backward(e1, input, &acts[e1], da, levels[l], &mut grads, l > 0) {
                Some(d) => dx = d,
                None => break,
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(depth: usize, base: usize, seed: u64) -> UNetConfig {
        UNetConfig {
            depth,
            base_channels: base,
            seed,
        }
    }

    fn ramp_input(dims: Dims) -> Tensor<f64> {
        let n = dims.voxel_count();
        Tensor::new(1, dims, (0..n).map(|i| ((i * 37) % 101) as f64 / 101.0).collect()).unwrap()
    }

    #[test]
    fn parameter_counts_are_golden() {
        assert_eq!(cfg(2, 8, 0).parameter_count(), 88_513);
        assert_eq!(cfg(1, 4, 0).parameter_count(), 4_897);
        assert_eq!(cfg(1, 2, 0).parameter_count(), 1_261);
        let p = UNetParams::<f32>::init(cfg(2, 8, 3)).unwrap();
        assert_eq!(p.parameter_count(), 88_513);
    }

    #[test]
    fn output_shape_and_range() {
        let p = UNetParams::<f32>::init(cfg(2, 8, 1)).unwrap();
        let x = Tensor::<f32>::from_volume(&Volume::filled(Dims::cube(16), 0.4));
        let (pred, _) = p.forward(&x).unwrap();
        assert_eq!(pred.dims(), Dims::cube(16));
        assert!(pred.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn indivisible_dims_rejected() {
        let p = UNetParams::<f64>::init(cfg(2, 2, 1)).unwrap();
        let x = ramp_input(Dims::new(8, 8, 6));
        assert!(matches!(p.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let x = ramp_input(Dims::cube(8));
        let a = UNetParams::<f64>::init(cfg(1, 4, 42)).unwrap().forward(&x).unwrap().0;
        let b = UNetParams::<f64>::init(cfg(1, 4, 42)).unwrap().forward(&x).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients_with_matching_shapes() {
        let p = UNetParams::<f64>::init(cfg(2, 2, 5)).unwrap();
        let x = ramp_input(Dims::cube(8));
        let (_, cache) = p.forward(&x).unwrap();
        let g = p.backward(&cache, &vec![0.0; 512]).unwrap();
        assert!(g.slices().all(|s| s.iter().all(|&v| v == 0.0)));
        for (gl, pl) in g.layers.iter().zip(p.layers()) {
            assert_eq!(gl.weight.len(), pl.weight.len());
            assert_eq!(gl.bias.len(), pl.bias.len());
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut p = UNetParams::<f64>::init(cfg(1, 2, 5)).unwrap();
        let x = ramp_input(Dims::cube(4));
        let (_, cache) = p.forward(&x).unwrap();
        p.slices_mut().for_each(|_| {});
        assert!(matches!(
            p.backward(&cache, &vec![1.0; 64]),
            Err(Error::StaleCache { .. })
        ));
    }

    #[test]
    fn cast_preserves_outputs() {
        let p = UNetParams::<f64>::init(cfg(1, 4, 8)).unwrap();
        let x = ramp_input(Dims::cube(8));
        let a = p.forward(&x).unwrap().0;
        let q: UNetParams<f32> = p.cast();
        let xf = Tensor::new(1, x.dims, x.data.iter().map(|&v| v as f32).collect()).unwrap();
        let b = q.forward(&xf).unwrap().0;
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-4);
        }
    }

    #[test]
    fn interior_is_translation_consistent() {
        // Shift a compact pattern by one pool stride in a larger zero field;
        // interior outputs shift with it.
        let p = UNetParams::<f64>::init(cfg(1, 2, 13)).unwrap();
        let dims = Dims::cube(32);
        let pattern = |x: usize, y: usize, z: usize, off: usize| -> f64 {
            let (x, y, z) = (x as isize - off as isize, y as isize, z as isize);
            let r2 = (x - 14).pow(2) + (y - 16).pow(2) + (z - 16).pow(2);
            if r2 < 9 {
                0.8
            } else {
                0.1
            }
        };
        let make = |off: usize| {
            let mut data = Vec::with_capacity(dims.voxel_count());
            for z in 0..32 {
                for y in 0..32 {
                    for x in 0..32 {
                        data.push(pattern(x, y, z, off));
                    }
                }
            }
            Tensor::new(1, dims, data).unwrap()
        };
        let a = p.forward(&make(0)).unwrap().0;
        let b = p.forward(&make(POOL)).unwrap().0;
        // Receptive field radius is under 10 voxels at depth 1.
        for z in 10..22 {
            for y in 10..22 {
                for x in 10..20 {
                    let u = a.data()[dims.index(x, y, z)];
                    let v = b.data()[dims.index(x + POOL, y, z)];
                    assert!((u - v).abs() < 1e-6, "({x},{y},{z}) {u} vs {v}");
                }
            }
        }
    }
}
