//! Training objective and evaluation metric.
//!
//! The objective is a two-class soft dice term plus a γ-weighted per-slice
//! centroid term. Both are evaluated in `f64` on soft predictions and come
//! with analytic gradients with respect to every predicted probability.

use crate::error::{Error, Result};
use crate::volgrid::{Dims, LabelMap};

/// Soft per-voxel foreground probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    dims: Dims,
    data: Vec<f64>,
}

impl Prediction {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.voxel_count() {
            return Err(Error::BufferLength {
                len: data.len(),
                dims: dims.to_array(),
                expected: dims.voxel_count(),
            });
        }
        if let Some(bad) = data.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Shape(format!("probability {bad} outside [0, 1]")));
        }
        Ok(Self { dims, data })
    }

    /// The hard mask viewed as a prediction.
    pub fn from_mask(m: &LabelMap) -> Self {
        Self {
            dims: m.dims(),
            data: m.to_f64(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn binarize(&self, threshold: f64) -> LabelMap {
        LabelMap::threshold(self.dims, &self.data, threshold).expect("length checked on construction")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma0: f64,
    pub gamma_cutoff_epoch: usize,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma0: 1e-3,
            gamma_cutoff_epoch: 50,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.gamma0 >= 0.0) {
            return Err(Error::Config(format!(
                "loss config needs epsilon > 0 and gamma0 >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn check_dims(y: &LabelMap, p: &Prediction) -> Result<()> {
    if y.dims() != p.dims {
        return Err(Error::dims(y.dims().to_array(), p.dims.to_array()));
    }
    Ok(())
}

/// Smoothed sums `(A, B, C, E)` of the two dice fractions `A/B` and `C/E`.
fn dice_sums(y: &LabelMap, p: &Prediction, eps: f64) -> [f64; 4] {
    let (mut fg_overlap, mut fg_total, mut bg_overlap, mut bg_total) = (0.0, 0.0, 0.0, 0.0);
    for (&yi, &pi) in y.data().iter().zip(&p.data) {
        let yi = yi as f64;
        fg_overlap += yi * pi;
        fg_total += yi + pi;
        bg_overlap += (1.0 - yi) * (1.0 - pi);
        bg_total += 2.0 - yi - pi;
    }
    [
        fg_overlap + eps / 2.0,
        fg_total + eps,
        bg_overlap + eps / 2.0,
        bg_total + eps,
    ]
}

/// Two-class soft dice loss in `[-1, 0]`; `-1` exactly when `p == y`.
pub fn dice_loss(y: &LabelMap, p: &Prediction, eps: f64) -> Result<f64> {
    check_dims(y, p)?;
    let [a, b, c, e] = dice_sums(y, p, eps);
    Ok(-a / b - c / e)
}

pub fn dice_loss_grad(y: &LabelMap, p: &Prediction, eps: f64) -> Result<Vec<f64>> {
    check_dims(y, p)?;
    let [a, b, c, e] = dice_sums(y, p, eps);
    let (b2, e2) = (b * b, e * e);
    Ok(y.data()
        .iter()
        .map(|&yi| {
            let yi = yi as f64;
            -(yi * b - a) / b2 + ((1.0 - yi) * e - c) / e2
        })
        .collect())
}

/// Mass-weighted centre of one axial slice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Centroid {
    pub cx: f64,
    pub cy: f64,
    pub mass: f64,
}

/// Centroid of a `w × h` mass field (x fastest); `None` when the slice is empty.
pub fn slice_centroid(mass: &[f64], w: usize, h: usize) -> Option<Centroid> {
    debug_assert_eq!(mass.len(), w * h);
    let (mut total, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for v in 0..h {
        for u in 0..w {
            let m = mass[u + w * v];
            total += m;
            sx += u as f64 * m;
            sy += v as f64 * m;
        }
    }
    (total > 0.0).then(|| Centroid {
        cx: sx / total,
        cy: sy / total,
        mass: total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterLoss {
    pub value: f64,
    /// Slices skipped because either centroid is undefined.
    pub undefined_slices: usize,
}

fn slice_pairs<'a>(
    y: &'a [f64],
    p: &'a [f64],
    dims: Dims,
) -> impl Iterator<Item = (usize, Option<Centroid>, Option<Centroid>)> + 'a {
    let plane = dims.w * dims.h;
    (0..dims.d).map(move |z| {
        let r = z * plane..(z + 1) * plane;
        (
            z,
            slice_centroid(&y[r.clone()], dims.w, dims.h),
            slice_centroid(&p[r], dims.w, dims.h),
        )
    })
}

/// Sum over axial slices of the L1 distance between centroids.
pub fn center_loss(y: &LabelMap, p: &Prediction) -> Result<CenterLoss> {
    check_dims(y, p)?;
    let yf = y.to_f64();
    let mut out = CenterLoss {
        value: 0.0,
        undefined_slices: 0,
    };
    for (_, cy, cp) in slice_pairs(&yf, &p.data, p.dims) {
        match (cy, cp) {
            (Some(a), Some(b)) => out.value += (b.cx - a.cx).abs() + (b.cy - a.cy).abs(),
            _ => out.undefined_slices += 1,
        }
    }
    Ok(out)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of [`center_loss`] through the soft centroid; zero on skipped
/// slices and on exact centroid ties.
pub fn center_loss_grad(y: &LabelMap, p: &Prediction) -> Result<Vec<f64>> {
    check_dims(y, p)?;
    let dims = p.dims;
    let plane = dims.w * dims.h;
    let yf = y.to_f64();
    let mut grad = vec![0.0; p.data.len()];
    for (z, cy, cp) in slice_pairs(&yf, &p.data, dims) {
        let (Some(gt), Some(pr)) = (cy, cp) else {
            continue;
        };
        let sx = sign(pr.cx - gt.cx) / pr.mass;
        let sy = sign(pr.cy - gt.cy) / pr.mass;
        let slice = &mut grad[z * plane..(z + 1) * plane];
        for v in 0..dims.h {
            for u in 0..dims.w {
                slice[u + dims.w * v] = sx * (u as f64 - pr.cx) + sy * (v as f64 - pr.cy);
            }
        }
    }
    Ok(grad)
}

/// Centre-loss weight for an epoch: `gamma0` before the cutoff, zero after.
pub fn gamma_schedule(epoch: usize, cfg: &LossConfig) -> f64 {
    if epoch < cfg.gamma_cutoff_epoch {
        cfg.gamma0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms {
    pub dice: f64,
    pub center: f64,
    pub gamma: f64,
    pub total: f64,
    pub undefined_slices: usize,
    pub grad: Vec<f64>,
}

/// `dice + γ(epoch) · center` with its gradient.
pub fn combined_loss(y: &LabelMap, p: &Prediction, epoch: usize, cfg: &LossConfig) -> Result<LossTerms> {
    weighted_loss(y, p, gamma_schedule(epoch, cfg), cfg.epsilon)
}

/// As [`combined_loss`] with an explicit centre-loss weight.
pub fn weighted_loss(y: &LabelMap, p: &Prediction, gamma: f64, eps: f64) -> Result<LossTerms> {
    let dice = dice_loss(y, p, eps)?;
    let center = center_loss(y, p)?;
    let mut grad = dice_loss_grad(y, p, eps)?;
    if gamma != 0.0 {
        for (g, c) in grad.iter_mut().zip(center_loss_grad(y, p)?) {
            *g += gamma * c;
        }
    }
    Ok(LossTerms {
        dice,
        center: center.value,
        gamma,
        total: dice + gamma * center.value,
        undefined_slices: center.undefined_slices,
        grad,
    })
}

/// Dice–Sørensen coefficient of two binary masks; 1 when both are empty.
pub fn dsc(y: &LabelMap, m: &LabelMap) -> Result<f64> {
    if y.dims() != m.dims() {
        return Err(Error::dims(y.dims().to_array(), m.dims().to_array()));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in y.data().iter().zip(m.data()) {
        inter += (a & b) as usize;
        total += (a + b) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(dims: Dims, fg: &[[usize; 3]]) -> LabelMap {
        let mut m = LabelMap::zeros(dims);
        for p in fg {
            m.set(p[0], p[1], p[2], 1);
        }
        m
    }

    #[test]
    fn dice_optimum_is_exactly_minus_one() {
        let dims = Dims::new(3, 2, 2);
        for m in [
            LabelMap::zeros(dims),
            mask(dims, &[[0, 0, 0], [2, 1, 1]]),
            LabelMap::from_fn(dims, |_, _, _| true),
        ] {
            let p = Prediction::from_mask(&m);
            assert_eq!(dice_loss(&m, &p, 1e-6).unwrap(), -1.0);
        }
    }

    #[test]
    fn dice_complement_tends_to_zero() {
        let dims = Dims::new(4, 2, 1);
        let y = mask(dims, &[[0, 0, 0], [1, 1, 0], [3, 0, 0]]);
        let flipped = LabelMap::from_fn(dims, |x, yy, z| y.get(x, yy, z) == 0);
        let l = dice_loss(&y, &Prediction::from_mask(&flipped), 1e-12).unwrap();
        assert!(l.abs() < 1e-12, "{l}");
    }

    #[test]
    fn dice_half_probability_matches_direct_evaluation() {
        // Four of eight voxels foreground, p = 0.5 everywhere. Evaluated by
        // hand: A = 2 + e/2, B = 8 + e, C = 2 + e/2, E = 8 + e.
        let dims = Dims::new(2, 2, 2);
        let y = LabelMap::from_fn(dims, |x, _, _| x == 0);
        let p = Prediction::new(dims, vec![0.5; 8]).unwrap();
        let eps = 1e-6;
        let expected = -2.0 * (2.0 + eps / 2.0) / (8.0 + eps);
        let got = dice_loss(&y, &p, eps).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got + 0.5).abs() < 1e-6);
    }

    #[test]
    fn dims_mismatch_errors() {
        let y = LabelMap::zeros(Dims::cube(2));
        let p = Prediction::new(Dims::new(2, 2, 1), vec![0.0; 4]).unwrap();
        assert!(dice_loss(&y, &p, 1e-6).is_err());
        assert!(dice_loss_grad(&y, &p, 1e-6).is_err());
        assert!(center_loss(&y, &p).is_err());
        assert!(center_loss_grad(&y, &p).is_err());
        assert!(dsc(&y, &LabelMap::zeros(Dims::cube(3))).is_err());
    }

    #[test]
    fn foreground_gradient_nonpositive_at_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = Dims::cube(4);
        let y = LabelMap::from_fn(dims, |_, _, _| rng.gen_bool(0.4));
        let g = dice_loss_grad(&y, &Prediction::from_mask(&y), 1e-6).unwrap();
        for (gi, &yi) in g.iter().zip(y.data()) {
            if yi == 1 {
                assert!(*gi <= 0.0);
            } else {
                assert!(*gi >= 0.0);
            }
        }
    }

    #[test]
    fn gradient_sign_pattern_stable_across_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = Dims::cube(4);
        let y = LabelMap::from_fn(dims, |_, _, _| rng.gen_bool(0.3));
        let p = Prediction::new(dims, (0..64).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
        let signs = |eps: f64| -> Vec<bool> {
            dice_loss_grad(&y, &p, eps)
                .unwrap()
                .iter()
                .map(|g| *g > 0.0)
                .collect()
        };
        let reference = signs(1e-6);
        assert_eq!(signs(1e-8), reference);
        assert_eq!(signs(1e-4), reference);
    }

    #[test]
    fn centroid_examples() {
        let (w, h) = (6, 7);
        let mut m = vec![0.0; w * h];
        m[3 + w * 5] = 1.0;
        let c = slice_centroid(&m, w, h).unwrap();
        assert_eq!((c.cx, c.cy), (3.0, 5.0));

        let mut m = vec![0.0; w * h];
        m[0] = 1.0;
        m[2 + w * 4] = 1.0;
        let c = slice_centroid(&m, w, h).unwrap();
        assert_eq!((c.cx, c.cy, c.mass), (1.0, 2.0, 2.0));

        assert!(slice_centroid(&vec![0.0; w * h], w, h).is_none());
    }

    #[test]
    fn center_loss_examples() {
        let dims = Dims::new(8, 8, 3);
        let y = LabelMap::from_fn(dims, |x, yy, _| (2..4).contains(&x) && (1..3).contains(&yy));
        let same = center_loss(&y, &Prediction::from_mask(&y)).unwrap();
        assert_eq!(same.value, 0.0);

        let shifted = LabelMap::from_fn(dims, |x, yy, _| (3..5).contains(&x) && (3..5).contains(&yy));
        let l = center_loss(&y, &Prediction::from_mask(&shifted)).unwrap();
        assert_eq!(l.value, 3.0 * dims.d as f64);

        let empty = Prediction::new(dims, vec![0.0; dims.voxel_count()]).unwrap();
        let l = center_loss(&y, &empty).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.undefined_slices, dims.d);
    }

    #[test]
    fn undefined_ground_truth_slice_has_zero_gradient() {
        let dims = Dims::new(4, 4, 2);
        let y = LabelMap::from_fn(dims, |x, _, z| z == 0 && x == 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Prediction::new(dims, (0..32).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap();
        let g = center_loss_grad(&y, &p).unwrap();
        assert!(g[16..].iter().all(|&v| v == 0.0));
        assert!(g[..16].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn moving_mass_toward_target_decreases_slice_loss() {
        // Two-voxel slice: gt at u = 0; moving mass from u = 1 to u = 0
        // should lower the loss monotonically along the line.
        let dims = Dims::new(2, 1, 1);
        let y = mask(dims, &[[0, 0, 0]]);
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let p = Prediction::new(dims, vec![0.1 + 0.8 * t, 0.9 - 0.8 * t]).unwrap();
            let l = center_loss(&y, &p).unwrap().value;
            assert!(l < last, "loss did not decrease at t = {t}");
            last = l;
        }
    }

    #[test]
    fn gamma_schedule_switches_at_cutoff() {
        let cfg = LossConfig::default();
        assert_eq!(gamma_schedule(0, &cfg), 1e-3);
        assert_eq!(gamma_schedule(49, &cfg), 1e-3);
        assert_eq!(gamma_schedule(50, &cfg), 0.0);
        assert_eq!(gamma_schedule(500, &cfg), 0.0);
    }

    #[test]
    fn combined_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = Dims::cube(4);
        let y = LabelMap::from_fn(dims, |_, _, _| rng.gen_bool(0.5));
        let p = Prediction::new(dims, (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let cfg = LossConfig::default();

        let late = combined_loss(&y, &p, 50, &cfg).unwrap();
        assert_eq!(late.total, dice_loss(&y, &p, cfg.epsilon).unwrap());
        assert_eq!(late.grad, dice_loss_grad(&y, &p, cfg.epsilon).unwrap());

        let early = combined_loss(&y, &p, 0, &cfg).unwrap();
        let expected = dice_loss(&y, &p, cfg.epsilon).unwrap() + 1e-3 * center_loss(&y, &p).unwrap().value;
        assert!((early.total - expected).abs() < 1e-12);

        let opt = combined_loss(&y, &Prediction::from_mask(&y), 3, &cfg).unwrap();
        assert_eq!(opt.total, -1.0);
    }

    #[test]
    fn dsc_examples() {
        let dims = Dims::new(10, 1, 1);
        let y = LabelMap::from_fn(dims, |x, _, _| x < 4);
        let m = LabelMap::from_fn(dims, |x, _, _| (1..7).contains(&x));
        assert_eq!(dsc(&y, &y).unwrap(), 1.0);
        assert!((dsc(&y, &m).unwrap() - 0.6).abs() < 1e-15);
        let far = LabelMap::from_fn(dims, |x, _, _| x >= 8);
        assert_eq!(dsc(&y, &far).unwrap(), 0.0);
        assert_eq!(dsc(&LabelMap::zeros(dims), &LabelMap::zeros(dims)).unwrap(), 1.0);
    }

    #[test]
    fn prediction_rejects_out_of_range() {
        assert!(Prediction::new(Dims::cube(1), vec![1.5]).is_err());
    }
}
