//! Dense voxel grids: intensity volumes and binary label maps.
//!
//! Voxels are stored row-major with x varying fastest, so the linear index of
//! `(x, y, z)` is `x + W * (y + H * z)`. Resampling works in integer blocks of
//! the decimation factor; edge blocks that run past the grid are averaged (or
//! voted) over the voxels that exist, without padding.

use crate::boxes::BoundingBox;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub w: usize,
    pub h: usize,
    pub d: usize,
}

impl Dims {
    pub const fn new(w: usize, h: usize, d: usize) -> Self {
        Self { w, h, d }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub fn to_array(self) -> [usize; 3] {
        [self.w, self.h, self.d]
    }

    pub fn voxel_count(self) -> usize {
        self.w * self.h * self.d
    }

    #[inline]
    pub fn index(self, x: usize, y: usize, z: usize) -> usize {
        x + self.w * (y + self.h * z)
    }

    pub fn is_positive(self) -> bool {
        self.w > 0 && self.h > 0 && self.d > 0
    }

    /// `ceil(dim / factor)` per axis.
    pub fn div_ceil(self, factor: usize) -> Dims {
        Dims::new(
            self.w.div_ceil(factor),
            self.h.div_ceil(factor),
            self.d.div_ceil(factor),
        )
    }

    pub fn scale(self, factor: usize) -> Dims {
        Dims::new(self.w * factor, self.h * factor, self.d * factor)
    }

    /// Round every axis up to a multiple of `m`.
    pub fn round_up(self, m: usize) -> Dims {
        self.div_ceil(m).scale(m)
    }
}

impl From<[usize; 3]> for Dims {
    fn from(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }
}

fn check_len(dims: Dims, len: usize) -> Result<()> {
    if len != dims.voxel_count() || !dims.is_positive() {
        return Err(Error::BufferLength {
            len,
            dims: dims.to_array(),
            expected: dims.voxel_count(),
        });
    }
    Ok(())
}

/// Scalar intensity grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_len(dims, data.len())?;
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![value; dims.voxel_count()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.dims.index(x, y, z);
        self.data[i] = v;
    }
}

/// Binary mask over a voxel grid; every element is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    dims: Dims,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        check_len(dims, data.len())?;
        if let Some(&bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::NonBinaryLabel(bad));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0; dims.voxel_count()],
        }
    }

    /// Foreground wherever `pred` holds.
    pub fn from_fn(dims: Dims, mut pred: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.voxel_count());
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    data.push(pred(x, y, z) as u8);
                }
            }
        }
        Self { dims, data }
    }

    /// Binarize probabilities: foreground where `p >= threshold`.
    pub fn threshold(dims: Dims, probs: &[f64], threshold: f64) -> Result<Self> {
        check_len(dims, probs.len())?;
        Ok(Self {
            dims,
            data: probs.iter().map(|&p| (p >= threshold) as u8).collect(),
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Any nonzero value is stored as foreground.
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u8) {
        let i = self.dims.index(x, y, z);
        self.data[i] = (v != 0) as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Shared shape for [`crop`] and [`pad_to`].
pub trait VoxelGrid: Sized {
    type Voxel: Copy + Default;

    fn dims(&self) -> Dims;
    fn voxels(&self) -> &[Self::Voxel];
    /// Build a grid of the same kind, inheriting metadata from `self`.
    fn with_data(&self, dims: Dims, data: Vec<Self::Voxel>) -> Self;
}

impl VoxelGrid for Volume {
    type Voxel = f32;

    fn dims(&self) -> Dims {
        self.dims
    }

    fn voxels(&self) -> &[f32] {
        &self.data
    }

    fn with_data(&self, dims: Dims, data: Vec<f32>) -> Self {
        Volume {
            dims,
            spacing: self.spacing,
            data,
        }
    }
}

impl VoxelGrid for LabelMap {
    type Voxel = u8;

    fn dims(&self) -> Dims {
        self.dims
    }

    fn voxels(&self) -> &[u8] {
        &self.data
    }

    fn with_data(&self, dims: Dims, data: Vec<u8>) -> Self {
        LabelMap { dims, data }
    }
}

/// Clip to `[lo, hi]` and map linearly onto `[0, 1]`.
pub fn clip_rescale(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::InvalidRange { lo, hi });
    }
    let span = hi - lo;
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64).clamp(lo, hi) - lo) / span)
        .map(|x| x as f32)
        .collect();
    Ok(v.with_data(v.dims, data))
}

/// Visit each coarse voxel's source block as `(coarse_index, block_voxels)`.
fn for_each_block(dims: Dims, factor: usize, mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>)) {
    let out = dims.div_ceil(factor);
    for oz in 0..out.d {
        let zr = oz * factor..((oz + 1) * factor).min(dims.d);
        for oy in 0..out.h {
            let yr = oy * factor..((oy + 1) * factor).min(dims.h);
            for ox in 0..out.w {
                let xr = ox * factor..((ox + 1) * factor).min(dims.w);
                let mut it = zr.clone().flat_map(|z| {
                    let xr = xr.clone();
                    yr.clone()
                        .flat_map(move |y| xr.clone().map(move |x| dims.index(x, y, z)))
                });
                f(out.index(ox, oy, oz), &mut it);
            }
        }
    }
}

/// Block-mean decimation; output dims are `ceil(dim / factor)`.
pub fn downsample_intensity(v: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 {
        return Err(Error::InvalidFactor(factor));
    }
    let out = v.dims.div_ceil(factor);
    let mut data = vec![0f32; out.voxel_count()];
    for_each_block(v.dims, factor, |o, block| {
        let (mut sum, mut n) = (0f64, 0usize);
        for i in block {
            sum += v.data[i] as f64;
            n += 1;
        }
        data[o] = (sum / n as f64) as f32;
    });
    let s = v.spacing;
    let f = factor as f32;
    Ok(Volume {
        dims: out,
        spacing: [s[0] * f, s[1] * f, s[2] * f],
        data,
    })
}

/// Block-majority decimation; a block is foreground when at least half of
/// its voxels are (ties go to foreground).
pub fn downsample_label(m: &LabelMap, factor: usize) -> Result<LabelMap> {
    if factor == 0 {
        return Err(Error::InvalidFactor(factor));
    }
    let out = m.dims.div_ceil(factor);
    let mut data = vec![0u8; out.voxel_count()];
    for_each_block(m.dims, factor, |o, block| {
        let (mut fg, mut n) = (0usize, 0usize);
        for i in block {
            fg += m.data[i] as usize;
            n += 1;
        }
        data[o] = (2 * fg >= n) as u8;
    });
    Ok(LabelMap { dims: out, data })
}

/// Nearest-neighbour replication; every voxel becomes a `factor³` block.
pub fn upsample_label(m: &LabelMap, factor: usize) -> Result<LabelMap> {
    if factor == 0 {
        return Err(Error::InvalidFactor(factor));
    }
    let out = m.dims.scale(factor);
    let mut data = Vec::with_capacity(out.voxel_count());
    for z in 0..out.d {
        for y in 0..out.h {
            let row = m.dims.index(0, y / factor, z / factor);
            data.extend((0..out.w).map(|x| m.data[row + x / factor]));
        }
    }
    Ok(LabelMap { dims: out, data })
}

/// Copy the voxels inside `b`.
pub fn crop<G: VoxelGrid>(g: &G, b: &BoundingBox) -> Result<G> {
    let dims = g.dims();
    if !b.fits_within(dims) {
        return Err(Error::OutOfBounds {
            boxed: b.to_string(),
            dims: dims.to_array(),
        });
    }
    let out = b.dims();
    let src = g.voxels();
    let mut data = Vec::with_capacity(out.voxel_count());
    for z in b.min[2]..=b.max[2] {
        for y in b.min[1]..=b.max[1] {
            let start = dims.index(b.min[0], y, z);
            data.extend_from_slice(&src[start..start + out.w]);
        }
    }
    Ok(g.with_data(out, data))
}

/// Zero canvas of `canvas` dims with `m` written at `b`.
pub fn paste(m: &LabelMap, b: &BoundingBox, canvas: Dims) -> Result<LabelMap> {
    if m.dims != b.dims() {
        return Err(Error::dims(m.dims.to_array(), b.extent()));
    }
    if !b.fits_within(canvas) {
        return Err(Error::OutOfBounds {
            boxed: b.to_string(),
            dims: canvas.to_array(),
        });
    }
    let mut out = LabelMap::zeros(canvas);
    let w = m.dims.w;
    for (row, z) in (b.min[2]..=b.max[2]).enumerate() {
        for (col, y) in (b.min[1]..=b.max[1]).enumerate() {
            let src = m.dims.index(0, col, row);
            let dst = canvas.index(b.min[0], y, z);
            out.data[dst..dst + w].copy_from_slice(&m.data[src..src + w]);
        }
    }
    Ok(out)
}

/// Zero-extend at the high end of every axis up to `target`.
pub fn pad_to<G: VoxelGrid>(g: &G, target: Dims) -> Result<G> {
    let dims = g.dims();
    if target.w < dims.w || target.h < dims.h || target.d < dims.d {
        return Err(Error::dims(dims.to_array(), target.to_array()));
    }
    if target == dims {
        return Ok(g.with_data(dims, g.voxels().to_vec()));
    }
    let src = g.voxels();
    let mut data = vec![G::Voxel::default(); target.voxel_count()];
    for z in 0..dims.d {
        for y in 0..dims.h {
            let s = dims.index(0, y, z);
            let d = target.index(0, y, z);
            data[d..d + dims.w].copy_from_slice(&src[s..s + dims.w]);
        }
    }
    Ok(g.with_data(target, data))
}

/// Zero-pad so that every axis is a multiple of `m`.
pub fn pad_to_multiple<G: VoxelGrid>(g: &G, m: usize) -> Result<G> {
    pad_to(g, g.dims().round_up(m.max(1)))
}

/// Crop or zero-pad a mask from the origin so it has exactly `target` dims.
pub fn fit_to(m: &LabelMap, target: Dims) -> Result<LabelMap> {
    let d = m.dims();
    let keep = Dims::new(d.w.min(target.w), d.h.min(target.h), d.d.min(target.d));
    let cropped = crop(m, &BoundingBox::full(keep))?;
    pad_to(&cropped, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::bbox_from_mask;
    use proptest::prelude::*;

    fn ramp(dims: Dims) -> Volume {
        let data = (0..dims.voxel_count()).map(|i| i as f32).collect();
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn buffer_length_checked() {
        assert!(Volume::new(Dims::cube(2), [1.0; 3], vec![0.0; 7]).is_err());
        assert!(LabelMap::new(Dims::cube(2), vec![0; 8]).is_ok());
        assert!(matches!(
            LabelMap::new(Dims::cube(1), vec![2]),
            Err(Error::NonBinaryLabel(2))
        ));
    }

    #[test]
    fn clip_rescale_window() {
        let v = Volume::new(Dims::new(3, 1, 1), [1.0; 3], vec![-100.0, 70.0, 500.0]).unwrap();
        let r = clip_rescale(&v, -100.0, 240.0).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5, 1.0]);
        assert!(matches!(
            clip_rescale(&v, 1.0, 1.0),
            Err(Error::InvalidRange { .. })
        ));
    }

    #[test]
    fn downsample_intensity_examples() {
        let c = Volume::filled(Dims::new(7, 5, 9), 0.3);
        let d = downsample_intensity(&c, 4).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.3));

        let r = downsample_intensity(&ramp(Dims::cube(4)), 4).unwrap();
        assert_eq!(r.dims(), Dims::cube(1));
        assert_eq!(r.data(), &[31.5]);

        assert!(matches!(
            downsample_intensity(&c, 0),
            Err(Error::InvalidFactor(0))
        ));
    }

    #[test]
    fn downsample_intensity_partial_edge_block() {
        // Oracle: average the x = 4 slab by explicit enumeration.
        let dims = Dims::new(5, 4, 4);
        let v = ramp(dims);
        let mut sum = 0.0;
        let mut n = 0.0;
        for z in 0..4 {
            for y in 0..4 {
                sum += v.get(4, y, z) as f64;
                n += 1.0;
            }
        }
        let d = downsample_intensity(&v, 4).unwrap();
        assert_eq!(d.dims(), Dims::new(2, 1, 1));
        assert_eq!(d.data()[1], (sum / n) as f32);
        assert_eq!(d.data()[1], 41.5);
    }

    #[test]
    fn downsample_label_majority() {
        let dims = Dims::cube(4);
        let full = LabelMap::from_fn(dims, |_, _, _| true);
        assert_eq!(downsample_label(&full, 4).unwrap().data(), &[1]);
        let mut forty = LabelMap::zeros(dims);
        let mut thirty_two = LabelMap::zeros(dims);
        for i in 0..64 {
            let (x, y, z) = (i % 4, (i / 4) % 4, i / 16);
            if i < 40 {
                forty.set(x, y, z, 1);
            }
            if i < 32 {
                thirty_two.set(x, y, z, 1);
            }
        }
        assert_eq!(downsample_label(&forty, 4).unwrap().data(), &[1]);
        assert_eq!(downsample_label(&thirty_two, 4).unwrap().data(), &[1]);
        let mut thirty_one = thirty_two.clone();
        thirty_one.set(3, 3, 1, 0);
        assert_eq!(downsample_label(&thirty_one, 4).unwrap().data(), &[0]);
    }

    #[test]
    fn upsample_examples() {
        let dims = Dims::cube(3);
        let empty = LabelMap::zeros(dims);
        assert!(upsample_label(&empty, 4).unwrap().is_empty());

        let mut m = LabelMap::zeros(dims);
        m.set(1, 2, 0, 1);
        let up = upsample_label(&m, 4).unwrap();
        assert_eq!(up.dims(), Dims::cube(12));
        assert_eq!(up.count(), 64);
        assert_eq!(
            bbox_from_mask(&up),
            Some(BoundingBox::new([4, 8, 0], [7, 11, 3]))
        );
    }

    #[test]
    fn crop_paste_examples() {
        let dims = Dims::cube(6);
        let m = LabelMap::from_fn(dims, |x, y, z| (x + 2 * y + z) % 3 == 0);
        assert_eq!(crop(&m, &BoundingBox::full(dims)).unwrap(), m);
        let b = BoundingBox::new([1, 2, 0], [3, 5, 4]);
        assert!(paste(&LabelMap::zeros(b.dims()), &b, dims).unwrap().is_empty());
        assert!(matches!(
            crop(&m, &BoundingBox::new([0; 3], [6, 1, 1])),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(paste(&m, &b, dims).is_err());
    }

    #[test]
    fn pad_and_fit() {
        let v = ramp(Dims::new(3, 2, 1));
        let p = pad_to_multiple(&v, 4).unwrap();
        assert_eq!(p.dims(), Dims::cube(4));
        assert_eq!(p.get(2, 1, 0), 5.0);
        assert_eq!(p.get(3, 1, 0), 0.0);
        let m = LabelMap::from_fn(Dims::cube(4), |x, _, _| x == 3);
        let f = fit_to(&m, Dims::new(3, 5, 4)).unwrap();
        assert_eq!(f.dims(), Dims::new(3, 5, 4));
        assert!(f.is_empty());
    }

    fn arb_mask() -> impl Strategy<Value = LabelMap> {
        (1usize..7, 1usize..7, 1usize..7).prop_flat_map(|(w, h, d)| {
            prop::collection::vec(0u8..2, w * h * d)
                .prop_map(move |data| LabelMap::new(Dims::new(w, h, d), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn upsample_scales_count_and_round_trips(m in arb_mask(), r in 1usize..5) {
            let up = upsample_label(&m, r).unwrap();
            prop_assert_eq!(up.count(), m.count() * r * r * r);
            prop_assert_eq!(downsample_label(&up, r).unwrap(), m);
        }

        #[test]
        fn crop_paste_round_trip(m in arb_mask(), a in prop::array::uniform3(0usize..7), b in prop::array::uniform3(0usize..7)) {
            let d = m.dims().to_array();
            let mut min = [0; 3];
            let mut max = [0; 3];
            for i in 0..3 {
                let (p, q) = (a[i] % d[i], b[i] % d[i]);
                min[i] = p.min(q);
                max[i] = p.max(q);
            }
            let bx = BoundingBox::new(min, max);
            let c = crop(&m, &bx).unwrap();
            let pasted = paste(&c, &bx, m.dims()).unwrap();
            prop_assert_eq!(crop(&pasted, &bx).unwrap(), c);
            prop_assert_eq!(pasted.count(), crop(&m, &bx).unwrap().count());
        }

        #[test]
        fn clip_rescale_in_unit_interval_and_idempotent(vals in prop::collection::vec(-1000f32..1000.0, 1..64)) {
            let n = vals.len();
            let v = Volume::new(Dims::new(n, 1, 1), [1.0; 3], vals).unwrap();
            let once = clip_rescale(&v, -100.0, 240.0).unwrap();
            prop_assert!(once.data().iter().all(|x| (0.0..=1.0).contains(x)));
            let twice = clip_rescale(&once, 0.0, 1.0).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn constant_volume_stays_constant(c in -10.0f32..10.0, w in 1usize..9, h in 1usize..9, d in 1usize..9, r in 1usize..5) {
            let v = Volume::filled(Dims::new(w, h, d), c);
            let out = downsample_intensity(&v, r).unwrap();
            prop_assert!(out.data().iter().all(|&x| x == c));
        }
    }
}
