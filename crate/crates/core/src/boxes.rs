//! Axis-aligned bounding boxes in voxel coordinates.
//!
//! Boxes use an inclusive `max` corner, so a single voxel is a legal box with
//! `min == max`. Localization metrics count voxels, not physical volume.

use std::fmt;

use crate::volgrid::{Dims, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    /// Panics if `min > max` on any axis.
    pub fn new(min: [usize; 3], max: [usize; 3]) -> Self {
        assert!(
            (0..3).all(|a| min[a] <= max[a]),
            "bounding box min {min:?} exceeds max {max:?}"
        );
        Self { min, max }
    }

    /// Box covering every voxel of a grid.
    pub fn full(dims: Dims) -> Self {
        let d = dims.to_array();
        Self::new([0; 3], [d[0] - 1, d[1] - 1, d[2] - 1])
    }

    pub fn extent(&self) -> [usize; 3] {
        [
            self.max[0] - self.min[0] + 1,
            self.max[1] - self.min[1] + 1,
            self.max[2] - self.min[2] + 1,
        ]
    }

    pub fn dims(&self) -> Dims {
        Dims::from(self.extent())
    }

    pub fn voxel_count(&self) -> usize {
        self.extent().iter().product()
    }

    pub fn fits_within(&self, dims: Dims) -> bool {
        let d = dims.to_array();
        (0..3).all(|a| self.max[a] < d[a])
    }

    pub fn contains_point(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.contains_point(other.min) && self.contains_point(other.max)
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let mut min = [0; 3];
        let mut max = [0; 3];
        for a in 0..3 {
            min[a] = self.min[a].max(other.min[a]);
            max[a] = self.max[a].min(other.max[a]);
            if min[a] > max[a] {
                return None;
            }
        }
        Some(BoundingBox { min, max })
    }

    /// Smallest box containing both.
    pub fn union_hull(&self, other: &BoundingBox) -> BoundingBox {
        let mut out = *self;
        for a in 0..3 {
            out.min[a] = out.min[a].min(other.min[a]);
            out.max[a] = out.max[a].max(other.max[a]);
        }
        out
    }

    /// Clamp the box to a grid; `None` when it lies entirely outside.
    pub fn clamp_to(&self, dims: Dims) -> Option<BoundingBox> {
        let d = dims.to_array();
        let mut out = *self;
        for a in 0..3 {
            if self.min[a] >= d[a] {
                return None;
            }
            out.max[a] = out.max[a].min(d[a] - 1);
        }
        Some(out)
    }

    /// Normalized corners `(min / dims, (max + 1) / dims)` per axis.
    pub fn normalized(&self, dims: Dims) -> ([f64; 3], [f64; 3]) {
        let d = dims.to_array();
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.min[a] as f64 / d[a] as f64;
            hi[a] = (self.max[a] + 1) as f64 / d[a] as f64;
        }
        (lo, hi)
    }

    /// Report encoding: `x0,y0,z0,x1,y1,z1`.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.min[0], self.min[1], self.min[2], self.max[0], self.max[1], self.max[2]
        )
    }

    pub fn from_csv(s: &str) -> Option<BoundingBox> {
        let v: Vec<usize> = s
            .split(',')
            .map(|t| t.trim().parse().ok())
            .collect::<Option<_>>()?;
        if v.len() != 6 || (0..3).any(|a| v[a] > v[a + 3]) {
            return None;
        }
        Some(BoundingBox::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]))
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}-{:?}", self.min, self.max)
    }
}

/// Tightest box around the foreground, or `None` for an empty mask.
pub fn bbox_from_mask(mask: &LabelMap) -> Option<BoundingBox> {
    let [w, h, _] = mask.dims().to_array();
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut any = false;
    for (i, &v) in mask.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        let p = [i % w, (i / w) % h, i / (w * h)];
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
        any = true;
    }
    any.then(|| BoundingBox::new(min, max))
}

/// Grow by `margin` voxels on every side, clamped to `dims`.
pub fn enlarge(b: &BoundingBox, margin: usize, dims: Dims) -> BoundingBox {
    let d = dims.to_array();
    let mut out = *b;
    for a in 0..3 {
        out.min[a] = b.min[a].saturating_sub(margin);
        out.max[a] = (b.max[a] + margin).min(d[a] - 1).max(out.min[a]);
    }
    out
}

/// Map a coarse-grid box onto the fine grid, covering every fine voxel whose
/// source block lies inside `b`.
pub fn scale_up(b: &BoundingBox, factor: usize) -> BoundingBox {
    assert!(factor >= 1, "scale factor must be positive");
    let mut out = *b;
    for a in 0..3 {
        out.min[a] = b.min[a] * factor;
        out.max[a] = (b.max[a] + 1) * factor - 1;
    }
    out
}

fn overlap(a: &BoundingBox, b: &BoundingBox) -> usize {
    a.intersection(b).map_or(0, |i| i.voxel_count())
}

/// Fraction of the ground-truth box covered by the prediction.
pub fn box_recall(gt: &BoundingBox, pred: &BoundingBox) -> f64 {
    overlap(gt, pred) as f64 / gt.voxel_count() as f64
}

pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = overlap(a, b);
    inter as f64 / (a.voxel_count() + b.voxel_count() - inter) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(min: [usize; 3], max: [usize; 3]) -> BoundingBox {
        BoundingBox::new(min, max)
    }

    #[test]
    fn extraction_examples() {
        let dims = Dims::new(8, 8, 8);
        let mut m = LabelMap::zeros(dims);
        m.set(1, 2, 3, 1);
        m.set(4, 5, 6, 1);
        assert_eq!(bbox_from_mask(&m), Some(bb([1, 2, 3], [4, 5, 6])));

        let mut single = LabelMap::zeros(dims);
        single.set(0, 0, 0, 1);
        assert_eq!(bbox_from_mask(&single), Some(bb([0; 3], [0; 3])));

        assert_eq!(bbox_from_mask(&LabelMap::zeros(dims)), None);
    }

    #[test]
    fn enlarge_examples() {
        let dims = Dims::new(8, 8, 8);
        let b = bb([1, 2, 3], [4, 5, 6]);
        assert_eq!(enlarge(&b, 2, dims), bb([0, 0, 1], [6, 7, 7]));
        assert_eq!(enlarge(&b, 0, dims), b);
        let full = BoundingBox::full(dims);
        assert_eq!(enlarge(&full, 17, dims), full);
    }

    #[test]
    fn scale_up_examples() {
        let b = bb([1, 1, 1], [2, 2, 2]);
        assert_eq!(scale_up(&b, 4), bb([4, 4, 4], [11, 11, 11]));
        assert_eq!(scale_up(&b, 1), b);
    }

    #[test]
    fn metric_examples() {
        let gt = bb([0, 0, 0], [3, 3, 3]);
        let pred = bb([2, 2, 2], [5, 5, 5]);
        assert_eq!(box_recall(&gt, &gt), 1.0);
        assert_eq!(box_recall(&gt, &bb([10; 3], [12; 3])), 0.0);
        assert_eq!(box_recall(&gt, &pred), 0.125);
        assert_eq!(box_iou(&gt, &gt), 1.0);
        assert_eq!(box_iou(&gt, &bb([4; 3], [6; 3])), 0.0);
        assert!((box_iou(&gt, &pred) - 8.0 / 120.0).abs() < 1e-15);
    }

    #[test]
    fn csv_encoding() {
        let b = bb([1, 2, 3], [4, 5, 6]);
        assert_eq!(b.to_csv(), "1,2,3,4,5,6");
        assert_eq!(BoundingBox::from_csv(&b.to_csv()), Some(b));
        assert_eq!(BoundingBox::from_csv("4,0,0,1,1,1"), None);
    }

    fn arb_box(limit: usize) -> impl Strategy<Value = BoundingBox> {
        (
            prop::array::uniform3(0..limit),
            prop::array::uniform3(0..limit),
        )
            .prop_map(|(a, b)| {
                let mut min = [0; 3];
                let mut max = [0; 3];
                for i in 0..3 {
                    min[i] = a[i].min(b[i]);
                    max[i] = a[i].max(b[i]);
                }
                BoundingBox::new(min, max)
            })
    }

    proptest! {
        #[test]
        fn enlarge_contains_input(b in arb_box(16), margin in 0usize..12) {
            let dims = Dims::new(16, 16, 16);
            let e = enlarge(&b, margin, dims);
            prop_assert!(e.contains(&b));
            prop_assert!(e.fits_within(dims));
        }

        #[test]
        fn metric_identities(a in arb_box(12), b in arb_box(12)) {
            prop_assert_eq!(box_recall(&a, &a), 1.0);
            prop_assert_eq!(box_iou(&a, &b), box_iou(&b, &a));
            prop_assert!(box_iou(&a, &b) <= box_recall(&a, &b));
            let r = box_recall(&a, &b);
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }
}
