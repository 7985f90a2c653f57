//! Dense kernels for the network: 3×3×3 and 1×1×1 convolution, 2× max-pool,
//! 2× nearest upsampling, and their adjoints.
//!
//! Feature maps are channel-major `[c][z][y][x]` buffers. The 3×3×3
//! convolution lowers a slab of output rows to an im2col matrix and hands it
//! to a gemm, so the working set stays small regardless of grid size.

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::Float;

use crate::volgrid::Dims;

/// Floating-point element type of a network.
pub trait Real: Float + Default + Debug + AddAssign + Send + Sync + 'static {
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C ← α·A·B + β·C` over strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

// The gemm wrappers check that the strided extents of every operand fit the
// slices before entering the raw-pointer kernel.
fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            fn of_f64(x: f64) -> Self {
                x as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(span(m, k, rsa, csa) <= a.len(), "gemm: A too short");
                assert!(span(k, n, rsb, csb) <= b.len(), "gemm: B too short");
                assert!(span(m, n, rsc, csc) <= c.len(), "gemm: C too short");
                // SAFETY: all strides are non-negative and every addressed
                // element lies inside its slice (checked above); `c` is
                // exclusively borrowed.
                unsafe {
                    gemm::gemm(
                        m,
                        n,
                        k,
                        c.as_mut_ptr(),
                        csc,
                        rsc,
                        beta != 0.0,
                        a.as_ptr(),
                        csa,
                        rsa,
                        b.as_ptr(),
                        csb,
                        rsb,
                        beta,
                        alpha,
                        false,
                        false,
                        false,
                        gemm::Parallelism::None,
                    )
                }
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

const TAPS: usize = 27;
/// Target number of output voxels per im2col slab.
const SLAB_VOXELS: usize = 2048;

/// Fill `col` (`cin·27 × rows·w`, row-major) for output rows
/// `row0..row0 + rows`, where a row is one `(y, z)` line of `w` voxels.
/// With `flip`, tap `k` reads the mirrored offset, which turns the
/// convolution into its adjoint.
fn im2col<T: Real>(input: &[T], cin: usize, dims: Dims, row0: usize, rows: usize, flip: bool, col: &mut [T]) {
    let Dims { w, h, d } = dims;
    let n = dims.voxel_count();
    let nc = rows * w;
    let zero = T::zero();
    for ci in 0..cin {
        let src = &input[ci * n..(ci + 1) * n];
        for k in 0..TAPS {
            let kk = if flip { TAPS - 1 - k } else { k };
            let dx = (kk % 3) as isize - 1;
            let dy = ((kk / 3) % 3) as isize - 1;
            let dz = (kk / 9) as isize - 1;
            let dst = &mut col[(ci * TAPS + k) * nc..(ci * TAPS + k + 1) * nc];
            for r in 0..rows {
                let row = row0 + r;
                let (y, z) = ((row % h) as isize, (row / h) as isize);
                let out = &mut dst[r * w..(r + 1) * w];
                let (sy, sz) = (y + dy, z + dz);
                if sy < 0 || sy >= h as isize || sz < 0 || sz >= d as isize {
                    out.fill(zero);
                    continue;
                }
                let base = (sy as usize + h * sz as usize) * w;
                let line = &src[base..base + w];
                match dx {
                    0 => out.copy_from_slice(line),
                    -1 => {
                        out[0] = zero;
                        out[1..].copy_from_slice(&line[..w - 1]);
                    }
                    _ => {
                        out[..w - 1].copy_from_slice(&line[1..]);
                        out[w - 1] = zero;
                    }
                }
            }
        }
    }
}

fn slab_rows(w: usize, total_rows: usize) -> usize {
    (SLAB_VOXELS / w).clamp(1, total_rows)
}

/// 3×3×3 convolution, stride 1, zero padding 1.
///
/// `weight` is `[cout][cin][27]` with taps ordered x fastest. `out` must hold
/// `cout · N` values and is overwritten.
pub fn conv3<T: Real>(
    input: &[T],
    cin: usize,
    dims: Dims,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    flip: bool,
    out: &mut [T],
) {
    let n = dims.voxel_count();
    debug_assert_eq!(input.len(), cin * n);
    debug_assert_eq!(weight.len(), cout * cin * TAPS);
    debug_assert_eq!(out.len(), cout * n);
    let k = cin * TAPS;
    let total_rows = dims.h * dims.d;
    let step = slab_rows(dims.w, total_rows);
    let mut col = vec![T::zero(); k * step * dims.w];
    let mut row0 = 0;
    while row0 < total_rows {
        let rows = step.min(total_rows - row0);
        let nc = rows * dims.w;
        im2col(input, cin, dims, row0, rows, flip, &mut col[..k * nc]);
        let v0 = row0 * dims.w;
        T::gemm(
            cout,
            k,
            nc,
            T::one(),
            weight,
            k as isize,
            1,
            &col[..k * nc],
            nc as isize,
            1,
            T::zero(),
            &mut out[v0..],
            n as isize,
            1,
        );
        row0 += rows;
    }
    if let Some(bias) = bias {
        for (co, chunk) in out.chunks_exact_mut(n).enumerate() {
            let b = bias[co];
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
}

/// Accumulate `∂L/∂W` of [`conv3`] into `dweight` given `∂L/∂out`.
pub fn conv3_weight_grad<T: Real>(input: &[T], cin: usize, dims: Dims, dout: &[T], cout: usize, dweight: &mut [T]) {
    let n = dims.voxel_count();
    let k = cin * TAPS;
    let total_rows = dims.h * dims.d;
    let step = slab_rows(dims.w, total_rows);
    let mut col = vec![T::zero(); k * step * dims.w];
    let mut row0 = 0;
    while row0 < total_rows {
        let rows = step.min(total_rows - row0);
        let nc = rows * dims.w;
        im2col(input, cin, dims, row0, rows, false, &mut col[..k * nc]);
        let v0 = row0 * dims.w;
        T::gemm(
            cout,
            nc,
            k,
            T::one(),
            &dout[v0..],
            n as isize,
            1,
            &col[..k * nc],
            1,
            nc as isize,
            T::one(),
            dweight,
            k as isize,
            1,
        );
        row0 += rows;
    }
}

/// Reorder `[cout][cin][27]` into `[cin][cout][27]` for the adjoint pass.
pub fn transpose_kernel<T: Real>(weight: &[T], cin: usize, cout: usize) -> Vec<T> {
    let mut t = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            let src = (co * cin + ci) * TAPS;
            let dst = (ci * cout + co) * TAPS;
            t[dst..dst + TAPS].copy_from_slice(&weight[src..src + TAPS]);
        }
    }
    t
}

/// `∂L/∂input` of [`conv3`]: the convolution of `dout` with the mirrored,
/// transposed kernel.
pub fn conv3_input_grad<T: Real>(dout: &[T], cout: usize, dims: Dims, weight: &[T], cin: usize, din: &mut [T]) {
    let wt = transpose_kernel(weight, cin, cout);
    conv3(dout, cout, dims, &wt, None, cin, true, din);
}

/// Pointwise convolution: `out = W · in + b` with `W` as `[cout][cin]`.
pub fn conv1<T: Real>(input: &[T], cin: usize, n: usize, weight: &[T], bias: &[T], cout: usize, out: &mut [T]) {
    T::gemm(
        cout,
        cin,
        n,
        T::one(),
        weight,
        cin as isize,
        1,
        input,
        n as isize,
        1,
        T::zero(),
        out,
        n as isize,
        1,
    );
    for (co, chunk) in out.chunks_exact_mut(n).enumerate() {
        let b = bias[co];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

pub fn conv1_weight_grad<T: Real>(input: &[T], cin: usize, n: usize, dout: &[T], cout: usize, dweight: &mut [T]) {
    T::gemm(
        cout,
        n,
        cin,
        T::one(),
        dout,
        n as isize,
        1,
        input,
        1,
        n as isize,
        T::one(),
        dweight,
        cin as isize,
        1,
    );
}

pub fn conv1_input_grad<T: Real>(dout: &[T], cout: usize, n: usize, weight: &[T], cin: usize, din: &mut [T]) {
    T::gemm(
        cin,
        cout,
        n,
        T::one(),
        weight,
        1,
        cin as isize,
        dout,
        n as isize,
        1,
        T::zero(),
        din,
        n as isize,
        1,
    );
}

/// Per-channel sums of `dout`, accumulated into `dbias`.
pub fn bias_grad<T: Real>(dout: &[T], n: usize, dbias: &mut [T]) {
    for (db, chunk) in dbias.iter_mut().zip(dout.chunks_exact(n)) {
        let mut s = 0.0;
        for v in chunk {
            s += v.as_f64();
        }
        *db += T::of_f64(s);
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    let zero = T::zero();
    x.iter_mut().for_each(|v| {
        if *v < zero {
            *v = zero
        }
    });
}

/// Mask an upstream gradient by the post-activation output of a ReLU.
pub fn relu_backward<T: Real>(activated: &[T], grad: &mut [T]) {
    let zero = T::zero();
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= zero {
            *g = zero;
        }
    }
}

/// 2× max-pool over every channel. Returns the pooled map and, per pooled
/// voxel, the source index of the maximum (first one wins on ties).
pub fn maxpool2<T: Real>(input: &[T], channels: usize, dims: Dims) -> (Vec<T>, Vec<u32>) {
    let out = Dims::new(dims.w / 2, dims.h / 2, dims.d / 2);
    let (n, no) = (dims.voxel_count(), out.voxel_count());
    let mut vals = Vec::with_capacity(channels * no);
    let mut idx = Vec::with_capacity(channels * no);
    for c in 0..channels {
        let src = &input[c * n..(c + 1) * n];
        for z in 0..out.d {
            for y in 0..out.h {
                for x in 0..out.w {
                    let mut best = dims.index(2 * x, 2 * y, 2 * z);
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = dims.index(2 * x + dx, 2 * y + dy, 2 * z + dz);
                                if src[i] > src[best] {
                                    best = i;
                                }
                            }
                        }
                    }
                    vals.push(src[best]);
                    idx.push(best as u32);
                }
            }
        }
    }
    (vals, idx)
}

pub fn maxpool2_backward<T: Real>(dout: &[T], idx: &[u32], channels: usize, dims: Dims, din: &mut [T]) {
    let n = dims.voxel_count();
    let no = dout.len() / channels;
    for c in 0..channels {
        let dst = &mut din[c * n..(c + 1) * n];
        for (g, &i) in dout[c * no..(c + 1) * no].iter().zip(&idx[c * no..(c + 1) * no]) {
            dst[i as usize] += *g;
        }
    }
}

/// 2× nearest-neighbour upsampling from `dims` to `2·dims`.
pub fn upsample2<T: Real>(input: &[T], channels: usize, dims: Dims) -> Vec<T> {
    let out = dims.scale(2);
    let n = dims.voxel_count();
    let mut v = Vec::with_capacity(channels * out.voxel_count());
    for c in 0..channels {
        let src = &input[c * n..(c + 1) * n];
        for z in 0..out.d {
            for y in 0..out.h {
                let row = dims.index(0, y / 2, z / 2);
                v.extend((0..out.w).map(|x| src[row + x / 2]));
            }
        }
    }
    v
}

/// Adjoint of [`upsample2`]: sum each 2×2×2 block. `dims` is the coarse grid.
pub fn upsample2_backward<T: Real>(dout: &[T], channels: usize, dims: Dims) -> Vec<T> {
    let fine = dims.scale(2);
    let (n, nf) = (dims.voxel_count(), fine.voxel_count());
    let mut din = vec![T::zero(); channels * n];
    for c in 0..channels {
        let src = &dout[c * nf..(c + 1) * nf];
        let dst = &mut din[c * n..(c + 1) * n];
        for z in 0..fine.d {
            for y in 0..fine.h {
                let row = dims.index(0, y / 2, z / 2);
                let frow = fine.index(0, y, z);
                for x in 0..fine.w {
                    dst[row + x / 2] += src[frow + x];
                }
            }
        }
    }
    din
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct seven-loop convolution used as the reference.
    fn naive_conv3(input: &[f64], cin: usize, dims: Dims, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
        let n = dims.voxel_count();
        let mut out = vec![0.0; cout * n];
        for co in 0..cout {
            for z in 0..dims.d as isize {
                for y in 0..dims.h as isize {
                    for x in 0..dims.w as isize {
                        let mut s = bias[co];
                        for ci in 0..cin {
                            for k in 0..27 {
                                let (dx, dy, dz) = ((k % 3) as isize - 1, ((k / 3) % 3) as isize - 1, (k / 9) as isize - 1);
                                let (sx, sy, sz) = (x + dx, y + dy, z + dz);
                                if sx < 0 || sy < 0 || sz < 0 || sx >= dims.w as isize || sy >= dims.h as isize || sz >= dims.d as isize {
                                    continue;
                                }
                                let i = dims.index(sx as usize, sy as usize, sz as usize);
                                s += weight[(co * cin + ci) * 27 + k] * input[ci * n + i];
                            }
                        }
                        out[co * n + dims.index(x as usize, y as usize, z as usize)] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = Dims::new(5, 3, 4);
        let (cin, cout) = (2, 3);
        let input = random(cin * dims.voxel_count(), &mut rng);
        let weight = random(cout * cin * 27, &mut rng);
        let bias = random(cout, &mut rng);
        let mut out = vec![0.0; cout * dims.voxel_count()];
        conv3(&input, cin, dims, &weight, Some(&bias), cout, false, &mut out);
        let expect = naive_conv3(&input, cin, dims, &weight, &bias, cout);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3_slabs_cover_large_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = Dims::new(70, 40, 2);
        let input = random(dims.voxel_count(), &mut rng);
        let weight = random(2 * 27, &mut rng);
        let mut out = vec![0.0; 2 * dims.voxel_count()];
        conv3(&input, 1, dims, &weight, None, 2, false, &mut out);
        let expect = naive_conv3(&input, 1, dims, &weight, &[0.0, 0.0], 2);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// ⟨conv(x), g⟩ = ⟨x, convᵀ(g)⟩ and ⟨conv(x), g⟩ = ⟨W, ∂W⟩ (linearity in W).
    #[test]
    fn conv3_adjoints_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = Dims::new(4, 5, 3);
        let (cin, cout) = (3, 2);
        let n = dims.voxel_count();
        let x = random(cin * n, &mut rng);
        let w = random(cout * cin * 27, &mut rng);
        let g = random(cout * n, &mut rng);
        let mut y = vec![0.0; cout * n];
        conv3(&x, cin, dims, &w, None, cout, false, &mut y);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();

        let mut dx = vec![0.0; cin * n];
        conv3_input_grad(&g, cout, dims, &w, cin, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");

        let mut dw = vec![0.0; w.len()];
        conv3_weight_grad(&x, cin, dims, &g, cout, &mut dw);
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn conv1_adjoints_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (cin, cout, n) = (3, 2, 11);
        let x = random(cin * n, &mut rng);
        let w = random(cout * cin, &mut rng);
        let g = random(cout * n, &mut rng);
        let mut y = vec![0.0; cout * n];
        conv1(&x, cin, n, &w, &[0.0, 0.0], cout, &mut y);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; cin * n];
        conv1_input_grad(&g, cout, n, &w, cin, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let mut dw = vec![0.0; w.len()];
        conv1_weight_grad(&x, cin, n, &g, cout, &mut dw);
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-12);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dims = Dims::new(4, 2, 6);
        let coarse = Dims::new(2, 1, 3);
        let x = random(2 * dims.voxel_count(), &mut rng);
        let (pooled, idx) = maxpool2(&x, 2, dims);
        assert_eq!(pooled.len(), 2 * coarse.voxel_count());
        for (c, (p, &i)) in pooled.iter().zip(&idx).enumerate() {
            let channel = c / coarse.voxel_count();
            assert_eq!(*p, x[channel * dims.voxel_count() + i as usize]);
        }
        let g = random(pooled.len(), &mut rng);
        let mut dx = vec![0.0; x.len()];
        maxpool2_backward(&g, &idx, 2, dims, &mut dx);
        assert!((dx.iter().sum::<f64>() - g.iter().sum::<f64>()).abs() < 1e-12);

        let u = random(2 * coarse.voxel_count(), &mut rng);
        let up = upsample2(&u, 2, coarse);
        let gu = random(up.len(), &mut rng);
        let lhs: f64 = up.iter().zip(&gu).map(|(a, b)| a * b).sum();
        let du = upsample2_backward(&gu, 2, coarse);
        let rhs: f64 = u.iter().zip(&du).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
