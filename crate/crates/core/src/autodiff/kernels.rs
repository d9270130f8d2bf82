//! Dense kernels behind the tape primitives.
//!
//! Convolutions run on a zero-padded copy of the input. In the padded
//! layout every kernel tap is a constant flat offset, so one output channel
//! is a sum of shifted, scaled input rows and the inner loop is a plain
//! contiguous multiply-add. Positions inside the flat range that fall in the
//! padding halo are computed and discarded.

use super::exec::for_each_chunk_mut;
use super::tensor::{lane_dot, lane_sum};
use super::Scalar;

const BLOCK: usize = 256;
const DW_BLOCK: usize = 1024;

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub dims: [usize; 3],
    pad: [usize; 3],
    pdims: [usize; 3],
    offsets: Vec<isize>,
    q0: usize,
    q1: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, dims: [usize; 3], ksize: [usize; 3]) -> Self {
        let pad = [ksize[0] / 2, ksize[1] / 2, ksize[2] / 2];
        let pdims = [dims[0] + 2 * pad[0], dims[1] + 2 * pad[1], dims[2] + 2 * pad[2]];
        let (sd, sh) = ((pdims[1] * pdims[2]) as isize, pdims[2] as isize);
        let mut offsets = Vec::with_capacity(ksize.iter().product());
        for a in 0..ksize[0] {
            for b in 0..ksize[1] {
                for c in 0..ksize[2] {
                    offsets.push(
                        (a as isize - pad[0] as isize) * sd
                            + (b as isize - pad[1] as isize) * sh
                            + (c as isize - pad[2] as isize),
                    );
                }
            }
        }
        let mut g = Self {
            cin,
            cout,
            dims,

            pad,
            pdims,
            offsets,
            q0: 0,
            q1: 0,
        };
        g.q0 = g.padded_index(0, 0, 0);
        g.q1 = g.padded_index(dims[0] - 1, dims[1] - 1, dims[2] - 1) + 1;
        g
    }

    fn taps(&self) -> usize {
        self.offsets.len()
    }

    fn plane(&self) -> usize {
        self.pdims.iter().product()
    }

    fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    fn padded_index(&self, d: usize, h: usize, w: usize) -> usize {
        ((d + self.pad[0]) * self.pdims[1] + h + self.pad[1]) * self.pdims[2] + w + self.pad[2]
    }

    fn pad<T: Scalar>(&self, x: &[T], channels: usize) -> Vec<T> {
        let [d, h, w] = self.dims;
        let pp = self.plane();
        let mut out = vec![T::zero(); channels * pp];
        for c in 0..channels {
            for z in 0..d {
                for y in 0..h {
                    let src = ((c * d + z) * h + y) * w;
                    let dst = c * pp + self.padded_index(z, y, 0);
                    out[dst..dst + w].copy_from_slice(&x[src..src + w]);
                }
            }
        }
        out
    }

    /// `dst[o, q] = Σ_s Σ_k weights[o, s, k] · src[s, q + offsets[k]]` for
    /// `q` in the flat interior range, stored block-major.
    fn correlate<T: Scalar>(
        &self,
        src: &[T],
        src_c: usize,
        weights: &[T],
        dst_c: usize,
        offsets: &[isize],
    ) -> Vec<T> {
        let pp = self.plane();
        let taps = offsets.len();
        let nblocks = (self.q1 - self.q0).div_ceil(BLOCK);
        let mut buf = vec![T::zero(); nblocks * dst_c * BLOCK];
        for_each_chunk_mut(&mut buf, dst_c * BLOCK, |b, chunk| {
            let qb = self.q0 + b * BLOCK;
            let n = BLOCK.min(self.q1 - qb);
            for o in 0..dst_c {
                let acc = &mut chunk[o * BLOCK..o * BLOCK + n];
                for s in 0..src_c {
                    let row = &src[s * pp..(s + 1) * pp];
                    let wrow = &weights[(o * src_c + s) * taps..(o * src_c + s + 1) * taps];
                    for (&wv, &off) in wrow.iter().zip(offsets) {
                        let start = (qb as isize + off) as usize;
                        for (a, &x) in acc.iter_mut().zip(&row[start..start + n]) {
                            *a += wv * x;
                        }
                    }
                }
            }
        });
        buf
    }

    /// Interior voxels of a block-major buffer, channels-first.
    fn extract<T: Scalar>(&self, buf: &[T], channels: usize, bias: Option<&[T]>) -> Vec<T> {
        let [d, h, w] = self.dims;
        let mut out = vec![T::zero(); channels * self.voxels()];
        for c in 0..channels {
            let b0 = bias.map_or(T::zero(), |b| b[c]);
            for z in 0..d {
                for y in 0..h {
                    let dst = ((c * d + z) * h + y) * w;
                    let t0 = self.padded_index(z, y, 0) - self.q0;
                    for x in 0..w {
                        let t = t0 + x;
                        let (blk, j) = (t / BLOCK, t % BLOCK);
                        out[dst + x] = buf[(blk * channels + c) * BLOCK + j] + b0;
                    }
                }
            }
        }
        out
    }

    pub fn forward<T: Scalar>(&self, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
        let xp = self.pad(x, self.cin);
        let buf = self.correlate(&xp, self.cin, weight, self.cout, &self.offsets);
        self.extract(&buf, self.cout, Some(bias))
    }

    /// Gradient with respect to the input.
    pub fn backward_input<T: Scalar>(&self, grad: &[T], weight: &[T]) -> Vec<T> {
        let taps = self.taps();
        let mut wt = vec![T::zero(); weight.len()];
        for o in 0..self.cout {
            for s in 0..self.cin {
                let src = (o * self.cin + s) * taps;
                let dst = (s * self.cout + o) * taps;
                wt[dst..dst + taps].copy_from_slice(&weight[src..src + taps]);
            }
        }
        let neg: Vec<isize> = self.offsets.iter().map(|&o| -o).collect();
        let gp = self.pad(grad, self.cout);
        let buf = self.correlate(&gp, self.cout, &wt, self.cin, &neg);
        self.extract(&buf, self.cin, None)
    }

    /// Gradients with respect to the kernel and the bias.
    pub fn backward_params<T: Scalar>(&self, grad: &[T], x: &[T]) -> (Vec<T>, Vec<T>) {
        let taps = self.taps();
        let pp = self.plane();
        let xp = self.pad(x, self.cin);
        let gp = self.pad(grad, self.cout);
        let row_len = self.cin * taps;
        let mut dw = vec![T::zero(); self.cout * row_len];
        for_each_chunk_mut(&mut dw, row_len, |o, row| {
            let g = &gp[o * pp..(o + 1) * pp];
            let mut qb = self.q0;
            while qb < self.q1 {
                let n = DW_BLOCK.min(self.q1 - qb);
                let gb = &g[qb..qb + n];
                for s in 0..self.cin {
                    let xs = &xp[s * pp..(s + 1) * pp];
                    for (k, &off) in self.offsets.iter().enumerate() {
                        let start = (qb as isize + off) as usize;
                        row[s * taps + k] += lane_dot(gb, &xs[start..start + n]);
                    }
                }
                qb += n;
            }
        });
        let nv = self.voxels();
        let db = (0..self.cout)
            .map(|o| lane_sum(&grad[o * nv..(o + 1) * nv]))
            .collect();
        (dw, db)
    }
}

pub(crate) fn max_pool2_forward<T: Scalar>(x: &[T], dims: [usize; 4]) -> (Vec<T>, Vec<u32>) {
    let [c, d, h, w] = dims;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Vec::with_capacity(c * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = usize::MAX;
                    let mut bv = T::neg_infinity();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((ch * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                if best == usize::MAX || x[i] > bv {
                                    best = i;
                                    bv = x[i];
                                }
                            }
                        }
                    }
                    out.push(bv);
                    arg.push(best as u32);
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool2_backward<T: Scalar>(grad: &[T], arg: &[u32], in_len: usize) -> Vec<T> {
    let mut gin = vec![T::zero(); in_len];
    for (&g, &i) in grad.iter().zip(arg) {
        gin[i as usize] += g;
    }
    gin
}

/// Source taps of a 2x upsampling along an axis of length `n`.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn split_axis(dims: [usize; 4], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

pub(crate) fn upsample_axis<T: Scalar>(x: &[T], dims: [usize; 4], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(dims, axis);
    let taps = upsample_taps(n);
    let mut out = vec![T::zero(); outer * 2 * n * inner];
    for o in 0..outer {
        for (i, &(i0, i1, f)) in taps.iter().enumerate() {
            let (f1, f0) = (T::lit(f), T::lit(1.0 - f));
            let a = &x[(o * n + i0) * inner..][..inner];
            let b = &x[(o * n + i1) * inner..][..inner];
            let dst = &mut out[(o * 2 * n + i) * inner..][..inner];
            for ((d, &p), &q) in dst.iter_mut().zip(a).zip(b) {
                *d = f0 * p + f1 * q;
            }
        }
    }
    out
}

/// Transpose of [`upsample_axis`]; `dims` are the input (pre-upsampling) dims.
pub(crate) fn upsample_axis_transpose<T: Scalar>(g: &[T], dims: [usize; 4], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(dims, axis);
    let taps = upsample_taps(n);
    let mut gin = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        for (i, &(i0, i1, f)) in taps.iter().enumerate() {
            let (f1, f0) = (T::lit(f), T::lit(1.0 - f));
            let src = &g[(o * 2 * n + i) * inner..][..inner];
            for (r, &gv) in src.iter().enumerate() {
                gin[(o * n + i0) * inner + r] += f0 * gv;
                gin[(o * n + i1) * inner + r] += f1 * gv;
            }
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        cin: usize,
        cout: usize,
        dims: [usize; 3],
        k: [usize; 3],
    ) -> Vec<f64> {
        let [d, h, ww] = dims;
        let p = [k[0] / 2, k[1] / 2, k[2] / 2];
        let mut out = vec![0.0; cout * d * h * ww];
        for o in 0..cout {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..ww {
                        let mut s = b[o];
                        for c in 0..cin {
                            for a in 0..k[0] {
                                for bb in 0..k[1] {
                                    for cc in 0..k[2] {
                                        let (iz, iy, ix) = (
                                            z as isize + a as isize - p[0] as isize,
                                            y as isize + bb as isize - p[1] as isize,
                                            xx as isize + cc as isize - p[2] as isize,
                                        );
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= ww as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((c * d + iz as usize) * h + iy as usize) * ww
                                            + ix as usize;
                                        let wi = (((o * cin + c) * k[0] + a) * k[1] + bb) * k[2] + cc;
                                        s += w[wi] * x[xi];
                                    }
                                }
                            }
                        }
                        out[((o * d + z) * h + y) * ww + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_summation() {
        for (dims, k) in [
            ([5, 6, 7], [3, 3, 3]),
            ([4, 3, 9], [3, 3, 1]),
            ([4, 3, 9], [1, 1, 3]),
            ([2, 2, 2], [1, 1, 1]),
            ([1, 1, 1], [3, 3, 3]),
        ] {
            let (cin, cout) = (3, 2);
            let nv: usize = dims.iter().product();
            let taps: usize = k.iter().product();
            let x = pseudo(cin * nv, 1);
            let w = pseudo(cout * cin * taps, 2);
            let b = pseudo(cout, 3);
            let g = ConvGeom::new(cin, cout, dims, k);
            let got = g.forward(&x, &w, &b);
            let want = naive_conv(&x, &w, &b, cin, cout, dims, k);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{dims:?} {k:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> = <x, conv^T(g)> and = <w, dW(g, x)> with zero bias.
        let dims = [4, 5, 6];
        let (cin, cout) = (2, 3);
        let g = ConvGeom::new(cin, cout, dims, [3, 3, 3]);
        let nv = 120;
        let x = pseudo(cin * nv, 4);
        let w = pseudo(cout * cin * 27, 5);
        let gr = pseudo(cout * nv, 6);
        let y = g.forward(&x, &w, &[0.0; 3]);
        let lhs: f64 = y.iter().zip(&gr).map(|(a, b)| a * b).sum();
        let dx = g.backward_input(&gr, &w);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let (dw, db) = g.backward_params(&gr, &x);
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
        for (o, &v) in db.iter().enumerate() {
            let s: f64 = gr[o * nv..(o + 1) * nv].iter().sum();
            assert!((v - s).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_taps_follow_half_voxel_alignment() {
        let t = upsample_taps(4);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[1], (0, 1, 0.25));
        assert_eq!(t[2], (0, 1, 0.75));
        assert_eq!(t[7], (3, 3, 0.0));
        assert_eq!(upsample_taps(1), vec![(0, 0, 0.0), (0, 0, 0.0)]);
    }
}
