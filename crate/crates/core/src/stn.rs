//! Spatial-transformer warping.
//!
//! The warped image at voxel `p` is the moving image sampled at
//! `p + u(p)`, with coordinates clamped to the grid (border replication).
//! Gradients flow into the displacement field only.

use crate::autodiff::{for_each_chunk_mut, Backward, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::volgrid::{DisplacementField, LabelMask, Shape3, Volume};

const ROWS_PER_TASK: usize = 1;

/// Lower cell corner, fractional offset and whether the coordinate was
/// inside the grid before clamping.
#[inline]
fn axis_sample<T: Scalar>(i: usize, u: T, n: usize) -> (usize, T, bool) {
    if n == 1 {
        return (0, T::zero(), false);
    }
    let hi = T::lit((n - 1) as f64);
    let c = T::lit(i as f64) + u;
    let inside = c >= T::zero() && c <= hi;
    let c = c.max(T::zero()).min(hi);
    let i0 = c.floor().to_usize().unwrap_or(0).min(n - 2);
    (i0, c - T::lit(i0 as f64), inside)
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, f: T) -> T {
    (T::one() - f) * a + f * b
}

struct Corner<T> {
    base: usize,
    step: [usize; 3],
    frac: [T; 3],
    inside: [bool; 3],
}

#[inline]
fn corner<T: Scalar>(shape: Shape3, p: [usize; 3], u: [T; 3]) -> Corner<T> {
    let [_, h, w] = shape;
    let (d0, fd, id) = axis_sample(p[0], u[0], shape[0]);
    let (h0, fh, ih) = axis_sample(p[1], u[1], shape[1]);
    let (w0, fw, iw) = axis_sample(p[2], u[2], shape[2]);
    Corner {
        base: (d0 * h + h0) * w + w0,
        step: [
            if shape[0] > 1 { h * w } else { 0 },
            if shape[1] > 1 { w } else { 0 },
            if shape[2] > 1 { 1 } else { 0 },
        ],
        frac: [fd, fh, fw],
        inside: [id, ih, iw],
    }
}

/// The 8 corner values, indexed `[dd][dh][dw]` flattened.
#[inline]
fn gather<T: Scalar>(img: &[T], c: &Corner<T>) -> [T; 8] {
    let mut v = [T::zero(); 8];
    for (k, slot) in v.iter_mut().enumerate() {
        let off = (k >> 2) * c.step[0] + ((k >> 1) & 1) * c.step[1] + (k & 1) * c.step[2];
        *slot = img[c.base + off];
    }
    v
}

#[inline]
fn trilinear<T: Scalar>(v: &[T; 8], f: [T; 3]) -> T {
    let c00 = lerp(v[0], v[1], f[2]);
    let c01 = lerp(v[2], v[3], f[2]);
    let c10 = lerp(v[4], v[5], f[2]);
    let c11 = lerp(v[6], v[7], f[2]);
    lerp(lerp(c00, c01, f[1]), lerp(c10, c11, f[1]), f[0])
}

/// Partial derivatives of the trilinear interpolant in each fractional
/// coordinate.
#[inline]
fn trilinear_grad<T: Scalar>(v: &[T; 8], f: [T; 3]) -> [T; 3] {
    let c00 = lerp(v[0], v[1], f[2]);
    let c01 = lerp(v[2], v[3], f[2]);
    let c10 = lerp(v[4], v[5], f[2]);
    let c11 = lerp(v[6], v[7], f[2]);
    let gd = lerp(c10, c11, f[1]) - lerp(c00, c01, f[1]);
    let gh = lerp(c01 - c00, c11 - c10, f[0]);
    let e0 = lerp(v[1] - v[0], v[3] - v[2], f[1]);
    let e1 = lerp(v[5] - v[4], v[7] - v[6], f[1]);
    let gw = lerp(e0, e1, f[0]);
    [gd, gh, gw]
}

fn check_pair(img_shape: Shape3, field_shape: Shape3) -> Result<()> {
    if img_shape != field_shape {
        return Err(Error::Shape(format!(
            "image {img_shape:?} and field {field_shape:?} differ"
        )));
    }
    Ok(())
}

/// Warps every channel of `img` (`C` channels of `shape`) by `field`.
pub(crate) fn warp_raw<T: Scalar>(img: &[T], channels: usize, shape: Shape3, field: &[T]) -> Vec<T> {
    let n: usize = shape.iter().product();
    let [_, hh, ww] = shape;
    let mut out = vec![T::zero(); channels * n];
    let row = ww * ROWS_PER_TASK;
    for_each_chunk_mut(&mut out, row, |r, chunk| {
        let c = r / (n / row);
        let start = (r * row) % n;
        let src = &img[c * n..(c + 1) * n];
        for (k, o) in chunk.iter_mut().enumerate() {
            let i = start + k;
            let p = [i / (hh * ww), (i / ww) % hh, i % ww];
            let u = [field[i], field[n + i], field[2 * n + i]];
            let cr = corner(shape, p, u);
            *o = trilinear(&gather(src, &cr), cr.frac);
        }
    });
    out
}

/// Gradient of `Σ grad ⊙ warp(img, field)` with respect to `field`.
fn warp_field_grad<T: Scalar>(
    img: &[T],
    channels: usize,
    shape: Shape3,
    field: &[T],
    grad: &[T],
) -> Vec<T> {
    let n: usize = shape.iter().product();
    let [_, hh, ww] = shape;
    let mut out = vec![T::zero(); 3 * n];
    // Each field entry only affects its own output voxel, so the gradient
    // is a per-voxel gather with no cross-voxel reduction.
    let mut per_voxel = vec![[T::zero(); 3]; n];
    for_each_chunk_mut(&mut per_voxel, ww, |r, chunk| {
        for (k, g3) in chunk.iter_mut().enumerate() {
            let i = r * ww + k;
            let p = [i / (hh * ww), (i / ww) % hh, i % ww];
            let u = [field[i], field[n + i], field[2 * n + i]];
            let cr = corner(shape, p, u);
            for c in 0..channels {
                let gv = grad[c * n + i];
                if gv == T::zero() {
                    continue;
                }
                let d = trilinear_grad(&gather(&img[c * n..(c + 1) * n], &cr), cr.frac);
                for a in 0..3 {
                    if cr.inside[a] {
                        g3[a] += gv * d[a];
                    }
                }
            }
        }
    });
    for (i, g3) in per_voxel.iter().enumerate() {
        for a in 0..3 {
            out[a * n + i] = g3[a];
        }
    }
    out
}

/// Trilinear warp of a volume.
pub fn warp(v: &Volume, field: &DisplacementField) -> Result<Volume> {
    check_pair(v.shape(), field.shape())?;
    let out = warp_raw(v.data(), 1, v.shape(), field.data());
    Volume::new(v.shape(), v.spacing_mm(), out)
}

/// Nearest-neighbour warp of a label mask; ties round away from zero.
pub fn warp_labels(m: &LabelMask, field: &DisplacementField) -> Result<LabelMask> {
    check_pair(m.shape(), field.shape())?;
    let shape = m.shape();
    let [dd, hh, ww] = shape;
    let n = dd * hh * ww;
    let f = field.data();
    let src = m.labels();
    let nearest = |i: usize, u: f32, len: usize| -> usize {
        let c = (i as f32 + u).round();
        c.max(0.0).min((len - 1) as f32) as usize
    };
    let mut out = vec![0u8; n];
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                let i = (d * hh + h) * ww + w;
                let sd = nearest(d, f[i], dd);
                let sh = nearest(h, f[n + i], hh);
                let sw = nearest(w, f[2 * n + i], ww);
                out[i] = src[(sd * hh + sh) * ww + sw];
            }
        }
    }
    LabelMask::new(shape, m.spacing_mm(), out)
}

struct Warp<T> {
    image: Tensor<T>,
}

impl<T: Scalar> Backward<T> for Warp<T> {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let field = inputs[0];
        let [c, d, h, w] = self.image.dims4().expect("rank 4");
        let g = warp_field_grad(self.image.data(), c, [d, h, w], field.data(), grad.data());
        vec![Some(Tensor::from_vec(field.shape(), g).expect("field shape"))]
    }
}

impl<T: Scalar> Tape<T> {
    /// Warps `image` `(C, D, H, W)` by the displacement field `(3, D, H, W)`
    /// held in `field`; differentiable in the field only.
    pub fn warp(&mut self, image: &Tensor<T>, field: Var) -> Result<Var> {
        let [c, d, h, w] = image.dims4()?;
        let [fc, fd, fh, fw] = self.value(field).dims4()?;
        if fc != 3 {
            return Err(Error::Shape(format!("field must have 3 channels, got {fc}")));
        }
        check_pair([d, h, w], [fd, fh, fw])?;
        if !self.value(field).is_finite() {
            return Err(Error::NonFinite("displacement field".into()));
        }
        let out = warp_raw(image.data(), c, [d, h, w], self.value(field).data());
        let out = Tensor::from_vec(&[c, d, h, w], out)?;
        self.record(
            out,
            &[field],
            Box::new(Warp {
                image: image.clone(),
            }),
        )
    }
}
