//! MIND similarity, diffusion regularisation and the combined training loss.
//!
//! The MIND descriptor of an image `v` has one channel per offset `r`:
//!
//! ```text
//! Dp(x, r) = Σ_{|p|∞ ≤ patch_radius} (v(x+p) − v(x+r+p))²     (clamped reads)
//! V(x)     = mean_r Dp(x, r)
//! mind_r   = exp(−Dp(x, r) / (V(x) + eps)) / max_r' exp(−Dp(x, r') / (V(x) + eps))
//! ```
//!
//! The per-voxel maximum is attained at the smallest `Dp`, so channel `r` is
//! evaluated as `exp(−(Dp_r − min Dp) / (V + eps))`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::volgrid::{DisplacementField, Volume};

/// Tolerance on the `[0, 1]` range check of MIND inputs.
const RANGE_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MindConfig {
    /// Neighbourhood offsets `[dd, dh, dw]` in voxels.
    #[serde(rename = "mind_offsets")]
    pub offsets: Vec<[i32; 3]>,
    pub patch_radius: usize,
    pub eps: f64,
}

impl Default for MindConfig {
    fn default() -> Self {
        Self {
            offsets: vec![
                [1, 0, 0],
                [-1, 0, 0],
                [0, 1, 0],
                [0, -1, 0],
                [0, 0, 1],
                [0, 0, -1],
            ],
            patch_radius: 1,
            eps: 1e-6,
        }
    }
}

impl MindConfig {
    pub fn validate(&self) -> Result<()> {
        if self.offsets.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "MIND needs at least 2 offsets, got {}",
                self.offsets.len()
            )));
        }
        if self.offsets.len() > 255 {
            return Err(Error::InvalidArgument(format!(
                "MIND supports at most 255 offsets, got {}",
                self.offsets.len()
            )));
        }
        if self.offsets.iter().any(|r| r == &[0, 0, 0]) {
            return Err(Error::InvalidArgument("MIND offset [0,0,0] is degenerate".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "MIND eps must be > 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Separable box sums

/// Sums windows of `2r+1` along `axis`, shrinking that extent by `2r`.
fn box_valid<T: Scalar>(x: &[T], dims: [usize; 4], axis: usize, r: usize) -> (Vec<T>, [usize; 4]) {
    let mut out_dims = dims;
    out_dims[axis] -= 2 * r;
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let (n_in, n_out) = (dims[axis], out_dims[axis]);
    let mut out = vec![T::zero(); outer * n_out * inner];
    for o in 0..outer {
        for k in 0..n_out {
            let dst = &mut out[(o * n_out + k) * inner..(o * n_out + k + 1) * inner];
            for t in 0..=2 * r {
                let src = &x[(o * n_in + k + t) * inner..(o * n_in + k + t + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
            }
        }
    }
    (out, out_dims)
}

/// Transpose of [`box_valid`]: every input position receives the sum of the
/// outputs whose window covers it.
fn box_valid_transpose<T: Scalar>(
    g: &[T],
    dims: [usize; 4],
    axis: usize,
    r: usize,
) -> (Vec<T>, [usize; 4]) {
    let mut in_dims = dims;
    in_dims[axis] += 2 * r;
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let (n_out, n_in) = (dims[axis], in_dims[axis]);
    let mut out = vec![T::zero(); outer * n_in * inner];
    for o in 0..outer {
        for k in 0..n_out {
            let src = &g[(o * n_out + k) * inner..(o * n_out + k + 1) * inner];
            for t in 0..=2 * r {
                let dst = &mut out[(o * n_in + k + t) * inner..(o * n_in + k + t + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
            }
        }
    }
    (out, in_dims)
}

// ---------------------------------------------------------------------------
// MIND

struct MindPass<T> {
    /// Differences on the padded grid, `(|R|, D+2P, H+2P, W+2P)`.
    diff: Vec<T>,
    /// Patch distances `(|R|, D, H, W)`.
    dp: Vec<T>,
    /// Per-voxel `V + eps`.
    denom: Vec<T>,
    /// Per-voxel channel of the smallest distance.
    argmin: Vec<u8>,
    out: Vec<T>,
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn mind_pass<T: Scalar>(v: &[T], shape: [usize; 3], cfg: &MindConfig) -> MindPass<T> {
    let [dd, hh, ww] = shape;
    let p = cfg.patch_radius;
    let ext = [dd + 2 * p, hh + 2 * p, ww + 2 * p];
    let ne: usize = ext.iter().product();
    let n = dd * hh * ww;
    let nr = cfg.offsets.len();

    let mut diff = vec![T::zero(); nr * ne];
    for (ri, r) in cfg.offsets.iter().enumerate() {
        let dst = &mut diff[ri * ne..(ri + 1) * ne];
        for a in 0..ext[0] {
            let y0 = a as isize - p as isize;
            let (s0, t0) = (clamp_index(y0, dd), clamp_index(y0 + r[0] as isize, dd));
            for b in 0..ext[1] {
                let y1 = b as isize - p as isize;
                let (s1, t1) = (clamp_index(y1, hh), clamp_index(y1 + r[1] as isize, hh));
                for c in 0..ext[2] {
                    let y2 = c as isize - p as isize;
                    let (s2, t2) = (clamp_index(y2, ww), clamp_index(y2 + r[2] as isize, ww));
                    dst[(a * ext[1] + b) * ext[2] + c] =
                        v[(s0 * hh + s1) * ww + s2] - v[(t0 * hh + t1) * ww + t2];
                }
            }
        }
    }

    let sq: Vec<T> = diff.iter().map(|&e| e * e).collect();
    let dims = [nr, ext[0], ext[1], ext[2]];
    let (s, dims) = box_valid(&sq, dims, 3, p);
    let (s, dims) = box_valid(&s, dims, 2, p);
    let (dp, _) = box_valid(&s, dims, 1, p);

    let inv_r = T::lit(1.0 / nr as f64);
    let eps = T::lit(cfg.eps);
    let mut denom = vec![T::zero(); n];
    let mut argmin = vec![0u8; n];
    let mut out = vec![T::zero(); nr * n];
    for x in 0..n {
        let mut total = T::zero();
        let mut m = 0;
        for r in 0..nr {
            let d = dp[r * n + x];
            total += d;
            if d < dp[m * n + x] {
                m = r;
            }
        }
        let s = total * inv_r + eps;
        let dmin = dp[m * n + x];
        for r in 0..nr {
            out[r * n + x] = (-(dp[r * n + x] - dmin) / s).exp();
        }
        denom[x] = s;
        argmin[x] = m as u8;
    }
    MindPass {
        diff,
        dp,
        denom,
        argmin,
        out,
    }
}

struct Mind<T> {
    cfg: MindConfig,
    shape: [usize; 3],
    diff: Vec<T>,
    dp: Vec<T>,
    denom: Vec<T>,
    argmin: Vec<u8>,
}

impl<T: Scalar> Backward<T> for Mind<T> {
    fn name(&self) -> &'static str {
        "mind"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let [dd, hh, ww] = self.shape;
        let n = dd * hh * ww;
        let nr = self.cfg.offsets.len();
        let p = self.cfg.patch_radius;
        let inv_r = T::lit(1.0 / nr as f64);
        let (out, g) = (output.data(), grad.data());

        let mut g_dp = vec![T::zero(); nr * n];
        for x in 0..n {
            let s = self.denom[x];
            let m = self.argmin[x] as usize;
            let dmin = self.dp[m * n + x];
            let mut h_sum = T::zero();
            let mut g_s = T::zero();
            for r in 0..nr {
                let h = -g[r * n + x] * out[r * n + x];
                h_sum += h;
                g_s -= h * (self.dp[r * n + x] - dmin) / (s * s);
                g_dp[r * n + x] = h / s;
            }
            g_dp[m * n + x] -= h_sum / s;
            for r in 0..nr {
                g_dp[r * n + x] += g_s * inv_r;
            }
        }

        let dims = [nr, dd, hh, ww];
        let (t, dims) = box_valid_transpose(&g_dp, dims, 1, p);
        let (t, dims) = box_valid_transpose(&t, dims, 2, p);
        let (g_sq, _) = box_valid_transpose(&t, dims, 3, p);

        let ext = [dd + 2 * p, hh + 2 * p, ww + 2 * p];
        let ne: usize = ext.iter().product();
        let mut gv = vec![T::zero(); n];
        let two = T::lit(2.0);
        for (ri, r) in self.cfg.offsets.iter().enumerate() {
            for a in 0..ext[0] {
                let y0 = a as isize - p as isize;
                let (s0, t0) = (clamp_index(y0, dd), clamp_index(y0 + r[0] as isize, dd));
                for b in 0..ext[1] {
                    let y1 = b as isize - p as isize;
                    let (s1, t1) = (clamp_index(y1, hh), clamp_index(y1 + r[1] as isize, hh));
                    for c in 0..ext[2] {
                        let y2 = c as isize - p as isize;
                        let (s2, t2) = (clamp_index(y2, ww), clamp_index(y2 + r[2] as isize, ww));
                        let k = ri * ne + (a * ext[1] + b) * ext[2] + c;
                        let ge = two * self.diff[k] * g_sq[k];
                        gv[(s0 * hh + s1) * ww + s2] += ge;
                        gv[(t0 * hh + t1) * ww + t2] -= ge;
                    }
                }
            }
        }
        vec![Some(Tensor::from_vec(inputs[0].shape(), gv).expect("input shape"))]
    }
}

struct L1ToConstant<T> {
    target: Tensor<T>,
}

impl<T: Scalar> Backward<T> for L1ToConstant<T> {
    fn name(&self) -> &'static str {
        "l1_mean"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let scale = grad.data()[0] / T::lit(x.numel() as f64);
        let data = x
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(&a, &b)| {
                if a > b {
                    scale
                } else if a < b {
                    -scale
                } else {
                    T::zero()
                }
            })
            .collect();
        vec![Some(Tensor::from_vec(x.shape(), data).expect("same shape"))]
    }
}

struct Smoothness {
    weights: [f64; 3],
}

fn forward_diffs<T: Scalar>(u: &[T], dims: [usize; 4], axis: usize) -> Vec<T> {
    let [c, d, h, w] = dims;
    let step = [h * w, w, 1][axis];
    let n = d * h * w;
    let len = [d, h, w][axis];
    let mut out = Vec::with_capacity(c * n);
    for ch in 0..c {
        for i in 0..n {
            let pos = (i / step) % len;
            if pos + 1 < len {
                out.push(u[ch * n + i + step] - u[ch * n + i]);
            }
        }
    }
    out
}

impl<T: Scalar> Backward<T> for Smoothness {
    fn name(&self) -> &'static str {
        "smoothness"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let u = inputs[0];
        let [c, d, h, w] = u.dims4().expect("rank 4");
        let n = d * h * w;
        let g = grad.data()[0];
        let mut out = vec![T::zero(); u.numel()];
        for axis in 0..3 {
            if self.weights[axis] == 0.0 {
                continue;
            }
            let step = [h * w, w, 1][axis];
            let len = [d, h, w][axis];
            let k = g * T::lit(2.0 * self.weights[axis]);
            for ch in 0..c {
                let base = ch * n;
                for i in 0..n {
                    if (i / step) % len + 1 < len {
                        let delta = k * (u.data()[base + i + step] - u.data()[base + i]);
                        out[base + i + step] += delta;
                        out[base + i] -= delta;
                    }
                }
            }
        }
        vec![Some(Tensor::from_vec(u.shape(), out).expect("same shape"))]
    }
}

fn check_unit_range<T: Scalar>(x: &Tensor<T>) -> Result<()> {
    let bad = x
        .data()
        .iter()
        .any(|&v| v.as_f64() < -RANGE_TOL || v.as_f64() > 1.0 + RANGE_TOL);
    if bad {
        return Err(Error::InvalidArgument(
            "MIND input must be normalised to [0, 1]".into(),
        ));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// MIND descriptor of a single-channel image, shape `(|R|, D, H, W)`.
    pub fn mind(&mut self, x: Var, cfg: &MindConfig) -> Result<Var> {
        cfg.validate()?;
        let [c, d, h, w] = self.value(x).dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("MIND expects 1 channel, got {c}")));
        }
        check_unit_range(self.value(x))?;
        let pass = mind_pass(self.value(x).data(), [d, h, w], cfg);
        let out = Tensor::from_vec(&[cfg.offsets.len(), d, h, w], pass.out)?;
        self.record(
            out,
            &[x],
            Box::new(Mind {
                cfg: cfg.clone(),
                shape: [d, h, w],
                diff: pass.diff,
                dp: pass.dp,
                denom: pass.denom,
                argmin: pass.argmin,
            }),
        )
    }

    /// Mean absolute difference between `x` and a fixed `target`.
    pub fn l1_mean_to(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        self.value(x).same_shape(target, "l1_mean_to")?;
        let n = T::lit(target.numel() as f64);
        let abs: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .collect();
        let value = crate::autodiff::lane_sum(&abs) / n;
        self.record(
            Tensor::scalar(value),
            &[x],
            Box::new(L1ToConstant {
                target: target.clone(),
            }),
        )
    }

    /// Diffusion regulariser of a `(C, D, H, W)` field: for each axis, the
    /// mean over valid positions of the squared forward difference, summed
    /// over channels and axes.
    pub fn smoothness(&mut self, field: Var) -> Result<Var> {
        let dims = self.value(field).dims4()?;
        let [_, d, h, w] = dims;
        let n = d * h * w;
        let mut weights = [0.0; 3];
        let mut value = T::zero();
        for (axis, wgt) in weights.iter_mut().enumerate() {
            let len = [d, h, w][axis];
            if len < 2 {
                continue;
            }
            let count = n / len * (len - 1);
            *wgt = 1.0 / count as f64;
            let sq: Vec<T> = forward_diffs(self.value(field).data(), dims, axis)
                .into_iter()
                .map(|x| x * x)
                .collect();
            value += crate::autodiff::lane_sum(&sq) * T::lit(*wgt);
        }
        self.record(Tensor::scalar(value), &[field], Box::new(Smoothness { weights }))
    }
}

// ---------------------------------------------------------------------------
// Value-level API

/// MIND descriptor of a volume.
pub fn mind_descriptor(v: &Volume, cfg: &MindConfig) -> Result<Tensor<f64>> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(v.to_tensor());
    let m = tape.mind(x, cfg)?;
    Ok(tape.value(m).clone())
}

pub fn mind_loss(warped: &Volume, fixed: &Volume, cfg: &MindConfig) -> Result<f64> {
    if warped.shape() != fixed.shape() {
        return Err(Error::Shape(format!(
            "volumes {:?} and {:?} differ",
            warped.shape(),
            fixed.shape()
        )));
    }
    let target = mind_descriptor(fixed, cfg)?;
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(warped.to_tensor());
    let m = tape.mind(x, cfg)?;
    let l = tape.l1_mean_to(m, &target)?;
    tape.value(l).item()
}

pub fn smoothness_loss(field: &DisplacementField) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let u = tape.constant(field.to_tensor());
    let s = tape.smoothness(u)?;
    tape.value(s).item()
}

/// `mind_loss(warp(moving, field), fixed) + lambda · smoothness(field)`.
pub fn total_loss(
    moving: &Volume,
    fixed: &Volume,
    field: &DisplacementField,
    lambda: f64,
    cfg: &MindConfig,
) -> Result<f64> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let warped = crate::stn::warp(moving, field)?;
    Ok(mind_loss(&warped, fixed, cfg)? + lambda * smoothness_loss(field)?)
}

/// Records the training objective on `tape` and returns the scalar loss.
pub fn record_total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    moving: &Tensor<T>,
    fixed_mind: &Tensor<T>,
    field: Var,
    lambda: f64,
    cfg: &MindConfig,
) -> Result<Var> {
    let warped = tape.warp(moving, field)?;
    let m = tape.mind(warped, cfg)?;
    let sim = tape.l1_mean_to(m, fixed_mind)?;
    if lambda == 0.0 {
        return Ok(sim);
    }
    let reg = tape.smoothness(field)?;
    let reg = tape.scale(reg, T::lit(lambda))?;
    tape.add(sim, reg)
}
