//! Volumes, label masks and displacement fields.
//!
//! On disk every grid is a pair `<name>.json` + `<name>.raw`. The JSON
//! header carries `shape` `[D, H, W]`, `spacing_mm` `[sz, sy, sx]`, `dtype`
//! (`"f32le"` or `"u8"`) and, for displacement fields, `channels: 3`. The raw
//! file holds the values channel-major, then D, H, W, little-endian.
//!
//! Displacements are stored in voxels, channel order (D, H, W).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::metrics;

pub type Shape3 = [usize; 3];

fn check_shape(shape: Shape3) -> Result<()> {
    if shape.iter().any(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!(
            "every grid dimension must be >= 1, got {shape:?}"
        )));
    }
    Ok(())
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "spacing must be positive, got {spacing:?}"
        )));
    }
    Ok(())
}

fn voxels(shape: Shape3) -> usize {
    shape.iter().product()
}

/// Scalar image on a 3-D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Shape3,
    spacing_mm: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, spacing_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        check_spacing(spacing_mm)?;
        if data.len() != voxels(shape) {
            return Err(Error::Shape(format!(
                "volume {shape:?} needs {} values, got {}",
                voxels(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            spacing_mm,
            data,
        })
    }

    pub fn filled(shape: Shape3, value: f32) -> Result<Self> {
        Self::new(shape, [1.0; 3], vec![value; voxels(shape)])
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Single-channel `(1, D, H, W)` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let [d, h, w] = self.shape;
        let data = self.data.iter().map(|&x| T::lit(x as f64)).collect();
        Tensor::from_vec(&[1, d, h, w], data).expect("volume shape is valid")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, spacing_mm: [f64; 3]) -> Result<Self> {
        let [c, d, h, w] = t.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("volume tensor must have 1 channel, got {c}")));
        }
        let data = t.data().iter().map(|x| x.as_f64() as f32).collect();
        Self::new([d, h, w], spacing_mm, data)
    }
}

/// Integer segmentation on a 3-D grid; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    shape: Shape3,
    spacing_mm: [u64; 3],
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(shape: Shape3, spacing_mm: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        check_shape(shape)?;
        check_spacing(spacing_mm)?;
        if labels.len() != voxels(shape) {
            return Err(Error::Shape(format!(
                "mask {shape:?} needs {} labels, got {}",
                voxels(shape),
                labels.len()
            )));
        }
        Ok(Self {
            shape,
            spacing_mm: spacing_mm.map(f64::to_bits),
            labels,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm.map(f64::from_bits)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Distinct label values present, ascending.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=255u8).filter(|&l| seen[l as usize]).collect()
    }
}

/// Per-voxel displacement in voxels, shape `(3, D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    shape: Shape3,
    spacing_mm: [f64; 3],
    data: Vec<f32>,
}

impl DisplacementField {
    pub fn new(shape: Shape3, spacing_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        check_spacing(spacing_mm)?;
        if data.len() != 3 * voxels(shape) {
            return Err(Error::Shape(format!(
                "field {shape:?} needs {} values, got {}",
                3 * voxels(shape),
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("displacement field".into()));
        }
        Ok(Self {
            shape,
            spacing_mm,
            data,
        })
    }

    pub fn zeros(shape: Shape3) -> Result<Self> {
        Self::new(shape, [1.0; 3], vec![0.0; 3 * voxels(shape)])
    }

    /// Field whose displacement at voxel `(d, h, w)` is `f(d, h, w)`.
    pub fn from_fn(shape: Shape3, f: impl Fn(usize, usize, usize) -> [f64; 3]) -> Result<Self> {
        let n = voxels(shape);
        let mut data = vec![0.0f32; 3 * n];
        let [dd, hh, ww] = shape;
        for d in 0..dd {
            for h in 0..hh {
                for w in 0..ww {
                    let i = (d * hh + h) * ww + w;
                    let u = f(d, h, w);
                    for c in 0..3 {
                        data[c * n + i] = u[c] as f32;
                    }
                }
            }
        }
        Self::new(shape, [1.0; 3], data)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn with_spacing(mut self, spacing_mm: [f64; 3]) -> Result<Self> {
        check_spacing(spacing_mm)?;
        self.spacing_mm = spacing_mm;
        Ok(self)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Displacement component `c` (0 = D, 1 = H, 2 = W).
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = voxels(self.shape);
        &self.data[c * n..(c + 1) * n]
    }

    /// Largest displacement vector length.
    pub fn max_magnitude(&self) -> f32 {
        let n = voxels(self.shape);
        (0..n)
            .map(|i| {
                let (a, b, c) = (self.data[i], self.data[n + i], self.data[2 * n + i]);
                (a * a + b * b + c * c).sqrt()
            })
            .fold(0.0, f32::max)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let [d, h, w] = self.shape;
        let data = self.data.iter().map(|&x| T::lit(x as f64)).collect();
        Tensor::from_vec(&[3, d, h, w], data).expect("field shape is valid")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, spacing_mm: [f64; 3]) -> Result<Self> {
        let [c, d, h, w] = t.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("field tensor must have 3 channels, got {c}")));
        }
        let data = t.data().iter().map(|x| x.as_f64() as f32).collect();
        Self::new([d, h, w], spacing_mm, data)
    }
}

// ---------------------------------------------------------------------------
// File I/O

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<i64>,
    spacing_mm: Vec<f64>,
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<i64>,
}

fn file_pair(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut raw = base.into_os_string();
    raw.push(".raw");
    (json.into(), raw.into())
}

struct RawGrid {
    shape: Shape3,
    spacing_mm: [f64; 3],
    channels: usize,
    bytes: Vec<u8>,
}

fn read_grid(path: &Path, dtype: &str, bytes_per_value: usize) -> Result<RawGrid> {
    let (json_path, raw_path) = file_pair(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
    if header.dtype != "f32le" && header.dtype != "u8" {
        return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.dtype != dtype {
        return Err(Error::Format(format!(
            "expected dtype {dtype:?}, header says {:?}",
            header.dtype
        )));
    }
    let shape: Shape3 = match header.shape.as_slice() {
        &[d, h, w] if d > 0 && h > 0 && w > 0 => [d as usize, h as usize, w as usize],
        s => {
            return Err(Error::Format(format!(
                "shape must be three positive integers, got {s:?}"
            )))
        }
    };
    let spacing_mm: [f64; 3] = match header.spacing_mm.as_slice() {
        &[a, b, c] if a > 0.0 && b > 0.0 && c > 0.0 => [a, b, c],
        s => {
            return Err(Error::Format(format!(
                "spacing_mm must be three positive numbers, got {s:?}"
            )))
        }
    };
    let channels = match header.channels {
        None => 1,
        Some(c) if c > 0 => c as usize,
        Some(c) => return Err(Error::Format(format!("invalid channel count {c}"))),
    };
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = channels * voxels(shape) * bytes_per_value;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{} holds {} bytes but the header implies {expected}",
            raw_path.display(),
            bytes.len()
        )));
    }
    Ok(RawGrid {
        shape,
        spacing_mm,
        channels,
        bytes,
    })
}

fn write_grid(
    path: &Path,
    shape: Shape3,
    spacing_mm: [f64; 3],
    dtype: &str,
    channels: Option<usize>,
    bytes: &[u8],
) -> Result<()> {
    let (json_path, raw_path) = file_pair(path);
    let header = Header {
        shape: shape.iter().map(|&n| n as i64).collect(),
        spacing_mm: spacing_mm.to_vec(),
        dtype: dtype.to_string(),
        channels: channels.map(|c| c as i64),
    };
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

fn f32_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn f32_to_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Reads `<path>.json` + `<path>.raw`; `path` may carry either extension.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let g = read_grid(path.as_ref(), "f32le", 4)?;
    if g.channels != 1 {
        return Err(Error::Format(format!(
            "a volume has 1 channel, header says {}",
            g.channels
        )));
    }
    Volume::new(g.shape, g.spacing_mm, f32_from_le(&g.bytes))
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_grid(path.as_ref(), v.shape, v.spacing_mm, "f32le", None, &f32_to_le(&v.data))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMask> {
    let g = read_grid(path.as_ref(), "u8", 1)?;
    if g.channels != 1 {
        return Err(Error::Format(format!(
            "a label mask has 1 channel, header says {}",
            g.channels
        )));
    }
    LabelMask::new(g.shape, g.spacing_mm, g.bytes)
}

pub fn save_labels(m: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    write_grid(path.as_ref(), m.shape, m.spacing_mm(), "u8", None, &m.labels)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let g = read_grid(path.as_ref(), "f32le", 4)?;
    if g.channels != 3 {
        return Err(Error::Format(format!(
            "a displacement field has 3 channels, header says {}",
            g.channels
        )));
    }
    DisplacementField::new(g.shape, g.spacing_mm, f32_from_le(&g.bytes))
}

pub fn save_field(f: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    write_grid(path.as_ref(), f.shape, f.spacing_mm, "f32le", Some(3), &f32_to_le(&f.data))
}

// ---------------------------------------------------------------------------
// Intensity normalisation

/// Min-max rescale to `[0, 1]`; a constant volume maps to zeros.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    if v.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("volume intensities".into()));
    }
    let (lo, hi) = v
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let data = if hi > lo {
        let (lo, range) = (lo as f64, hi as f64 - lo as f64);
        v.data
            .iter()
            .map(|&x| ((x as f64 - lo) / range) as f32)
            .collect()
    } else {
        vec![0.0; v.data.len()]
    };
    Volume::new(v.shape, v.spacing_mm, data)
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Separable Gaussian blur with replicated borders, in place.
pub(crate) fn gaussian_smooth(data: &mut [f64], shape: Shape3, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();

    let [d, h, w] = shape;
    let strides = [h * w, w, 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = shape[axis];
        let stride = strides[axis];
        let starts: Vec<usize> = (0..d * h * w)
            .filter(|&i| (i / stride) % n == 0)
            .collect();
        for s in starts {
            line.clear();
            line.extend((0..n).map(|k| data[s + k * stride]));
            for k in 0..n {
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    let j = (k as isize + t as isize - radius).clamp(0, n as isize - 1) as usize;
                    acc += kv * line[j];
                }
                data[s + k * stride] = acc;
            }
        }
    }
}

/// Gaussian-smoothed white noise that is statistically uniform over the
/// whole grid: the noise is drawn on a margin of three widths on every side
/// and cropped after blurring, so borders are not over-weighted.
fn smooth_noise(rng: &mut ChaCha8Rng, shape: Shape3, sigma: f64) -> Vec<f64> {
    let pad = (3.0 * sigma).ceil() as usize;
    let big = shape.map(|n| n + 2 * pad);
    let mut noise: Vec<f64> = (0..voxels(big)).map(|_| rng.sample(StandardNormal)).collect();
    gaussian_smooth(&mut noise, big, sigma);
    let [dd, hh, ww] = shape;
    let mut out = Vec::with_capacity(voxels(shape));
    for d in 0..dd {
        for h in 0..hh {
            let row = ((d + pad) * big[1] + h + pad) * big[2] + pad;
            out.extend_from_slice(&noise[row..row + ww]);
        }
    }
    out
}

struct Organ {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Organ {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum()
    }
}

const ORGAN_MEANS: [f64; 3] = [0.5, 0.7, 0.9];
const BOUNDARY_MARGIN: f64 = 2.0;

/// Deterministic phantom: three smooth ellipsoidal organs of distinct mean
/// intensity over a textured background, with labels 1..=3.
///
/// Every labeled voxel lies at least two voxels from the volume boundary and
/// organs never touch each other.
pub fn synth_phantom(seed: u64, shape: Shape3) -> Result<(Volume, LabelMask)> {
    if shape.iter().any(|&n| n < 16) {
        return Err(Error::InvalidArgument(format!(
            "phantom needs every dimension >= 16, got {shape:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let organs = place_organs(&mut rng, shape)?;

    let n = voxels(shape);
    let mut texture = smooth_noise(&mut rng, shape, 1.5);
    let sd = (texture.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt().max(1e-12);
    texture.iter_mut().for_each(|x| *x /= sd);

    let [dd, hh, ww] = shape;
    let mut data = vec![0.0f32; n];
    let mut labels = vec![0u8; n];
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                let i = (d * hh + h) * ww + w;
                let p = [d as f64, h as f64, w as f64];
                let mut value = 0.25 + 0.06 * texture[i];
                for (k, organ) in organs.iter().enumerate() {
                    let q = organ.level(p);
                    if q <= 1.0 {
                        labels[i] = k as u8 + 1;
                    }
                    let r_mean = organ.radii.iter().sum::<f64>() / 3.0;
                    let dist = (1.0 - q.sqrt()) * r_mean;
                    let inside = 1.0 / (1.0 + (-dist / 0.6).exp());
                    let organ_value = ORGAN_MEANS[k] + 0.03 * texture[i];
                    value = value * (1.0 - inside) + organ_value * inside;
                }
                data[i] = value as f32;
            }
        }
    }
    let volume = normalize_intensity(&Volume::new(shape, [1.0; 3], data)?)?;
    Ok((volume, LabelMask::new(shape, [1.0; 3], labels)?))
}

fn place_organs(rng: &mut ChaCha8Rng, shape: Shape3) -> Result<Vec<Organ>> {
    'attempt: for _ in 0..500 {
        let mut organs: Vec<Organ> = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut radii = [0.0; 3];
            let mut center = [0.0; 3];
            for a in 0..3 {
                let n = shape[a] as f64;
                radii[a] = n * rng.random_range(0.11..0.17);
                let lo = BOUNDARY_MARGIN + radii[a];
                let hi = n - 1.0 - BOUNDARY_MARGIN - radii[a];
                if hi <= lo {
                    continue 'attempt;
                }
                center[a] = rng.random_range(lo..hi);
            }
            let candidate = Organ { center, radii };
            // Keep a gap: the inflated ellipsoids must not overlap.
            for other in &organs {
                if ellipsoids_near(&candidate, other, shape) {
                    continue 'attempt;
                }
            }
            organs.push(candidate);
        }
        return Ok(organs);
    }
    Err(Error::InvalidArgument(format!(
        "could not place three organs in a {shape:?} volume"
    )))
}

fn ellipsoids_near(a: &Organ, b: &Organ, shape: Shape3) -> bool {
    let lo = |o: &Organ, k: usize| (o.center[k] - 1.3 * o.radii[k]).floor().max(0.0) as usize;
    let hi = |o: &Organ, k: usize| {
        ((o.center[k] + 1.3 * o.radii[k]).ceil() as usize).min(shape[k] - 1)
    };
    for d in lo(a, 0)..=hi(a, 0) {
        for h in lo(a, 1)..=hi(a, 1) {
            for w in lo(a, 2)..=hi(a, 2) {
                let p = [d as f64, h as f64, w as f64];
                if a.level(p) <= 1.69 && b.level(p) <= 1.69 {
                    return true;
                }
            }
        }
    }
    false
}

const DEFORMATION_RETRIES: u64 = 10;

/// Smooth random displacement field with maximum vector length `amplitude`.
///
/// White noise per channel is blurred with a Gaussian of width
/// `smoothness_sigma` and rescaled. When `amplitude < smoothness_sigma / 2`
/// the result is guaranteed fold-free; folded draws are re-sampled with a
/// derived seed, up to ten times.
pub fn synth_deformation(
    seed: u64,
    shape: Shape3,
    amplitude: f64,
    smoothness_sigma: f64,
) -> Result<DisplacementField> {
    check_shape(shape)?;
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "amplitude must be >= 0, got {amplitude}"
        )));
    }
    if !(smoothness_sigma > 0.0 && smoothness_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "smoothness sigma must be > 0, got {smoothness_sigma}"
        )));
    }
    if amplitude == 0.0 {
        return DisplacementField::zeros(shape);
    }
    let must_be_fold_free = amplitude < smoothness_sigma / 2.0;
    let n = voxels(shape);
    for attempt in 0..=DEFORMATION_RETRIES {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut comps: Vec<Vec<f64>> = (0..3)
            .map(|_| smooth_noise(&mut rng, shape, smoothness_sigma))
            .collect();
        let max_mag = (0..n)
            .map(|i| (comps[0][i].powi(2) + comps[1][i].powi(2) + comps[2][i].powi(2)).sqrt())
            .fold(0.0, f64::max);
        if max_mag == 0.0 {
            continue;
        }
        let scale = amplitude / max_mag;
        comps.iter_mut().flatten().for_each(|x| *x *= scale);
        let data: Vec<f32> = comps.into_iter().flatten().map(|x| x as f32).collect();
        let field = DisplacementField::new(shape, [1.0; 3], data)?;
        if !must_be_fold_free || metrics::jacobian_stats(&field).folding_count == 0 {
            return Ok(field);
        }
    }
    Err(Error::RetryExhausted(DEFORMATION_RETRIES as usize + 1))
}
